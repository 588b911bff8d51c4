#!/usr/bin/env python3
"""
Variational autoencoder written directly in numpy.

Dense layers with hand-written backward passes, the Gaussian latent head
(mean + softplus variance), the negative ELBO loss, Adam, the offline
training loop and the deterministic autoencoder baseline. Inputs are
per-channel normalized to [0.05, 0.95] with statistics frozen from the
training set.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, xlogy

from src.errors import ConfigError, DimensionMismatch, DomainError, NumericalError

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "softplus", "identity", "sigmoid")
LIKELIHOODS = ("gaussian", "bernoulli")
INIT_SCHEMES = ("scaled", "std_normal")
INIT_SCHEME_ALIASES = {"paper_std_normal": "std_normal"}
VAR_FLOOR = 1e-8
NORM_LOW, NORM_HIGH = 0.05, 0.95


# layers

def activate(a: np.ndarray, name: str) -> np.ndarray:
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "softplus":
        return np.logaddexp(0.0, a)
    if name == "sigmoid":
        return expit(a)
    return a


def activation_grad(a: np.ndarray, y: np.ndarray, name: str) -> np.ndarray:
    """dy/da evaluated at pre-activation a with output y"""
    if name == "relu":
        return (a > 0).astype(a.dtype)
    if name == "softplus":
        return expit(a)
    if name == "sigmoid":
        return y * (1.0 - y)
    return np.ones_like(a)


@dataclass(eq=False)
class MlpLayer:
    """y = f(W x + b); weights are (out x in)"""
    weights: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise DimensionMismatch(
                f"layer weights {self.weights.shape} and bias {self.bias.shape} disagree")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


def forward_layer(layer: MlpLayer, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != layer.in_dim:
        raise DimensionMismatch(f"layer expects {layer.in_dim} inputs, got {x.shape[-1]}")
    return activate(x @ layer.weights.T + layer.bias, layer.activation)


def forward_stack(layers: Sequence[MlpLayer], x: np.ndarray):
    """Batch forward pass keeping (input, pre-activation, output) per layer"""
    caches = []
    for layer in layers:
        if x.shape[-1] != layer.in_dim:
            raise DimensionMismatch(f"layer expects {layer.in_dim} inputs, got {x.shape[-1]}")
        a = x @ layer.weights.T + layer.bias
        y = activate(a, layer.activation)
        caches.append((x, a, y))
        x = y
    return x, caches


def backward_stack(layers: Sequence[MlpLayer], caches, grad: np.ndarray,
                   grad_is_preactivation: bool = False):
    """Gradients of every (weights, bias) and of the stack input.

    With grad_is_preactivation the incoming gradient is already taken w.r.t.
    the last layer's pre-activation (logit-stable cross entropy).
    """
    grads: List[Tuple[np.ndarray, np.ndarray]] = []
    for k in range(len(layers) - 1, -1, -1):
        layer = layers[k]
        x, a, y = caches[k]
        if grad_is_preactivation and k == len(layers) - 1:
            delta = grad
        else:
            delta = grad * activation_grad(a, y, layer.activation)
        grads.append((delta.T @ x, delta.sum(axis=0)))
        grad = delta @ layer.weights
    grads.reverse()
    return grad, grads


def init_layer(in_dim: int, out_dim: int, activation: str, scheme: str,
               rng: np.random.Generator) -> MlpLayer:
    scheme = INIT_SCHEME_ALIASES.get(scheme, scheme)
    if scheme == "std_normal":
        return MlpLayer(rng.standard_normal((out_dim, in_dim)), rng.standard_normal(out_dim), activation)
    gain = 2.0 if activation == "relu" else 1.0
    weights = rng.normal(0.0, np.sqrt(gain / in_dim), (out_dim, in_dim))
    return MlpLayer(weights, np.zeros(out_dim), activation)


# normalization

@dataclass(eq=False)
class NormStats:
    """x_norm = (x - offset) / scale"""
    offset: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        self.offset = np.asarray(self.offset, dtype=float)
        self.scale = np.asarray(self.scale, dtype=float)
        if self.offset.shape != self.scale.shape:
            raise DimensionMismatch("normalization offset and scale lengths differ")
        if np.any(self.scale <= 0):
            raise DomainError("normalization scale must be positive per channel")

    @classmethod
    def identity(cls, dim: int) -> "NormStats":
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def fit(cls, data: np.ndarray) -> "NormStats":
        """Affine map of the per-channel training range onto [0.05, 0.95]"""
        lo = data.min(axis=0)
        hi = data.max(axis=0)
        span = hi - lo
        flat = span <= 0
        scale = np.where(flat, 1.0, span / (NORM_HIGH - NORM_LOW))
        offset = np.where(flat, lo - 0.5, lo - NORM_LOW * scale)
        return cls(offset, scale)

    @property
    def dim(self) -> int:
        return self.offset.shape[0]

    def normalize(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise DimensionMismatch(f"expected {self.dim} channels, got {x.shape[-1]}")
        return (x - self.offset) / self.scale

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) * self.scale + self.offset


# model

@dataclass(frozen=True)
class Architecture:
    """Hidden widths of encoder and decoder plus latent size"""
    encoder_hidden: Tuple[int, ...]
    latent_dim: int
    decoder_hidden: Tuple[int, ...]
    input_dim: int

    def __post_init__(self):
        widths = list(self.encoder_hidden) + list(self.decoder_hidden) + [self.latent_dim, self.input_dim]
        if any(w < 1 for w in widths):
            raise ConfigError("layer widths must be positive")

    @classmethod
    def from_unit_lists(cls, encoder_units: Sequence[int], decoder_units: Sequence[int],
                        latent_dim: int = 2) -> "Architecture":
        """Unit lists as published: the last encoder entry is the latent head, the last decoder entry the output"""
        if len(encoder_units) < 1 or len(decoder_units) < 1:
            raise ConfigError("unit lists need at least the output layer")
        return cls(tuple(encoder_units[:-1]), latent_dim, tuple(decoder_units[:-1]), int(decoder_units[-1]))

    def for_input(self, input_dim: int) -> "Architecture":
        return Architecture(self.encoder_hidden, self.latent_dim, self.decoder_hidden, input_dim)

    def describe(self) -> str:
        enc = list(self.encoder_hidden) + [2 * self.latent_dim]
        dec = list(self.decoder_hidden) + [self.input_dim]
        return f"encoder {enc} / decoder {dec}"


PUBLISHED_ARCHITECTURES: Dict[str, Architecture] = {
    "case14": Architecture.from_unit_lists((100, 100, 4), (100, 100, 10)),
    "case57": Architecture.from_unit_lists((300, 300, 4), (300, 300, 42)),
    "case118": Architecture.from_unit_lists((200, 650, 650, 4), (650, 650, 200, 78)),
    "case1354pegase": Architecture.from_unit_lists((1500, 1500, 1100, 700, 300, 2),
                                                   (300, 700, 1100, 1500, 1500, 956)),
}
PUBLISHED_LEARNING_RATES: Dict[str, float] = {
    "case14": 1e-4,
    "case57": 1e-4,
    "case118": 2e-4,
    "case1354pegase": 4e-4,
}


def _nearest_published(input_dim: int) -> str:
    ranked = sorted(PUBLISHED_ARCHITECTURES, key=lambda name: PUBLISHED_ARCHITECTURES[name].input_dim)
    for name in ranked:
        if PUBLISHED_ARCHITECTURES[name].input_dim >= input_dim:
            return name
    return ranked[-1]


def default_architecture(input_dim: int) -> Architecture:
    """Published network for the next larger input size; bigger inputs get wider, deeper nets"""
    return PUBLISHED_ARCHITECTURES[_nearest_published(input_dim)].for_input(input_dim)


def default_learning_rate(input_dim: int) -> float:
    return PUBLISHED_LEARNING_RATES[_nearest_published(input_dim)]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    max_steps: int = 20000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    init_scheme: str = "scaled"
    recon_likelihood: str = "gaussian"
    eval_every: int = 50
    patience: int = 50
    min_rel_improvement: float = 1e-4

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be at least 1")
        scheme = INIT_SCHEME_ALIASES.get(self.init_scheme, self.init_scheme)
        if scheme not in INIT_SCHEMES:
            raise ConfigError(f"init_scheme must be one of {INIT_SCHEMES + tuple(INIT_SCHEME_ALIASES)}")
        object.__setattr__(self, "init_scheme", scheme)
        if self.recon_likelihood not in LIKELIHOODS:
            raise ConfigError(f"recon_likelihood must be one of {LIKELIHOODS}")


@dataclass(frozen=True, eq=False)
class LatentDistribution:
    mu: np.ndarray
    var: np.ndarray


@dataclass(eq=False)
class VaeModel:
    encoder_layers: List[MlpLayer]
    mean_head: MlpLayer
    var_head: MlpLayer
    decoder_layers: List[MlpLayer]
    norm_stats: NormStats
    recon_likelihood: str = "gaussian"
    history: List[float] = field(default_factory=list)

    def __post_init__(self):
        if self.recon_likelihood not in LIKELIHOODS:
            raise ConfigError(f"recon_likelihood must be one of {LIKELIHOODS}")
        if self.mean_head.out_dim != self.var_head.out_dim:
            raise DimensionMismatch("mean and variance heads must have the same width")
        if self.mean_head.activation != "identity" or self.var_head.activation != "softplus":
            raise ConfigError("latent heads must be identity (mean) and softplus (variance)")
        if not self.decoder_layers or self.decoder_layers[0].in_dim != self.latent_dim:
            raise DimensionMismatch("decoder input must equal the latent size")
        if self.decoder_layers[-1].out_dim != self.input_dim:
            raise DimensionMismatch(
                f"decoder output {self.decoder_layers[-1].out_dim} != input {self.input_dim}")
        if self.norm_stats.dim != self.input_dim:
            raise DimensionMismatch("normalization statistics do not match the input size")

    @property
    def latent_dim(self) -> int:
        return self.mean_head.out_dim

    @property
    def input_dim(self) -> int:
        return self.encoder_layers[0].in_dim if self.encoder_layers else self.mean_head.in_dim

    def layer_groups(self) -> List[Tuple[str, MlpLayer]]:
        groups = [(f"encoder.{i}", layer) for i, layer in enumerate(self.encoder_layers)]
        groups += [("mean_head", self.mean_head), ("var_head", self.var_head)]
        groups += [(f"decoder.{i}", layer) for i, layer in enumerate(self.decoder_layers)]
        return groups

    def parameters(self) -> Dict[str, np.ndarray]:
        params = {}
        for prefix, layer in self.layer_groups():
            params[f"{prefix}.weights"] = layer.weights
            params[f"{prefix}.bias"] = layer.bias
        return params

    def assign(self, params: Dict[str, np.ndarray]) -> None:
        for prefix, layer in self.layer_groups():
            layer.weights = params[f"{prefix}.weights"]
            layer.bias = params[f"{prefix}.bias"]


def build_vae(arch: Architecture, scheme: str = "scaled", likelihood: str = "gaussian",
              rng: Optional[np.random.Generator] = None) -> VaeModel:
    rng = rng if rng is not None else np.random.default_rng(0)
    encoder = []
    width = arch.input_dim
    for units in arch.encoder_hidden:
        encoder.append(init_layer(width, units, "relu", scheme, rng))
        width = units
    mean_head = init_layer(width, arch.latent_dim, "identity", scheme, rng)
    var_head = init_layer(width, arch.latent_dim, "softplus", scheme, rng)

    decoder = []
    width = arch.latent_dim
    for units in arch.decoder_hidden:
        decoder.append(init_layer(width, units, "relu", scheme, rng))
        width = units
    out_activation = "sigmoid" if likelihood == "bernoulli" else "identity"
    decoder.append(init_layer(width, arch.input_dim, out_activation, scheme, rng))

    return VaeModel(encoder, mean_head, var_head, decoder,
                    NormStats.identity(arch.input_dim), recon_likelihood=likelihood)


def _encode_cached(model: VaeModel, x: np.ndarray):
    h, caches = forward_stack(model.encoder_layers, x)
    mu = h @ model.mean_head.weights.T + model.mean_head.bias
    a_var = h @ model.var_head.weights.T + model.var_head.bias
    var = np.logaddexp(0.0, a_var) + VAR_FLOOR
    return h, caches, mu, a_var, var


def encode(model: VaeModel, x: np.ndarray) -> LatentDistribution:
    """(mu, var) of the latent posterior for a normalized input vector or batch"""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.input_dim:
        raise DimensionMismatch(f"model expects {model.input_dim} inputs, got {x.shape[-1]}")
    _, _, mu, _, var = _encode_cached(model, x)
    return LatentDistribution(mu, var)


def encode_batch(model: VaeModel, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    dist = encode(model, np.atleast_2d(x))
    return dist.mu, dist.var


def decode(model: VaeModel, z: np.ndarray) -> np.ndarray:
    out, _ = forward_stack(model.decoder_layers, np.asarray(z, dtype=float))
    return out


def reconstruct(model: VaeModel, x_raw: np.ndarray) -> np.ndarray:
    """Raw-unit reconstruction through the latent mean"""
    mu, _ = encode_batch(model, model.norm_stats.normalize(x_raw))
    return model.norm_stats.denormalize(decode(model, mu))


def reparameterize(dist: LatentDistribution, rng: np.random.Generator) -> np.ndarray:
    eps = rng.standard_normal(np.shape(dist.mu))
    return dist.mu + np.sqrt(dist.var) * eps


def kl_gauss(dist: LatentDistribution) -> float:
    """KL(N(mu, var) || N(0, I)) summed over latent entries"""
    var = np.asarray(dist.var, dtype=float)
    if np.any(var <= 0):
        raise DomainError("latent variance must be positive")
    mu = np.asarray(dist.mu, dtype=float)
    return float(0.5 * np.sum(-np.log(var) + var + mu ** 2 - 1.0))


def recon_loss(x_hat: np.ndarray, x: np.ndarray, likelihood: str = "gaussian") -> float:
    x_hat = np.asarray(x_hat, dtype=float)
    x = np.asarray(x, dtype=float)
    if x_hat.shape != x.shape:
        raise DimensionMismatch(f"reconstruction shape {x_hat.shape} != input shape {x.shape}")
    if likelihood == "gaussian":
        return float(np.sum((x - x_hat) ** 2))
    if likelihood != "bernoulli":
        raise ConfigError(f"unknown likelihood {likelihood!r}")
    if np.any((x < 0) | (x > 1) | (x_hat < 0) | (x_hat > 1)):
        raise DomainError("bernoulli reconstruction needs values in [0, 1]")
    return float(-np.sum(xlogy(x, x_hat) + xlogy(1.0 - x, 1.0 - x_hat)))


def elbo_loss(model: VaeModel, x: np.ndarray, rng: Optional[np.random.Generator] = None,
              eps: Optional[np.ndarray] = None) -> Tuple[float, Dict[str, np.ndarray]]:
    """Negative ELBO averaged over the batch, and its gradient for every parameter.

    x is normalized input (vector or batch). eps fixes the reparameterization
    noise; otherwise it is drawn from rng.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != model.input_dim:
        raise DimensionMismatch(f"model expects {model.input_dim} inputs, got {x.shape[1]}")
    batch = x.shape[0]

    h, enc_caches, mu, a_var, var = _encode_cached(model, x)
    if eps is None:
        rng = rng if rng is not None else np.random.default_rng()
        eps = rng.standard_normal(mu.shape)
    eps = np.broadcast_to(eps, mu.shape)
    std = np.sqrt(var)
    z = mu + std * eps

    out, dec_caches = forward_stack(model.decoder_layers, z)
    if model.recon_likelihood == "bernoulli":
        logits = dec_caches[-1][1]
        recon = np.sum(np.logaddexp(0.0, logits) - x * logits)
        grad_out = (expit(logits) - x) / batch
    else:
        recon = np.sum((x - out) ** 2)
        grad_out = 2.0 * (out - x) / batch
    kl = 0.5 * np.sum(-np.log(var) + var + mu ** 2 - 1.0)
    loss = float((recon + kl) / batch)
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite ELBO loss ({loss})")

    grad_z, dec_grads = backward_stack(model.decoder_layers, dec_caches, grad_out,
                                       grad_is_preactivation=model.recon_likelihood == "bernoulli")
    grad_mu = grad_z + mu / batch
    grad_var = grad_z * eps / (2.0 * std) + 0.5 * (1.0 - 1.0 / var) / batch
    grad_a_var = grad_var * expit(a_var)

    grad_h = grad_mu @ model.mean_head.weights + grad_a_var @ model.var_head.weights
    _, enc_grads = backward_stack(model.encoder_layers, enc_caches, grad_h)

    grads: Dict[str, np.ndarray] = {}
    for i, (dw, db) in enumerate(enc_grads):
        grads[f"encoder.{i}.weights"], grads[f"encoder.{i}.bias"] = dw, db
    grads["mean_head.weights"], grads["mean_head.bias"] = grad_mu.T @ h, grad_mu.sum(axis=0)
    grads["var_head.weights"], grads["var_head.bias"] = grad_a_var.T @ h, grad_a_var.sum(axis=0)
    for i, (dw, db) in enumerate(dec_grads):
        grads[f"decoder.{i}.weights"], grads[f"decoder.{i}.bias"] = dw, db
    return loss, grads


# optimizer

def adam_init(params: Dict[str, np.ndarray]) -> Dict[str, Dict[str, np.ndarray]]:
    return {
        "m": {name: np.zeros_like(p) for name, p in params.items()},
        "v": {name: np.zeros_like(p) for name, p in params.items()},
    }


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
              moments: Dict[str, Dict[str, np.ndarray]], config: TrainConfig,
              step_count: int) -> Tuple[Dict[str, np.ndarray], Dict[str, Dict[str, np.ndarray]]]:
    """Bias-corrected Adam update; step_count starts at 1. Inputs are not modified."""
    b1, b2 = config.adam_beta1, config.adam_beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionMismatch(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = b1 * moments["m"][name] + (1.0 - b1) * g
        v = b2 * moments["v"][name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** step_count)
        v_hat = v / (1.0 - b2 ** step_count)
        new_params[name] = p - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
        new_m[name], new_v[name] = m, v
    return new_params, {"m": new_m, "v": new_v}


# training

def _as_dataset(dataset) -> np.ndarray:
    try:
        data = np.asarray(dataset, dtype=float)
    except ValueError:
        raise DimensionMismatch("all training vectors must have the same length") from None
    if data.ndim != 2 or data.shape[0] == 0:
        raise ConfigError("training dataset must be a non-empty list of equal-length vectors")
    return data


class _StopRule:
    """Window-mean loss; stop after `patience` windows without relative improvement"""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.best = np.inf
        self.stale = 0
        self.window: List[float] = []

    def update(self, loss: float) -> bool:
        self.window.append(loss)
        if len(self.window) < self.config.eval_every:
            return False
        mean = float(np.mean(self.window))
        self.window = []
        if self.best == np.inf or (self.best - mean) > self.config.min_rel_improvement * abs(self.best):
            self.best = mean
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.config.patience


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start:start + batch_size]


def train(dataset, arch: Architecture, config: TrainConfig) -> VaeModel:
    """Fit a VAE on raw phasor vectors; normalization is frozen from the dataset"""
    data = _as_dataset(dataset)
    if data.shape[1] != arch.input_dim:
        raise DimensionMismatch(f"architecture expects {arch.input_dim} inputs, dataset has {data.shape[1]}")

    rng = np.random.default_rng(config.seed)
    model = build_vae(arch, config.init_scheme, config.recon_likelihood, rng)
    model.norm_stats = NormStats.fit(data)
    normalized = model.norm_stats.normalize(data)

    params = model.parameters()
    moments = adam_init(params)
    stop = _StopRule(config)
    batches = _batches(len(normalized), config.batch_size, rng)
    logger.info("Training VAE %s on %d vectors (lr=%g, batch=%d)",
                arch.describe(), len(normalized), config.learning_rate, config.batch_size)

    for step in range(1, config.max_steps + 1):
        loss, grads = elbo_loss(model, normalized[next(batches)], rng)
        params, moments = adam_step(params, grads, moments, config, step)
        model.assign(params)
        model.history.append(loss)
        if step % 1000 == 0:
            logger.debug("step %d: loss %.6f", step, loss)
        if stop.update(loss):
            logger.info("Converged after %d steps (window loss %.6f)", step, stop.best)
            break
    else:
        logger.info("Stopped at max_steps=%d (window loss %.6f)", config.max_steps, stop.best)
    return model


# deterministic autoencoder baseline

@dataclass(eq=False)
class PlainAutoencoder:
    encoder_layers: List[MlpLayer]
    decoder_layers: List[MlpLayer]
    norm_stats: NormStats
    history: List[float] = field(default_factory=list)

    @property
    def latent_dim(self) -> int:
        return self.encoder_layers[-1].out_dim

    def layer_groups(self) -> List[Tuple[str, MlpLayer]]:
        return ([(f"encoder.{i}", layer) for i, layer in enumerate(self.encoder_layers)]
                + [(f"decoder.{i}", layer) for i, layer in enumerate(self.decoder_layers)])

    def parameters(self) -> Dict[str, np.ndarray]:
        params = {}
        for prefix, layer in self.layer_groups():
            params[f"{prefix}.weights"] = layer.weights
            params[f"{prefix}.bias"] = layer.bias
        return params

    def assign(self, params: Dict[str, np.ndarray]) -> None:
        for prefix, layer in self.layer_groups():
            layer.weights = params[f"{prefix}.weights"]
            layer.bias = params[f"{prefix}.bias"]

    def encode(self, x_raw: np.ndarray) -> np.ndarray:
        latent, _ = forward_stack(self.encoder_layers, np.atleast_2d(self.norm_stats.normalize(x_raw)))
        return latent

    def reconstruct(self, x_raw: np.ndarray) -> np.ndarray:
        out, _ = forward_stack(self.decoder_layers, self.encode(x_raw))
        return self.norm_stats.denormalize(out)


def ae_loss(model: PlainAutoencoder, x: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
    """Batch-mean squared reconstruction error on normalized input, with gradients"""
    x = np.atleast_2d(x)
    batch = x.shape[0]
    latent, enc_caches = forward_stack(model.encoder_layers, x)
    out, dec_caches = forward_stack(model.decoder_layers, latent)
    loss = float(np.sum((x - out) ** 2) / batch)
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite autoencoder loss ({loss})")

    grad_latent, dec_grads = backward_stack(model.decoder_layers, dec_caches, 2.0 * (out - x) / batch)
    _, enc_grads = backward_stack(model.encoder_layers, enc_caches, grad_latent)
    grads = {}
    for prefix, (dw, db) in zip([p for p, _ in model.layer_groups()], enc_grads + dec_grads):
        grads[f"{prefix}.weights"], grads[f"{prefix}.bias"] = dw, db
    return loss, grads


def train_plain_ae(dataset, arch: Architecture, config: TrainConfig) -> PlainAutoencoder:
    """Deterministic autoencoder with the same widths and an identity latent layer"""
    data = _as_dataset(dataset)
    if data.shape[1] != arch.input_dim:
        raise DimensionMismatch(f"architecture expects {arch.input_dim} inputs, dataset has {data.shape[1]}")

    rng = np.random.default_rng(config.seed)
    encoder, width = [], arch.input_dim
    for units in arch.encoder_hidden:
        encoder.append(init_layer(width, units, "relu", config.init_scheme, rng))
        width = units
    encoder.append(init_layer(width, arch.latent_dim, "identity", config.init_scheme, rng))
    decoder, width = [], arch.latent_dim
    for units in arch.decoder_hidden:
        decoder.append(init_layer(width, units, "relu", config.init_scheme, rng))
        width = units
    decoder.append(init_layer(width, arch.input_dim, "identity", config.init_scheme, rng))

    model = PlainAutoencoder(encoder, decoder, NormStats.fit(data))
    normalized = model.norm_stats.normalize(data)
    params = model.parameters()
    moments = adam_init(params)
    stop = _StopRule(config)
    batches = _batches(len(normalized), config.batch_size, rng)

    for step in range(1, config.max_steps + 1):
        loss, grads = ae_loss(model, normalized[next(batches)])
        params, moments = adam_step(params, grads, moments, config, step)
        model.assign(params)
        model.history.append(loss)
        if stop.update(loss):
            break
    logger.info("Plain autoencoder trained for %d steps (last loss %.6f)", len(model.history), model.history[-1])
    return model
