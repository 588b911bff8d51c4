import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from src.errors import ConfigError, DimensionMismatch, DomainError
from src.vae import (
    PUBLISHED_ARCHITECTURES,
    Architecture,
    LatentDistribution,
    MlpLayer,
    NormStats,
    TrainConfig,
    VaeModel,
    adam_init,
    adam_step,
    ae_loss,
    build_vae,
    decode,
    default_architecture,
    default_learning_rate,
    elbo_loss,
    encode,
    forward_layer,
    kl_gauss,
    recon_loss,
    reconstruct,
    reparameterize,
    train,
    train_plain_ae,
)


def test_forward_layer_identity():
    layer = MlpLayer(np.eye(2), np.zeros(2), "identity")
    npt.assert_array_equal(forward_layer(layer, [3.0, -1.0]), [3.0, -1.0])


def test_forward_layer_relu():
    layer = MlpLayer(np.array([[1.0, 1.0], [1.0, -1.0]]), np.array([0.0, -5.0]), "relu")
    npt.assert_array_equal(forward_layer(layer, [1.0, 2.0]), [3.0, 0.0])


def test_forward_layer_softplus_at_zero():
    layer = MlpLayer(np.zeros((1, 3)), np.zeros(1), "softplus")
    assert forward_layer(layer, [1.0, 2.0, 3.0])[0] == pytest.approx(math.log(2.0))


def test_forward_layer_wrong_width():
    layer = MlpLayer(np.zeros((2, 3)), np.zeros(2))
    with pytest.raises(DimensionMismatch):
        forward_layer(layer, np.zeros(4))


def test_layer_shape_checks():
    with pytest.raises(DimensionMismatch):
        MlpLayer(np.zeros((2, 3)), np.zeros(3))
    with pytest.raises(ConfigError):
        MlpLayer(np.zeros((2, 3)), np.zeros(2), "tanh")


# loss terms

@pytest.mark.parametrize("mu,var,expected", [
    ([0.0], [1.0], 0.0),
    ([1.0], [1.0], 0.5),
    ([0.0], [math.e], (math.e - 2.0) / 2.0),
    ([0.0, 1.0], [1.0, 1.0], 0.5),
])
def test_kl_values(mu, var, expected):
    assert kl_gauss(LatentDistribution(np.array(mu), np.array(var))) == pytest.approx(expected, abs=1e-12)


def test_kl_needs_positive_variance():
    with pytest.raises(DomainError):
        kl_gauss(LatentDistribution(np.zeros(2), np.array([1.0, 0.0])))


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(2024)
    n = 100_000
    for _ in range(20):
        mu = rng.uniform(-1.5, 1.5)
        var = rng.uniform(0.3, 2.5)
        z = mu + math.sqrt(var) * rng.standard_normal(n)
        log_ratio = -0.5 * math.log(var) - (z - mu) ** 2 / (2 * var) + z ** 2 / 2
        stderr = log_ratio.std() / math.sqrt(n)
        exact = kl_gauss(LatentDistribution(np.array([mu]), np.array([var])))
        assert abs(log_ratio.mean() - exact) < max(1e-2, 5 * stderr)


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(1e-3, 20))
def test_kl_is_non_negative(mu, var):
    assert kl_gauss(LatentDistribution(np.array([mu]), np.array([var]))) >= -1e-12


def test_bernoulli_recon_value():
    assert recon_loss(np.array([0.5, 0.5]), np.array([1.0, 0.0]), "bernoulli") == pytest.approx(2 * math.log(2))


def test_gaussian_recon_value():
    assert recon_loss(np.array([0.2, 0.7]), np.array([0.2, 0.4])) == pytest.approx(0.09)


def test_bernoulli_recon_outside_unit_interval():
    with pytest.raises(DomainError):
        recon_loss(np.array([1.2]), np.array([1.0]), "bernoulli")


def test_recon_shape_mismatch():
    with pytest.raises(DimensionMismatch):
        recon_loss(np.zeros(3), np.zeros(2))


# gradients

def _numeric_grads(model, x, eps, h=1e-6):
    grads = {}
    for name, param in model.parameters().items():
        grad = np.zeros_like(param)
        for idx in np.ndindex(param.shape):
            saved = param[idx]
            param[idx] = saved + h
            up, _ = elbo_loss(model, x, eps=eps)
            param[idx] = saved - h
            down, _ = elbo_loss(model, x, eps=eps)
            param[idx] = saved
            grad[idx] = (up - down) / (2 * h)
        grads[name] = grad
    return grads


@pytest.mark.parametrize("likelihood", ["gaussian", "bernoulli"])
def test_elbo_gradients_match_finite_differences(tiny_arch, likelihood):
    rng = np.random.default_rng(3)
    model = build_vae(tiny_arch, likelihood=likelihood, rng=rng)
    x = rng.uniform(0.05, 0.95, (5, 4))
    eps = rng.standard_normal((5, 2))

    _, analytic = elbo_loss(model, x, eps=eps)
    numeric = _numeric_grads(model, x, eps)
    for name in analytic:
        diff = np.linalg.norm(analytic[name] - numeric[name])
        scale = np.linalg.norm(analytic[name]) + np.linalg.norm(numeric[name]) + 1e-12
        assert diff / scale < 1e-4, name


def test_elbo_loss_is_batch_mean(tiny_model):
    x = np.array([[0.1, 0.5, 0.9, 0.3], [0.4, 0.4, 0.2, 0.8]])
    eps = np.array([[0.3, -0.2], [1.1, 0.0]])
    both, _ = elbo_loss(tiny_model, x, eps=eps)
    first, _ = elbo_loss(tiny_model, x[:1], eps=eps[:1])
    second, _ = elbo_loss(tiny_model, x[1:], eps=eps[1:])
    assert both == pytest.approx((first + second) / 2)


def test_elbo_input_width(tiny_model):
    with pytest.raises(DimensionMismatch):
        elbo_loss(tiny_model, np.zeros((2, 5)), eps=np.zeros((2, 2)))


# optimizer

def _params():
    return {"w": np.array([[0.5, -1.0], [2.0, 0.0]]), "b": np.array([0.1, -0.1])}


def test_adam_zero_gradient_leaves_params():
    params = _params()
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    new, _ = adam_step(params, zeros, adam_init(params), TrainConfig(), 1)
    for name in params:
        npt.assert_array_equal(new[name], params[name])


def test_adam_first_step_is_signed_learning_rate():
    params = _params()
    grads = {"w": np.array([[3.0, -0.2], [0.5, -7.0]]), "b": np.array([-1.0, 4.0])}
    config = TrainConfig(learning_rate=1e-3)
    new, moments = adam_step(params, grads, adam_init(params), config, 1)
    for name in params:
        npt.assert_allclose(new[name] - params[name], -1e-3 * np.sign(grads[name]), rtol=1e-6)
    npt.assert_allclose(moments["m"]["b"], 0.1 * grads["b"])


def test_adam_does_not_modify_inputs():
    params = _params()
    before = {k: v.copy() for k, v in params.items()}
    grads = {k: np.ones_like(v) for k, v in params.items()}
    moments = adam_init(params)
    adam_step(params, grads, moments, TrainConfig(), 1)
    for name in params:
        npt.assert_array_equal(params[name], before[name])
        npt.assert_array_equal(moments["m"][name], 0.0)


def test_adam_shape_mismatch():
    params = _params()
    grads = {"w": np.zeros(3), "b": np.zeros(2)}
    with pytest.raises(DimensionMismatch):
        adam_step(params, grads, adam_init(params), TrainConfig(), 1)


# model

def test_reparameterize_without_variance():
    dist = LatentDistribution(np.array([0.3, -2.0]), np.zeros(2))
    npt.assert_array_equal(reparameterize(dist, np.random.default_rng(0)), [0.3, -2.0])


def test_reparameterize_mean():
    dist = LatentDistribution(np.full((20_000, 2), [1.0, -1.0]), np.full((20_000, 2), 0.25))
    z = reparameterize(dist, np.random.default_rng(5))
    npt.assert_allclose(z.mean(axis=0), [1.0, -1.0], atol=0.02)
    npt.assert_allclose(z.var(axis=0), [0.25, 0.25], rtol=0.05)


def test_encode_shapes(tiny_model):
    single = encode(tiny_model, np.full(4, 0.5))
    assert single.mu.shape == (2,) and single.var.shape == (2,)
    batch = encode(tiny_model, np.full((6, 4), 0.5))
    assert batch.mu.shape == (6, 2)
    assert np.all(batch.var > 0)
    assert decode(tiny_model, batch.mu).shape == (6, 4)


def test_encode_is_deterministic(tiny_model):
    x = np.array([0.1, 0.2, 0.3, 0.4])
    a, b = encode(tiny_model, x), encode(tiny_model, x.copy())
    assert np.array_equal(a.mu, b.mu) and np.array_equal(a.var, b.var)


def test_encode_wrong_width(tiny_model):
    with pytest.raises(DimensionMismatch):
        encode(tiny_model, np.zeros(3))


def test_model_rejects_mismatched_decoder(tiny_model):
    with pytest.raises(DimensionMismatch):
        VaeModel(tiny_model.encoder_layers, tiny_model.mean_head, tiny_model.var_head,
                 [MlpLayer(np.zeros((5, 2)), np.zeros(5), "identity")], NormStats.identity(4))


def test_build_with_published_init(tiny_arch):
    model = build_vae(tiny_arch, scheme="std_normal", rng=np.random.default_rng(0))
    assert np.any(model.mean_head.bias != 0)
    assert model.decoder_layers[-1].activation == "identity"
    assert build_vae(tiny_arch, likelihood="bernoulli").decoder_layers[-1].activation == "sigmoid"


def test_literal_init_accepts_long_name(tiny_arch):
    assert TrainConfig(init_scheme="paper_std_normal").init_scheme == "std_normal"
    a = build_vae(tiny_arch, scheme="paper_std_normal", rng=np.random.default_rng(0))
    b = build_vae(tiny_arch, scheme="std_normal", rng=np.random.default_rng(0))
    npt.assert_array_equal(a.mean_head.weights, b.mean_head.weights)


# normalization

@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(2, 20), st.integers(1, 4)),
                  elements=st.integers(-1000, 1000).map(lambda i: i / 20.0)))
def test_normalization_round_trip(data):
    stats = NormStats.fit(data)
    scaled = stats.normalize(data)
    assert np.all(scaled >= 0.05 - 1e-9) and np.all(scaled <= 0.95 + 1e-9)
    npt.assert_allclose(stats.denormalize(scaled), data, atol=1e-9)


def test_constant_channel_maps_to_middle():
    data = np.array([[1.0, 3.0], [2.0, 3.0], [4.0, 3.0]])
    scaled = NormStats.fit(data).normalize(data)
    npt.assert_allclose(scaled[:, 1], 0.5)
    npt.assert_allclose(scaled[:, 0], [0.05, 0.35, 0.95])


def test_norm_stats_checks():
    with pytest.raises(DomainError):
        NormStats(np.zeros(2), np.array([1.0, 0.0]))
    with pytest.raises(DimensionMismatch):
        NormStats.identity(3).normalize(np.zeros(2))


# architectures

def test_published_architectures():
    assert PUBLISHED_ARCHITECTURES["case14"].input_dim == 10
    assert PUBLISHED_ARCHITECTURES["case57"].input_dim == 42
    assert PUBLISHED_ARCHITECTURES["case118"].input_dim == 78
    assert PUBLISHED_ARCHITECTURES["case118"].encoder_hidden == (200, 650, 650)
    big = PUBLISHED_ARCHITECTURES["case1354pegase"]
    assert big.encoder_hidden == (1500, 1500, 1100, 700, 300)
    assert big.latent_dim == 2
    assert PUBLISHED_ARCHITECTURES["case14"].describe() == "encoder [100, 100, 4] / decoder [100, 100, 10]"


def test_tutorial_architecture_builds():
    model = build_vae(PUBLISHED_ARCHITECTURES["case14"])
    assert model.input_dim == 10
    assert model.decoder_layers[-1].out_dim == 10
    assert model.latent_dim == 2


def test_default_architecture_picks_next_larger():
    assert default_architecture(10).encoder_hidden == (100, 100)
    assert default_architecture(12).encoder_hidden == (300, 300)
    assert default_architecture(12).input_dim == 12
    assert default_architecture(5000).encoder_hidden == (1500, 1500, 1100, 700, 300)
    assert default_learning_rate(78) == 2e-4


def test_bad_architecture():
    with pytest.raises(ConfigError):
        Architecture((0,), 2, (4,), 4)
    with pytest.raises(ConfigError):
        Architecture.from_unit_lists([], [10])


@pytest.mark.parametrize("settings_", [
    {"learning_rate": 0.0}, {"batch_size": 0}, {"max_steps": 0},
    {"init_scheme": "xavier"}, {"recon_likelihood": "poisson"},
])
def test_bad_train_config(settings_):
    with pytest.raises(ConfigError):
        TrainConfig(**settings_)


# training

def _toy_dataset(n=200, seed=0):
    """Points on a 2-D sheet inside 4-D space"""
    rng = np.random.default_rng(seed)
    s = rng.uniform(0.0, 1.0, (n, 2))
    return np.column_stack([s[:, 0], s[:, 1], 0.5 * s[:, 0] + 0.2, 1.0 - s[:, 1]])


def test_training_loss_decreases(tiny_arch):
    data = _toy_dataset(n=1)
    model = train(data, tiny_arch, TrainConfig(learning_rate=1e-2, batch_size=1, max_steps=100, seed=4))
    assert len(model.history) == 100
    assert np.mean(model.history[-10:]) < np.mean(model.history[:10])


def test_training_is_reproducible(tiny_arch):
    config = TrainConfig(learning_rate=1e-3, batch_size=16, max_steps=60, seed=9)
    data = _toy_dataset()
    a = train(data, tiny_arch, config)
    b = train(data, tiny_arch, config)
    assert a.history == b.history
    for name, value in a.parameters().items():
        assert np.array_equal(value, b.parameters()[name])


def test_training_freezes_normalization(tiny_arch):
    data = _toy_dataset()
    model = train(data, tiny_arch, TrainConfig(max_steps=5))
    npt.assert_allclose(model.norm_stats.normalize(data).min(axis=0), 0.05)
    assert reconstruct(model, data[:3]).shape == (3, 4)


def test_training_dataset_checks(tiny_arch):
    with pytest.raises(DimensionMismatch):
        train(np.zeros((5, 3)), tiny_arch, TrainConfig(max_steps=1))
    with pytest.raises(ConfigError):
        train(np.zeros((0, 4)), tiny_arch, TrainConfig(max_steps=1))
    with pytest.raises(DimensionMismatch):
        train([[0.1, 0.2, 0.3, 0.4], [0.1, 0.2]], tiny_arch, TrainConfig(max_steps=1))


def test_plain_autoencoder(tiny_arch):
    data = _toy_dataset()
    config = TrainConfig(learning_rate=3e-3, batch_size=32, max_steps=1500, seed=1)
    model = train_plain_ae(data, tiny_arch, config)

    first = model.encode(data[:4])
    assert first.shape == (4, 2)
    assert np.array_equal(first, model.encode(data[:4]))

    initial = np.mean(model.history[:20])
    final, _ = ae_loss(model, model.norm_stats.normalize(data))
    assert final < 0.1 * initial

    other = train_plain_ae(data, tiny_arch, TrainConfig(learning_rate=3e-3, batch_size=32, max_steps=50, seed=2))
    assert not np.allclose(other.encode(data[:4]), first)
