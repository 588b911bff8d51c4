#!/usr/bin/env python3
"""
Model checkpoint store.

A checkpoint is one JSON document holding the layer stack (dimensions,
activations, weights, biases), normalization statistics, likelihood mode and,
once fitted, the alignment map and temperature. Floats are written with full
repr precision so a reloaded model reproduces the saved one bit for bit.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from src.errors import CheckpointError, ToolkitError
from src.stability_index import AlignmentMap, TemperatureConfig
from src.vae import MlpLayer, NormStats, PlainAutoencoder, VaeModel

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "vae-stability-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(eq=False)
class Checkpoint:
    model: VaeModel
    alignment: Optional[AlignmentMap] = None
    temperature: Optional[TemperatureConfig] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def placement(self) -> List[int]:
        return list(self.metadata.get("placement", []))


def _layer_to_dict(layer: MlpLayer) -> Dict[str, Any]:
    return {
        "in": layer.in_dim,
        "out": layer.out_dim,
        "activation": layer.activation,
        "weights": layer.weights.tolist(),
        "bias": layer.bias.tolist(),
    }


def _layer_from_dict(data: Dict[str, Any]) -> MlpLayer:
    layer = MlpLayer(np.asarray(data["weights"], dtype=float), np.asarray(data["bias"], dtype=float),
                     data["activation"])
    if (layer.in_dim, layer.out_dim) != (data["in"], data["out"]):
        raise CheckpointError(f"stored layer size {data['in']}x{data['out']} does not match its weights")
    return layer


def _norm_to_dict(stats: NormStats) -> Dict[str, Any]:
    return {"offset": stats.offset.tolist(), "scale": stats.scale.tolist()}


def checkpoint_to_dict(ckpt: Checkpoint) -> Dict[str, Any]:
    model = ckpt.model
    data = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": "vae",
        "latent_dim": model.latent_dim,
        "input_dim": model.input_dim,
        "recon_likelihood": model.recon_likelihood,
        "layers": {
            "encoder": [_layer_to_dict(layer) for layer in model.encoder_layers],
            "mean_head": _layer_to_dict(model.mean_head),
            "var_head": _layer_to_dict(model.var_head),
            "decoder": [_layer_to_dict(layer) for layer in model.decoder_layers],
        },
        "norm_stats": _norm_to_dict(model.norm_stats),
        "metadata": ckpt.metadata,
    }
    if ckpt.alignment is not None:
        data["alignment"] = ckpt.alignment.to_dict()
    if ckpt.temperature is not None:
        data["temperature"] = {"phi": ckpt.temperature.phi}
    return data


def checkpoint_from_dict(data: Dict[str, Any]) -> Checkpoint:
    if data.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("not a model checkpoint")
    if data.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {data.get('version')}")
    if data.get("kind") != "vae":
        raise CheckpointError(f"checkpoint holds a {data.get('kind')!r} model, expected a VAE")
    try:
        layers = data["layers"]
        model = VaeModel(
            encoder_layers=[_layer_from_dict(d) for d in layers["encoder"]],
            mean_head=_layer_from_dict(layers["mean_head"]),
            var_head=_layer_from_dict(layers["var_head"]),
            decoder_layers=[_layer_from_dict(d) for d in layers["decoder"]],
            norm_stats=NormStats(**data["norm_stats"]),
            recon_likelihood=data["recon_likelihood"],
        )
        alignment = AlignmentMap.from_dict(data["alignment"]) if "alignment" in data else None
        temperature = TemperatureConfig(**data["temperature"]) if "temperature" in data else None
    except KeyError as e:
        raise CheckpointError(f"checkpoint is missing {e}") from e
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"malformed checkpoint: {e}") from e
    except ToolkitError as e:
        raise CheckpointError(f"inconsistent checkpoint: {e}") from e
    if model.latent_dim != data.get("latent_dim", model.latent_dim):
        raise CheckpointError("stored latent_dim disagrees with the latent heads")
    return Checkpoint(model, alignment, temperature, dict(data.get("metadata", {})))


def plain_ae_to_dict(model: PlainAutoencoder, metadata: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": "plain_ae",
        "latent_dim": model.latent_dim,
        "layers": {
            "encoder": [_layer_to_dict(layer) for layer in model.encoder_layers],
            "decoder": [_layer_to_dict(layer) for layer in model.decoder_layers],
        },
        "norm_stats": _norm_to_dict(model.norm_stats),
        "metadata": metadata or {},
    }


class ModelStore:
    """Reads and writes checkpoints at one path"""

    def __init__(self, path: str):
        self.path = path

    def exists(self) -> bool:
        return os.path.exists(self.path)

    def load(self) -> Checkpoint:
        if not self.exists():
            raise CheckpointError(f"no checkpoint at {self.path}")
        try:
            with open(self.path, "r") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise CheckpointError(f"could not read {self.path}: {e}") from e
        ckpt = checkpoint_from_dict(data)
        logger.info("Loaded checkpoint %s (%d inputs, latent %d%s)", self.path, ckpt.model.input_dim,
                    ckpt.model.latent_dim, ", aligned" if ckpt.alignment is not None else "")
        return ckpt

    def _write(self, data: Dict[str, Any]) -> None:
        directory = os.path.dirname(self.path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        tmp = self.path + ".tmp"
        with open(tmp, "w") as f:
            json.dump(data, f)
        os.replace(tmp, self.path)

    def save(self, ckpt: Checkpoint) -> None:
        self._write(checkpoint_to_dict(ckpt))
        logger.info("Saved checkpoint to %s", self.path)

    def save_plain_ae(self, model: PlainAutoencoder, metadata: Optional[Dict[str, Any]] = None) -> None:
        self._write(plain_ae_to_dict(model, metadata))
        logger.info("Saved plain autoencoder to %s", self.path)
