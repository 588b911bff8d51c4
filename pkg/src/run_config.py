#!/usr/bin/env python3
"""
Run configuration: one JSON file, overridden by command-line flags.
"""

import dataclasses
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Union

from src.continuation import ContinuationOptions, LoadDirection
from src.errors import ConfigError
from src.grid_case import GridCase, load_case
from src.pmu_synth import LoadSchedule, NoiseModel, PmuPlacement
from src.stability_index import TemperatureConfig
from src.vae import Architecture, TrainConfig, default_architecture, default_learning_rate

logger = logging.getLogger(__name__)

SMALL_CASE_BUSES = 30


@dataclass
class RunConfig:
    case: str = "case14"
    placement: Optional[List[int]] = None
    direction: Optional[Union[str, Dict[str, Dict[str, float]]]] = None
    schedule: Optional[str] = None
    train: Dict[str, Any] = field(default_factory=dict)
    architecture: Optional[Dict[str, Any]] = None
    temperature: float = 0.05
    noise: Dict[str, float] = field(default_factory=lambda: {"sigma_mag": 1e-3, "sigma_ang": 1e-3})
    seed: int = 0
    out_dir: str = "output"
    curves: int = 40
    max_nodes: Optional[int] = None
    max_points: int = 2000
    workers: int = 1
    failure_cap: Optional[int] = None
    alignment_intercept: bool = False

    @classmethod
    def load(cls, path: Optional[str]) -> "RunConfig":
        if not path:
            return cls()
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, "r") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    def with_overrides(self, **overrides) -> "RunConfig":
        """Copy with every non-None override applied"""
        return dataclasses.replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def validate(self) -> "RunConfig":
        if self._looks_like_path(self.case) and not os.path.exists(self.case):
            raise ConfigError(f"case file not found: {self.case}")
        if self.schedule and not os.path.exists(self.schedule):
            raise ConfigError(f"schedule file not found: {self.schedule}")
        if self.curves < 0:
            raise ConfigError("curves must be non-negative")
        if self.max_nodes is not None and self.max_nodes < 1:
            raise ConfigError("max_nodes must be at least 1")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.failure_cap is not None and self.failure_cap < 0:
            raise ConfigError("failure_cap must be non-negative")
        self.temperature_config()
        self.noise_model()
        self.continuation_options()
        if self.direction is not None:
            self.load_direction()
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = sorted(set(self.train) - known)
        if unknown:
            raise ConfigError(f"unknown train settings: {', '.join(unknown)}")
        return self

    @staticmethod
    def _looks_like_path(value: str) -> bool:
        return os.sep in value or value.endswith((".m", ".json"))

    def load_grid(self) -> GridCase:
        return load_case(self.case)

    def pmu_placement(self, case: GridCase) -> PmuPlacement:
        placement = PmuPlacement(tuple(self.placement)) if self.placement else PmuPlacement.for_case(case.name)
        placement.positions(case.bus_ids)
        return placement

    def load_direction(self) -> LoadDirection:
        if self.direction is None:
            raise ConfigError("no load direction given (--direction or config 'direction')")
        if isinstance(self.direction, str):
            return LoadDirection.parse(self.direction)
        return LoadDirection.from_dict(self.direction)

    def load_schedule(self) -> LoadSchedule:
        if not self.schedule:
            raise ConfigError("no schedule given (--schedule or config 'schedule')")
        return LoadSchedule.load(self.schedule)

    def nodes_per_curve(self, case: GridCase) -> int:
        if self.max_nodes is not None:
            return self.max_nodes
        return 3 if case.n_bus <= SMALL_CASE_BUSES else 5

    def noise_model(self) -> NoiseModel:
        try:
            return NoiseModel(seed=self.seed, **self.noise)
        except TypeError as e:
            raise ConfigError(f"bad noise settings: {e}") from None

    def temperature_config(self) -> TemperatureConfig:
        return TemperatureConfig(self.temperature)

    def continuation_options(self) -> ContinuationOptions:
        return ContinuationOptions(max_points=self.max_points)

    def model_architecture(self, input_dim: int) -> Architecture:
        if not self.architecture:
            return default_architecture(input_dim)
        try:
            arch = Architecture.from_unit_lists(self.architecture["encoder"], self.architecture["decoder"],
                                                self.architecture.get("latent_dim", 2))
        except KeyError as e:
            raise ConfigError(f"architecture needs {e} unit list") from None
        if arch.input_dim != input_dim:
            raise ConfigError(f"architecture output {arch.input_dim} does not match {input_dim} phasor entries")
        return arch

    def train_config(self, input_dim: int) -> TrainConfig:
        settings = {"learning_rate": default_learning_rate(input_dim), "seed": self.seed}
        settings.update(self.train)
        try:
            return TrainConfig(**settings)
        except TypeError as e:
            raise ConfigError(f"bad train settings: {e}") from None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)
