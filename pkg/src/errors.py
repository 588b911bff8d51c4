#!/usr/bin/env python3
"""
Error families for the voltage stability toolkit.
Each family carries the exit code the command line reports for it.
"""

from typing import Optional


class ToolkitError(Exception):
    """Base class for every error the toolkit raises on purpose"""
    exit_code = 1


# Configuration / requests

class ConfigError(ToolkitError):
    exit_code = 10


class EmptyRequest(ConfigError):
    """A command was asked to produce zero items"""


# grid-model

class CaseError(ToolkitError):
    exit_code = 11


class ParseError(CaseError):
    pass


class ValidationError(CaseError):
    pass


class UnknownBus(CaseError):
    def __init__(self, bus: int, message: Optional[str] = None):
        self.bus = bus
        super().__init__(message or f"bus {bus} is not part of the case")


# power-flow

class PowerFlowError(ToolkitError):
    exit_code = 12


class NotConverged(PowerFlowError):
    """Newton iterations failed; the operating point may be past the nose"""

    def __init__(self, reason: str, iterations: int = 0, max_mismatch: float = float("nan")):
        self.reason = reason
        self.iterations = iterations
        self.max_mismatch = max_mismatch
        super().__init__(
            f"power flow did not converge ({reason}) after {iterations} iterations, "
            f"max mismatch {max_mismatch:.3e}"
        )


# cpflow

class ContinuationError(ToolkitError):
    exit_code = 13


class BaseCaseInfeasible(ContinuationError):
    pass


class TraceStalled(ContinuationError):
    def __init__(self, lam: float, step: float):
        self.lam = lam
        self.step = step
        super().__init__(f"continuation stalled at lambda={lam:.6f} (step {step:.2e}) before the nose")


class NoseNotReached(ContinuationError):
    def __init__(self, lam: float, max_points: int):
        self.lam = lam
        self.max_points = max_points
        super().__init__(f"nose not reached within {max_points} points (last lambda={lam:.6f})")


# pmu-synth

class MeasurementError(ToolkitError):
    exit_code = 14


class UnobservedBus(MeasurementError):
    def __init__(self, bus: int):
        self.bus = bus
        super().__init__(f"PMU bus {bus} is not in the solved case")


class InfeasibleAt(MeasurementError):
    def __init__(self, t: int, reason: str = ""):
        self.t = t
        self.reason = reason
        super().__init__(f"schedule infeasible at tick {t}" + (f" ({reason})" if reason else ""))


class ScheduleError(MeasurementError):
    pass


# vae

class ModelError(ToolkitError):
    exit_code = 15


class DimensionMismatch(ModelError):
    pass


class DomainError(ModelError):
    pass


class CheckpointError(ModelError):
    pass


# stability-index

class StabilityIndexError(ToolkitError):
    exit_code = 16


class RankDeficient(StabilityIndexError):
    def __init__(self, message: str = "latent features are collinear"):
        super().__init__(f"{message}; generate more diverse training curves")


class InsufficientExcursion(StabilityIndexError):
    pass


class ZeroReference(StabilityIndexError):
    pass


# dataset generation

class DatasetError(ToolkitError):
    exit_code = 17


# shared by the solver and the trainer

class NumericalError(ToolkitError):
    exit_code = 18
