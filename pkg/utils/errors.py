# utils/errors.py - Exception hierarchy shared by every package
from typing import Any, Dict, Optional


class KubmError(Exception):
    """Base class for all errors raised by the behavioral-model toolkit"""


class ContractError(KubmError, ValueError):
    """A shape or precondition contract was violated"""


class ConfigError(KubmError):
    """Invalid run configuration (unknown key, bad value, malformed line)"""


# Dataset errors

class DatasetError(KubmError):
    """Base class for dataset ingestion and preprocessing errors"""


class DatasetParseError(DatasetError):
    def __init__(self, line_number: int, reason: str):
        self.line_number = line_number
        self.reason = reason
        super().__init__(f"line {line_number}: {reason}")


class DimensionMismatchError(DatasetError):
    def __init__(self, demo_index: int, reason: str):
        self.demo_index = demo_index
        self.reason = reason
        super().__init__(f"demo {demo_index}: {reason}")


class EmptyDatasetError(DatasetError):
    """Dataset file contained no demonstrations"""


class AugmentationError(DatasetError):
    """Demonstration was already augmented with an initial frame"""


class DegenerateScaleError(DatasetError):
    """Rescale factor undefined because every feature vector is zero"""


class StateIndexError(KubmError, IndexError):
    """Time index outside a demonstration"""


# Training errors

class PoisonedGradientError(KubmError):
    """A gradient contained NaN; the optimizer step was aborted"""


class NonFiniteLossError(KubmError):
    def __init__(self, message: str, snapshot: Optional[Dict[str, Any]] = None):
        self.snapshot = snapshot or {}
        super().__init__(message)


class SpectralConvergenceError(KubmError):
    def __init__(self, last_estimate: float, iterations: int):
        self.last_estimate = last_estimate
        self.iterations = iterations
        super().__init__(
            f"power iteration did not converge after {iterations} iterations "
            f"(last estimate {last_estimate:.12g})"
        )


# Artifact errors

class ModelFormatError(KubmError):
    """Model or codec file could not be read"""


class VersionMismatchError(ModelFormatError):
    """File was written by an incompatible format version"""


class CorruptModelError(ModelFormatError):
    """File is truncated or its payload is inconsistent with its header"""


# Planning / benchmark errors

class DegenerateMetricError(KubmError):
    """Monitoring metric undefined for the given vectors"""


class ExpertFailureError(KubmError):
    """Scripted expert could not solve any sampled configuration"""
