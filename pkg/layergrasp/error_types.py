from dataclasses import dataclass
from typing import Optional


@dataclass
class ErrorRecord:
    """Data class for storing non-fatal run anomalies"""
    kind: str
    episode: int
    description: str
    severity: str  # 'low', 'medium', 'high'
    env_id: Optional[int] = None


class LayerGraspError(Exception):
    """Base class for every error raised by layergrasp"""
    exit_code = 3


class ContractViolation(LayerGraspError):
    """A precondition on shapes, indices or ranges was not met"""


class EmptyStackError(LayerGraspError):
    """The stack has no layers left and must be recycled"""


class InvalidDepthError(LayerGraspError):
    """Back-projection hit a pixel without a valid depth reading"""


class TrainingFailure(LayerGraspError):
    """Training diverged"""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class UnsupportedModeError(LayerGraspError):
    """The operation is not defined for the checkpoint's ablation mode"""


class CheckpointError(LayerGraspError):
    """Base class for checkpoint load failures"""


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


class ConfigError(LayerGraspError):
    exit_code = 2


class ConfigParseError(ConfigError):
    def __init__(self, message: str, line: Optional[int] = None):
        where = f" at line {line}" if line is not None else ""
        super().__init__(f"{message}{where}")
        self.line = line


class ConfigValidationError(ConfigError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class UsageError(LayerGraspError):
    exit_code = 1
