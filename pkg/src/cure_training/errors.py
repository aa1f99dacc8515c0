from __future__ import annotations
from typing import Any, Dict, Iterable, Optional, Sequence


class CureError(Exception):
    """Base class for every error raised by cure_training."""


# ---------------------------------------------------------------------------
# network / propagation
# ---------------------------------------------------------------------------

class ShapeMismatchError(CureError, ValueError):
    def __init__(self, layer_index: int, layer_kind: str, expected: Sequence[int], actual: Sequence[int]):
        self.layer_index = layer_index
        self.layer_kind = layer_kind
        self.expected = tuple(expected)
        self.actual = tuple(actual)
        super().__init__(
            f"layer {layer_index} ({layer_kind}) expects input shape {self.expected}, got {self.actual}"
        )


class BoundOverflowError(CureError, RuntimeError):
    def __init__(self, layer_index: int, layer_kind: str):
        self.layer_index = layer_index
        self.layer_kind = layer_kind
        super().__init__(f"non-finite interval bounds after layer {layer_index} ({layer_kind})")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

class CheckpointError(CureError, ValueError):
    code = "checkpoint"


class CheckpointMagicError(CheckpointError):
    code = "bad_magic"


class CheckpointVersionError(CheckpointError):
    code = "version"


class CheckpointCrcError(CheckpointError):
    code = "crc"


class CheckpointTruncatedError(CheckpointError):
    code = "truncated"


class CheckpointFormatError(CheckpointError):
    code = "format"


class ArchitectureMismatchError(CheckpointError):
    code = "architecture"


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

class IdxFormatError(CureError, ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxDimensionError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

class ConfigError(CureError, ValueError):
    pass


class UnknownConfigKeyError(ConfigError):
    def __init__(self, key: str, valid: Iterable[str]):
        self.key = key
        self.valid = sorted(valid)
        super().__init__(f"unknown config key {key!r}; valid keys: {', '.join(self.valid)}")


class ConfigTypeError(ConfigError):
    def __init__(self, key: str, expected: str, raw: Any):
        self.key = key
        self.expected = expected
        super().__init__(f"config key {key!r} expects {expected}, got {raw!r}")


class ConfigRangeError(ConfigError):
    pass


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class TrainingDivergedError(CureError, RuntimeError):
    def __init__(self, epoch: int, batch: int, components: Optional[Dict[str, float]] = None):
        self.epoch = epoch
        self.batch = batch
        self.components = dict(components or {})
        parts = " ".join(f"{k}={v:.6g}" for k, v in self.components.items())
        super().__init__(f"non-finite loss at epoch {epoch} batch {batch}: {parts}")


class InvalidLabelError(CureError, ValueError):
    def __init__(self, label: int, num_classes: int):
        self.label = label
        self.num_classes = num_classes
        super().__init__(f"class index {label} outside [0, {num_classes})")


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

class ReportFormatError(CureError, ValueError):
    def __init__(self, path: str, missing: str):
        self.path = path
        self.missing = missing
        super().__init__(f"eval report {path!r} has no {missing!r}")
