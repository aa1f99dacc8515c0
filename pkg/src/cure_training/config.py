"""
Run configuration.

Precedence, highest first: command-line flag > environment (CURE_SEED,
CURE_WORKER_THREADS) > config file > dataclass default.

Config files are flat ``key=value`` lines (UTF-8). ``#`` starts a comment,
blank lines are ignored, tuples are comma-separated and booleans accept
1/0/true/false/yes/no.
"""
from __future__ import annotations
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, Mapping, Optional, Tuple, Union, get_type_hints

from .errors import ConfigError, ConfigRangeError, ConfigTypeError, UnknownConfigKeyError
from .logging_setup import get_logger
from .modes import available_modes
from .nn import ARCHITECTURES

logger = get_logger("cure_training.config")

# lambda_inf used when left unset, keyed by eps_inf
LAMBDA_INF_PRESETS: Dict[float, float] = {0.1: 0.4, 0.3: 0.6, 2 / 255: 0.1, 8 / 255: 0.7}

_CHOICES: Dict[str, Tuple[str, ...]] = {
    "init_scheme": ("shi", "kaiming"),
    "dataset": ("synthetic", "mnist"),
    "q_norm": ("linf", "l2"),
    "l2_search": ("clamped", "truncated"),
    "l2_projection": ("ball", "sphere"),
    "subset_source": ("small_box", "full_eps"),
    "anneal_shape": ("linear", "smooth"),
    "checkpoint_dtype": ("float64", "float32"),
}

_ENV_KEYS = {"CURE_SEED": "seed", "CURE_WORKER_THREADS": "worker_threads"}


def _env_int(name: str, environ: Mapping[str, str]) -> Optional[int]:
    raw = environ.get(name)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigTypeError(name, "int", raw) from None


def lambda_inf_preset(eps_inf: float) -> float:
    """Preset for the closest known eps_inf."""
    nearest = min(LAMBDA_INF_PRESETS, key=lambda e: abs(e - eps_inf))
    return LAMBDA_INF_PRESETS[nearest]


@dataclass
class TrainConfig:
    # what to train
    mode: str = "max"
    arch: str = "cnn4"
    init_scheme: str = "shi"
    init_gain: float = 1.0
    # data
    dataset: str = "synthetic"
    data_dir: str = ""
    train_size: int = 0               # 0 = whole split
    test_size: int = 1000
    synthetic_n: int = 512
    synthetic_classes: int = 10
    synthetic_side: int = 8
    synthetic_noise: float = 0.05
    # perturbation sets
    eps_inf: float = 0.3
    eps_2: float = 1.0
    lambda_inf: Optional[float] = None
    lambda_2: float = 1e-5
    # loss weights
    alpha: float = 0.5
    eta: float = 2.0
    beta: float = 0.8
    q_norm: str = "linf"
    l1_weight: float = 1e-6
    # schedule
    epochs: int = 70
    anneal_epochs: int = 20
    anneal_shape: str = "linear"
    lr: float = 1e-4
    lr_decay_epochs: Tuple[int, ...] = (50, 60)
    lr_decay_factor: float = 0.2
    batch_size: int = 256
    warmup_tight_coef: float = 0.5
    warmup_relu_coef: float = 0.5
    # attack used for the propagation region
    attack_steps: int = 8
    attack_step_size: float = 0.25
    l2_search: str = "clamped"
    l2_projection: str = "ball"
    elide_last: bool = True
    # bound alignment and gradient projection
    kl_after_anneal: bool = False
    subset_source: str = "small_box"
    gp_enabled: bool = True
    gp_true_projection: bool = False
    # fine-tuning
    finetune_source: str = ""
    finetune_fraction: float = 0.2
    # run plumbing
    seed: int = 0
    out_dir: str = "runs/default"
    checkpoint_every: int = 0         # 0 = final checkpoint only
    checkpoint_dtype: str = "float64"
    worker_threads: int = 1

    @property
    def resolved_lambda_inf(self) -> float:
        return lambda_inf_preset(self.eps_inf) if self.lambda_inf is None else self.lambda_inf

    def validate(self) -> "TrainConfig":
        for key, allowed in _CHOICES.items():
            if getattr(self, key) not in allowed:
                raise ConfigRangeError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        if self.mode not in available_modes():
            raise ConfigRangeError(f"mode must be one of {available_modes()}, got {self.mode!r}")
        if self.arch not in ARCHITECTURES:
            raise ConfigRangeError(f"arch must be one of {sorted(ARCHITECTURES)}, got {self.arch!r}")
        for key in ("alpha", "beta", "lambda_2", "finetune_fraction"):
            _check_unit(key, getattr(self, key))
        if self.lambda_inf is not None:
            _check_unit("lambda_inf", self.lambda_inf)
        for key in ("eta", "l1_weight", "eps_inf", "eps_2", "warmup_tight_coef", "warmup_relu_coef"):
            if getattr(self, key) < 0:
                raise ConfigRangeError(f"{key} must be >= 0, got {getattr(self, key)}")
        for key in ("epochs", "batch_size", "worker_threads", "synthetic_n", "init_gain"):
            if getattr(self, key) <= 0:
                raise ConfigRangeError(f"{key} must be > 0, got {getattr(self, key)}")
        if self.lr < 0 or self.lr_decay_factor <= 0 or self.attack_step_size <= 0:
            raise ConfigRangeError("lr must be >= 0; lr_decay_factor and attack_step_size must be > 0")
        if self.attack_steps < 0 or self.checkpoint_every < 0 or self.train_size < 0 or self.test_size < 0:
            raise ConfigRangeError("attack_steps, checkpoint_every, train_size and test_size must be >= 0")
        if self.synthetic_classes < 2:
            raise ConfigRangeError(f"synthetic_classes must be >= 2, got {self.synthetic_classes}")
        if not 0 <= self.anneal_epochs < self.epochs:
            raise ConfigRangeError(f"anneal_epochs must lie in [0, epochs={self.epochs}), got {self.anneal_epochs}")
        milestones = list(self.lr_decay_epochs)
        if any(b <= a for a, b in zip(milestones, milestones[1:])):
            raise ConfigRangeError(f"lr_decay_epochs must be strictly increasing, got {milestones}")
        if any(m < 0 or m >= self.epochs for m in milestones):
            raise ConfigRangeError(f"lr_decay_epochs must lie in [0, epochs={self.epochs}), got {milestones}")
        if self.mode == "finetune" and not self.finetune_source:
            raise ConfigRangeError("finetune mode requires finetune_source")
        if self.dataset == "mnist" and not self.data_dir:
            raise ConfigRangeError("dataset=mnist requires data_dir")
        return self

    @property
    def finetune_epochs(self) -> int:
        return math.ceil(round(self.finetune_fraction * self.epochs, 9))

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        return d

    def to_text(self) -> str:
        """Config-file rendering that parses back to an equal config."""
        lines = []
        for key, value in self.to_dict().items():
            if value is None:
                value = ""
            elif isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, list):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"


def _check_unit(key: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise ConfigRangeError(f"{key} must lie in [0, 1], got {value}")


_TYPES = get_type_hints(TrainConfig)
VALID_KEYS = tuple(f.name for f in fields(TrainConfig))

_TRUE = {"1", "true", "yes"}
_FALSE = {"0", "false", "no"}


def _coerce(key: str, raw: Any) -> Any:
    """Convert a raw file/flag/env value to the field's type."""
    kind = _TYPES[key]
    if not isinstance(raw, str):
        if kind == Tuple[int, ...]:
            return tuple(int(v) for v in raw)
        return raw
    text = raw.strip()
    try:
        if kind is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind == Optional[float]:
            return None if text.lower() in ("", "none") else float(text)
        if kind == Tuple[int, ...]:
            return tuple(int(v) for v in text.split(",") if v.strip())
        return text
    except ValueError:
        expected = {bool: "bool", int: "int", float: "float"}.get(kind, str(kind).replace("typing.", ""))
        raise ConfigTypeError(key, expected, raw) from None


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Any]:
    values: Dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _TYPES:
            raise UnknownConfigKeyError(key, VALID_KEYS)
        values[key] = _coerce(key, raw)
    return values


def parse_config(
    path: Optional[Union[str, os.PathLike]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> TrainConfig:
    """Merge defaults, file, environment and flag overrides, then validate."""
    environ = os.environ if environ is None else environ
    values: Dict[str, Any] = {}
    if path:
        with open(path, "r", encoding="utf-8") as f:
            values.update(parse_config_text(f.read(), source=os.fspath(path)))
    for env_name, key in _ENV_KEYS.items():
        value = _env_int(env_name, environ)
        if value is not None:
            values[key] = value
    for key, raw in (overrides or {}).items():
        if key not in _TYPES:
            raise UnknownConfigKeyError(key, VALID_KEYS)
        if raw is not None:
            values[key] = _coerce(key, raw)
    cfg = TrainConfig(**values).validate()
    logger.debug("Resolved config: %s", cfg.to_dict())
    return cfg


# =========================
# Manifest
# =========================

@dataclass
class RunManifest:
    config: Dict[str, Any]
    dataset_fingerprint: str
    seed: int
    version: str
    outputs: Dict[str, str] = field(default_factory=dict)

    def to_config(self) -> TrainConfig:
        return parse_config(overrides=self.config, environ={})

    def write(self, path: Union[str, os.PathLike]) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def read(cls, path: Union[str, os.PathLike]) -> "RunManifest":
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
        try:
            return cls(**raw)
        except TypeError as e:
            raise ConfigError(f"{path}: not a run manifest ({e})") from e
