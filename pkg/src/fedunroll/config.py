"""Experiment configuration shared by the round runner and the CLI.

A single dataclass carries every knob an experiment run needs; the CLI
builds it from an INI file plus flag overrides, library callers build it
directly. Validation happens in `validate` so both paths share it.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import List, Optional

from .errors import ConfigError

METHODS = (
    "unrolled",
    "local",
    "local_exact",
    "fedavg",
    "fedprox",
    "fedavg_ft",
    "fedprox_ft",
    "ditto",
)

OPTIMIZERS = ("adam", "gd")


@dataclass
class ExperimentConfig:
    # benchmark
    setting: int = 1
    M: int = 10
    n_per_client: int = 200
    noise_std: float = 0.1
    trials: int = 1
    seed: Optional[int] = None

    # which methods to run (compare) / single method (run)
    methods: List[str] = field(default_factory=lambda: ["unrolled", "local", "fedavg"])

    # unrolled network
    L: int = 10
    rounds: int = 500
    epochs_per_round: int = 2
    lr: float = 0.01
    optimizer: str = "adam"
    policy: str = "exact"
    tied: bool = False
    participation: float = 1.0
    mode: str = "linear"
    dual_update: str = "rho_step"
    batch_size: int = 64           # grad mode only; linear mode is full batch
    grad_lr: float = 0.01
    grad_steps: int = 5

    # baselines
    local_epochs: int = 2
    baseline_lr: float = 0.01
    baseline_batch: Optional[int] = None   # full batch
    mu: float = 0.01
    lambda_ditto: float = 1.0
    ft_epochs: int = 20
    standardize: bool = True

    # outputs
    out_dir: str = "."
    transcript: bool = False
    diagnostics: bool = False

    def validate(self) -> None:
        if self.seed is None:
            raise ConfigError("seed is required (set it in [experiment] or pass --seed)")
        if self.setting not in (1, 2, 3):
            raise ConfigError(f"setting must be 1, 2 or 3, got {self.setting}")
        if self.M < 1:
            raise ConfigError("M must be >= 1")
        if self.n_per_client < 2:
            raise ConfigError("n_per_client must be >= 2")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.L < 1:
            raise ConfigError("layers must be >= 1")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if self.epochs_per_round < 1:
            raise ConfigError("epochs_per_round must be >= 1")
        if not 0.0 < self.participation <= 1.0:
            raise ConfigError("participation must lie in (0, 1]")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.policy not in ("exact", "federated_local"):
            raise ConfigError("policy must be 'exact' or 'federated_local'")
        if self.mode not in ("linear", "grad"):
            raise ConfigError("mode must be 'linear' or 'grad'")
        if self.dual_update not in ("rho_step", "unit_step"):
            raise ConfigError("dual_update must be 'rho_step' or 'unit_step'")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; choose from {METHODS}")
        if self.lr <= 0 or self.baseline_lr <= 0 or self.grad_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.ft_epochs < 0 or self.local_epochs < 1 or self.grad_steps < 1:
            raise ConfigError("epoch/step counts out of range")

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def coerce_field(name: str, text: str):
    """Parse one INI value to the configured field's type."""
    if name not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {name!r}")
    text = text.strip()
    ftype = FIELD_TYPES[name]
    try:
        if name == "methods":
            return [tok.strip() for tok in text.split(",") if tok.strip()]
        if name in ("seed", "baseline_batch"):
            return None if text.lower() in ("", "none") else int(text)
        if ftype == "bool" or name in ("tied", "standardize", "transcript", "diagnostics"):
            low = text.lower()
            if low in _BOOL_TRUE:
                return True
            if low in _BOOL_FALSE:
                return False
            raise ValueError(text)
        if ftype == "int":
            return int(text)
        if ftype == "float":
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {name!r}: {text!r}") from exc
