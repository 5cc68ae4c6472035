"""Adam and learning-rate schedules."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigError, NumericalError

SCHEDULES = ("warmup_inverse_sqrt", "constant")


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loop settings.

    The Adam constants default to the full-scale recipe (0.9, 0.98, 1e-9).
    ``model_dim`` only enters the warm-up schedule.
    """

    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-9
    schedule: str = "warmup_inverse_sqrt"
    learning_rate: float = 1e-4
    warmup_steps: int = 4000
    model_dim: int = 256
    batch_size: int = 16
    total_steps: int = 2000
    rng_seed: int = 0
    eval_every: int = 100

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")
        for name in ("epsilon", "learning_rate", "warmup_steps", "model_dim",
                     "batch_size", "total_steps", "eval_every"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.rng_seed < 0:
            raise ConfigError("rng_seed must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        known = {k: v for k, v in (d or {}).items() if k in cls.__dataclass_fields__}
        unknown = set(d or {}) - set(known)
        if unknown:
            raise ConfigError(f"unknown train-config keys {sorted(unknown)}")
        return cls(**known)

    def lr(self, step: int) -> float:
        return lr_at(self.schedule, step, self.model_dim, self.warmup_steps, self.learning_rate)


def lr_at(schedule: str, step: int, model_dim: int = 256, warmup_steps: int = 4000,
          learning_rate: float = 1e-4) -> float:
    """Learning rate at ``step`` (1-based).

    ``warmup_inverse_sqrt`` is ``model_dim**-0.5 * min(step**-0.5,
    step * warmup_steps**-1.5)``: linear warm-up, then inverse square-root
    decay, peaking at ``step == warmup_steps``.
    """
    if step < 1:
        raise ConfigError(f"step must be >= 1, got {step}")
    if schedule == "constant":
        return float(learning_rate)
    if schedule == "warmup_inverse_sqrt":
        return model_dim ** -0.5 * min(step ** -0.5, step * warmup_steps ** -1.5)
    raise ConfigError(f"unknown schedule {schedule!r}")


def init_adam_state(params: dict) -> dict:
    return {"m": {k: np.zeros_like(p) for k, p in params.items()},
            "v": {k: np.zeros_like(p) for k, p in params.items()}}


def adam_step(params: dict, grads: dict, state: dict, cfg: TrainConfig, step: int,
              lr: float = None) -> None:
    """One in-place Adam update with bias correction.

    Raises NumericalError (and leaves every parameter untouched) when any
    gradient is non-finite.
    """
    if step < 1:
        raise ConfigError(f"step must be >= 1, got {step}")
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NumericalError(f"non-finite gradient at step {step} in {', '.join(sorted(bad))}")
    lr = cfg.lr(step) if lr is None else lr
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for k, p in params.items():
        g = grads[k]
        m = state["m"][k]
        v = state["v"][k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)
