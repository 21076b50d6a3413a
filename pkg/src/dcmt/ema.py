"""Teacher maintenance by exponential moving average of student weights."""

from __future__ import annotations

from dataclasses import dataclass

from .model import ConfigError, ModelPair


class CorruptionError(RuntimeError):
    """Student and teacher parameter collections no longer line up."""


@dataclass
class EmaConfig:
    alpha: float = 0.99
    ramp_alpha: bool = False

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0,1], got {self.alpha}")


def effective_alpha(config: EmaConfig, step: int) -> float:
    """Decay used after optimizer step ``step`` (1-based).

    With ``ramp_alpha`` the decay warms up as ``min(1 - 1/(step+1), alpha)``.
    """
    if config.ramp_alpha:
        return min(1.0 - 1.0 / (step + 1.0), config.alpha)
    return config.alpha


def ema_update(pair: ModelPair, alpha: float) -> None:
    """teacher <- alpha * teacher + (1 - alpha) * student, in place."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0,1], got {alpha}")
    if pair.student.keys() != pair.teacher.keys():
        raise CorruptionError("student and teacher parameter names differ")
    for name, s in pair.student.items():
        t = pair.teacher[name]
        if t.shape != s.shape:
            raise CorruptionError(f"{name}: teacher {t.shape} vs student {s.shape}")
        t.data *= alpha
        t.data += (1.0 - alpha) * s.data
