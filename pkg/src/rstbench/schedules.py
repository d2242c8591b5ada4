"""Budget-fraction learning-rate schedules, the layer-drop schedule, and
depth-doubling event times.

Everything here is a pure function of the consumed-budget fraction, never
of step counts, so methods with different per-iteration costs decay on the
same axis they are budgeted on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import LayerPlan


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str                  # "one_cycle" | "cosine_warmup"
    base_lr: float             # peak for one_cycle, plateau base for cosine
    final_lr: float = 0.0
    warmup_frac: float = 0.05

    def __post_init__(self):
        if self.kind not in ("one_cycle", "cosine_warmup"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.final_lr > self.base_lr:
            raise ValueError("final_lr must not exceed base_lr")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must be in [0, 1)")


@dataclass(frozen=True)
class DropSchedule:
    alpha_bar: float   # asymptotic mean keep probability, in (0, 1]
    gamma_f: float     # temperature; higher drops sooner
    num_layers: int

    def __post_init__(self):
        if not 0.0 < self.alpha_bar <= 1.0:
            raise ValueError("alpha_bar must be in (0, 1]")
        if self.gamma_f <= 0:
            raise ValueError("gamma_f must be positive")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")


def lr_at(spec: ScheduleSpec, progress: float) -> float:
    """Learning rate at a consumed-budget fraction in [0, 1].

    one_cycle: symmetric triangle, 0 -> peak on [0, 0.5], peak -> 0 on
    [0.5, 1]. cosine_warmup: linear 0 -> base over the warmup fraction,
    then cosine down to final_lr, reached exactly at progress 1.
    """
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress {progress} outside [0, 1]")
    if spec.kind == "one_cycle":
        if progress <= 0.5:
            return spec.base_lr * (progress / 0.5)
        return spec.base_lr * ((1.0 - progress) / 0.5)
    w = spec.warmup_frac
    if progress < w:
        return spec.base_lr * (progress / w)
    span = (progress - w) / (1.0 - w)
    return spec.final_lr + (spec.base_lr - spec.final_lr) * 0.5 * (1.0 + np.cos(np.pi * span))


def drop_keep_probs(sched: DropSchedule, progress: float) -> np.ndarray:
    """Per-block keep probabilities at a consumed-budget fraction.

    alpha = (1 - alpha_bar) * exp(-gamma_f * progress) + alpha_bar;
    p_d = (1 - alpha) / L; block i keeps with p_i = 1 - i * p_d, so keep
    probability decays affinely with depth (block 0 is never decayed).
    """
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress {progress} outside [0, 1]")
    alpha = (1.0 - sched.alpha_bar) * np.exp(-sched.gamma_f * progress) + sched.alpha_bar
    p_d = (1.0 - alpha) / sched.num_layers
    return 1.0 - np.arange(sched.num_layers, dtype=np.float64) * p_d


def sample_layer_plan(probs: np.ndarray, rng: np.random.Generator) -> LayerPlan:
    """Independent Bernoulli keep per block; kept blocks carry scale 1/p."""
    probs = np.asarray(probs, dtype=np.float64)
    if np.any(probs <= 0.0) or np.any(probs > 1.0):
        raise ValueError("keep probabilities must be in (0, 1]")
    keep = rng.random(probs.shape) < probs
    return LayerPlan(keep=keep, scale=1.0 / probs)


def stacking_points(budget_rst: float, fractions) -> list[float]:
    """Depth-doubling event times as fractions of the RST budget."""
    fr = [float(f) for f in fractions]
    if any(not 0.0 < f < 1.0 for f in fr):
        raise ValueError(f"stacking fractions must lie in (0, 1): {fr}")
    if any(b <= a for a, b in zip(fr, fr[1:])):
        raise ValueError(f"stacking fractions must be strictly increasing: {fr}")
    return [f * budget_rst for f in fr]
