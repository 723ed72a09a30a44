"""Time-indexed schedules and the five-policy bundle.

A schedule maps an epoch index t in [0, T] to a value. Five shapes are
supported: constant, linear, linear with warmup/cooldown plateaus, cosine,
and arctan. The policy bundle groups the unlabelled sampling rate pi, the
unsupervised loss weight alpha, the confidence threshold sigma, the teacher
momentum m, and the augmentation config into one object evaluated once per
epoch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .augment import AugConfig

SHAPES = ("constant", "linear", "linear-warmup-cooldown", "cosine", "arctan")


@dataclass(frozen=True)
class Schedule:
    shape: str
    v_start: float
    v_end: float
    warmup_frac: float = 0.0
    cooldown_frac: float = 0.0
    steepness: float = 5.0  # arctan only

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown schedule shape {self.shape!r}")
        if not (0.0 <= self.warmup_frac <= 0.5 and 0.0 <= self.cooldown_frac <= 0.5):
            raise ValueError("warmup/cooldown fractions must lie in [0, 0.5]")
        if self.warmup_frac + self.cooldown_frac > 1.0:
            raise ValueError("warmup_frac + cooldown_frac must be <= 1")
        if self.shape == "arctan" and self.steepness <= 0:
            raise ValueError("arctan steepness must be positive")

    @staticmethod
    def constant(v: float) -> "Schedule":
        return Schedule("constant", v, v)


def eval_schedule(s: Schedule, t: int, total: int) -> float:
    """Evaluate a schedule at epoch t of `total`."""
    if total <= 0:
        raise ValueError("total steps must be positive")
    if not (0 <= t <= total):
        raise ValueError(f"epoch {t} outside [0, {total}]")
    x = t / total
    if s.shape == "constant":
        return s.v_start
    if s.shape == "linear":
        return s.v_start + (s.v_end - s.v_start) * x
    if s.shape == "linear-warmup-cooldown":
        if x < s.warmup_frac:
            return 0.0
        if x >= 1.0 - s.cooldown_frac:
            return s.v_end
        span = 1.0 - s.warmup_frac - s.cooldown_frac
        u = (x - s.warmup_frac) / span
        return s.v_start + (s.v_end - s.v_start) * u
    if s.shape == "cosine":
        return s.v_end - (s.v_end - s.v_start) * (math.cos(math.pi * x) + 1.0) / 2.0
    # arctan
    k = s.steepness
    return s.v_start + (s.v_end - s.v_start) * math.atan(k * x) / math.atan(k)


@dataclass(frozen=True)
class PolicyBundle:
    """The five time-varying controls of the self-training loop."""

    pi: Schedule
    alpha: Schedule
    sigma: Schedule
    momentum: Schedule
    aug: AugConfig = field(default_factory=AugConfig)


@dataclass(frozen=True)
class PolicySnapshot:
    pi_t: float
    alpha_t: float
    sigma_t: float
    m_t: float
    aug: AugConfig


def snapshot(bundle: PolicyBundle, t: int, total: int) -> PolicySnapshot:
    """Evaluate every schedule of the bundle at epoch t."""
    pi_t = min(1.0, max(0.0, eval_schedule(bundle.pi, t, total)))
    return PolicySnapshot(
        pi_t=pi_t,
        alpha_t=eval_schedule(bundle.alpha, t, total),
        sigma_t=eval_schedule(bundle.sigma, t, total),
        m_t=eval_schedule(bundle.momentum, t, total),
        aug=bundle.aug,
    )


def sample_unlabelled(
    batch: Sequence[int], pi_t: float, rng: np.random.Generator
) -> List[int]:
    """Keep each element independently with probability pi_t."""
    if not (0.0 <= pi_t <= 1.0):
        raise ValueError("pi_t must lie in [0, 1]")
    if pi_t <= 0.0:
        # still consume one draw per element so sibling runs stay aligned
        rng.random(len(batch))
        return []
    keep = rng.random(len(batch)) < pi_t
    return [b for b, k in zip(batch, keep) if k]


def covariance_diagnostic(losses: Sequence[float], probs: Sequence[float]) -> float:
    """Empirical covariance between per-sample losses and their sampling
    probabilities. Negative values indicate an effective sampling policy."""
    if len(losses) != len(probs):
        raise ValueError("losses and probs must have equal length")
    if len(losses) < 2:
        raise ValueError("need at least two paired samples")
    l = np.asarray(losses, dtype=float)
    p = np.asarray(probs, dtype=float)
    return float(np.mean((l - l.mean()) * (p - p.mean())))


def default_bundle() -> PolicyBundle:
    """The starred default settings: warmup/cooldown linear-increase
    sampling, linear loss weight 0.1->1, arctan threshold 0.1->0.6,
    cosine momentum 0.998->0.9998."""
    return PolicyBundle(
        pi=Schedule("linear-warmup-cooldown", 0.0, 1.0, warmup_frac=0.25, cooldown_frac=0.25),
        alpha=Schedule("linear", 0.1, 1.0),
        sigma=Schedule("arctan", 0.1, 0.6, steepness=5.0),
        momentum=Schedule("cosine", 0.998, 0.9998),
        aug=AugConfig(),
    )
