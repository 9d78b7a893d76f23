"""Routing policies and threshold calibration.

The learned policy routes a query to the small model exactly when its
router score is strictly above the threshold (ties go to the large model).
Baseline policies: all_small, all_large, and seeded random routing.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import evaluation
from .evaluation import LARGE, SMALL

POLICY_KINDS = ("learned", "all_small", "all_large", "random")


@dataclass
class RoutingDecision:
    query_id: str
    target: str
    score: float | None = None


@dataclass
class RoutingPolicy:
    kind: str
    threshold: float = 0.5
    p_large: float = 0.5
    seed: int = 0
    _rng: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"policy kind must be one of {POLICY_KINDS}, got {self.kind!r}")
        if not (math.isfinite(self.threshold) and 0.0 <= self.threshold <= 1.0):
            raise ValueError(f"threshold must lie in [0, 1], got {self.threshold!r}")
        if not (math.isfinite(self.p_large) and 0.0 <= self.p_large <= 1.0):
            raise ValueError(f"p_large must lie in [0, 1], got {self.p_large!r}")
        # The random policy owns its generator; concurrent callers need their
        # own policy instance or external serialization.
        self._rng = np.random.default_rng(self.seed)

    @classmethod
    def learned(cls, threshold: float) -> "RoutingPolicy":
        return cls("learned", threshold=threshold)

    @classmethod
    def all_small(cls) -> "RoutingPolicy":
        return cls("all_small")

    @classmethod
    def all_large(cls) -> "RoutingPolicy":
        return cls("all_large")

    @classmethod
    def random(cls, p_large: float, seed: int = 0) -> "RoutingPolicy":
        return cls("random", p_large=p_large, seed=seed)


def decide(policy: RoutingPolicy, score: float | None = None) -> str:
    """Route one query: returns "small" or "large"."""
    if policy.kind == "all_small":
        return SMALL
    if policy.kind == "all_large":
        return LARGE
    if policy.kind == "random":
        return LARGE if policy._rng.random() < policy.p_large else SMALL
    if score is None or not math.isfinite(score):
        raise ValueError(f"learned policy needs a finite score, got {score!r}")
    if not (0.0 <= score <= 1.0):
        raise ValueError(f"score must lie in [0, 1], got {score!r}")
    return SMALL if score > policy.threshold else LARGE


def route(policy: RoutingPolicy, samples, scores=None) -> list[RoutingDecision]:
    """Decide every sample in order; scores are required for learned policies."""
    samples = list(samples)
    if scores is None:
        scores = [None] * len(samples)
    if len(scores) != len(samples):
        raise ValueError(f"got {len(scores)} scores for {len(samples)} samples")
    out = []
    for sample, s in zip(samples, scores):
        s = None if s is None else float(s)
        out.append(RoutingDecision(sample.id, decide(policy, s), s))
    return out


# ---- threshold calibration ----


@dataclass(frozen=True)
class CalibrationResult:
    threshold: float
    quality_drop_pct: float
    cost_advantage_pct: float
    feasible: bool

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "quality_drop_pct": self.quality_drop_pct,
            "cost_advantage_pct": self.cost_advantage_pct,
            "feasible": self.feasible,
        }


def calibrate_threshold(samples, scores, metric: str, max_drop_pct: float, grid=None) -> CalibrationResult:
    """Pick the threshold with the best cost advantage under a drop budget.

    Sweeps the midpoint grid (or a caller-supplied one), keeps thresholds
    whose quality drop stays within max_drop_pct, and returns the one with
    the highest cost advantage; ties break toward the larger (more
    conservative) threshold. When nothing satisfies the budget the all-large
    sentinel comes back with feasible=False.
    """
    if math.isnan(max_drop_pct):
        raise ValueError("max_drop_pct must not be NaN")
    points = evaluation.tradeoff_curve(scores, samples, metric, grid=grid)
    feasible = [p for p in points if p.quality_drop_pct <= max_drop_pct]
    if not feasible:
        return CalibrationResult(1.0, 0.0, 0.0, feasible=False)
    best = max(feasible, key=lambda p: (p.cost_advantage_pct, p.threshold))
    return CalibrationResult(best.threshold, best.quality_drop_pct, best.cost_advantage_pct, True)


def subsample(samples, scores, n: int, seed: int = 0):
    """Seeded subsample without replacement, keeping samples/scores aligned.

    Returns the inputs unchanged when they already fit in n. Order follows
    the draw, which is deterministic for a given seed.
    """
    samples = list(samples)
    scores = np.asarray(scores, dtype=np.float64)
    if len(samples) != scores.size:
        raise ValueError(f"got {scores.size} scores for {len(samples)} samples")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if len(samples) <= n:
        return samples, scores
    idx = np.random.default_rng(seed).choice(len(samples), size=n, replace=False)
    return [samples[i] for i in idx], scores[idx]
