"""Routing quality/cost metrics, tradeoff curves, and report assembly.

Conventions: quality is averaged per query first (over that query's stored
samples for the chosen side), then across queries. Drops are percentages
relative to the all-large baseline; negative drop means routing improved
quality. Cost advantage is the percentage of queries routed to the small
model.
"""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import LARGE_SIDE, SMALL_SIDE
from .labeling import estimate_gap

SMALL, LARGE = SMALL_SIDE, LARGE_SIDE


@dataclass(frozen=True)
class TradeoffPoint:
    threshold: float
    cost_advantage_pct: float
    quality_drop_pct: float


@dataclass
class EvaluationReport:
    pair_name: str
    metric: str
    points: list[TradeoffPoint]
    gap_curve: list[dict] = field(default_factory=list)
    baselines: dict = field(default_factory=dict)
    correlations: dict | None = None

    def to_dict(self) -> dict:
        out = {
            "pair_name": self.pair_name,
            "metric": self.metric,
            "points": [
                {
                    "threshold": p.threshold,
                    "cost_advantage_pct": p.cost_advantage_pct,
                    "quality_drop_pct": p.quality_drop_pct,
                }
                for p in self.points
            ],
            "gap_curve": self.gap_curve,
            "baselines": self.baselines,
        }
        if self.correlations is not None:
            out["correlations"] = self.correlations
        return out


# ---- per-query means and the basic metrics ----


def _side_means(samples, metric: str) -> tuple[np.ndarray, np.ndarray]:
    small = np.array([np.mean(np.asarray(s.quality(SMALL, metric))) for s in samples])
    large = np.array([np.mean(np.asarray(s.quality(LARGE, metric))) for s in samples])
    return small, large


def _target_mask(routing, samples) -> np.ndarray:
    """True where the decision routes a sample small; enforces exact coverage."""
    targets = {}
    for d in routing:
        if d.query_id in targets:
            raise ValueError(f"duplicate decision for query {d.query_id!r}")
        if d.target not in (SMALL, LARGE):
            raise ValueError(f"decision target must be small or large, got {d.target!r}")
        targets[d.query_id] = d.target
    ids = [s.id for s in samples]
    missing = [i for i in ids if i not in targets]
    if missing:
        raise ValueError(f"no decision for query {missing[0]!r}")
    if len(targets) != len(ids):
        extra = sorted(set(targets) - set(ids))
        raise ValueError(f"decision for unknown query {extra[0]!r}")
    return np.array([targets[i] == SMALL for i in ids], dtype=bool)


def mean_quality(routing, samples, metric: str) -> float:
    """Mean over queries of the chosen side's per-query mean quality."""
    samples = list(samples)
    if not samples:
        raise ValueError("need at least one sample")
    mask = _target_mask(routing, samples)
    small, large = _side_means(samples, metric)
    return float(np.mean(np.where(mask, small, large)))


def quality_drop_pct(routed_mean_quality: float, all_large_mean_quality: float) -> float:
    """Percent drop vs the all-large baseline; negative means improvement."""
    if all_large_mean_quality == 0.0:
        raise ValueError("all-large mean quality is zero; drop percentage is undefined")
    return 100.0 * (all_large_mean_quality - routed_mean_quality) / abs(all_large_mean_quality)


def cost_advantage_pct(routing) -> float:
    """Percentage of decisions that routed to the small model."""
    routing = list(routing)
    if not routing:
        raise ValueError("need at least one decision")
    n_small = sum(1 for d in routing if d.target == SMALL)
    return 100.0 * n_small / len(routing)


# ---- threshold sweeps ----


def threshold_grid(scores) -> list[float]:
    """Midpoints between consecutive distinct scores, plus 0.0 and 1.0 sentinels.

    Router scores are strictly inside (0, 1), so threshold 0.0 routes every
    query small and 1.0 routes every query large under the strict > rule.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("need at least one score")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    distinct = np.unique(s)
    mids = (distinct[:-1] + distinct[1:]) / 2.0
    return [0.0] + [float(m) for m in mids] + [1.0]


def tradeoff_curve(scores, samples, metric: str, grid=None) -> list[TradeoffPoint]:
    """Sweep thresholds over the score range; one point per threshold.

    Points come back sorted by cost advantage ascending, so the first point
    is the all-large end and the last is the all-small end.
    """
    samples = list(samples)
    s = np.asarray(scores, dtype=np.float64)
    if len(samples) != s.size:
        raise ValueError(f"got {s.size} scores for {len(samples)} samples")
    thresholds = threshold_grid(s) if grid is None else [float(t) for t in grid]
    if not thresholds:
        raise ValueError("threshold grid must be non-empty")
    small, large = _side_means(samples, metric)
    all_large_mean = float(np.mean(large))
    points = []
    for thr in thresholds:
        mask = s > thr
        routed_mean = float(np.mean(np.where(mask, small, large)))
        points.append(
            TradeoffPoint(
                threshold=thr,
                cost_advantage_pct=100.0 * float(np.mean(mask)),
                quality_drop_pct=quality_drop_pct(routed_mean, all_large_mean),
            )
        )
    points.sort(key=lambda p: (p.cost_advantage_pct, -p.threshold))
    return points


def drop_at_cost_advantage(points: list[TradeoffPoint], pct: float) -> float:
    """Quality drop at a requested cost advantage, linearly interpolated.

    Exact at curve knots; between knots the drop is interpolated along the
    cost-advantage axis.
    """
    if not points:
        raise ValueError("need at least one tradeoff point")
    xs = np.array([p.cost_advantage_pct for p in points])
    ys = np.array([p.quality_drop_pct for p in points])
    order = np.argsort(xs, kind="stable")
    xs, ys = xs[order], ys[order]
    if pct < xs[0] or pct > xs[-1]:
        raise ValueError(f"cost advantage {pct} outside curve range [{xs[0]}, {xs[-1]}]")
    return float(np.interp(pct, xs, ys))


# ---- gap separation ----


def gap_difference(routing, samples, metric: str) -> float:
    """Mean quality gap of small-routed queries minus that of large-routed ones.

    Positive values mean routing sends the favorable-gap queries to the
    small model. Undefined (ValueError) when either side is empty.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("need at least one sample")
    mask = _target_mask(routing, samples)
    if not mask.any() or mask.all():
        raise ValueError("gap_difference needs at least one query routed to each side")
    gaps = np.array([estimate_gap(s, metric).mean_gap for s in samples])
    return float(np.mean(gaps[mask]) - np.mean(gaps[~mask]))


# ---- correlations ----


def pearson(a, b) -> float:
    """Sample Pearson correlation; result clipped into [-1, 1]."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError(f"need two equal-length vectors of size >= 2, got {x.shape} vs {y.shape}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("correlation inputs must be finite")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = float(np.sum(dx * dx))
    sy = float(np.sum(dy * dy))
    if sx == 0.0 or sy == 0.0:
        raise ValueError("correlation undefined for zero-variance input")
    r = float(np.sum(dx * dy)) / (np.sqrt(sx) * np.sqrt(sy))
    return max(-1.0, min(1.0, r))


def ranks(values) -> np.ndarray:
    """1-based ranks with ties sharing the average rank."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    out = np.empty(v.size, dtype=np.float64)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and v[order[j + 1]] == v[order[i]]:
            j += 1
        out[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return out


def spearman(a, b) -> float:
    """Rank correlation: Pearson over average-tie ranks."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError(f"need two equal-length vectors of size >= 2, got {x.shape} vs {y.shape}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("correlation inputs must be finite")
    try:
        return pearson(ranks(x), ranks(y))
    except ValueError:
        raise ValueError("rank correlation undefined: an input is entirely tied")


# ---- report assembly ----


def random_baseline(samples, metric: str, p_grid=None, seeds: int = 32, base_seed: int = 0) -> list[dict]:
    """Random-routing drop curve averaged over seeded draws.

    For each probability of choosing the large model, queries are routed
    independently (large iff u < p_large, matching the random policy), and
    the quality drop is averaged over ``seeds`` draws with its standard
    error. Degenerate draws (everything one side) are still well-defined
    for the drop metric, so no point is skipped.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("need at least one sample")
    if p_grid is None:
        p_grid = [k / 10.0 for k in range(11)]
    small, large = _side_means(samples, metric)
    all_large_mean = float(np.mean(large))
    curve = []
    for p_large in p_grid:
        drops = np.empty(seeds)
        costs = np.empty(seeds)
        for k in range(seeds):
            rng = np.random.default_rng(base_seed + k)
            mask = rng.random(len(samples)) >= p_large  # True routes small
            routed_mean = float(np.mean(np.where(mask, small, large)))
            drops[k] = quality_drop_pct(routed_mean, all_large_mean)
            costs[k] = 100.0 * float(np.mean(mask))
        stderr = float(np.std(drops, ddof=1) / np.sqrt(seeds)) if seeds > 1 else 0.0
        curve.append(
            {
                "p_large": float(p_large),
                "cost_advantage_pct": float(np.mean(costs)),
                "quality_drop_pct": float(np.mean(drops)),
                "quality_drop_pct_stderr": stderr,
            }
        )
    return curve


def build_report(
    pair_name: str,
    scores,
    samples,
    metric: str,
    *,
    random_seeds: int = 32,
    base_seed: int = 0,
) -> EvaluationReport:
    """Tradeoff curve plus gap separation and baselines for one model pair."""
    samples = list(samples)
    s = np.asarray(scores, dtype=np.float64)
    points = tradeoff_curve(s, samples, metric)
    gaps = np.array([estimate_gap(x, metric).mean_gap for x in samples])
    gap_curve = []
    for p in points:
        mask = s > p.threshold
        if not mask.any() or mask.all():
            continue  # undefined at the curve endpoints
        gap_curve.append(
            {
                "cost_advantage_pct": p.cost_advantage_pct,
                "gap_difference": float(np.mean(gaps[mask]) - np.mean(gaps[~mask])),
            }
        )
    baselines = {
        "all_small_drop_pct": points[-1].quality_drop_pct,
        "all_large_drop_pct": points[0].quality_drop_pct,
        "random_curve": random_baseline(samples, metric, seeds=random_seeds, base_seed=base_seed),
    }
    return EvaluationReport(pair_name, metric, points, gap_curve, baselines)


def cross_metric_report(
    scores,
    samples,
    metric_train: str,
    metric_eval: str,
    *,
    pair_name: str = "",
    random_seeds: int = 32,
    base_seed: int = 0,
) -> EvaluationReport:
    """Evaluate under metric_eval a router whose labels came from metric_train.

    Adds pearson/spearman between the per-query mean gaps under the two
    metrics; both are exactly 1.0 when the metrics coincide.
    """
    samples = list(samples)
    report = build_report(
        pair_name, scores, samples, metric_eval, random_seeds=random_seeds, base_seed=base_seed
    )
    gaps_train = [estimate_gap(s, metric_train).mean_gap for s in samples]
    gaps_eval = [estimate_gap(s, metric_eval).mean_gap for s in samples]
    if metric_train == metric_eval:
        pearson(gaps_train, gaps_train)  # still reject degenerate (zero-variance) gaps
        correlations = {"pearson": 1.0, "spearman": 1.0}
    else:
        correlations = {
            "pearson": pearson(gaps_train, gaps_eval),
            "spearman": spearman(gaps_train, gaps_eval),
        }
    report.correlations = dict(correlations, metric_train=metric_train, metric_eval=metric_eval)
    return report


# ---- persistence ----


def write_report_json(report: EvaluationReport, path) -> None:
    Path(path).write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def write_curve_csv(points: list[TradeoffPoint], path) -> None:
    """CSV with the exact header threshold,cost_advantage_pct,quality_drop_pct."""
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "cost_advantage_pct", "quality_drop_pct"])
        for p in points:
            writer.writerow([repr(p.threshold), repr(p.cost_advantage_pct), repr(p.quality_drop_pct)])
