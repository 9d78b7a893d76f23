"""Quality-gap labels for router training.

Three schemes over per-query quality samples q_s (small model) and q_l
(large model):

* deterministic:  1 if q_s >= q_l on the first stored sample of each side
* probabilistic:  fraction of ordered cross pairs (i, j) with s[i] >= l[j]
* transformed:    fraction of ordered cross pairs with s[i] >= l[j] - t

Ties count as success in every scheme, so the transformed label at t=0 is
exactly the probabilistic label. The relaxation level t is chosen by
maximizing the mean absolute pairwise distance between the resulting
labels over a grid (find_t_star).
"""

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import LARGE_SIDE, SMALL_SIDE, QuerySample, SchemaError

SCHEME_KINDS = ("deterministic", "probabilistic", "transformed")


@dataclass(frozen=True)
class LabelScheme:
    """Which label definition to train against, and the relaxation t."""

    kind: str
    t: float = 0.0

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise ValueError(f"scheme kind must be one of {SCHEME_KINDS}, got {self.kind!r}")
        if not math.isfinite(self.t) or self.t < 0.0:
            raise ValueError(f"scheme t must be a finite real >= 0, got {self.t!r}")
        if self.kind != "transformed" and self.t != 0.0:
            raise ValueError(f"scheme t must be 0 unless kind is 'transformed', got t={self.t!r}")


@dataclass
class LabeledExample:
    """One training example: features are attached later by the router module."""

    query_id: str
    label: float
    features: object | None = field(default=None, repr=False)


@dataclass(frozen=True)
class GapEstimate:
    """Per-query summary of the small-vs-large quality gap under one metric."""

    query_id: str
    mean_gap: float  # all-pairs mean of q_s - q_l
    s_values: tuple[float, ...] = field(repr=False)
    l_values: tuple[float, ...] = field(repr=False)

    def p_geq(self, t: float) -> float:
        """Fraction of sample pairs with q_s >= q_l - t."""
        return label_trans(self.s_values, self.l_values, t)


# ---- label definitions ----


def _sample_array(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D list of quality values")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must contain only finite values")
    return arr


def label_det(q_s: float, q_l: float) -> int:
    """Deterministic label from a single quality reading per side."""
    if not (math.isfinite(q_s) and math.isfinite(q_l)):
        raise ValueError(f"quality readings must be finite, got q_s={q_s!r} q_l={q_l!r}")
    return 1 if q_s >= q_l else 0


def label_prob(s_samples, l_samples) -> float:
    """Fraction of ordered sample pairs where the small model wins or ties."""
    s = _sample_array(s_samples, "s_samples")
    l = _sample_array(l_samples, "l_samples")
    return float(np.mean(s[:, None] >= l[None, :]))


def label_trans(s_samples, l_samples, t: float) -> float:
    """Fraction of ordered sample pairs where the small model is within t."""
    if not math.isfinite(t) or t < 0.0:
        raise ValueError(f"t must be a finite real >= 0, got {t!r}")
    s = _sample_array(s_samples, "s_samples")
    l = _sample_array(l_samples, "l_samples")
    return float(np.mean(s[:, None] >= l[None, :] - t))


def transform_objective(labels) -> float:
    """Mean absolute label difference over all ordered pairs, self-pairs included.

    Computed via the sorted-prefix identity, which is O(n log n) and equal to
    the direct double sum.
    """
    y = np.asarray(labels, dtype=np.float64)
    if y.ndim != 1 or y.size == 0:
        raise ValueError("labels must be a non-empty 1-D list")
    if not np.all(np.isfinite(y)):
        raise ValueError("labels must be finite")
    y = np.sort(y)
    n = y.size
    coeff = 2.0 * np.arange(n, dtype=np.float64) - (n - 1)
    return float(2.0 * np.sum(coeff * y)) / (n * n)


# ---- relaxation search ----


def default_t_grid(train_samples, metric: str, points: int = 64) -> list[float]:
    """Evenly spaced grid from 0 to the 95th percentile of observed q_l - q_s."""
    if points < 1:
        raise ValueError(f"points must be >= 1, got {points}")
    diffs = []
    for sample in _checked_samples(train_samples):
        s = _sample_array(sample.quality(SMALL_SIDE, metric), "s_samples")
        l = _sample_array(sample.quality(LARGE_SIDE, metric), "l_samples")
        diffs.append((l[None, :] - s[:, None]).ravel())
    hi = float(np.percentile(np.concatenate(diffs), 95.0))
    if hi <= 0.0:
        return [0.0]
    return [float(t) for t in np.linspace(0.0, hi, points)]


def _trans_labels_for_grid(s: np.ndarray, l: np.ndarray, grid: np.ndarray) -> np.ndarray:
    # Same comparison form as label_trans (s >= l - t), evaluated for every t at once.
    hits = s[:, None, None] >= l[None, :, None] - grid[None, None, :]
    return hits.mean(axis=(0, 1))


def find_t_star(train_samples, metric: str, grid) -> tuple[float, list[tuple[float, float]]]:
    """Grid-search the relaxation level that maximizes transform_objective.

    Returns (t_star, curve) where curve lists (t, objective) for every grid
    point. Ties are broken toward the smallest t.
    """
    samples = _checked_samples(train_samples)
    g = np.asarray(list(grid), dtype=np.float64)
    if g.size == 0:
        raise ValueError("grid must be non-empty")
    if not np.all(np.isfinite(g)) or np.any(g < 0.0):
        raise ValueError("grid values must be finite reals >= 0")
    if np.any(np.diff(g) <= 0.0) and g.size > 1:
        raise ValueError("grid must be sorted strictly ascending")

    labels = np.empty((len(samples), g.size), dtype=np.float64)
    for k, sample in enumerate(samples):
        s = _sample_array(sample.quality(SMALL_SIDE, metric), "s_samples")
        l = _sample_array(sample.quality(LARGE_SIDE, metric), "l_samples")
        labels[k] = _trans_labels_for_grid(s, l, g)

    curve = [(float(t), transform_objective(labels[:, j])) for j, t in enumerate(g)]
    objectives = np.array([obj for _, obj in curve])
    best = int(np.argmax(objectives))  # first maximum = smallest t on ties
    return curve[best][0], curve


def _checked_samples(samples) -> list[QuerySample]:
    out = list(samples)
    if not out:
        raise ValueError("need at least one sample")
    return out


# ---- batch labeling ----


def label_sample(sample: QuerySample, metric: str, scheme: LabelScheme) -> float:
    s = sample.quality(SMALL_SIDE, metric)
    l = sample.quality(LARGE_SIDE, metric)
    if scheme.kind == "deterministic":
        return float(label_det(s[0], l[0]))
    if scheme.kind == "probabilistic":
        return label_prob(s, l)
    return label_trans(s, l, scheme.t)


def build_labels(samples, metric: str, scheme: LabelScheme, threads: int = 1) -> list[LabeledExample]:
    """Label every sample under one scheme, preserving input order.

    ``threads`` > 1 computes per-query labels in a thread pool; results are
    assembled in input order, so the output is identical either way.
    """
    items = _checked_samples(samples)
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    if threads == 1:
        values = [label_sample(s, metric, scheme) for s in items]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            values = list(pool.map(lambda s: label_sample(s, metric, scheme), items))
    return [LabeledExample(s.id, v) for s, v in zip(items, values)]


def estimate_gap(sample: QuerySample, metric: str) -> GapEstimate:
    s = _sample_array(sample.quality(SMALL_SIDE, metric), "s_samples")
    l = _sample_array(sample.quality(LARGE_SIDE, metric), "l_samples")
    mean_gap = float(np.mean(s[:, None] - l[None, :]))
    return GapEstimate(sample.id, mean_gap, tuple(float(v) for v in s), tuple(float(v) for v in l))


# ---- label artifacts ----


def save_labels(examples, scheme: LabelScheme, path) -> None:
    """Write label records as JSONL: one {query_id, scheme, t, label} per line."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for ex in examples:
            record = {"query_id": ex.query_id, "scheme": scheme.kind, "t": scheme.t, "label": ex.label}
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_labels(path) -> tuple[LabelScheme, list[LabeledExample]]:
    """Read a label artifact back; all records must share one scheme."""
    path = Path(path)
    scheme = None
    examples = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            record = json.loads(line)
            this = LabelScheme(record["scheme"], float(record["t"]))
            if scheme is None:
                scheme = this
            elif this != scheme:
                raise SchemaError(f"{path.name} line {lineno}: mixed label schemes in one artifact")
            examples.append(LabeledExample(record["query_id"], float(record["label"])))
    if scheme is None:
        raise SchemaError(f"{path.name}: empty label artifact")
    return scheme, examples
