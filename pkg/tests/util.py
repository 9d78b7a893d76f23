"""Shared fixture builders for the test suite."""

from __future__ import annotations

import numpy as np

from duorouter.dataset import QualitySamples, QuerySample
from duorouter.labeling import LabelScheme
from duorouter.router import FeaturizerConfig, RouterModel


def make_sample(
    sample_id: str,
    s_values,
    l_values,
    *,
    text: str | None = None,
    split: str = "train",
    metric: str = "bart_score",
    embedding=None,
) -> QuerySample:
    """One QuerySample with a single metric on both sides."""
    return QuerySample(
        id=sample_id,
        query_text=text if text is not None else f"query {sample_id}",
        split=split,
        small={metric: QualitySamples(metric, tuple(float(v) for v in s_values))},
        large={metric: QualitySamples(metric, tuple(float(v) for v in l_values))},
        embedding=None if embedding is None else tuple(float(v) for v in embedding),
    )


def make_multi_sample(sample_id: str, sides: dict, *, text: str | None = None, split: str = "train") -> QuerySample:
    """QuerySample with several metrics; sides maps metric -> (s_values, l_values)."""
    small = {m: QualitySamples(m, tuple(float(v) for v in s)) for m, (s, _) in sides.items()}
    large = {m: QualitySamples(m, tuple(float(v) for v in l)) for m, (_, l) in sides.items()}
    return QuerySample(
        id=sample_id,
        query_text=text if text is not None else f"query {sample_id}",
        split=split,
        small=small,
        large=large,
    )


def make_model(weights, bias: float = 0.0, *, kind: str = "external_embedding", l2: float = 0.0, scheme: LabelScheme | None = None) -> RouterModel:
    """Router model with hand-set weights, for closed-form scoring tests."""
    w = np.asarray(weights, dtype=np.float64)
    return RouterModel(
        featurizer=FeaturizerConfig(kind=kind, dim=w.size),
        weights=w,
        bias=float(bias),
        scheme=scheme if scheme is not None else LabelScheme("probabilistic"),
        training_meta={"l2": l2},
    )


def random_samples(rng: np.random.Generator, n: int, *, split: str = "train", metric: str = "bart_score", per_side: int = 6) -> list[QuerySample]:
    """Random quality fixtures with no planted structure."""
    out = []
    for i in range(n):
        s = rng.normal(-2.0, 1.0, per_side)
        l = rng.normal(-2.0, 1.0, per_side)
        out.append(make_sample(f"q{i:04d}", s, l, split=split, metric=metric))
    return out
