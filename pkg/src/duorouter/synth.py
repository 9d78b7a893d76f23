"""Seeded synthetic datasets with known routing structure.

Three presets, ten quality samples per side, split 70/15/15 in order:

* ``separable``: half the queries carry a marker token; exactly those
  queries lose nothing when routed small (their win fraction is >= 0.55),
  while the rest are far worse on the small model (win fraction 0.0), so
  text features separate the classes perfectly.
* ``gap_correlated``: each query has a latent difficulty u in [0, 1),
  exposed as a level token; the small-vs-large gap grows linearly with u
  and is negative for all but the easiest few percent, giving the heavily
  skewed win-probability labels the transformed scheme is built for.
* ``symmetric_random``: both sides draw from one distribution, independent
  of the text, so labels hover around one half and nothing is learnable.
"""

import numpy as np

from .dataset import Dataset, QualitySamples, QuerySample

PRESETS = ("separable", "gap_correlated", "symmetric_random")

MARKER_TOKEN = "quokka"
LEVELS = 20
SAMPLES_PER_SIDE = 10

_FILLER = (
    "the a an of to in on for with about over under between through during "
    "please explain describe compare summarize outline draft review list rank "
    "report detail note value system method result model data case study plan"
).split()


def _words(rng: np.random.Generator, count: int) -> list[str]:
    return [_FILLER[i] for i in rng.integers(0, len(_FILLER), size=count)]


def _splits(n: int) -> list[str]:
    n_val = int(n * 0.15)
    n_test = int(n * 0.15)
    n_train = n - n_val - n_test
    return ["train"] * n_train + ["validation"] * n_val + ["test"] * n_test


def _quality(metric: str, values: np.ndarray) -> QualitySamples:
    return QualitySamples(metric, tuple(float(v) for v in values))


def generate(preset: str, n: int, seed: int = 0) -> Dataset:
    """Build a synthetic dataset; identical (preset, n, seed) gives identical data."""
    if preset not in PRESETS:
        raise ValueError(f"preset must be one of {PRESETS}, got {preset!r}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    splits = _splits(n)
    samples = []
    for i in range(n):
        text_words = _words(rng, int(rng.integers(5, 10)))
        if preset == "separable":
            marked = bool(rng.random() < 0.5)
            l_vals = rng.uniform(-2.0, -1.5, SAMPLES_PER_SIDE)
            if marked:
                # Marked queries cost nothing to route small: the small side
                # repeats the large side's values, so the win fraction over
                # ordered pairs is at least 0.55 by construction.
                text_words.insert(int(rng.integers(0, len(text_words) + 1)), MARKER_TOKEN)
                s_vals = l_vals.copy()
            else:
                # Unmarked queries: the small model is strictly, badly worse.
                s_vals = rng.uniform(-9.0, -8.0, SAMPLES_PER_SIDE)
            small = {"bart_score": _quality("bart_score", s_vals)}
            large = {"bart_score": _quality("bart_score", l_vals)}
        elif preset == "gap_correlated":
            u = float(rng.random())
            level = min(int(u * LEVELS), LEVELS - 1)
            text_words.insert(int(rng.integers(0, len(text_words) + 1)), f"lvl{level:02d}")
            gap = 2.0 * u - 1.9
            s_vals = rng.normal(-2.0 + gap, 0.12, SAMPLES_PER_SIDE)
            l_vals = rng.normal(-2.0, 0.12, SAMPLES_PER_SIDE)
            small = {
                "bart_score": _quality("bart_score", s_vals),
                "judge_score": _quality("judge_score", 0.4 * s_vals + rng.normal(0.0, 0.02, SAMPLES_PER_SIDE)),
            }
            large = {
                "bart_score": _quality("bart_score", l_vals),
                "judge_score": _quality("judge_score", 0.4 * l_vals + rng.normal(0.0, 0.02, SAMPLES_PER_SIDE)),
            }
        else:  # symmetric_random
            s_vals = rng.normal(-2.0, 0.4, SAMPLES_PER_SIDE)
            l_vals = rng.normal(-2.0, 0.4, SAMPLES_PER_SIDE)
            small = {"bart_score": _quality("bart_score", s_vals)}
            large = {"bart_score": _quality("bart_score", l_vals)}
        samples.append(
            QuerySample(
                id=f"{preset}-{i:05d}",
                query_text=" ".join(text_words),
                split=splits[i],
                small=small,
                large=large,
            )
        )
    return Dataset(tuple(samples), samples[0].metrics(), None)
