"""JSONL dataset loading, validation, and serialization.

A dataset file holds one JSON record per line (UTF-8). An optional first
record under the key ``meta`` declares the embedding dimension and the
metric names every sample must carry::

    {"meta": {"embedding_dim": 4, "metrics": ["bart_score"]}}
    {"id": "q1", "query_text": "...", "split": "train",
     "small": {"bart_score": [-2.1, -1.9]},
     "large": {"bart_score": [-1.2]},
     "embedding": [0.1, 0.2, 0.0, -0.3]}

Quality values are raw metric readings, higher is better. Loading is pure:
the same bytes always produce the same Dataset, and serializing a loaded
Dataset and reloading it yields an identical Dataset.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

SPLITS = ("train", "validation", "test")

SMALL_SIDE = "small"
LARGE_SIDE = "large"


class ParseError(ValueError):
    """A line is not valid JSON or not a JSON object."""


class SchemaError(ValueError):
    """A record violates the dataset schema (ids, splits, metrics, embeddings)."""


@dataclass(frozen=True)
class QualitySamples:
    """Raw quality readings for one (query, model, metric) triple."""

    metric_name: str
    values: tuple[float, ...]

    def __post_init__(self):
        if not self.values:
            raise SchemaError(f"metric {self.metric_name!r}: values must be non-empty")
        coerced = []
        for v in self.values:
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(float(v)):
                raise SchemaError(
                    f"metric {self.metric_name!r}: values must be finite reals, got {v!r}"
                )
            coerced.append(float(v))
        object.__setattr__(self, "values", tuple(coerced))


@dataclass(frozen=True)
class QuerySample:
    """One query with per-metric quality samples from both models."""

    id: str
    query_text: str
    split: str
    small: dict[str, QualitySamples]
    large: dict[str, QualitySamples]
    embedding: tuple[float, ...] | None = None

    def quality(self, side: str, metric: str) -> tuple[float, ...]:
        """Quality values for ``side`` ("small" or "large") under ``metric``."""
        table = {SMALL_SIDE: self.small, LARGE_SIDE: self.large}[side]
        try:
            return table[metric].values
        except KeyError:
            raise SchemaError(f"sample {self.id!r} has no {side} samples for metric {metric!r}")

    def metrics(self) -> frozenset[str]:
        return frozenset(self.small)


@dataclass(frozen=True)
class Dataset:
    """An immutable collection of query samples, in file order."""

    samples: tuple[QuerySample, ...]
    declared_metrics: frozenset[str]
    embedding_dim: int | None = None

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)


# ---- record-level validation ----


def _as_float_list(raw, where: str) -> tuple[float, ...]:
    if not isinstance(raw, list) or not raw:
        raise SchemaError(f"{where}: expected a non-empty list of numbers")
    out = []
    for v in raw:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(float(v)):
            raise SchemaError(f"{where}: expected finite numbers, got {v!r}")
        out.append(float(v))
    return tuple(out)


def _parse_side(raw, sample_id: str, side: str) -> dict[str, QualitySamples]:
    if not isinstance(raw, dict) or not raw:
        raise SchemaError(f"sample {sample_id!r}: {side!r} must be a non-empty metric map")
    out = {}
    for metric, values in raw.items():
        if not isinstance(metric, str) or not metric:
            raise SchemaError(f"sample {sample_id!r}: metric names must be non-empty strings")
        out[metric] = QualitySamples(metric, _as_float_list(values, f"sample {sample_id!r} {side}.{metric}"))
    return out


def parse_sample(record: dict) -> QuerySample:
    """Validate one JSON record and build a QuerySample."""
    if not isinstance(record, dict):
        raise SchemaError(f"record must be a JSON object, got {type(record).__name__}")
    sample_id = record.get("id")
    if not isinstance(sample_id, str) or not sample_id:
        raise SchemaError(f"record id must be a non-empty string, got {sample_id!r}")
    text = record.get("query_text")
    if not isinstance(text, str):
        raise SchemaError(f"sample {sample_id!r}: query_text must be a string")
    split = record.get("split")
    if split not in SPLITS:
        raise SchemaError(f"sample {sample_id!r}: split must be one of {SPLITS}, got {split!r}")
    small = _parse_side(record.get("small"), sample_id, SMALL_SIDE)
    large = _parse_side(record.get("large"), sample_id, LARGE_SIDE)
    if set(small) != set(large):
        missing = set(small).symmetric_difference(large)
        raise SchemaError(
            f"sample {sample_id!r}: metrics must appear on both sides, mismatched: {sorted(missing)}"
        )
    embedding = None
    if record.get("embedding") is not None:
        embedding = _as_float_list(record["embedding"], f"sample {sample_id!r} embedding")
    unknown = set(record) - {"id", "query_text", "split", "small", "large", "embedding"}
    if unknown:
        raise SchemaError(f"sample {sample_id!r}: unknown keys {sorted(unknown)}")
    return QuerySample(sample_id, text, split, small, large, embedding)


# ---- file I/O ----


def load_dataset(path, expected_metrics=None) -> Dataset:
    """Load and validate a JSONL dataset file.

    ``expected_metrics``, when given, is a collection of metric names every
    sample must carry (on top of any header declaration). Raises ParseError
    for malformed lines (with the line number) and SchemaError for duplicate
    ids, bad splits, missing metrics, or inconsistent embeddings.
    """
    path = Path(path)
    samples: list[QuerySample] = []
    seen_ids: set[str] = set()
    header = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path.name} line {lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(record, dict):
                raise ParseError(f"{path.name} line {lineno}: expected a JSON object")
            if "meta" in record:
                if samples or header is not None:
                    raise SchemaError(f"{path.name} line {lineno}: meta header must be the first record")
                header = _parse_header(record["meta"])
                continue
            try:
                sample = parse_sample(record)
            except SchemaError as exc:
                raise SchemaError(f"{path.name} line {lineno}: {exc}") from exc
            if sample.id in seen_ids:
                raise SchemaError(f"{path.name} line {lineno}: duplicate id {sample.id!r}")
            seen_ids.add(sample.id)
            samples.append(sample)

    declared = header["metrics"] if header else None
    embedding_dim = header["embedding_dim"] if header else None

    if declared is None:
        declared = samples[0].metrics() if samples else frozenset()
    if embedding_dim is None:
        for s in samples:
            if s.embedding is not None:
                embedding_dim = len(s.embedding)
                break

    required = set(declared)
    if expected_metrics is not None:
        required |= set(expected_metrics)
    for s in samples:
        missing = required - set(s.small)
        if missing:
            raise SchemaError(f"sample {s.id!r}: missing metric {sorted(missing)[0]!r}")
        if s.embedding is not None and embedding_dim is not None and len(s.embedding) != embedding_dim:
            raise SchemaError(
                f"sample {s.id!r}: embedding length {len(s.embedding)} != declared dim {embedding_dim}"
            )
    return Dataset(tuple(samples), frozenset(declared), embedding_dim)


def _parse_header(meta) -> dict:
    if not isinstance(meta, dict):
        raise SchemaError("meta header must be an object")
    metrics = meta.get("metrics")
    if metrics is not None:
        if not isinstance(metrics, list) or not all(isinstance(m, str) and m for m in metrics):
            raise SchemaError("meta.metrics must be a list of metric names")
        metrics = frozenset(metrics)
    dim = meta.get("embedding_dim")
    if dim is not None and (isinstance(dim, bool) or not isinstance(dim, int) or dim < 1):
        raise SchemaError(f"meta.embedding_dim must be a positive integer, got {dim!r}")
    unknown = set(meta) - {"metrics", "embedding_dim"}
    if unknown:
        raise SchemaError(f"meta header: unknown keys {sorted(unknown)}")
    return {"metrics": metrics, "embedding_dim": dim}


def sample_to_record(sample: QuerySample) -> dict:
    record = {
        "id": sample.id,
        "query_text": sample.query_text,
        "split": sample.split,
        "small": {m: list(qs.values) for m, qs in sample.small.items()},
        "large": {m: list(qs.values) for m, qs in sample.large.items()},
    }
    if sample.embedding is not None:
        record["embedding"] = list(sample.embedding)
    return record


def save_dataset(dataset: Dataset, path) -> None:
    """Write a dataset back to JSONL, header first. Output is byte-deterministic."""
    path = Path(path)
    meta = {"metrics": sorted(dataset.declared_metrics)}
    if dataset.embedding_dim is not None:
        meta["embedding_dim"] = dataset.embedding_dim
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"meta": meta}, sort_keys=True) + "\n")
        for sample in dataset.samples:
            fh.write(json.dumps(sample_to_record(sample), sort_keys=True) + "\n")


def split_view(dataset: Dataset, split: str) -> tuple[QuerySample, ...]:
    """Samples belonging to one split, preserving file order."""
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    return tuple(s for s in dataset.samples if s.split == split)
