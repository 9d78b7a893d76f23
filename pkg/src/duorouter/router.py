"""Linear probabilistic router: signed-hash text features, BCE training.

The router scores a query with sigmoid(w . x + b); scores near 1 mean the
small model is expected to hold up. Features come either from hashed word
n-grams of the query text (stable keyed hashing, so artifacts are portable
across processes) or from externally supplied embeddings.

Training minimizes clamped binary cross-entropy plus an L2 penalty with
mini-batch gradient descent. Everything is deterministic given the seed.
"""

import base64
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .dataset import QuerySample, SchemaError
from .labeling import LabeledExample, LabelScheme

FEATURIZER_KINDS = ("hashed_ngrams", "external_embedding")
BCE_EPS = 1e-7
MODEL_FORMAT = "duorouter-model"
MODEL_VERSION = 1

_NGRAM_JOIN = "\x1f"  # unit separator, keeps ("a b","c") distinct from ("a","b c")


class TrainingError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class FeaturizerConfig:
    kind: str = "hashed_ngrams"
    dim: int = 2**18
    ngram_min: int = 1
    ngram_max: int = 2
    hash_seed: int = 0
    lowercase: bool = True

    def __post_init__(self):
        if self.kind not in FEATURIZER_KINDS:
            raise ValueError(f"kind must be one of {FEATURIZER_KINDS}, got {self.kind!r}")
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if not (1 <= self.ngram_min <= self.ngram_max <= 3):
            raise ValueError(
                f"need 1 <= ngram_min <= ngram_max <= 3, got ({self.ngram_min}, {self.ngram_max})"
            )
        if not (0 <= self.hash_seed < 2**63):
            raise ValueError(f"hash_seed must be in [0, 2^63), got {self.hash_seed}")


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 5
    learning_rate: float = 0.1
    l2: float = 1e-6
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if not (math.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate!r}")
        if not (math.isfinite(self.l2) and self.l2 >= 0):
            raise ValueError(f"l2 must be >= 0, got {self.l2!r}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class RouterModel:
    featurizer: FeaturizerConfig
    weights: np.ndarray
    bias: float
    scheme: LabelScheme
    training_meta: dict
    thresholds: dict = field(default_factory=dict)


# ---- featurization ----


def _hash_token(token: str, seed: int) -> int:
    digest = hashlib.blake2b(
        token.encode("utf-8"), digest_size=8, key=seed.to_bytes(8, "little")
    ).digest()
    return int.from_bytes(digest, "little")


def _hashed_components(cfg: FeaturizerConfig, text: str) -> tuple[np.ndarray, np.ndarray]:
    """Aggregated (columns, values) of the signed-hash bag, L2-normalized.

    Shared by the dense and sparse paths so both produce bit-identical values.
    """
    tokens = (text.lower() if cfg.lowercase else text).split()
    counts: dict[int, float] = {}
    for n in range(cfg.ngram_min, cfg.ngram_max + 1):
        for i in range(len(tokens) - n + 1):
            h = _hash_token(_NGRAM_JOIN.join(tokens[i : i + n]), cfg.hash_seed)
            col = (h >> 1) % cfg.dim
            sign = 1.0 if h & 1 else -1.0
            counts[col] = counts.get(col, 0.0) + sign
    cols = np.array(sorted(c for c, v in counts.items() if v != 0.0), dtype=np.int64)
    vals = np.array([counts[c] for c in cols], dtype=np.float64)
    norm = math.sqrt(float(np.sum(vals * vals)))
    if norm > 0.0:
        vals = vals / norm
    return cols, vals


def featurize_text(cfg: FeaturizerConfig, text: str) -> np.ndarray:
    """Dense signed-hash n-gram vector for raw query text."""
    if cfg.kind != "hashed_ngrams":
        raise ValueError(f"featurize_text requires hashed_ngrams, got kind {cfg.kind!r}")
    cols, vals = _hashed_components(cfg, text)
    vec = np.zeros(cfg.dim, dtype=np.float64)
    vec[cols] = vals
    return vec


def featurize(cfg: FeaturizerConfig, sample: QuerySample) -> np.ndarray:
    """Dense feature vector for one sample under the configured featurizer."""
    if cfg.kind == "hashed_ngrams":
        return featurize_text(cfg, sample.query_text)
    if sample.embedding is None:
        raise SchemaError(f"sample {sample.id!r} has no embedding for external_embedding featurizer")
    vec = np.asarray(sample.embedding, dtype=np.float64)
    if vec.shape != (cfg.dim,):
        raise ValueError(f"sample {sample.id!r}: embedding dim {vec.size} != configured dim {cfg.dim}")
    return vec


def sparse_row(cfg: FeaturizerConfig, sample: QuerySample):
    """One-row sparse feature matrix; values identical to featurize()."""
    if cfg.kind != "hashed_ngrams":
        return featurize(cfg, sample)
    cols, vals = _hashed_components(cfg, sample.query_text)
    return sp.csr_matrix((vals, cols, [0, len(cols)]), shape=(1, cfg.dim))


def attach_features(examples: list[LabeledExample], cfg: FeaturizerConfig, samples) -> list[LabeledExample]:
    """Fill example.features by joining labels to samples on query_id.

    Hashed features are stored as sparse rows (the default dim is large);
    external embeddings stay dense.
    """
    by_id = {s.id: s for s in samples}
    for ex in examples:
        sample = by_id.get(ex.query_id)
        if sample is None:
            raise SchemaError(f"labeled example {ex.query_id!r} has no matching sample")
        ex.features = sparse_row(cfg, sample)
    return examples


# ---- scoring ----


def _sigmoid(z: float) -> float:
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def _sigmoid_vec(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def score(model: RouterModel, features) -> float:
    """sigmoid(w . x + b) for one feature vector (dense or one sparse row)."""
    if sp.issparse(features):
        if features.shape != (1, model.weights.size):
            raise ValueError(f"feature shape {features.shape} != (1, {model.weights.size})")
        z = float((features @ model.weights)[0]) + model.bias
    else:
        x = np.asarray(features, dtype=np.float64)
        if x.shape != model.weights.shape:
            raise ValueError(f"feature length {x.size} != weight length {model.weights.size}")
        z = float(np.dot(model.weights, x)) + model.bias
    return _sigmoid(z)


def score_sample(model: RouterModel, sample: QuerySample) -> float:
    return score(model, featurize(model.featurizer, sample))


def score_samples(model: RouterModel, samples) -> np.ndarray:
    """Score per sample via the single scalar path, in input order."""
    return np.array([score_sample(model, s) for s in samples], dtype=np.float64)


# ---- loss and training ----


def bce_loss(predictions, labels) -> float:
    """Binary cross-entropy with predictions clamped to [eps, 1-eps]."""
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape or p.ndim != 1 or p.size == 0:
        raise ValueError(f"predictions and labels must be equal-length non-empty 1-D, got {p.shape} vs {y.shape}")
    if np.any(y < 0.0) or np.any(y > 1.0) or not np.all(np.isfinite(y)):
        raise ValueError("labels must lie in [0, 1]")
    if not np.all(np.isfinite(p)):
        raise ValueError("predictions must be finite")
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    return float(-np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)))


def _stack_features(examples: list[LabeledExample]):
    rows = []
    for ex in examples:
        if ex.features is None:
            raise ValueError(f"example {ex.query_id!r} has no features attached")
        rows.append(ex.features)
    if all(sp.issparse(r) for r in rows):
        return sp.vstack(rows, format="csr")
    if any(sp.issparse(r) for r in rows):
        raise ValueError("examples mix sparse and dense features")
    return np.vstack([np.asarray(r, dtype=np.float64) for r in rows])


def _labels_array(examples: list[LabeledExample]) -> np.ndarray:
    y = np.array([ex.label for ex in examples], dtype=np.float64)
    if np.any(y < 0.0) or np.any(y > 1.0) or not np.all(np.isfinite(y)):
        raise ValueError("labels must lie in [0, 1]")
    return y


def _objective(X, y: np.ndarray, w: np.ndarray, b: float, l2: float) -> float:
    p = _sigmoid_vec(np.asarray(X @ w).ravel() + b)
    return bce_loss(p, y) + l2 * float(np.dot(w, w))


def train(
    examples: list[LabeledExample],
    cfg: FeaturizerConfig,
    hyper: TrainingConfig = TrainingConfig(),
    val_examples: list[LabeledExample] | None = None,
    scheme: LabelScheme = LabelScheme("probabilistic"),
) -> RouterModel:
    """Mini-batch gradient descent from zero weights; reproducible given the seed.

    The step size decays as learning_rate / sqrt(epoch). When val_examples is
    given, the epoch with the lowest validation BCE is kept (ties go to the
    earlier epoch); otherwise the final epoch wins.
    """
    if not examples:
        raise ValueError("need at least one training example")
    X = _stack_features(examples)
    y = _labels_array(examples)
    n = y.size
    w = np.zeros(cfg.dim, dtype=np.float64)
    b = 0.0
    rng = np.random.default_rng(hyper.seed)

    Xv = yv = None
    best = None  # (val_loss, epoch, weights, bias)
    if val_examples is not None:
        if not val_examples:
            raise ValueError("val_examples must be non-empty when given")
        Xv = _stack_features(val_examples)
        yv = _labels_array(val_examples)

    for epoch in range(1, hyper.epochs + 1):
        lr = hyper.learning_rate / math.sqrt(epoch)
        order = rng.permutation(n)
        for start in range(0, n, hyper.batch_size):
            batch = order[start : start + hyper.batch_size]
            Xb = X[batch]
            yb = y[batch]
            p = _sigmoid_vec(np.asarray(Xb @ w).ravel() + b)
            loss = bce_loss(p, yb) + hyper.l2 * float(np.dot(w, w))
            if not math.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {start // hyper.batch_size}"
                )
            g = p - yb
            grad_w = np.asarray(Xb.T @ g).ravel() / batch.size + 2.0 * hyper.l2 * w
            grad_b = float(np.mean(g))
            w = w - lr * grad_w
            b = b - lr * grad_b
        if Xv is not None:
            val_loss = bce_loss(_sigmoid_vec(np.asarray(Xv @ w).ravel() + b), yv)
            if best is None or val_loss < best[0]:
                best = (val_loss, epoch, w.copy(), b)

    meta = {
        "epochs": hyper.epochs,
        "learning_rate": hyper.learning_rate,
        "l2": hyper.l2,
        "batch_size": hyper.batch_size,
        "seed": hyper.seed,
    }
    if best is not None:
        _, meta["best_epoch"], w, b = best
        meta["val_loss"] = best[0]
    meta["final_loss"] = _objective(X, y, w, b, hyper.l2)
    return RouterModel(cfg, w, float(b), scheme, meta)


def gradient_check(examples: list[LabeledExample], model: RouterModel, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Diagnostic for small instances (at most 50 examples); the caller should
    keep predictions away from the BCE clamp region, where the clamped loss
    is flat and the analytic form intentionally disagrees.
    """
    if not examples or len(examples) > 50:
        raise ValueError(f"gradient_check wants 1..50 examples, got {len(examples)}")
    if not (math.isfinite(h) and h > 0.0):
        raise ValueError(f"h must be > 0, got {h!r}")
    X = _stack_features(examples)
    if sp.issparse(X):
        X = X.toarray()
    y = _labels_array(examples)
    l2 = float(model.training_meta.get("l2", 0.0))
    w = model.weights.astype(np.float64).copy()
    b = float(model.bias)

    p = _sigmoid_vec(X @ w + b)
    g = p - y
    analytic_w = X.T @ g / y.size + 2.0 * l2 * w
    analytic_b = float(np.mean(g))

    worst = 0.0

    def rel_err(a: float, f: float) -> float:
        return abs(a - f) / max(abs(a), abs(f), 1e-8)

    for i in range(w.size):
        orig = w[i]
        w[i] = orig + h
        hi = _objective(X, y, w, b, l2)
        w[i] = orig - h
        lo = _objective(X, y, w, b, l2)
        w[i] = orig
        worst = max(worst, rel_err(analytic_w[i], (hi - lo) / (2.0 * h)))
    hi = _objective(X, y, w, b + h, l2)
    lo = _objective(X, y, w, b - h, l2)
    worst = max(worst, rel_err(analytic_b, (hi - lo) / (2.0 * h)))
    return worst


# ---- model artifacts ----


def with_scheme(model: RouterModel, scheme: LabelScheme) -> RouterModel:
    return replace(model, scheme=scheme)


def save_model(model: RouterModel, path) -> None:
    """Write the model as deterministic JSON (weights as base64 IEEE-754)."""
    payload = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "featurizer": {
            "kind": model.featurizer.kind,
            "dim": model.featurizer.dim,
            "ngram_min": model.featurizer.ngram_min,
            "ngram_max": model.featurizer.ngram_max,
            "hash_seed": model.featurizer.hash_seed,
            "lowercase": model.featurizer.lowercase,
        },
        "weights_b64": base64.b64encode(
            np.ascontiguousarray(model.weights, dtype="<f8").tobytes()
        ).decode("ascii"),
        "bias": model.bias,
        "scheme": {"kind": model.scheme.kind, "t": model.scheme.t},
        "training_meta": model.training_meta,
        "thresholds": model.thresholds,
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def load_model(path) -> RouterModel:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path}: not a router model artifact")
    if payload.get("version") != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {payload.get('version')!r}")
    fz = payload["featurizer"]
    cfg = FeaturizerConfig(
        kind=fz["kind"],
        dim=int(fz["dim"]),
        ngram_min=int(fz["ngram_min"]),
        ngram_max=int(fz["ngram_max"]),
        hash_seed=int(fz["hash_seed"]),
        lowercase=bool(fz["lowercase"]),
    )
    weights = np.frombuffer(base64.b64decode(payload["weights_b64"]), dtype="<f8").copy()
    if weights.size != cfg.dim:
        raise ValueError(f"{path}: weight length {weights.size} != featurizer dim {cfg.dim}")
    scheme = LabelScheme(payload["scheme"]["kind"], float(payload["scheme"]["t"]))
    return RouterModel(
        cfg, weights, float(payload["bias"]), scheme,
        dict(payload.get("training_meta", {})), dict(payload.get("thresholds", {})),
    )


def record_calibration(model: RouterModel, metric: str, max_drop_pct: float, entry: dict) -> None:
    """Store a calibration entry under (metric, max_drop_pct) in the artifact table."""
    model.thresholds.setdefault(metric, {})[str(float(max_drop_pct))] = dict(entry)


def calibrated_threshold(model: RouterModel, metric: str) -> tuple[float, dict]:
    """Look up the calibration entry for a metric.

    When several max_drop_pct entries exist the smallest (most conservative)
    wins. Raises KeyError when the metric has no entry.
    """
    table = model.thresholds.get(metric)
    if not table:
        raise KeyError(f"model has no calibrated threshold for metric {metric!r}")
    key = min(table, key=float)
    entry = table[key]
    return float(entry["threshold"]), entry
