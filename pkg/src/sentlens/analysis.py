"""Language vectors, linear probes and rank correlation on frozen vectors.

A language vector is the per-dimension variance of unit-normalized sentence
vectors from one language, characterizing the language independently of its
particular sentences. The probe is a multinomial logistic regression fit on
a small deterministic split of frozen vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .retrieval import ZeroVectorError
from .tensor import ConfigError, DimensionError

__all__ = [
    "LanguageVector",
    "ProbeModel",
    "language_vector",
    "probe_train",
    "probe_eval",
    "spearman",
    "export_projection_input",
    "read_projection_file",
]


@dataclass
class LanguageVector:
    lang: str
    variances: np.ndarray  # per-dimension, population (divide-by-N) variance
    count: int


@dataclass
class ProbeModel:
    weights: np.ndarray  # (D, C)
    bias: np.ndarray  # (C,)
    labels: list  # class label table; column c of weights scores labels[c]


def language_vector(vectors: np.ndarray, lang: str = "") -> LanguageVector:
    """Unit-normalize each row, then take the per-dimension variance."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] < 2:
        raise DimensionError("need at least 2 vectors for a language vector")
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    if np.any(norms == 0):
        bad = int(np.nonzero(norms[:, 0] == 0)[0][0])
        raise ZeroVectorError(f"row {bad} has zero norm")
    unit = vectors / norms
    return LanguageVector(lang, unit.var(axis=0), vectors.shape[0])


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def probe_train(vectors: np.ndarray, labels, train_fraction: float = 0.01,
                seed: int = 0, iterations: int = 500, step_size: float = 1.0,
                l2: float = 1e-4) -> ProbeModel:
    """Fit a multinomial logistic probe on a small split of the vectors.

    The split is stratified per class (at least one example each) and
    deterministic in ``seed``. Full-batch gradient descent with a fixed
    step and light L2; the probe only needs to support relative accuracy
    comparisons.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    if vectors.ndim != 2 or labels.shape != (vectors.shape[0],):
        raise DimensionError("vectors must be (N, D) with one label per row")
    classes = sorted(set(labels.tolist()))
    if len(classes) < 2:
        raise ConfigError("probe needs at least 2 classes")
    if not 0.0 < train_fraction <= 1.0:
        raise ConfigError("train_fraction must lie in (0, 1]")

    rng = np.random.default_rng(seed)
    take = []
    for cls in classes:
        members = np.nonzero(labels == cls)[0]
        if members.size == 0:
            raise ConfigError(f"class {cls!r} has no examples")
        rng.shuffle(members)
        take.extend(members[:max(1, int(round(train_fraction * members.size)))])
    take = np.sort(np.array(take))

    X = vectors[take]
    class_pos = {cls: i for i, cls in enumerate(classes)}
    y = np.array([class_pos[label] for label in labels[take]])
    n, d = X.shape
    c = len(classes)
    onehot = np.zeros((n, c))
    onehot[np.arange(n), y] = 1.0

    W = np.zeros((d, c))
    b = np.zeros(c)
    for _ in range(iterations):
        p = _softmax(X @ W + b)
        err = (p - onehot) / n
        W -= step_size * (X.T @ err + l2 * W)
        b -= step_size * err.sum(axis=0)
    return ProbeModel(W, b, classes)


def probe_eval(model: ProbeModel, vectors: np.ndarray, labels) -> float:
    """Fraction of vectors whose argmax class matches the label."""
    vectors = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    known = set(model.labels)
    for label in labels.tolist():
        if label not in known:
            raise ConfigError(f"unknown label {label!r}")
    scores = vectors @ model.weights + model.bias
    predicted = np.asarray(model.labels, dtype=labels.dtype)[scores.argmax(axis=1)]
    return float(np.mean(predicted == labels))


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks starting at 1; ties share the average of their positions."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(predicted, gold) -> float:
    """Spearman rho: Pearson correlation of average-ranked data."""
    predicted = np.asarray(predicted, dtype=np.float64)
    gold = np.asarray(gold, dtype=np.float64)
    if predicted.shape != gold.shape or predicted.ndim != 1 or len(predicted) < 2:
        raise DimensionError("need two equal-length score vectors of length >= 2")
    ra = _average_ranks(predicted)
    rb = _average_ranks(gold)
    da = ra - ra.mean()
    db = rb - rb.mean()
    denom = np.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0:
        raise ConfigError("correlation undefined for constant input")
    return float((da * db).sum() / denom)


def export_projection_input(vectors: np.ndarray, labels, path) -> None:
    """TSV for external projection tools: label column + D value columns."""
    vectors = np.asarray(vectors)
    labels = list(labels)
    if vectors.ndim != 2 or len(labels) != vectors.shape[0]:
        raise DimensionError("one label per vector row required")
    d = vectors.shape[1]
    with open(path, "w", encoding="utf-8") as f:
        f.write("label\t" + "\t".join(f"v{i}" for i in range(d)) + "\n")
        for label, row in zip(labels, vectors):
            f.write(str(label) + "\t" + "\t".join(repr(float(x)) for x in row) + "\n")


def read_projection_file(path):
    """Parse a projection TSV back into (labels, vectors)."""
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().rstrip("\n").split("\t")
        labels, rows = [], []
        for line in f:
            cols = line.rstrip("\n").split("\t")
            if len(cols) != len(header):
                raise DimensionError(f"row width {len(cols)} != header width {len(header)}")
            labels.append(cols[0])
            rows.append([float(x) for x in cols[1:]])
    return labels, np.array(rows, dtype=np.float64)
