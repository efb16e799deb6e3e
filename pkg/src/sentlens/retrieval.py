"""Cosine matching, margin-based mining, threshold calibration, binarization.

Scores for mining use the ratio margin: the candidate cosine divided by the
mean cosine of both items' k-nearest neighborhoods (k = 4 by default), which
counteracts hubness. Candidate generation is bidirectional (best target per
source and best source per target), deduplicated, thresholded and then made
one-to-one greedily in descending score order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .tensor import ConfigError, DimensionError

__all__ = [
    "ZeroVectorError",
    "SimilarityMatrix",
    "MarginConfig",
    "MiningResult",
    "cosine_matrix",
    "match_error",
    "gold_columns",
    "knn",
    "margin_score",
    "mine_pairs",
    "f1_score",
    "calibrate_threshold",
    "binarize",
    "binary_similarity_matrix",
]

DIRECTION_POLICY = "bidirectional-union-greedy-1to1"


class ZeroVectorError(ValueError):
    """A vector with zero norm cannot be cosine-scored."""


@dataclass
class SimilarityMatrix:
    """Dense score matrix with the ids of its rows and columns.

    ``flagged`` marks entries whose margin denominator was not positive;
    those scores are set to -inf and never become mining candidates.
    """

    scores: np.ndarray
    row_ids: list[int]
    col_ids: list[int]
    flagged: np.ndarray | None = None

    def __post_init__(self):
        n, m = self.scores.shape
        if len(self.row_ids) != n or len(self.col_ids) != m:
            raise DimensionError("id index lengths do not match the score matrix")


@dataclass(frozen=True)
class MarginConfig:
    k: int = 4
    kind: str = "ratio"

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("neighborhood size k must be >= 1")
        if self.kind != "ratio":
            raise ConfigError(f"margin kind {self.kind!r} is reserved; only 'ratio' is implemented")


@dataclass
class MiningResult:
    candidates: list[tuple]  # (src_id, tgt_id, score), sorted by descending score
    threshold: float
    direction_policy: str = DIRECTION_POLICY


def _check_rows(mat: np.ndarray, ids, side: str) -> None:
    norms = np.linalg.norm(mat, axis=1)
    zero = np.nonzero(norms == 0)[0]
    if zero.size:
        i = int(zero[0])
        name = ids[i] if ids is not None else i
        raise ZeroVectorError(f"{side} vector id {name} has zero norm")


def cosine_matrix(A: np.ndarray, B: np.ndarray, row_ids=None, col_ids=None,
                  threads: int = 1) -> SimilarityMatrix:
    """All-pairs cosine similarity of the rows of A (N x D) and B (M x D)."""
    A = np.asarray(A, dtype=np.float32)
    B = np.asarray(B, dtype=np.float32)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise DimensionError(f"vector matrices disagree: {A.shape} vs {B.shape}")
    _check_rows(A, row_ids, "source")
    _check_rows(B, col_ids, "target")
    An = A / np.linalg.norm(A, axis=1, keepdims=True)
    Bn = B / np.linalg.norm(B, axis=1, keepdims=True)
    scores = np.empty((A.shape[0], B.shape[0]), dtype=np.float32)

    def fill(rows):
        scores[rows] = An[rows] @ Bn.T

    if threads <= 1 or A.shape[0] < 2:
        fill(slice(None))
    else:
        # disjoint row blocks keep the result independent of thread count
        blocks = np.array_split(np.arange(A.shape[0]), threads)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for fut in [pool.submit(fill, blk) for blk in blocks]:
                fut.result()
    if row_ids is None:
        row_ids = list(range(A.shape[0]))
    if col_ids is None:
        col_ids = list(range(B.shape[0]))
    return SimilarityMatrix(scores, list(row_ids), list(col_ids))


def gold_columns(sim: SimilarityMatrix, gold_pairs) -> np.ndarray:
    """Convert (src_id, tgt_id) gold pairs into a per-row column index."""
    row_pos = {rid: i for i, rid in enumerate(sim.row_ids)}
    col_pos = {cid: j for j, cid in enumerate(sim.col_ids)}
    cols = np.full(len(sim.row_ids), -1, dtype=np.int64)
    for src, tgt in gold_pairs:
        if src not in row_pos or tgt not in col_pos:
            raise DimensionError(f"gold pair ({src}, {tgt}) not covered by the matrix ids")
        cols[row_pos[src]] = col_pos[tgt]
    if np.any(cols < 0):
        missing = sim.row_ids[int(np.nonzero(cols < 0)[0][0])]
        raise DimensionError(f"no gold target for source id {missing}")
    return cols


def match_error(scores, gold) -> float:
    """Fraction of rows whose argmax column differs from the gold column."""
    S = scores.scores if isinstance(scores, SimilarityMatrix) else np.asarray(scores)
    gold = np.asarray(gold, dtype=np.int64)
    if gold.shape != (S.shape[0],):
        raise DimensionError(f"gold shape {gold.shape} != ({S.shape[0]},)")
    if gold.min() < 0 or gold.max() >= S.shape[1]:
        raise DimensionError("gold column index out of range")
    predicted = S.argmax(axis=1)  # ties resolve to the lowest column index
    return float(np.mean(predicted != gold))


def knn(scores, k: int, axis: str = "rows"):
    """Exact top-k along rows or columns; ties broken by lower index.

    Returns (indices, values), each (N, k) for rows or (M, k) for columns.
    """
    S = scores.scores if isinstance(scores, SimilarityMatrix) else np.asarray(scores)
    if axis not in ("rows", "cols"):
        raise ConfigError(f"axis must be 'rows' or 'cols', got {axis!r}")
    mat = S if axis == "rows" else S.T
    if not 1 <= k <= mat.shape[1]:
        raise DimensionError(f"k={k} out of range for {mat.shape[1]} candidates")
    order = np.argsort(-mat, axis=1, kind="stable")[:, :k]
    values = np.take_along_axis(mat, order, axis=1)
    return order, values


def margin_score(sim: SimilarityMatrix, cfg: MarginConfig = MarginConfig()) -> SimilarityMatrix:
    """Ratio-margin scores: cos(x, y) over the mean of both k-neighborhoods.

    Neighborhoods live in the opposite corpus and may contain the candidate
    itself. Entries with a non-positive denominator (possible with negative
    cosines) are flagged and set to -inf.
    """
    S = sim.scores
    n, m = S.shape
    if cfg.k >= m or cfg.k >= n:
        raise DimensionError(f"k={cfg.k} must be smaller than both corpus sizes {n}, {m}")
    _, row_top = knn(S, cfg.k, axis="rows")
    _, col_top = knn(S, cfg.k, axis="cols")
    denom = (row_top.mean(axis=1)[:, None] + col_top.mean(axis=1)[None, :]) / 2.0
    flagged = denom <= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        scores = np.where(flagged, -np.inf, S / denom).astype(np.float32)
    return SimilarityMatrix(scores, list(sim.row_ids), list(sim.col_ids),
                            flagged=flagged if flagged.any() else None)


def _candidate_list(scored: SimilarityMatrix):
    """Bidirectional best-neighbor candidates as (row, col, score), deduplicated."""
    S = scored.scores
    seen = {}
    for i, j in enumerate(S.argmax(axis=1)):
        s = S[i, j]
        if np.isfinite(s):
            seen[(i, int(j))] = float(s)
    for j, i in enumerate(S.argmax(axis=0)):
        s = S[i, j]
        if np.isfinite(s):
            key = (int(i), j)
            if key not in seen or seen[key] < s:
                seen[key] = float(s)
    return sorted(seen.items(), key=lambda kv: (-kv[1], kv[0][0], kv[0][1]))


def _greedy_one_to_one(candidates):
    used_rows, used_cols = set(), set()
    kept = []
    for (i, j), s in candidates:
        if i in used_rows or j in used_cols:
            continue
        used_rows.add(i)
        used_cols.add(j)
        kept.append((i, j, s))
    return kept


def mine_pairs(scored: SimilarityMatrix, threshold: float) -> MiningResult:
    """Candidates above ``threshold``, one-to-one, in descending score order."""
    if not np.isfinite(threshold):
        if threshold > 0:  # +inf mines nothing
            return MiningResult([], float(threshold))
        threshold = -np.inf
    candidates = [(ij, s) for ij, s in _candidate_list(scored) if s >= threshold]
    kept = _greedy_one_to_one(candidates)
    out = [(scored.row_ids[i], scored.col_ids[j], s) for i, j, s in kept]
    return MiningResult(out, float(threshold))


def f1_score(candidates, gold) -> tuple[float, float, float]:
    """Set-based precision / recall / F1 over exact (src_id, tgt_id) pairs."""
    if isinstance(candidates, MiningResult):
        candidates = candidates.candidates
    predicted = {(c[0], c[1]) for c in candidates}
    gold_set = {(g[0], g[1]) for g in gold}
    if not gold_set:
        raise DimensionError("gold pair set must be nonempty")
    hits = len(predicted & gold_set)
    precision = hits / len(predicted) if predicted else 0.0
    recall = hits / len(gold_set)
    f1 = 2 * precision * recall / (precision + recall) if hits else 0.0
    return precision, recall, f1


def calibrate_threshold(scored: SimilarityMatrix, gold):
    """Pick the mining threshold that maximizes F1 against gold pairs.

    F1 is piecewise constant in the threshold, so sweeping the distinct
    candidate scores is exhaustive. Greedy one-to-one selection in
    descending order makes the mined set at any threshold a prefix of the
    full mined list. Ties prefer the larger threshold. Returns
    (best_threshold, best_f1, sweep) where sweep rows are
    (threshold, precision, recall, f1).
    """
    gold_set = {(g[0], g[1]) for g in gold}
    if not gold_set:
        raise DimensionError("gold pair set must be nonempty")
    mined = mine_pairs(scored, -np.inf).candidates
    sweep = []
    best = (-1.0, np.inf, 0.0, 0.0)  # (f1, tau, precision, recall)
    hits = 0
    n_gold = len(gold_set)
    for idx, (src, tgt, score) in enumerate(mined):
        if (src, tgt) in gold_set:
            hits += 1
        if idx + 1 < len(mined) and mined[idx + 1][2] == score:
            continue  # same threshold admits the whole tie group
        precision = hits / (idx + 1)
        recall = hits / n_gold
        f1 = 2 * precision * recall / (precision + recall) if hits else 0.0
        sweep.append((score, precision, recall, f1))
        if f1 > best[0]:
            best = (f1, score, precision, recall)
    if not sweep:
        return np.inf, 0.0, []
    return best[1], best[0], sweep


def binarize(vectors: np.ndarray, theta: float = 1.0):
    """Threshold vectors into bits; returns (bits, mean active fraction)."""
    vectors = np.asarray(vectors)
    if not np.isfinite(theta):
        bits = (np.zeros_like(vectors, dtype=np.uint8) if theta > 0
                else np.ones_like(vectors, dtype=np.uint8))
    else:
        bits = (vectors >= theta).astype(np.uint8)
    return bits, float(bits.mean())


def binary_similarity_matrix(bits_a: np.ndarray, bits_b: np.ndarray,
                             row_ids=None, col_ids=None) -> SimilarityMatrix:
    """Bit-vector similarity: shared bits over the popcount geometric mean.

    Rows with zero popcount get similarity 0 against everything.
    """
    A = np.asarray(bits_a, dtype=np.float32)
    B = np.asarray(bits_b, dtype=np.float32)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise DimensionError(f"bit matrices disagree: {A.shape} vs {B.shape}")
    pa = A.sum(axis=1)
    pb = B.sum(axis=1)
    norm = np.sqrt(np.outer(pa, pb))
    with np.errstate(divide="ignore", invalid="ignore"):
        scores = np.where(norm > 0, (A @ B.T) / norm, 0.0).astype(np.float32)
    if row_ids is None:
        row_ids = list(range(A.shape[0]))
    if col_ids is None:
        col_ids = list(range(B.shape[0]))
    return SimilarityMatrix(scores, list(row_ids), list(col_ids))
