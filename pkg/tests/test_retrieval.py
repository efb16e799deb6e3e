import math

import numpy as np
import pytest

from sentlens.retrieval import (
    MarginConfig,
    MiningResult,
    SimilarityMatrix,
    ZeroVectorError,
    binarize,
    binary_similarity_matrix,
    calibrate_threshold,
    cosine_matrix,
    f1_score,
    gold_columns,
    knn,
    margin_score,
    match_error,
    mine_pairs,
)
from sentlens.tensor import ConfigError, DimensionError


# ---------------------------------------------------------------------------
# brute-force oracles (independent python re-implementations)
# ---------------------------------------------------------------------------

def oracle_cosine(A, B):
    out = np.zeros((len(A), len(B)))
    for i in range(len(A)):
        for j in range(len(B)):
            na = math.sqrt(sum(x * x for x in A[i]))
            nb = math.sqrt(sum(x * x for x in B[j]))
            out[i, j] = sum(x * y for x, y in zip(A[i], B[j])) / (na * nb)
    return out


def oracle_topk(row, k):
    order = sorted(range(len(row)), key=lambda j: (-row[j], j))[:k]
    return order, [row[j] for j in order]


def oracle_margin(S, k):
    n, m = S.shape
    out = np.zeros((n, m))
    flagged = np.zeros((n, m), dtype=bool)
    for i in range(n):
        for j in range(m):
            _, row_vals = oracle_topk(list(S[i, :]), k)
            _, col_vals = oracle_topk(list(S[:, j]), k)
            denom = sum(row_vals) / (2 * k) + sum(col_vals) / (2 * k)
            if denom <= 0:
                flagged[i, j] = True
                out[i, j] = -np.inf
            else:
                out[i, j] = S[i, j] / denom
    return out, flagged


def oracle_mine(scored, tau):
    S = scored.scores
    n, m = S.shape
    best = {}
    for i in range(n):
        j = oracle_topk(list(S[i, :]), 1)[0][0]
        if np.isfinite(S[i, j]):
            best[(i, j)] = float(S[i, j])
    for j in range(m):
        i = oracle_topk(list(S[:, j]), 1)[0][0]
        if np.isfinite(S[i, j]) and best.get((i, j), -np.inf) < S[i, j]:
            best[(i, j)] = float(S[i, j])
    picked = [(i, j, s) for (i, j), s in best.items() if s >= tau]
    picked.sort(key=lambda t: (-t[2], t[0], t[1]))
    rows, cols, kept = set(), set(), []
    for i, j, s in picked:
        if i not in rows and j not in cols:
            rows.add(i)
            cols.add(j)
            kept.append((scored.row_ids[i], scored.col_ids[j], s))
    return kept


def oracle_f1(predicted, gold):
    hits = sum(1 for p in predicted if (p[0], p[1]) in {(g[0], g[1]) for g in gold})
    p = hits / len(predicted) if predicted else 0.0
    r = hits / len(gold)
    return 2 * p * r / (p + r) if hits else 0.0


class TestCosineMatrix:
    def test_identical_unit_vectors(self):
        v = np.array([[1.0, 0.0]], dtype=np.float32)
        sim = cosine_matrix(v, v)
        assert sim.scores[0, 0] == pytest.approx(1.0)

    def test_orthogonal(self):
        a = np.array([[1.0, 0.0]], dtype=np.float32)
        b = np.array([[0.0, 1.0]], dtype=np.float32)
        assert cosine_matrix(a, b).scores[0, 0] == pytest.approx(0.0)

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(0)
        A = rng.standard_normal((50, 8))
        B = rng.standard_normal((60, 8))
        sim = cosine_matrix(A, B)
        np.testing.assert_allclose(sim.scores, oracle_cosine(A, B), atol=1e-6)

    def test_zero_row_names_id(self):
        A = np.array([[1.0, 0.0], [0.0, 0.0]], dtype=np.float32)
        with pytest.raises(ZeroVectorError) as err:
            cosine_matrix(A, A, row_ids=[10, 20], col_ids=[10, 20])
        assert "20" in str(err.value)

    def test_threads_equal_single(self):
        rng = np.random.default_rng(1)
        A = rng.standard_normal((37, 6)).astype(np.float32)
        B = rng.standard_normal((23, 6)).astype(np.float32)
        s1 = cosine_matrix(A, B, threads=1).scores
        s2 = cosine_matrix(A, B, threads=3).scores
        assert s1.tobytes() == s2.tobytes()

    def test_entries_in_unit_interval(self):
        rng = np.random.default_rng(2)
        A = rng.standard_normal((10, 4)).astype(np.float32)
        s = cosine_matrix(A, A).scores
        assert np.all(s <= 1.0 + 1e-6) and np.all(s >= -1.0 - 1e-6)


class TestMatchError:
    def test_identity_dominant(self):
        S = np.eye(4) + 0.1
        assert match_error(S, np.arange(4)) == 0.0

    def test_half_wrong(self):
        S = np.eye(4)
        gold = np.array([0, 1, 3, 2])  # last two point at swapped columns
        assert match_error(S, gold) == 0.5

    def test_out_of_range_gold(self):
        with pytest.raises(DimensionError):
            match_error(np.eye(3), [0, 1, 3])

    def test_ties_resolve_to_lowest_column(self):
        S = np.array([[0.5, 0.5]])
        assert match_error(S, [0]) == 0.0
        assert match_error(S, [1]) == 1.0

    def test_scale_invariance(self):
        rng = np.random.default_rng(3)
        A = rng.standard_normal((20, 5)).astype(np.float32)
        B = rng.standard_normal((20, 5)).astype(np.float32)
        gold = np.arange(20)
        e1 = match_error(cosine_matrix(A, B), gold)
        e2 = match_error(cosine_matrix(3.7 * A, 3.7 * B), gold)
        assert e1 == e2

    def test_gold_columns_mapping(self):
        sim = SimilarityMatrix(np.eye(2, dtype=np.float32), [5, 6], [7, 8])
        cols = gold_columns(sim, [(5, 8), (6, 7)])
        np.testing.assert_array_equal(cols, [1, 0])


class TestKnn:
    def test_k1_equals_argmax(self):
        rng = np.random.default_rng(4)
        S = rng.standard_normal((30, 20))
        idx, _ = knn(S, 1)
        np.testing.assert_array_equal(idx[:, 0], S.argmax(axis=1))

    def test_sorted_row_prefix(self):
        S = np.array([[9.0, 7.0, 5.0, 3.0, 1.0]])
        idx, vals = knn(S, 3)
        np.testing.assert_array_equal(idx[0], [0, 1, 2])
        np.testing.assert_array_equal(vals[0], [9.0, 7.0, 5.0])

    def test_matches_full_sort_oracle_with_ties(self):
        rng = np.random.default_rng(5)
        S = np.round(rng.standard_normal((100, 80)), 1)  # quantized: many ties
        idx, vals = knn(S, 4)
        for i in range(100):
            oi, ov = oracle_topk(list(S[i]), 4)
            assert list(idx[i]) == oi
            assert list(vals[i]) == ov

    def test_columns_axis(self):
        S = np.array([[1.0, 5.0], [3.0, 2.0]])
        idx, vals = knn(S, 2, axis="cols")
        np.testing.assert_array_equal(idx[0], [1, 0])  # column 0 sorted by score
        np.testing.assert_array_equal(vals[1], [5.0, 2.0])

    def test_k_too_large(self):
        with pytest.raises(DimensionError):
            knn(np.eye(3), 4)


class TestMarginScore:
    def test_uniform_neighborhood_gives_one(self):
        S = np.full((5, 5), 0.8, dtype=np.float32)
        sim = SimilarityMatrix(S, list(range(5)), list(range(5)))
        out = margin_score(sim, MarginConfig(k=4))
        np.testing.assert_allclose(out.scores, 1.0, atol=1e-6)

    def test_hand_case_four_thirds(self):
        S = np.full((6, 6), -0.5, dtype=np.float32)
        S[0, :] = [0.9, 0.6, 0.5, 0.4, 0.1, 0.0]
        S[1:, 0] = [0.8, 0.7, 0.6, 0.2, 0.1]
        sim = SimilarityMatrix(S, list(range(6)), list(range(6)))
        out = margin_score(sim, MarginConfig(k=4))
        assert out.scores[0, 0] == pytest.approx(0.9 / 0.675, rel=1e-6)
        oracle, _ = oracle_margin(S, 4)
        assert out.scores[0, 0] == pytest.approx(oracle[0, 0], rel=1e-6)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(6)
        for _ in range(3):
            A = rng.standard_normal((12, 5)).astype(np.float32)
            B = rng.standard_normal((15, 5)).astype(np.float32)
            sim = cosine_matrix(A, B)
            out = margin_score(sim, MarginConfig(k=4))
            oracle, flagged = oracle_margin(sim.scores, 4)
            finite = ~flagged
            np.testing.assert_allclose(out.scores[finite], oracle[finite], atol=1e-5)
            if flagged.any():
                assert out.flagged is not None
                np.testing.assert_array_equal(out.flagged, flagged)

    def test_negative_denominator_flagged(self):
        S = np.full((3, 3), -0.5, dtype=np.float32)
        sim = SimilarityMatrix(S, [0, 1, 2], [0, 1, 2])
        out = margin_score(sim, MarginConfig(k=2))
        assert out.flagged.all()
        assert np.all(np.isneginf(out.scores))

    def test_scale_invariance_via_cosines(self):
        rng = np.random.default_rng(7)
        A = rng.standard_normal((10, 4)).astype(np.float32)
        B = rng.standard_normal((11, 4)).astype(np.float32)
        s1 = margin_score(cosine_matrix(A, B)).scores
        s2 = margin_score(cosine_matrix(0.01 * A, 0.01 * B)).scores
        np.testing.assert_allclose(s1, s2, atol=1e-4)

    def test_k_must_fit_both_directions(self):
        sim = SimilarityMatrix(np.zeros((3, 10), dtype=np.float32),
                               list(range(3)), list(range(10)))
        with pytest.raises(DimensionError):
            margin_score(sim, MarginConfig(k=3))

    def test_reserved_margin_kind(self):
        with pytest.raises(ConfigError):
            MarginConfig(kind="distance")


class TestMinePairs:
    def _scored(self, S):
        return SimilarityMatrix(np.asarray(S, dtype=np.float32),
                                list(range(S.shape[0])), list(range(100, 100 + S.shape[1])))

    def test_infinite_threshold_is_empty(self):
        rng = np.random.default_rng(8)
        scored = self._scored(rng.standard_normal((5, 5)))
        assert mine_pairs(scored, np.inf).candidates == []

    def test_planted_block_diagonal(self):
        S = np.full((4, 4), 0.9, dtype=np.float32)
        np.fill_diagonal(S, 2.0)
        scored = self._scored(S)
        result = mine_pairs(scored, 1.1)
        assert [(c[0], c[1]) for c in result.candidates] == [(i, 100 + i) for i in range(4)]

    def test_candidates_sorted_descending(self):
        rng = np.random.default_rng(9)
        scored = self._scored(rng.standard_normal((20, 20)))
        result = mine_pairs(scored, -np.inf)
        scores = [c[2] for c in result.candidates]
        assert scores == sorted(scores, reverse=True)

    def test_one_to_one(self):
        rng = np.random.default_rng(10)
        scored = self._scored(rng.standard_normal((30, 25)))
        result = mine_pairs(scored, -np.inf)
        srcs = [c[0] for c in result.candidates]
        tgts = [c[1] for c in result.candidates]
        assert len(srcs) == len(set(srcs)) and len(tgts) == len(set(tgts))

    def test_matches_brute_force(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            S = np.round(rng.standard_normal((18, 14)), 1)
            scored = self._scored(S)
            tau = float(rng.uniform(-1, 1))
            assert mine_pairs(scored, tau).candidates == oracle_mine(scored, tau)


class TestF1:
    def test_exact_match(self):
        assert f1_score([(0, 0), (1, 1)], [(0, 0), (1, 1)]) == (1.0, 1.0, 1.0)

    def test_half(self):
        p, r, f = f1_score([(0, 0), (2, 2)], [(0, 0), (1, 1)])
        assert (p, r, f) == (0.5, 0.5, 0.5)

    def test_disjoint_is_zero(self):
        assert f1_score([(5, 5)], [(0, 0)])[2] == 0.0

    def test_matches_recount_oracle(self):
        rng = np.random.default_rng(12)
        for _ in range(10):
            predicted = [(int(a), int(b)) for a, b in rng.integers(0, 8, size=(10, 2))]
            predicted = list(dict.fromkeys(predicted))
            gold = [(int(a), int(b)) for a, b in rng.integers(0, 8, size=(6, 2))]
            gold = list(dict.fromkeys(gold))
            assert f1_score(predicted, gold)[2] == pytest.approx(oracle_f1(predicted, gold))

    def test_empty_gold_rejected(self):
        with pytest.raises(DimensionError):
            f1_score([(0, 0)], [])


class TestCalibrateThreshold:
    def _scored(self, S):
        return SimilarityMatrix(np.asarray(S, dtype=np.float32),
                                list(range(S.shape[0])), list(range(S.shape[1])))

    def test_separated_scores_take_larger_boundary(self):
        S = np.full((4, 4), 0.5, dtype=np.float32)
        np.fill_diagonal(S, 2.0)
        scored = self._scored(S)
        gold = [(i, i) for i in range(4)]
        tau, best, _ = calibrate_threshold(scored, gold)
        assert best == 1.0
        assert tau == pytest.approx(2.0)  # smallest accepted score, not the gap floor

    def test_matches_dense_grid_oracle(self):
        rng = np.random.default_rng(13)
        for _ in range(4):
            S = np.round(rng.uniform(0, 2, size=(15, 15)), 2)
            scored = self._scored(S)
            gold = [(i, i) for i in range(0, 15, 2)]
            tau, best, sweep = calibrate_threshold(scored, gold)
            grid = np.arange(-0.1, 2.2, 0.001)
            grid_best = max(oracle_f1(oracle_mine(scored, t), gold) for t in grid)
            assert best == pytest.approx(grid_best, abs=1e-9)
            achieved = f1_score(mine_pairs(scored, tau), gold)[2]
            assert achieved == pytest.approx(best, abs=1e-9)

    def test_sweep_rows_are_consistent(self):
        rng = np.random.default_rng(14)
        S = rng.uniform(0, 1, size=(10, 10)).astype(np.float32)
        scored = self._scored(S)
        gold = [(i, i) for i in range(10)]
        _, _, sweep = calibrate_threshold(scored, gold)
        for tau, precision, recall, f1 in sweep:
            p, r, f = f1_score(mine_pairs(scored, tau), gold)
            assert (p, r, f) == pytest.approx((precision, recall, f1), abs=1e-12)


class TestBinarize:
    def test_hand_case(self):
        bits, frac = binarize(np.array([[0.5, 1.2, 3.0, 0.0]]), 1.0)
        np.testing.assert_array_equal(bits, [[0, 1, 1, 0]])
        assert frac == 0.5

    def test_minus_infinity_all_ones(self):
        bits, frac = binarize(np.array([[0.1, -5.0]]), -np.inf)
        np.testing.assert_array_equal(bits, [[1, 1]])
        assert frac == 1.0

    def test_active_fraction_monotone_in_theta(self):
        rng = np.random.default_rng(15)
        v = rng.standard_normal((20, 30))
        fracs = [binarize(v, t)[1] for t in np.linspace(-2, 2, 9)]
        assert all(a >= b for a, b in zip(fracs, fracs[1:]))

    def test_binary_similarity_zero_popcount(self):
        a = np.array([[0, 0, 0], [1, 1, 0]], dtype=np.uint8)
        sim = binary_similarity_matrix(a, a)
        assert sim.scores[0, 0] == 0.0
        assert sim.scores[1, 1] == pytest.approx(1.0)

    def test_binary_similarity_hand_value(self):
        a = np.array([[1, 1, 0, 0]], dtype=np.uint8)
        b = np.array([[1, 0, 1, 1]], dtype=np.uint8)
        sim = binary_similarity_matrix(a, b)
        assert sim.scores[0, 0] == pytest.approx(1.0 / np.sqrt(2 * 3))
