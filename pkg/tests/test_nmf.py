import numpy as np
import pytest

from maptone import nmf
from maptone.nmf import NmfConfig, NmfError, build_knn_graph, nmf_factorize, nmf_objective
from maptone.tensor import make_rng


def brute_force_neighbors(pts, k):
    """Exhaustive k-NN with ties broken toward the lower index."""
    n = len(pts)
    out = []
    for i in range(n):
        cand = sorted((np.linalg.norm(pts[i] - pts[j]), j)
                      for j in range(n) if j != i)
        out.append([j for _, j in cand[:k]])
    return out


class TestKnnGraph:
    def test_identical_columns_tie_break(self):
        x = np.ones((2, 3))
        g = build_knn_graph(x, 1)
        lap = g.dense_laplacian()
        assert np.allclose(lap.sum(axis=1), 0.0)
        a = g.adjacency.toarray()
        # lower index wins ties: 0->1, 1->0, 2->0
        assert a[0, 1] == 1 and a[2, 0] == 1 and a[2, 1] == 0

    def test_line_positions_against_oracle(self):
        x = np.array([[0.0, 1.0, 10.0], [1.0, 1.0, 1.0]])
        g = build_knn_graph(x, 1)
        a = g.adjacency.toarray()
        expected = brute_force_neighbors(list(x.T), 1)
        assert expected == [[1], [0], [1]]
        assert a[0, 1] == 1 and a[1, 0] == 1
        assert a[1, 2] == 1 and a[2, 1] == 1  # symmetrized 10 -> 1
        assert a[0, 2] == 0

    def test_complete_graph(self):
        rng = make_rng(0)
        x = rng.random((3, 6))
        g = build_knn_graph(x, 5)
        a = g.adjacency.toarray()
        assert np.array_equal(a, np.ones((6, 6)) - np.eye(6))
        assert np.allclose(g.degrees, 5.0)

    def test_matches_oracle_on_random_instances(self):
        rng = make_rng(1)
        for _ in range(5):
            x = rng.random((4, 12))
            k = int(rng.integers(1, 5))
            g = build_knn_graph(x, k)
            a = g.adjacency.toarray()
            expected = np.zeros((12, 12))
            for i, nbrs in enumerate(brute_force_neighbors(list(x.T), k)):
                for j in nbrs:
                    expected[i, j] = expected[j, i] = 1
            assert np.array_equal(a, expected)

    def test_laplacian_psd(self):
        x = make_rng(2).random((3, 10))
        lap = build_knn_graph(x, 3).dense_laplacian()
        assert np.allclose(lap, lap.T)
        assert np.linalg.eigvalsh(lap).min() > -1e-10


class TestObjective:
    def test_exact_factorization_is_zero(self):
        rng = make_rng(3)
        w = rng.random((5, 2))
        h = rng.random((2, 8))
        assert nmf_objective(w @ h, w, h, None, 0.0, 0.0) == pytest.approx(0.0)

    def test_laplacian_kills_constant_columns(self):
        rng = make_rng(4)
        x = rng.random((3, 6)) + 0.1
        g = build_knn_graph(x, 2)
        h = np.repeat(rng.random((2, 1)), 6, axis=1)  # constant across columns
        assert g.quadratic(h) == pytest.approx(0.0, abs=1e-12)

    def test_matches_direct_summation_oracle(self):
        rng = make_rng(5)
        x = rng.random((4, 6))
        w = rng.random((4, 2))
        h = rng.random((2, 6))
        g = build_knn_graph(x, 2)
        lam, eta = 0.1, 0.01
        # independent elementwise summation
        resid = sum((x[i, j] - sum(w[i, r] * h[r, j] for r in range(2))) ** 2
                    for i in range(4) for j in range(6))
        lap = g.dense_laplacian()
        tr = sum(h[r, i] * lap[i, j] * h[r, j]
                 for r in range(2) for i in range(6) for j in range(6))
        sparse = sum(np.sqrt(h[r, j]) for r in range(2) for j in range(6))
        expected = 0.5 * resid + 0.5 * lam * tr + eta * sparse
        assert nmf_objective(x, w, h, g, lam, eta) == pytest.approx(expected, abs=1e-10)

    def test_negative_entry_rejected(self):
        with pytest.raises(NmfError, match="non-negative"):
            nmf_objective(np.ones((2, 2)), -np.ones((2, 1)), np.ones((1, 2)),
                          None, 0.0, 0.0)


class TestFactorize:
    def test_exact_recovery(self):
        rng = make_rng(6)
        w0 = rng.random((6, 2))
        h0 = rng.random((2, 10))
        x = w0 @ h0
        cfg = NmfConfig(rank=2, lam=0.0, eta=0.0, max_iters=3000, tol=1e-15, seed=0)
        fac = nmf_factorize(x, cfg)
        assert np.sum((x - fac.w @ fac.h) ** 2) < 1e-6

    def test_sparsity_increases_small_entries(self):
        rng = make_rng(7)
        x = rng.random((6, 40)) + 0.05
        base = NmfConfig(rank=4, lam=0.0, eta=0.0, max_iters=300, tol=0.0, seed=1)
        strong = NmfConfig(rank=4, lam=0.0, eta=10.0, max_iters=300, tol=0.0, seed=1)
        h_plain = nmf_factorize(x, base).h
        h_sparse = nmf_factorize(x, strong).h
        frac = lambda h: np.mean(h < 1e-3)
        assert frac(h_sparse) > frac(h_plain)

    def test_production_width_shape(self):
        rng = make_rng(8)
        x = rng.random((6, 5745)) + 1e-3
        cfg = NmfConfig(rank=20, lam=1.0, eta=0.1, max_iters=8, tol=0.0, seed=2)
        fac = nmf_factorize(x, cfg)
        assert fac.h.shape == (20, 5745)
        assert fac.w.shape == (6, 20)

    def test_nonnegativity_and_trace_recorded(self):
        rng = make_rng(9)
        x = rng.random((5, 20)) + 0.01
        cfg = NmfConfig(rank=3, lam=1.0, eta=0.1, max_iters=50, tol=0.0, seed=3)
        fac = nmf_factorize(x, cfg)
        assert np.all(fac.w > 0) and np.all(fac.h > 0)
        assert len(fac.objective_trace) == 50

    def test_objective_trace_monotone_small_grid(self):
        rng = make_rng(10)
        for seed in range(3):
            x = rng.random((8, 30)) + 0.05
            g = build_knn_graph(x, 5)
            for lam in (0.0, 1.0):
                for eta in (0.0, 0.1):
                    cfg = NmfConfig(rank=4, lam=lam, eta=eta, max_iters=120,
                                    tol=0.0, seed=seed)
                    tr = np.array(nmf_factorize(x, cfg, g).objective_trace)
                    rel = (tr[1:] - tr[:-1]) / np.maximum(np.abs(tr[:-1]), 1e-300)
                    assert rel.max() <= 1e-9, (lam, eta, seed, rel.max())

    def test_trace_quadratic_matches_pairwise_sum(self):
        rng = make_rng(11)
        for s in (5, 17, 30):
            x = rng.random((4, s)) + 0.01
            g = build_knn_graph(x, min(4, s - 1))
            h = rng.random((3, s))
            a = g.adjacency.toarray()
            oracle = 0.5 * sum(a[i, j] * np.sum((h[:, i] - h[:, j]) ** 2)
                               for i in range(s) for j in range(s))
            assert g.quadratic(h) == pytest.approx(oracle, abs=1e-10)

    def test_scale_normalization(self):
        rng = make_rng(12)
        x = rng.random((6, 25)) + 0.05
        cfg = NmfConfig(rank=4, lam=0.5, eta=0.05, max_iters=80, tol=0.0, seed=4)
        fac = nmf_factorize(x, cfg)
        assert np.allclose(fac.h.max(axis=1), 1.0)
        # reconstruction is what the un-normalized factors produced
        recon = fac.w @ fac.h
        assert np.all(np.isfinite(recon))

    def test_reconstruction_invariant_under_normalization(self):
        rng = make_rng(13)
        w = rng.random((5, 3)) + 0.1
        h = rng.random((3, 12)) + 0.1
        before = w @ h
        m = h.max(axis=1)
        after = (w * m[None, :]) @ (h / m[:, None])
        assert np.max(np.abs(before - after)) < 1e-12

    def test_invalid_inputs(self):
        with pytest.raises(NmfError, match="non-negative"):
            nmf_factorize(-np.ones((3, 4)), NmfConfig(rank=2))
        x = np.ones((3, 4))
        x[:, 2] = 0.0
        with pytest.raises(NmfError, match="all-zero column"):
            nmf_factorize(x, NmfConfig(rank=2))
        with pytest.raises(NmfError, match="rank"):
            NmfConfig(rank=0)
