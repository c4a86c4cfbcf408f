import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from scalegnn.attacks.core import perturb_weighted
from scalegnn.attacks.spaces import EdgeLookup
from scalegnn.graph import sbm_generate
from scalegnn.ppr import (PprConvergenceError, PprMatrix, SingularUpdateError, TeleportConfig,
                          expected_nonzero_columns, gdc_preprocess, ppr_exact, ppr_power_iteration,
                          ppr_row_update, prime_rows, topk_rows)

PAIR = sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
# alpha * inv([[1, -(1-alpha)], [-(1-alpha), 1]]) for alpha = 0.15
PAIR_PPR = np.array([[1.0, 0.85], [0.85, 1.0]]) * 0.15 / (1 - 0.85 ** 2)


def test_exact_single_self_loop():
    assert np.allclose(ppr_exact(sp.csr_matrix(np.array([[1.0]]))), [[1.0]])


def test_exact_pair():
    Pi = ppr_exact(PAIR, TeleportConfig(alpha=0.15))
    assert np.allclose(Pi, PAIR_PPR, atol=1e-12)
    assert np.allclose(Pi, [[0.5405, 0.4595], [0.4595, 0.5405]], atol=1e-4)


def test_exact_rows_are_stochastic():
    g = sbm_generate([25, 25], 0.2, 0.02, 2, seed=4)
    assert np.allclose(ppr_exact(g).sum(axis=1), 1.0, atol=1e-9)


def test_power_iteration_matches_exact():
    g = sbm_generate([50, 50], 0.1, 0.01, 2, seed=0)
    cfg = TeleportConfig(k=g.n, tol=1e-12)
    approx = ppr_power_iteration(g, cfg).matrix.toarray()
    assert np.abs(approx - ppr_exact(g, cfg)).max() < 1e-9


def test_topk_pair_keeps_diagonal():
    ppr = ppr_power_iteration(PAIR, TeleportConfig(k=1, tol=1e-12))
    M = ppr.matrix.toarray()
    assert np.allclose(np.diag(M), PAIR_PPR[0, 0])
    assert M[0, 1] == 0 and M[1, 0] == 0


def test_single_source():
    g = sbm_generate([20, 20], 0.2, 0.02, 2, seed=0)
    ppr = ppr_power_iteration(g, TeleportConfig(k=5), sources=[3])
    assert np.array_equal(np.flatnonzero(np.diff(ppr.matrix.indptr)), [3])
    assert ppr.has_row(3) and not ppr.has_row(4)
    with pytest.raises(KeyError):
        ppr.row(4)


def test_power_iteration_convergence_error():
    g = sbm_generate([20, 20], 0.2, 0.02, 2, seed=0)
    with pytest.raises(PprConvergenceError):
        ppr_power_iteration(g, TeleportConfig(tol=1e-14, max_iter=2))


def test_chunked_equals_unchunked():
    g = sbm_generate([30, 30], 0.15, 0.02, 2, seed=2)
    a = ppr_power_iteration(g, TeleportConfig(k=10)).matrix
    b = ppr_power_iteration(g, TeleportConfig(k=10), chunk_size=7).matrix
    assert abs(a - b).max() < 1e-12


def test_save_load(tmp_path):
    g = sbm_generate([20, 20], 0.2, 0.02, 2, seed=0)
    ppr = ppr_power_iteration(g, TeleportConfig(k=6), sources=[1, 5, 9])
    ppr.save(tmp_path / "ppr.bin")
    back = PprMatrix.load(tmp_path / "ppr.bin")
    assert (back.matrix != ppr.matrix).nnz == 0
    assert np.array_equal(back.sources, ppr.sources) and back.k == 6


def test_topk_rows_tie_break():
    idx, vals = topk_rows(np.array([[0.2, 0.5, 0.5, 0.1]]), 2)
    assert idx.tolist() == [[1, 2]]


def test_gdc_identity_graph():
    A = sp.identity(5, format="csr")
    assert np.allclose(gdc_preprocess(A).toarray(), np.eye(5))


def test_gdc_rows():
    g = sbm_generate([40, 40], 0.15, 0.02, 2, seed=1)
    cfg = TeleportConfig(k=8)
    S = ppr_power_iteration(g, cfg).matrix
    sym = S.maximum(S.T)
    assert (sym != sym.T).nnz == 0
    assert np.diff(S.indptr).max() <= 8
    M = gdc_preprocess(g, cfg)
    assert np.allclose(np.asarray(M.sum(axis=1)).ravel(), 1.0)


@pytest.mark.parametrize("n,k,b,expected", [(100, 10, 5, 40.951), (100, 10, 1, 10.0), (50, 50, 3, 50.0)])
def test_expected_columns(n, k, b, expected):
    assert expected_nonzero_columns(n, k, b) == pytest.approx(expected, abs=1e-3)


@given(st.integers(2, 500), st.data())
def test_expected_columns_monotone(n, data):
    k = data.draw(st.integers(1, n))
    vals = [expected_nonzero_columns(n, k, b) for b in range(1, 20)]
    assert all(x <= y + 1e-9 for x, y in zip(vals, vals[1:]))
    assert vals[-1] <= n + 1e-9


def _update_case(seed, n_cand=5, n=50):
    g = sbm_generate([n // 2, n - n // 2], 0.2, 0.03, 2, seed=seed)
    A, cfg = g.adjacency, TeleportConfig()
    Pi = ppr_exact(g, cfg)
    prime = prime_rows(sp.csr_matrix(Pi), cfg.alpha)
    rng = np.random.default_rng(seed)
    i = int(rng.integers(n))
    cols = rng.choice(np.setdiff1d(np.arange(n), [i]), n_cand, replace=False)
    s = EdgeLookup(A).signs(np.full(n_cand, i), cols)
    lo, hi = A.indptr[i], A.indptr[i + 1]
    return A, Pi, prime, cfg, i, cols, s, (A.indices[lo:hi], A.data[lo:hi], A.data[lo:hi].sum())


def test_row_update_zero_perturbation():
    A, Pi, prime, cfg, i, cols, s, (ai, av, deg) = _update_case(0)
    up = ppr_row_update(prime, i, ai, av, deg, cols, s, np.zeros(cols.size), cfg.alpha)
    assert np.allclose(up.dense(A.shape[0]), Pi[i], atol=1e-12)


def test_row_update_single_flip_matches_recompute():
    A, Pi, prime, cfg, i, cols, s, (ai, av, deg) = _update_case(1, n_cand=1)
    up = ppr_row_update(prime, i, ai, av, deg, cols, s, np.ones(1), cfg.alpha)
    Ap = perturb_weighted(A.tocoo(), np.array([i]), cols, s, False)
    assert np.abs(up.dense(A.shape[0]) - ppr_exact(Ap, cfg)[i]).max() < 1e-8


def test_row_update_vjp_matches_finite_differences():
    A, Pi, prime, cfg, i, cols, s, (ai, av, deg) = _update_case(2)
    n = A.shape[0]
    rng = np.random.default_rng(0)
    p = rng.uniform(0.1, 0.9, cols.size)
    gvec = rng.standard_normal(n)

    def f(q):
        return gvec @ ppr_row_update(prime, i, ai, av, deg, cols, s, q, cfg.alpha).dense(n)

    grad = ppr_row_update(prime, i, ai, av, deg, cols, s, p, cfg.alpha).vjp(gvec)
    h = 1e-6
    fd = np.array([(f(p + h * e) - f(p - h * e)) / (2 * h) for e in np.eye(cols.size)])
    assert np.abs(grad - fd).max() / np.abs(fd).max() < 1e-5


def test_row_update_touched_columns_bounded():
    n, k, b = 100, 10, 5
    g = sbm_generate([50, 50], 0.1, 0.01, 2, seed=3)
    A, cfg = g.adjacency, TeleportConfig(k=k)
    ppr = ppr_power_iteration(g, cfg)
    prime = prime_rows(ppr, cfg.alpha)
    i = 0
    cols = np.arange(1, b + 1)
    s = EdgeLookup(A).signs(np.full(b, i), cols)
    lo, hi = A.indptr[i], A.indptr[i + 1]
    up = ppr_row_update(prime, i, A.indices[lo:hi], A.data[lo:hi], A.data[lo:hi].sum(), cols, s,
                        np.full(b, 0.5), cfg.alpha)
    support = up.v_indices.size
    assert up.touched_columns <= min(n, support * k)


def test_row_update_rejects_empty_row():
    A, Pi, prime, cfg, i, cols, s, (ai, av, deg) = _update_case(0, n_cand=1)
    with pytest.raises(SingularUpdateError):
        ppr_row_update(prime, i, ai, av, 0.0, cols, s, np.ones(1), cfg.alpha)


def test_row_update_removing_every_edge():
    # an isolated node gets a self-loop, so its PPR row becomes the unit vector
    A, Pi, prime, cfg, i, _, _, (ai, av, deg) = _update_case(4)
    up = ppr_row_update(prime, i, ai, av, deg, ai, -np.ones(ai.size), np.ones(ai.size), cfg.alpha)
    Ap = perturb_weighted(A.tocoo(), np.full(ai.size, i), ai, -np.ones(ai.size), False)
    assert np.abs(up.dense(A.shape[0]) - ppr_exact(Ap, cfg)[i]).max() < 1e-8
    assert np.allclose(up.dense(A.shape[0])[i], 1.0)
    assert np.all(up.vjp(np.ones(A.shape[0])) == 0)
