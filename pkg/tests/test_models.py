import numpy as np
import pytest
import scipy.sparse as sp

from scalegnn.graph import gcn_normalize, make_splits, sbm_generate
from scalegnn.losses import eval_loss
from scalegnn.models import (ModelParams, StaleTapeError, TrainConfig, backward, backward_wrt_edges,
                             forward, forward_on_adjacency, init_params, pprgo_forward, predict, train)
from scalegnn.ppr import TeleportConfig, ppr_power_iteration


def _weighted(A_dense, rows, cols, signs, p):
    """Raw adjacency with candidates stored (explicit zeros allowed)."""
    n = A_dense.shape[0]
    M = A_dense.copy()
    M[rows, cols] += signs * p
    M[cols, rows] += signs * p
    pattern = A_dense > 0
    pattern[rows, cols] = pattern[cols, rows] = True
    r, c = np.nonzero(pattern)
    return sp.csr_matrix((M[r, c], (r, c)), shape=(n, n))


def edge_case(seed, n_cand=12, aggregation="sum"):
    g = sbm_generate([15, 15], 0.3, 0.05, 6, seed=seed)
    rng = np.random.default_rng(seed)
    iu = np.triu_indices(g.n, 1)
    sel = rng.choice(iu[0].size, n_cand, replace=False)
    rows, cols = iu[0][sel], iu[1][sel]
    A = g.adjacency.toarray()
    signs = np.where(A[rows, cols] > 0, -1.0, 1.0)
    p = rng.uniform(0.1, 0.9, n_cand)
    params = init_params("GCN", 6, 2, 8, seed=seed, aggregation=aggregation, temperature=0.7)
    return g, A, rows, cols, signs, p, params


def edge_gradients(g, A, rows, cols, signs, p, params, kind, frozen=None):
    def loss(q):
        pred, _ = forward_on_adjacency(params, _weighted(A, rows, cols, signs, q), g.features,
                                       clean_degrees=frozen)
        return eval_loss(kind, pred.logits, g.labels).value

    pred, tape = forward_on_adjacency(params, _weighted(A, rows, cols, signs, p), g.features,
                                      clean_degrees=frozen)
    ev = eval_loss(kind, pred.logits, g.labels)
    grad = backward_wrt_edges(tape, params, ev.grad_logits, rows, cols, signs, symmetric=True)
    h = 1e-5
    fd = np.array([(loss(p + h * e) - loss(p - h * e)) / (2 * h) for e in np.eye(p.size)])
    return grad, fd, ev


@pytest.mark.parametrize("kind", ["ce", "tanh_margin", "margin"])
def test_edge_gradient_finite_differences(kind):
    grad, fd, _ = edge_gradients(*edge_case(0), kind)
    assert np.abs(grad - fd).max() / np.abs(fd).max() < 1e-4


def test_edge_gradient_frozen_degrees():
    g, A, rows, cols, signs, p, params = edge_case(1)
    deg = A.sum(axis=1) + 1.0
    grad, fd, _ = edge_gradients(g, A, rows, cols, signs, p, params, "ce", frozen=deg)
    assert np.abs(grad - fd).max() / np.abs(fd).max() < 1e-4


def test_edge_gradient_is_linear_in_loss():
    g, A, rows, cols, signs, p, params = edge_case(2)
    pred, tape = forward_on_adjacency(params, _weighted(A, rows, cols, signs, p), g.features)
    G = eval_loss("ce", pred.logits, g.labels).grad_logits
    a = backward_wrt_edges(tape, params, G, rows, cols, signs, symmetric=True)
    b = backward_wrt_edges(tape, params, 2 * G, rows, cols, signs, symmetric=True)
    assert np.allclose(b, 2 * a, atol=1e-14)


def test_edge_gradient_is_local():
    # two disconnected components: candidates in one cannot affect losses in the other
    A = np.zeros((8, 8))
    for i, j in [(0, 1), (1, 2), (2, 3), (4, 5), (5, 6), (6, 7)]:
        A[i, j] = A[j, i] = 1.0
    X = np.random.default_rng(0).standard_normal((8, 3))
    params = init_params("GCN", 3, 2, 4, seed=0)
    rows, cols, signs = np.array([5]), np.array([7]), np.array([1.0])
    pred, tape = forward_on_adjacency(params, _weighted(A, rows, cols, signs, np.array([0.5])), X)
    mask = np.array([0, 1])
    G = eval_loss("ce", pred.logits, np.zeros(8, dtype=np.int64), mask).grad_logits
    assert backward_wrt_edges(tape, params, G, rows, cols, signs, symmetric=True)[0] == 0.0


def test_parameter_gradients_finite_differences():
    g, A, rows, cols, signs, p, params = edge_case(3)
    M = gcn_normalize(g)
    pred, tape = forward(params, M, g.features)
    (gW, gb), _, _ = backward(tape, params, eval_loss("ce", pred.logits, g.labels).grad_logits)
    h = 1e-6
    W = params.weights[0]
    for idx in [(0, 0), (3, 5), (5, 2)]:
        W[idx] += h
        lp = eval_loss("ce", forward(params, M, g.features)[0].logits, g.labels).value
        W[idx] -= 2 * h
        lm = eval_loss("ce", forward(params, M, g.features)[0].logits, g.labels).value
        W[idx] += h
        assert gW[0][idx] == pytest.approx((lp - lm) / (2 * h), rel=1e-5, abs=1e-9)


def test_zero_weights_give_zero_logits():
    params = init_params("GCN", 4, 3, 5, seed=0)
    for w in params.weights:
        w[:] = 0
    pred, _ = forward(params, sp.identity(6, format="csr"), np.ones((6, 4)), labels=np.zeros(6, dtype=int))
    assert np.all(pred.logits == 0) and np.all(pred.margins == 0)


def test_single_node_single_layer():
    params = init_params("GCN", 3, 2, 5, n_layers=1, seed=1)
    params.biases[0][:] = [0.5, -0.5]
    x = np.array([[1.0, 2.0, -1.0]])
    pred, _ = forward(params, sp.identity(1, format="csr"), x)
    assert np.allclose(pred.logits, x @ params.weights[0] + params.biases[0])


def test_sgc_equals_linear_gcn():
    g = sbm_generate([10, 10], 0.3, 0.05, 4, seed=0)
    M = gcn_normalize(g)
    sgc = init_params("SGC", 4, 2, steps=2, seed=0)
    z, _ = forward(sgc, M, g.features)
    ref = M @ (M @ (g.features @ sgc.weights[0])) + sgc.biases[0]
    assert np.abs(z.logits - ref).max() < 1e-10


def test_pprgo_one_hot_row_is_encoder():
    params = init_params("PPRGo", 3, 2, 4, seed=0)
    X = np.random.default_rng(0).standard_normal((5, 3))
    pred, _ = pprgo_forward(params, sp.identity(5, format="csr"), X, [2])
    enc = np.maximum(X[2] @ params.weights[0] + params.biases[0], 0) @ params.weights[1] + params.biases[1]
    assert np.allclose(pred.logits[0], enc)


def test_pprgo_identical_neighbors():
    params = init_params("PPRGo", 3, 2, 4, seed=0)
    X = np.array([[1.0, 0.0, 2.0], [1.0, 0.0, 2.0], [0.0, 1.0, 0.0]])
    row = sp.csr_matrix(np.array([[0.5, 0.5, 0.0]]))
    single = sp.csr_matrix(np.array([[1.0, 0.0, 0.0]]))
    a, _ = forward(params, row, X)
    b, _ = forward(params, single, X)
    assert np.allclose(a.logits, b.logits)


def test_pprgo_matches_dense_product():
    g = sbm_generate([25, 25], 0.15, 0.02, 4, seed=0)
    ppr = ppr_power_iteration(g, TeleportConfig(k=8))
    params = init_params("PPRGo", 4, 2, 6, seed=0)
    pred, _ = pprgo_forward(params, ppr, g.features, np.arange(g.n))
    H = np.maximum(g.features @ params.weights[0] + params.biases[0], 0) @ params.weights[1] + params.biases[1]
    assert np.allclose(pred.logits, ppr.matrix.toarray() @ H, atol=1e-12)


def test_pprgo_missing_row():
    g = sbm_generate([10, 10], 0.3, 0.05, 4, seed=0)
    ppr = ppr_power_iteration(g, TeleportConfig(k=4), sources=[0, 1])
    with pytest.raises(ValueError):
        pprgo_forward(init_params("PPRGo", 4, 2, 3), ppr, g.features, [5])


def test_stale_tape():
    params = init_params("GCN", 2, 2, 3, seed=0)
    pred, tape = forward(params, sp.identity(3, format="csr"), np.ones((3, 2)))
    params.touch()
    with pytest.raises(StaleTapeError):
        backward(tape, params, np.zeros((3, 2)))


def test_checkpoint_round_trip(tmp_path):
    params = init_params("GDC", 5, 3, 7, seed=4, aggregation="soft_median", temperature=0.3)
    params.save(tmp_path / "m.bin")
    back = ModelParams.load(tmp_path / "m.bin")
    assert back.kind == "GDC" and back.aggregation == "soft_median" and back.temperature == 0.3
    assert all(np.array_equal(a, b) for a, b in zip(params.arrays(), back.arrays()))


def test_train_separable_sbm():
    g = sbm_generate([100, 100], 0.1, 0.01, 4, seed=0, noise=0.5)
    g = g.with_splits(make_splits(g.labels, 20, 0))
    M = gcn_normalize(g)
    params = train(init_params("GCN", 4, 2, 16, seed=0), g, M, TrainConfig(max_epochs=300, patience=50))
    acc = np.mean(predict(params, g, M)[g.splits.test] == g.labels[g.splits.test])
    assert acc >= 0.95


def test_train_zero_epochs_returns_init(small_sbm):
    init = init_params("GCN", small_sbm.d, 2, 8, seed=0)
    out = train(init, small_sbm, gcn_normalize(small_sbm), TrainConfig(max_epochs=0))
    assert all(np.array_equal(a, b) for a, b in zip(init.arrays(), out.arrays()))


def test_train_rejects_zero_temperature(small_sbm):
    params = init_params("GCN", small_sbm.d, 2, 8, aggregation="soft_median", temperature=0.0)
    with pytest.raises(ValueError):
        train(params, small_sbm, gcn_normalize(small_sbm), TrainConfig(max_epochs=5))
    pred, _ = forward(params, gcn_normalize(small_sbm), small_sbm.features)
    assert np.all(np.isfinite(pred.logits))


def test_train_is_deterministic(small_sbm):
    M = gcn_normalize(small_sbm)
    cfg = TrainConfig(max_epochs=30, patience=30, dropout=0.5, seed=3)
    a = train(init_params("GCN", small_sbm.d, 2, 8, seed=0), small_sbm, M, cfg)
    b = train(init_params("GCN", small_sbm.d, 2, 8, seed=0), small_sbm, M, cfg)
    assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))


def test_train_pprgo(small_sbm):
    ppr = ppr_power_iteration(small_sbm, TeleportConfig(k=16))
    params = train(init_params("PPRGo", small_sbm.d, 2, 16, seed=0), small_sbm, ppr.matrix,
                   TrainConfig(max_epochs=200, patience=40, dropout=0.0))
    acc = np.mean(predict(params, small_sbm, ppr.matrix)[small_sbm.splits.test]
                  == small_sbm.labels[small_sbm.splits.test])
    assert acc > 0.8
