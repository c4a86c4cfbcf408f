"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""
import math
import time

import numpy as np
import pytest
import scipy.sparse as sp

from scalegnn.aggregation import SoftMedianConfig, breakdown_stress
from scalegnn.attacks import (AttackBudget, DICEConfig, GRBCDConfig, PRBCDConfig, dice_local, grbcd_global,
                              pgd_dense, prbcd_global, prbcd_local_pprgo, project_onto_budget)
from scalegnn.attacks.core import perturb_weighted
from scalegnn.attacks.local import encode, local_margin_after
from scalegnn.attacks.spaces import EdgeLookup
from scalegnn.graph import accuracy, gcn_normalize, make_splits, sbm_generate
from scalegnn.losses import REFERENCE_PROPERTIES, LossKind, check_loss_properties, eval_loss
from scalegnn.models import (TrainConfig, backward_wrt_edges, forward, forward_on_adjacency, init_params,
                             predict, train)
from scalegnn.ppr import (TeleportConfig, expected_nonzero_columns, gdc_preprocess, ppr_exact,
                          ppr_power_iteration, ppr_row_update, prime_rows)


def _candidate_adjacency(A, rows, cols, signs, p):
    n = A.shape[0]
    M = A.copy()
    M[rows, cols] += signs * p
    M[cols, rows] += signs * p
    pattern = A > 0
    pattern[rows, cols] = pattern[cols, rows] = True
    r, c = np.nonzero(pattern)
    return sp.csr_matrix((M[r, c], (r, c)), shape=(n, n))


# -- 1 -----------------------------------------------------------------------

def test_edge_gradients_all_losses(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        g = sbm_generate([15, 15], 0.25, 0.05, 6, seed=seed)
        A = g.adjacency.toarray()
        iu = np.triu_indices(g.n, 1)
        sel = rng.choice(iu[0].size, 8, replace=False)
        rows, cols = iu[0][sel], iu[1][sel]
        signs = np.where(A[rows, cols] > 0, -1.0, 1.0)
        p = rng.uniform(0.1, 0.9, 8)
        params = init_params("GCN", 6, 2, 8, seed=seed)
        for kind in LossKind:
            def loss(q):
                pred, _ = forward_on_adjacency(params, _candidate_adjacency(A, rows, cols, signs, q), g.features)
                return eval_loss(kind, pred.logits, g.labels).value

            pred, tape = forward_on_adjacency(params, _candidate_adjacency(A, rows, cols, signs, p), g.features)
            ev = eval_loss(kind, pred.logits, g.labels)
            grad = backward_wrt_edges(tape, params, ev.grad_logits, rows, cols, signs, symmetric=True)
            h = 1e-5
            fd = np.array([(loss(p + h * e) - loss(p - h * e)) / (2 * h) for e in np.eye(p.size)])
            scale = np.abs(fd).max()
            if scale > 1e-12:
                worst = max(worst, np.abs(grad - fd).max() / scale)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 30
    verdict(1, ok, f"max rel err {worst:.2e}, {elapsed:.1f} s")
    assert ok


# -- 2 -----------------------------------------------------------------------

def test_projection_instances(verdict):
    rng = np.random.default_rng(0)
    bad = 0
    for _ in range(10_000):
        size = int(rng.integers(1, 60))
        p = rng.normal(0.5, 1.0, size) * rng.choice([0.1, 1.0, 5.0])
        delta = int(rng.integers(1, 30))
        out = project_onto_budget(p, delta)
        order = np.argsort(p, kind="stable")
        ok = (np.all(out >= 0) and np.all(out <= 1) and out.sum() <= delta + 1e-4
              and np.all(np.diff(out[order]) >= -1e-12)
              and np.array_equal(project_onto_budget(out, delta), out))
        bad += not ok
    example = project_onto_budget(np.array([0.8, 0.9]), 1)
    ok = bad == 0 and np.allclose(example, [0.45, 0.55], atol=1e-5)
    verdict(2, ok, f"{bad} violations in 10000, example {np.round(example, 6).tolist()}")
    assert ok


# -- 3 -----------------------------------------------------------------------

def test_prbcd_reduces_to_pgd(verdict):
    g = sbm_generate([50, 50], 0.1, 0.02, 8, seed=0)
    g = g.with_splits(make_splits(g.labels, 10, 0))
    params = train(init_params("GCN", 8, 2, 16, seed=0), g, gcn_normalize(g),
                   TrainConfig(max_epochs=200, patience=50))
    cfg = PRBCDConfig(block_size=10 ** 9, epochs=30, resample_epochs=0, base_lr=0.1, seed=7,
                      record_weights=True)
    a = prbcd_global(g, params, "tanh_margin", 25, cfg)
    b = pgd_dense(g, params, "tanh_margin", 25, cfg)
    gap = max(max(abs(ta["loss"] - tb["loss"]), float(np.abs(ta["p"] - tb["p"]).max()))
              for ta, tb in zip(a.trace, b.trace))
    ok = len(a.trace) == len(b.trace) == 30 and gap < 1e-10 and np.array_equal(a.flips, b.flips)
    verdict(3, ok, f"max per-epoch gap {gap:.1e}")
    assert ok


# -- 4 and 5: desk-scale global attack on a 2,000-node SBM --------------------

def _fixture_graph():
    g = sbm_generate([286] * 6 + [284], 0.016, 0.00065, 16, seed=0, noise=1.0)
    return g.with_splits(make_splits(g.labels, 20, 0))


@pytest.fixture(scope="module")
def global_runs():
    t0 = time.perf_counter()
    g = _fixture_graph()
    budget = AttackBudget.from_epsilon(0.1, g.n_edges)
    test = g.splits.test
    tc = TeleportConfig(alpha=0.15, k=32)
    M_gdc = gdc_preprocess(g, tc)
    runs = []
    for seed in range(3):
        gcn = train(init_params("GCN", g.d, g.n_classes, 64, seed=seed), g, gcn_normalize(g),
                    TrainConfig(max_epochs=1000, patience=100, dropout=0.0, seed=seed))
        pcfg = PRBCDConfig(block_size=100_000, epochs=100, resample_epochs=70, base_lr=1.0, seed=seed)
        tanh = prbcd_global(g, gcn, "tanh_margin", budget, pcfg)
        ce = prbcd_global(g, gcn, "ce", budget, pcfg)
        greedy = grbcd_global(g, gcn, "mce", budget, GRBCDConfig(block_size=100_000, epochs=50, seed=seed))
        robust = train(init_params("GDC", g.d, g.n_classes, 32, seed=seed, aggregation="soft_median",
                                   temperature=1.0), g, M_gdc,
                       TrainConfig(max_epochs=1000, patience=50, dropout=0.0, seed=seed))
        M_adv = gdc_preprocess(g.with_adjacency(tanh.perturbed_adjacency), tc)
        runs.append({"clean": tanh.clean_acc, "prbcd": tanh.adv_acc, "ce": ce.adv_acc,
                     "grbcd": greedy.adv_acc,
                     "robust_clean": accuracy(predict(robust, g, M_gdc), g.labels, test),
                     "robust_adv": accuracy(predict(robust, g, M_adv), g.labels, test)})
    means = {k: float(np.mean([r[k] for r in runs])) for k in runs[0]}
    return means, time.perf_counter() - t0


def test_global_attack_reproduction(verdict, global_runs):
    m, elapsed = global_runs
    checks = [m["clean"] >= 0.80, m["prbcd"] <= 0.70, m["grbcd"] <= 0.70,
              m["robust_adv"] >= m["prbcd"] + 0.05, elapsed < 15 * 60]
    ok = all(checks)
    verdict(4, ok, f"clean {m['clean']:.3f}, PR-BCD {m['prbcd']:.3f}, GR-BCD {m['grbcd']:.3f}, "
                   f"Soft Median GDC {m['robust_adv']:.3f} (clean {m['robust_clean']:.3f}), {elapsed:.0f} s")
    assert ok


def test_tanh_margin_beats_ce(verdict, global_runs):
    m, _ = global_runs
    ok = m["prbcd"] <= m["ce"] - 0.02
    verdict(5, ok, f"tanh margin {m['prbcd']:.3f} vs CE {m['ce']:.3f}")
    assert ok


# -- 6 -----------------------------------------------------------------------

def test_loss_property_table(verdict):
    t0 = time.perf_counter()
    mismatches, total = [], 0
    for kind, ref in REFERENCE_PROPERTIES.items():
        res = check_loss_properties(kind)
        for prop, want in ref.items():
            if want is None:
                continue
            total += 1
            if res[prop] != want:
                mismatches.append(f"{kind.value} {prop}")
    elapsed = time.perf_counter() - t0
    ok = not mismatches and elapsed < 5
    verdict(6, ok, f"{total - len(mismatches)}/{total} definite cells, {elapsed:.2f} s"
                   + (f", mismatched: {', '.join(mismatches)}" if mismatches else ""))
    assert ok


# -- 7 -----------------------------------------------------------------------

def _union_sizes(n, k, b, trials, rng):
    out = np.empty(trials)
    for t in range(trials):
        picks = np.argpartition(rng.random((b, n)), k - 1, axis=1)[:, :k]
        out[t] = np.unique(picks).size
    return out


def test_ppr_row_update(verdict):
    rng = np.random.default_rng(0)
    cfg = TeleportConfig()
    worst, done = 0.0, 0
    gi = 0
    while done < 200:
        gi += 1
        n = int(rng.integers(20, 201))
        g = sbm_generate([n // 2, n - n // 2], min(1.0, 8 / n), 1 / n, 2, seed=gi)
        A = g.adjacency
        Pi = ppr_exact(g, cfg)
        prime = prime_rows(sp.csr_matrix(Pi), cfg.alpha)
        lookup = EdgeLookup(A)
        for _ in range(10):
            if done == 200:
                break
            i = int(rng.integers(n))
            lo, hi = A.indptr[i], A.indptr[i + 1]
            if hi == lo:
                continue
            m = int(rng.integers(1, 6))
            cols = rng.choice(np.setdiff1d(np.arange(n), [i]), m, replace=False)
            s = lookup.signs(np.full(m, i), cols)
            ai, av = A.indices[lo:hi], A.data[lo:hi]
            # removing every edge of the row leaves it empty, which the update rejects
            if av.sum() + s.sum() <= 0:
                continue
            up = ppr_row_update(prime, i, ai, av, av.sum(), cols, s, np.ones(m), cfg.alpha)
            Ap = perturb_weighted(A.tocoo(), np.full(m, i), cols, s, False)
            worst = max(worst, np.abs(up.dense(n) - ppr_exact(Ap, cfg)[i]).max())
            done += 1

    g = sbm_generate([40, 40], 0.1, 0.02, 2, seed=99)
    A = g.adjacency
    prime = prime_rows(sp.csr_matrix(ppr_exact(g, cfg)), cfg.alpha)
    i = 5
    cols = np.array([1, 17, 44, 60, 79])
    s = EdgeLookup(A).signs(np.full(5, i), cols)
    lo, hi = A.indptr[i], A.indptr[i + 1]
    args = (prime, i, A.indices[lo:hi], A.data[lo:hi], A.data[lo:hi].sum(), cols, s)
    p = rng.uniform(0.1, 0.9, 5)
    gvec = rng.standard_normal(g.n)
    grad = ppr_row_update(*args, p, cfg.alpha).vjp(gvec)
    h = 1e-6
    fd = np.array([(gvec @ ppr_row_update(*args, p + h * e, cfg.alpha).dense(g.n)
                    - gvec @ ppr_row_update(*args, p - h * e, cfg.alpha).dense(g.n)) / (2 * h)
                   for e in np.eye(5)])
    fd_err = np.abs(grad - fd).max() / np.abs(fd).max()

    mc = {}
    for n, k, b in [(100, 10, 5), (1000, 64, 100)]:
        sizes = _union_sizes(n, k, b, 300, rng)
        mc[(n, k, b)] = abs(sizes.mean() / expected_nonzero_columns(n, k, b) - 1)
    ok = done >= 200 and worst < 1e-8 and fd_err < 1e-5 and max(mc.values()) < 0.15
    verdict(7, ok, f"{done} updates, max row err {worst:.1e}, vjp rel err {fd_err:.1e}, "
                   f"E[r] rel dev {max(mc.values()):.3f}")
    assert ok


# -- 8 -----------------------------------------------------------------------

def test_breakdown_point(verdict):
    rng = np.random.default_rng(0)
    mags = 10.0 ** np.arange(3, 13)
    bounded = 0
    for _ in range(500):
        n = int(rng.integers(3, 22))
        m = int(rng.integers(0, (n + 1) // 2))
        T = float(rng.choice([0.1, 1.0, 10.0]))
        X = rng.standard_normal((n, int(rng.integers(1, 6))))
        bounded += breakdown_stress(X, SoftMedianConfig(T), m, mags, direction=rng.standard_normal(X.shape[1]),
                                    rng=rng)["bounded"]
    escaped = 0
    for _ in range(500):
        n = int(rng.integers(3, 22))
        m = math.ceil((n + 1) / 2)
        X = rng.standard_normal((n, int(rng.integers(1, 6))))
        escaped += not breakdown_stress(X, SoftMedianConfig(10.0), m, mags,
                                        direction=rng.standard_normal(X.shape[1]), rng=rng)["bounded"]
    ok = bounded == 500 and escaped >= 450
    verdict(8, ok, f"minority bounded {bounded}/500, majority escaped {escaped}/500")
    assert ok


# -- 9 -----------------------------------------------------------------------

def test_large_temperature_is_weighted_sum(verdict):
    g = sbm_generate([30, 30], 0.15, 0.02, 6, seed=1)
    M = gcn_normalize(g)
    robust = init_params("GCN", 6, 2, 16, seed=3, aggregation="soft_median", temperature=1e6)
    plain = init_params("GCN", 6, 2, 16, seed=3)
    a, _ = forward(robust, M, g.features)
    b, _ = forward(plain, M, g.features)
    gap = float(np.abs(a.logits - b.logits).max())
    ok = gap < 1e-5
    verdict(9, ok, f"max logit diff {gap:.1e}")
    assert ok


# -- 10 ----------------------------------------------------------------------

def _prbcd_bytes(n, block):
    g = sbm_generate([n // 2, n - n // 2], 10 / n, 1 / n, 4, seed=0)
    g = g.with_splits(make_splits(g.labels, 10, 0))
    params = init_params("GCN", 4, 2, 8, seed=0)
    res = prbcd_global(g, params, "ce", 20, PRBCDConfig(block_size=block, epochs=3, resample_epochs=2))
    return res.peak_bytes


def _pgd_bytes(n):
    g = sbm_generate([n // 2, n - n // 2], 10 / n, 1 / n, 4, seed=0)
    g = g.with_splits(make_splits(g.labels, 5, 0))
    params = init_params("GCN", 4, 2, 8, seed=0)
    return pgd_dense(g, params, "ce", 10, PRBCDConfig(epochs=2, resample_epochs=0)).peak_bytes


def test_memory_scaling(verdict):
    by_block = [_prbcd_bytes(1000, b) for b in (5_000, 10_000, 20_000)]
    block_ratios = [y / x for x, y in zip(by_block, by_block[1:])]
    n_ratio = _prbcd_bytes(10_000, 10_000) / by_block[1]
    dense = [_pgd_bytes(n) for n in (200, 400, 800)]
    dense_ratios = [y / x for x, y in zip(dense, dense[1:])]
    ok = (all(1.5 <= r <= 2.5 for r in block_ratios) and 0.9 <= n_ratio <= 1.1
          and all(3.2 <= r <= 4.8 for r in dense_ratios))
    verdict(10, ok, f"block doubling {[round(r, 2) for r in block_ratios]}, n x10 {n_ratio:.3f}, "
                    f"dense doubling {[round(r, 2) for r in dense_ratios]}")
    assert ok


# -- 11 ----------------------------------------------------------------------

def test_local_attack_flip_rates(verdict):
    g = sbm_generate([125] * 4, 0.08, 0.01, 16, seed=0, noise=1.0)
    g = g.with_splits(make_splits(g.labels, 20, 0))
    tc = TeleportConfig(alpha=0.15, k=32)
    ppr = ppr_power_iteration(g, tc)
    deg = np.diff(g.adjacency.indptr)
    models = {agg: train(init_params("PPRGo", g.d, g.n_classes, 32, seed=0, aggregation=agg, temperature=0.5),
                         g, ppr.matrix, TrainConfig(max_epochs=300, patience=50, dropout=0.0))
              for agg in ("sum", "soft_median")}
    scales = (0.5, 1.0)
    flips = {(name, s): [] for name in ("sum", "soft_median", "dice") for s in scales}
    for scale in scales:
        for seed in range(3):
            targets = np.random.default_rng(seed).choice(g.splits.test, 20, replace=False)
            for agg, params in models.items():
                H = encode(params, g.features)
                for t in targets:
                    budget = max(1, int(round(scale * deg[t])))
                    cfg = PRBCDConfig(block_size=400, epochs=30, resample_epochs=20, base_lr=0.1, seed=seed)
                    res = prbcd_local_pprgo(g, params, ppr, int(t), budget, cfg, tc)
                    flips[agg, scale].append(res.extra["recomputed_margin"] < 0)
                    if agg == "sum":
                        cols = dice_local(g, int(t), budget, DICEConfig(seed=seed))
                        flips["dice", scale].append(local_margin_after(g, params, cols, int(t), tc, H) < 0)
    rate = {k: float(np.mean(v)) for k, v in flips.items()}
    ok = rate["sum", 1.0] > rate["dice", 1.0] and all(rate["soft_median", s] < rate["sum", s] for s in scales)
    verdict(11, ok, ", ".join(f"{name}@{s}: {rate[name, s]:.2f}" for name, s in rate))
    assert ok
