"""Command-line experiment runner.

Every subcommand reads a JSON experiment config and writes into an output
directory. Files with metrics depend only on the config and seeds; wall-clock
times and the git description go into ``<command>_record.json`` next to them.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

log = logging.getLogger("scalegnn")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

ATTACK_COLUMNS = ["attack", "loss", "epsilon", "seed", "adv_acc", "clean_acc", "runtime_s", "peak_bytes"]
GLOBAL_ATTACKS = ("prbcd", "grbcd", "pgd", "fgsm", "dice")
LOCAL_ATTACKS = ("prbcd_local", "dice_local")


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    tmp.replace(path)


def _read_csv(path: Path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


class Phases:
    """Wall-clock bookkeeping for the run record."""

    def __init__(self):
        self.times = {}

    def __call__(self, name):
        phases = self

        class _Timer:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                phases.times[name] = phases.times.get(name, 0.0) + time.perf_counter() - self.t0
        return _Timer()


def _record(ctx, command: str, phases: Phases, metrics: dict, artifacts: dict, peak_bytes: int = 0):
    _write_json(ctx.out / f"{command}_record.json", {
        "command": command, "config": ctx.cfg.to_dict(), "git": _git_describe(),
        "wall_clock_s": phases.times, "peak_attack_bytes": peak_bytes,
        "metrics": metrics, "artifacts": artifacts,
    })


# ----------------------------------------------------------------------------
# Shared plumbing

class Context:
    def __init__(self, cfg, out: Path):
        self.cfg, self.out = cfg, out
        self._graph = None

    @property
    def graph(self):
        if self._graph is None:
            self._graph = build_graph(self.cfg.dataset)
        return self._graph


def build_graph(ds):
    from .graph import load_graph, make_splits, sbm_generate
    if ds.sbm is not None:
        s = ds.sbm
        g = sbm_generate(s["sizes"], s["p_in"], s["p_out"], s.get("feature_dim", len(s["sizes"])),
                         seed=s.get("seed", 0), noise=s.get("noise", 0.1))
    else:
        g = load_graph(ds.edges, ds.features, ds.labels, ds.directed, ds.splits, ds.largest_component)
    if g.splits is None:
        g = g.with_splits(make_splits(g.labels, ds.per_class, ds.split_seed))
    return g


def message_passing(kind: str, g, defense):
    """Matrix a model of ``kind`` consumes on graph ``g``."""
    from .graph import gcn_normalize
    from .ppr import gdc_preprocess, ppr_power_iteration
    if kind in ("GCN", "SGC"):
        return gcn_normalize(g)
    if kind == "GDC":
        return gdc_preprocess(g, defense.teleport())
    return ppr_power_iteration(g, defense.teleport()).matrix


def split_accuracy(params, g, matrix) -> float:
    from .graph import accuracy
    from .models import predict
    return accuracy(predict(params, g, matrix), g.labels, g.splits.test)


def _checkpoint(ctx, seed: int, path=None):
    from .config import ConfigError
    from .models import ModelParams
    p = Path(path) if path else ctx.out / "model" / f"seed{seed}.bin"
    if not p.exists():
        raise ConfigError(f"checkpoint not found: {p}")
    params = ModelParams.load(p)
    g = ctx.graph
    if params.in_dim != g.d or params.n_classes != g.n_classes:
        raise ConfigError(f"checkpoint {p} expects {params.in_dim} features / {params.n_classes} classes, "
                          f"dataset has {g.d} / {g.n_classes}")
    return params


def _cells(threads: int, fn, items):
    """Run independent cells, optionally on a thread pool; results keep input order."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ----------------------------------------------------------------------------
# Subcommands

def cmd_sbm_gen(ctx, args) -> dict:
    from .config import ConfigError
    from .graph import save_graph, size_report
    if ctx.cfg.dataset.sbm is None:
        raise ConfigError("sbm-gen needs dataset.sbm in the config")
    phases = Phases()
    with phases("generate"):
        g = ctx.graph
        paths = save_graph(g, ctx.out / "graph")
    metrics = {**size_report(g), "n_edges": g.n_edges, "n_classes": g.n_classes}
    _write_json(ctx.out / "graph" / "metrics.json", metrics)
    _record(ctx, "sbm-gen", phases, metrics, paths)
    return metrics


def train_one(ctx, seed: int, spec=None, matrix=None):
    """Train the configured model (or ``spec``) for one seed and return (params, metrics)."""
    from .graph import accuracy
    from .models import init_params, predict, train
    m = spec or ctx.cfg.model
    g = ctx.graph
    M = message_passing(m.kind, g, ctx.cfg.defense) if matrix is None else matrix
    params = init_params(m.kind, g.d, g.n_classes, m.hidden_dim, m.n_layers, seed=seed,
                         aggregation=m.aggregation, temperature=m.temperature, steps=m.steps)
    params = train(params, g, M, m.train_config(seed))
    pred = predict(params, g, M)
    metrics = {"seed": seed, "best_epoch": params.history["best_epoch"],
               "val_acc": accuracy(pred, g.labels, g.splits.val),
               "test_acc": accuracy(pred, g.labels, g.splits.test)}
    return params, metrics


def cmd_train(ctx, args) -> dict:
    phases = Phases()
    with phases("load"):
        g = ctx.graph
    with phases("preprocess"):
        M = message_passing(ctx.cfg.model.kind, g, ctx.cfg.defense)
    artifacts, per_seed = {}, []
    with phases("train"):
        for seed in ctx.cfg.seeds:
            params, metrics = train_one(ctx, seed, matrix=M)
            path = ctx.out / "model" / f"seed{seed}.bin"
            path.parent.mkdir(parents=True, exist_ok=True)
            params.save(path)
            artifacts[f"seed{seed}"] = str(path)
            per_seed.append(metrics)
    metrics = {"model": ctx.cfg.model.kind, "runs": per_seed}
    _write_json(ctx.out / "model" / "metrics.json", metrics)
    _record(ctx, "train", phases, metrics, artifacts)
    return metrics


def _global_cell(ctx, params, kind, loss, eps, seed):
    from .attacks import AttackBudget, DICEConfig, FGSMConfig, dice, fgsm_dense, grbcd_global
    from .attacks import pgd_dense, prbcd_global
    from .config import ConfigError
    g, a = ctx.graph, ctx.cfg.attack
    try:
        budget = AttackBudget.from_epsilon(eps, g.n_edges)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if kind == "dice":
        return dice(g, budget, DICEConfig(seed=seed))
    if params.kind not in ("GCN", "SGC"):
        raise ConfigError(f"global attacks need a GCN or SGC surrogate, got {params.kind}")
    if kind == "prbcd":
        return prbcd_global(g, params, loss, budget, a.prbcd(seed))
    if kind == "grbcd":
        return grbcd_global(g, params, loss, budget, a.grbcd(seed))
    if kind == "pgd":
        return pgd_dense(g, params, loss, budget, a.prbcd(seed), cap=a.dense_cap)
    return fgsm_dense(g, params, loss, budget, FGSMConfig(seed, a.freeze_normalization), cap=a.dense_cap)


def _local_cell(ctx, params, kind, scale, seed):
    """Flip rate over ``targets`` test nodes with per-node budget ``scale * degree``."""
    import numpy as np
    from .attacks import dice_local, prbcd_local_pprgo
    from .attacks.local import encode, local_margin_after
    from .config import ConfigError
    from .ppr import ppr_power_iteration
    if params.kind != "PPRGo":
        raise ConfigError("local attacks need a PPRGo checkpoint")
    g, a, tc = ctx.graph, ctx.cfg.attack, ctx.cfg.defense.teleport()
    rng = np.random.default_rng(seed)
    targets = np.sort(rng.choice(g.splits.test, size=min(a.targets, g.splits.test.size), replace=False))
    deg = np.diff(g.adjacency.indptr)
    ppr = ppr_power_iteration(g, tc, sources=targets)
    H = encode(params, g.features)
    t0 = time.perf_counter()
    clean, adv, peak, per_target = [], [], 0, []
    for t in targets:
        budget = max(1, int(round(scale * deg[t])))
        if kind == "prbcd_local":
            cfg = a.prbcd(seed)
            cfg.block_size = max(min(cfg.block_size, g.n - 1), budget + 1)
            res = prbcd_local_pprgo(g, params, ppr, int(t), budget, cfg, tc)
            before, after = res.extra["clean_margin"], res.extra["recomputed_margin"]
            peak = max(peak, res.peak_bytes)
        else:
            from .attacks.local import aggregate_row, _margin
            from .attacks import DICEConfig
            cols = dice_local(g, int(t), budget, DICEConfig(seed=seed))
            idx, vals = ppr.row(int(t))
            before = _margin(aggregate_row(params, idx, vals, H)[0], int(g.labels[t]))
            after = local_margin_after(g, params, cols, int(t), tc, H)
        clean.append(before >= 0)
        adv.append(after >= 0)
        per_target.append({"target": int(t), "budget": budget, "clean_margin": before, "adv_margin": after})
    return {"clean_acc": float(np.mean(clean)), "adv_acc": float(np.mean(adv)), "peak_bytes": peak,
            "runtime_s": time.perf_counter() - t0, "targets": per_target}


def cmd_attack(ctx, args) -> dict:
    import numpy as np
    from .graph import accuracy
    from .losses import HIST_BINS, margin_distribution
    from .models import forward, predict
    a = ctx.cfg.attack
    phases = Phases()
    with phases("load"):
        g = ctx.graph
        surrogates = {s: _checkpoint(ctx, s, args.checkpoint) for s in ctx.cfg.seeds}
        victims = {s: _checkpoint(ctx, s, args.victim) for s in ctx.cfg.seeds} if args.victim else None
    adir = ctx.out / "attacks"
    adir.mkdir(parents=True, exist_ok=True)

    cells = []
    for kind in a.kinds:
        losses = ["-"] if kind in ("dice", "dice_local") else a.losses
        levels = a.budget_scale if kind in LOCAL_ATTACKS else a.epsilons
        for loss in losses:
            for eps in levels:
                for seed in ctx.cfg.seeds:
                    cells.append((kind, loss, eps, seed))

    def run(cell):
        kind, loss, eps, seed = cell
        name = f"{kind}_{loss}_eps{eps}_seed{seed}"
        if kind in LOCAL_ATTACKS:
            out = _local_cell(ctx, surrogates[seed], kind, eps, seed)
            _write_json(adir / f"{name}.json", out)
            return [kind, loss, eps, seed, out["adv_acc"], out["clean_acc"], round(out["runtime_s"], 3),
                    out["peak_bytes"]], None
        res = _global_cell(ctx, surrogates[seed], kind, loss, eps, seed)
        res.save(adir / f"{name}.json")
        res.write_diff(adir / f"{name}.diff", g.adjacency)
        clean_acc, adv_acc = res.clean_acc, res.adv_acc
        hist = None
        if victims is not None or clean_acc is None:
            # transfer: evaluate the victim (or the surrogate for model-free attacks)
            v = victims[seed] if victims is not None else surrogates[seed]
            M_clean = message_passing(v.kind, g, ctx.cfg.defense)
            M_adv = message_passing(v.kind, g.with_adjacency(res.perturbed_adjacency), ctx.cfg.defense)
            clean_acc = accuracy(predict(v, g, M_clean), g.labels, g.splits.test)
            pred, _ = forward(v, M_adv, g.features)
            adv_acc = accuracy(pred.predicted, g.labels, g.splits.test)
        else:
            from .models import forward_on_adjacency
            pred, _ = forward_on_adjacency(surrogates[seed], res.perturbed_adjacency, g.features)
        hist = margin_distribution(pred, g.labels, g.splits.test)["counts"]
        return [kind, loss, eps, seed, adv_acc, clean_acc, round(res.runtime_s, 3), res.peak_bytes], hist

    with phases("attack"):
        results = _cells(ctx.cfg.threads, run, cells)
    rows = [r for r, _ in results]
    _write_csv(ctx.out / "attacks.csv", ATTACK_COLUMNS, rows)
    margin_rows = []
    for (row, hist) in results:
        if hist is not None:
            for lo, hi, c in zip(HIST_BINS[:-1], HIST_BINS[1:], hist):
                margin_rows.append([*row[:4], round(float(lo), 3), round(float(hi), 3), int(c)])
    _write_csv(ctx.out / "margins.csv", ["attack", "loss", "epsilon", "seed", "bin_lo", "bin_hi", "count"],
               margin_rows)
    summary = summarize(rows)
    _write_csv(ctx.out / "attacks_summary.csv",
               ["attack", "loss", "epsilon", "n_seeds", "adv_acc_mean", "adv_acc_3sem", "clean_acc_mean"],
               summary)
    meta = {"n": g.n, "n_edges": g.n_edges, "victim": bool(args.victim),
            "surrogate": next(iter(surrogates.values())).kind}
    _write_json(ctx.out / "attacks_meta.json", meta)
    peak = max([int(r[7]) for r in rows] or [0])
    _record(ctx, "attack", phases, {"rows": len(rows), **meta},
            {"csv": str(ctx.out / "attacks.csv"), "dir": str(adir)}, peak)
    return {"rows": summary}


def summarize(rows):
    """Mean and three standard errors of the mean per (attack, loss, epsilon)."""
    import numpy as np
    groups = {}
    for r in rows:
        groups.setdefault((r[0], r[1], float(r[2])), []).append((float(r[4]), float(r[5])))
    out = []
    for (kind, loss, eps), vals in groups.items():
        adv = np.array([v[0] for v in vals])
        clean = np.array([v[1] for v in vals])
        sem3 = 3 * adv.std(ddof=1) / np.sqrt(adv.size) if adv.size > 1 else 0.0
        out.append([kind, loss, eps, adv.size, round(float(adv.mean()), 6), round(float(sem3), 6),
                    round(float(clean.mean()), 6)])
    return out


_CELL = re.compile(r"^([a-z]+)_(.+)_eps([^_]+)_seed-?\d+$")


def cmd_defend_eval(ctx, args) -> dict:
    """Train the defense model and evaluate it on every stored global perturbation."""
    from .attacks import apply_flips, read_diff
    from .config import ModelSpec
    d = ctx.cfg.defense
    spec = ModelSpec(**{**ctx.cfg.model.__dict__, "kind": d.kind, "aggregation": d.aggregation,
                        "temperature": d.temperature, "hidden_dim": d.hidden_dim, "dropout": d.dropout})
    g = ctx.graph
    phases = Phases()
    with phases("preprocess"):
        M = message_passing(d.kind, g, d)
    rows, metrics = [], []
    for seed in ctx.cfg.seeds:
        with phases("train"):
            params, m = train_one(ctx, seed, spec, M)
        metrics.append(m)
        diffs = sorted((ctx.out / "attacks").glob(f"*_seed{seed}.diff"))
        with phases("evaluate"):
            for path in diffs:
                kind, loss, eps = _CELL.match(path.stem).groups()
                flips = read_diff(path)
                adj = apply_flips(g.adjacency, flips[:, 0], flips[:, 1], symmetric=not g.directed)
                Ma = message_passing(d.kind, g.with_adjacency(adj), d)
                rows.append([f"{d.kind}-{d.aggregation}", kind, loss, float(eps), seed,
                             split_accuracy(params, g.with_adjacency(adj), Ma), m["test_acc"]])
    _write_csv(ctx.out / "defense.csv",
               ["defense", "attack", "loss", "epsilon", "seed", "adv_acc", "clean_acc"], rows)
    _record(ctx, "defend-eval", phases, {"runs": metrics, "rows": len(rows)},
            {"csv": str(ctx.out / "defense.csv")})
    return {"runs": metrics}


def cmd_ppr(ctx, args) -> dict:
    from .ppr import ppr_power_iteration
    g = ctx.graph
    phases = Phases()
    with phases("ppr"):
        ppr = ppr_power_iteration(g, ctx.cfg.defense.teleport())
    path = ctx.out / "ppr" / "ppr.bin"
    path.parent.mkdir(parents=True, exist_ok=True)
    ppr.save(path)
    metrics = {"n": g.n, "nnz": int(ppr.matrix.nnz), "alpha": ppr.alpha, "k": ppr.k}
    _write_json(ctx.out / "ppr" / "metrics.json", metrics)
    _record(ctx, "ppr", phases, metrics, {"ppr": str(path)})
    return metrics


def _cell(v) -> str:
    return "o" if v is None else ("+" if v else "-")


def cmd_loss_check(ctx, args) -> dict:
    from .losses import REFERENCE_PROPERTIES, LossKind, check_loss_properties
    rows, mismatches = [], 0
    for kind in LossKind:
        res = check_loss_properties(kind)
        pub = REFERENCE_PROPERTIES[kind]
        row = [kind.value]
        for prop in ("I", "II", "A", "B"):
            row += [_cell(res[prop]), _cell(pub[prop])]
            mismatches += pub[prop] is not None and pub[prop] != res[prop]
        rows.append(row)
    header = ["loss", "I", "I_ref", "II", "II_ref", "A", "A_ref", "B", "B_ref"]
    _write_csv(ctx.out / "loss_properties.csv", header, rows)
    for r in [header] + rows:
        print("  ".join(f"{c:<11}" for c in r))
    return {"mismatches": int(mismatches)}


def _md_table(header, rows) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(str(c) for c in r) + " |" for r in rows]
    return "\n".join(lines)


def cmd_report(ctx, args) -> dict:
    from .config import ConfigError
    run = Path(args.run_dir) if args.run_dir else ctx.out
    csv_path = run / "attacks.csv"
    if not csv_path.exists() or not _read_csv(csv_path):
        raise ConfigError(f"no completed runs in {run}")
    rows = _read_csv(csv_path)
    meta_path = run / "attacks_meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    n = int(meta.get("n", 0))
    arch = meta.get("surrogate", "model") + (" (transfer)" if meta.get("victim") else "")
    summary = summarize([[r[c] for c in ATTACK_COLUMNS] for r in rows])

    def fmt(mean, sem):
        return f"{mean:.3f} ± {sem:.3f}"

    # architectures x attacks at every epsilon
    def column(kind, loss):
        return kind if loss == "-" else f"{kind} ({loss})"

    columns = sorted({column(s[0], s[1]) for s in summary})
    grid = {}
    for kind, loss, eps, _, mean, sem, clean in summary:
        grid.setdefault((arch, eps), {"clean": clean})[column(kind, loss)] = fmt(mean, sem)
    grid_rows = [[a, e, f"{v['clean']:.3f}"] + [v.get(c, "") for c in columns]
                 for (a, e), v in sorted(grid.items())]
    sections = ["# Attack summary", "", _md_table(["architecture", "epsilon", "clean"] + columns, grid_rows)]
    attacks = sorted({s[0] for s in summary})

    # loss comparison: rows = losses, columns = epsilon, one table per attack
    for kind in attacks:
        eps_list = sorted({s[2] for s in summary if s[0] == kind})
        by_loss = {}
        for k, loss, eps, _, mean, sem, _ in summary:
            if k == kind:
                by_loss.setdefault(loss, {})[eps] = fmt(mean, sem)
        sections += ["", f"## Loss comparison: {kind}", "",
                     _md_table(["loss"] + [str(e) for e in eps_list],
                               [[l] + [v.get(e, "") for e in eps_list] for l, v in sorted(by_loss.items())])]

    # memory: measured attack-state bytes next to a dense n^2 float32 extrapolation
    mem = {}
    for r in rows:
        key = r["attack"]
        mem[key] = max(mem.get(key, 0), int(r["peak_bytes"]))
    mem_rows = [[k, v, 4 * n * n] for k, v in sorted(mem.items())]
    sections += ["", "## Memory", "", _md_table(["attack", "peak_bytes", "dense_bytes_extrapolated"], mem_rows)]

    defense_path = run / "defense.csv"
    if defense_path.exists():
        drows = _read_csv(defense_path)
        dsum = summarize([[r["attack"], r["loss"], r["epsilon"], r["seed"], r["adv_acc"], r["clean_acc"]]
                          for r in drows])
        name = drows[0]["defense"] if drows else "defense"
        sections += ["", f"## Defense: {name}", "",
                     _md_table(["attack", "loss", "epsilon", "adv_acc", "clean"],
                               [[k, l, e, fmt(m, s), f"{c:.3f}"] for k, l, e, _, m, s, c in dsum])]

    (run / "report.md").write_text("\n".join(sections) + "\n")
    _write_csv(run / "report.csv",
               ["attack", "loss", "epsilon", "n_seeds", "adv_acc_mean", "adv_acc_3sem", "clean_acc_mean",
                "peak_bytes", "dense_bytes_extrapolated"],
               [s + [mem[s[0]], 4 * n * n] for s in summary])
    return {"rows": len(summary)}


COMMANDS = {
    "train": cmd_train, "attack": cmd_attack, "defend-eval": cmd_defend_eval, "ppr": cmd_ppr,
    "loss-check": cmd_loss_check, "report": cmd_report, "sbm-gen": cmd_sbm_gen,
}
NO_CONFIG = ("loss-check", "report")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scalegnn", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config")
    common.add_argument("--seed", type=int, action="append", help="override the seed list (repeatable)")
    common.add_argument("--threads", type=int, help="worker threads for independent cells")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "attack":
            p.add_argument("--checkpoint", help="surrogate checkpoint (default: <out>/model/seed<N>.bin)")
            p.add_argument("--victim", help="evaluate this checkpoint on the perturbed graphs (transfer)")
        if name == "report":
            p.add_argument("run_dir", nargs="?", help="run directory (default: --out)")
    return parser


def _load(args):
    from .config import ConfigError, ExperimentConfig, DatasetSpec, load_config
    if args.config is None:
        if args.command in NO_CONFIG:
            cfg = ExperimentConfig(DatasetSpec(sbm={"sizes": [1, 1], "p_in": 1, "p_out": 0}))
        else:
            raise ConfigError(f"{args.command} needs --config")
    else:
        cfg = load_config(args.config)
    if args.seed:
        cfg.seeds = list(args.seed)
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be positive")
        cfg.threads = args.threads
    if args.out is not None:
        cfg.out_dir = str(args.out)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        from .config import ConfigError
    except ImportError as exc:  # pragma: no cover - broken install
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        cfg = _load(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    from threadpoolctl import threadpool_limits
    ctx = Context(cfg, Path(cfg.out_dir))
    ctx.out.mkdir(parents=True, exist_ok=True)
    try:
        # with several workers each one gets a single BLAS thread
        with threadpool_limits(limits=1 if cfg.threads > 1 else None):
            result = COMMANDS[args.command](ctx, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure maps to the runtime exit code
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if args.verbose:
        print(json.dumps(result, indent=2, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
