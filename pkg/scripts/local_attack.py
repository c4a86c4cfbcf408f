"""Local PR-BCD vs. DICE on vanilla and Soft Median PPRGo (500-node SBM)."""
import argparse

import numpy as np

from scalegnn.attacks import DICEConfig, PRBCDConfig, dice_local, prbcd_local_pprgo
from scalegnn.attacks.local import encode, local_margin_after
from scalegnn.graph import make_splits, sbm_generate
from scalegnn.models import TrainConfig, init_params, train
from scalegnn.ppr import TeleportConfig, ppr_power_iteration


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scales", type=float, nargs="+", default=[0.25, 0.5, 1.0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--targets", type=int, default=20)
    ap.add_argument("--temperature", type=float, default=0.5)
    args = ap.parse_args()

    g = sbm_generate([125] * 4, 0.08, 0.01, 16, seed=0, noise=1.0)
    g = g.with_splits(make_splits(g.labels, 20, 0))
    tc = TeleportConfig(alpha=0.15, k=32)
    ppr = ppr_power_iteration(g, tc)
    deg = np.diff(g.adjacency.indptr)
    models = {agg: train(init_params("PPRGo", g.d, g.n_classes, 32, seed=0, aggregation=agg,
                                     temperature=args.temperature),
                         g, ppr.matrix, TrainConfig(max_epochs=300, patience=50, dropout=0.0))
              for agg in ("sum", "soft_median")}
    print("scale  model        prbcd_local  dice_local")
    for scale in args.scales:
        for agg, params in models.items():
            H = encode(params, g.features)
            pr, dc = [], []
            for seed in args.seeds:
                targets = np.random.default_rng(seed).choice(g.splits.test, args.targets, replace=False)
                for t in targets:
                    budget = max(1, int(round(scale * deg[t])))
                    cfg = PRBCDConfig(block_size=400, epochs=30, resample_epochs=20, base_lr=0.1, seed=seed)
                    res = prbcd_local_pprgo(g, params, ppr, int(t), budget, cfg, tc)
                    pr.append(res.extra["recomputed_margin"] < 0)
                    cols = dice_local(g, int(t), budget, DICEConfig(seed=seed))
                    dc.append(local_margin_after(g, params, cols, int(t), tc, H) < 0)
            print(f"{scale:5.2f}  {agg:11s}  {np.mean(pr):11.2f}  {np.mean(dc):10.2f}")


if __name__ == "__main__":
    main()
