"""Scaling check: attention cost should grow linearly in the node count.

Counts multiply-adds for the cross-scale attention blocks and times one
training step (forward + loss + backward) at a ladder of node counts with
the region count held fixed. Linear scaling shows up as counted madds
doubling exactly per size doubling and wall time ratios near 2. A dense
node-by-node self-attention reference cost is printed for contrast; that
one quadruples per doubling.

Usage:
  python3 scripts/complexity_scaling.py --sizes 512 1024 2048
"""

from __future__ import annotations

import argparse

import numpy as np

from nestcast.evalbench import attention_cost, bench, self_attention_reference_cost
from nestcast.model import ModelConfig, composite_loss, forward, init_params


def time_step(n_nodes: int, n_regions: int, embed: int, layers: int,
              batch: int, runs: int, warmup: int, seed: int):
    mcfg = ModelConfig(
        n_nodes=n_nodes,
        n_regions=n_regions,
        channels=1,
        lookback=12,
        patch_len=4,
        embed_dim=embed,
        attn_dim=None,
        layers=layers,
        quantiles=(0.1, 0.5, 0.9),
        steps_per_day=96,
    )
    ps = init_params(mcfg, seed=seed)
    rng = np.random.default_rng([seed, 9, n_nodes])
    windows = rng.normal(size=(batch, n_nodes, mcfg.lookback, 1))
    guidance = rng.normal(size=(batch, n_regions, mcfg.patch_len, 1))
    node_t = rng.normal(size=(batch, n_nodes, mcfg.patch_len, 1))
    reg_t = rng.normal(size=(batch, n_regions, mcfg.patch_len, 1))
    t_last = np.full(batch, mcfg.steps_per_day)

    def step() -> None:
        bundle = forward(ps, mcfg, windows, guidance, t_last)
        total, _ = composite_loss(bundle, node_t, reg_t, reg_t, mcfg)
        ps.zero_grad()
        total.backward()

    timing = bench(step, n_runs=runs, n_warmup=warmup)
    cost = attention_cost(mcfg, batch=batch, with_guidance=True)
    ref = self_attention_reference_cost(n_nodes, mcfg.attn_dim, layers)
    return timing.median_s, cost["attention"], ref


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[512, 1024, 2048])
    ap.add_argument("--regions", type=int, default=64)
    ap.add_argument("--embed", type=int, default=32)
    ap.add_argument("--layers", type=int, default=2)
    ap.add_argument("--batch", type=int, default=1)
    ap.add_argument("--runs", type=int, default=5)
    ap.add_argument("--warmup", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    print(f"{'N':>6} {'median_s':>10} {'attn_madds':>12} {'dense_ref_madds':>16}")
    results = []
    for n in args.sizes:
        med, madds, ref = time_step(
            n, args.regions, args.embed, args.layers,
            args.batch, args.runs, args.warmup, args.seed,
        )
        results.append((n, med, madds, ref))
        print(f"{n:>6} {med:>10.4f} {madds:>12} {ref:>16}")
    for (n0, t0, m0, r0), (n1, t1, m1, r1) in zip(results, results[1:]):
        print(
            f"{n0}->{n1}: wall x{t1 / t0:.2f}  attn_madds x{m1 / m0:.2f}  "
            f"dense_ref x{r1 / r0:.2f}"
        )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
