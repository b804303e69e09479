"""Command-line pipeline: nestcast <subcommand>.

Subcommands map onto the library stages: gen-data (synthetic panels),
cluster (regionalization), train, infer (rollout to a forecast file), eval
(metrics report), snr-check (pooling-bound study), bench (wall-time/cost
table), and demo (the whole pipeline end to end, deterministically).

Conventions shared by every subcommand: results go to stdout as JSON or
plain summary lines, failures go to stderr as one line starting with
"error:" and a nonzero exit code, and every file written gets a sidecar
manifest recording the command, seed, config hash, and library versions.
NEST_THREADS caps BLAS worker threads process-wide.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys

import numpy as np

from . import __version__
from .binio import DataFileError
from .datakit import (
    NormStats,
    chronological_split,
    compute_norm_stats,
    denormalize,
    generate_synthetic,
    load_dataset,
    normalize,
    save_dataset,
)
from .evalbench import (
    attention_cost,
    bench,
    metrics_report,
    per_step_metrics,
    quantile_coverage,
    self_attention_reference_cost,
    write_csv,
)
from .model import (
    ModelConfig,
    composite_loss,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .regionalize import (
    RegionConfig,
    adjusted_rand_index,
    load_region_model,
    pool_series,
    regionalize,
    save_region_model,
)
from .rollout import persistence_forecast, rollout
from .runconfig import ConfigError, RunConfig
from .snrcheck import run_bound_study
from .trainer import TrainConfig, WindowSet, train_loop
from . import numcore as nc

_THREAD_LIMITER = None  # keeps the threadpoolctl handle alive for the process


def _apply_thread_cap() -> None:
    global _THREAD_LIMITER
    env = os.environ.get("NEST_THREADS")
    if not env:
        return
    try:
        n = int(env)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ValueError(f"NEST_THREADS must be a positive integer, got {env!r}") from None
    from threadpoolctl import threadpool_limits

    _THREAD_LIMITER = threadpool_limits(limits=n)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _manifest_path(out_path: str) -> str:
    if os.path.isdir(out_path):
        return os.path.join(out_path, "run_manifest.json")
    return str(out_path) + ".manifest.json"


def _write_manifest(out_path, command: str, seed, inputs=(), config_hash=None, details=None):
    manifest = {
        "command": command,
        "seed": seed,
        "config_sha256": config_hash,
        "inputs": [str(p) for p in inputs],
        "output": str(out_path),
        "details": details or {},
        "versions": {
            "nestcast": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    with open(_manifest_path(str(out_path)), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- config -> typed objects -------------------------------------------------


def _model_config(runcfg: RunConfig, series, n_regions: int) -> ModelConfig:
    m = runcfg["model"]
    return ModelConfig(
        n_nodes=series.n_nodes,
        n_regions=n_regions,
        channels=series.n_channels,
        lookback=m["lookback"],
        patch_len=m["patch_len"],
        embed_dim=m["embed_dim"],
        attn_dim=m["attn_dim"],
        layers=m["layers"],
        quantiles=tuple(m["quantiles"]),
        steps_per_day=series.steps_per_day,
        days_per_week=series.days_per_week,
        huber_delta=m["huber_delta"],
        use_mlp=m["use_mlp"],
        cross_attention=m["cross_attention"],
        guidance_mode=m["guidance_mode"],
    )


def _train_config(runcfg: RunConfig) -> TrainConfig:
    t = runcfg["train"]
    return TrainConfig(
        epochs=t["epochs"],
        batch_size=t["batch_size"],
        lr=t["lr"],
        beta1=t["beta1"],
        beta2=t["beta2"],
        eps=t["eps"],
        weight_decay=t["weight_decay"],
        clip_norm=t["clip_norm"],
        lam1=t["lam1"],
        lam2=t["lam2"],
        ss_gamma=t["ss_gamma"],
        ss_floor=t["ss_floor"],
        patience=t["patience"],
        seed=t["seed"],
        val_batch=t["val_batch"],
    )


def _split_ratios(runcfg: RunConfig) -> tuple[float, float, float]:
    s = runcfg["split"]
    return (s["train"], s["val"], s["test"])


# -- shared pipeline stages --------------------------------------------------


def _train_pipeline(runcfg: RunConfig, series, region, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    if region.n_nodes != series.n_nodes:
        raise ValueError(
            f"region model covers {region.n_nodes} nodes, dataset has {series.n_nodes}"
        )
    ratios = _split_ratios(runcfg)
    train_s, val_s, _ = chronological_split(series, ratios)
    stats = compute_norm_stats(train_s)
    norm_train = normalize(train_s, stats)
    norm_val = normalize(val_s, stats)
    mcfg = _model_config(runcfg, series, region.n_regions)
    tcfg = _train_config(runcfg)
    train_ws = WindowSet(
        norm_train.values,
        pool_series(norm_train.values, region.labels, region.n_regions),
        mcfg,
        start_offset=norm_train.start_offset,
    )
    val_ws = WindowSet(
        norm_val.values,
        pool_series(norm_val.values, region.labels, region.n_regions),
        mcfg,
        start_offset=norm_val.start_offset,
    )
    ps = init_params(mcfg, seed=tcfg.seed)
    history_path = os.path.join(out_dir, "history.jsonl")
    result = train_loop(ps, mcfg, train_ws, val_ws, tcfg, history_path=history_path)
    extra = {
        "norm_mean": stats.mean.tolist(),
        "norm_std": stats.std.tolist(),
        "split": list(ratios),
        "config_sha256": runcfg.sha256(),
        "best_val_mae": result.best_val_mae,
        "best_epoch": result.best_epoch,
    }
    ckpt_path = os.path.join(out_dir, "model.ckpt")
    save_checkpoint(ckpt_path, ps, mcfg, seed=tcfg.seed, step=result.epochs_run, extra=extra)
    runcfg.save(os.path.join(out_dir, "config.ini"))
    return ckpt_path, result


def _stats_from_checkpoint(ckpt) -> NormStats:
    extra = ckpt.extra
    if "norm_mean" not in extra or "norm_std" not in extra:
        raise ValueError(
            "checkpoint lacks normalization stats; it was not written by `train`"
        )
    return NormStats(
        mean=np.asarray(extra["norm_mean"], dtype=np.float64),
        std=np.asarray(extra["norm_std"], dtype=np.float64),
    )


def _evaluate_checkpoint(ckpt, series, region, horizon, stride, mape_threshold):
    """Roll the model over the test split and score it against persistence."""
    cfg = ckpt.config
    if region.n_regions != cfg.n_regions:
        raise ValueError(
            f"region model has {region.n_regions} regions, checkpoint expects {cfg.n_regions}"
        )
    stats = _stats_from_checkpoint(ckpt)
    if "split" not in ckpt.extra:
        raise ValueError("checkpoint lacks the split ratios used at training time")
    train_s, val_s, _ = chronological_split(series, tuple(ckpt.extra["split"]))
    test_start = train_s.n_steps + val_s.n_steps
    norm_all = normalize(series, stats)
    pooled_norm = pool_series(norm_all.values, region.labels, region.n_regions)

    need = cfg.lookback if cfg.guidance_mode == "future" else max(cfg.lookback, cfg.patch_len)
    first_t = test_start - 1
    if first_t < need - 1:
        raise ValueError("test split starts before one full lookback window exists")
    origins = list(range(first_t, series.n_steps - horizon, stride))
    if not origins:
        raise ValueError(
            f"test split of {series.n_steps - test_start} steps is too short "
            f"for horizon {horizon}"
        )

    node_pred, node_true, node_persist = [], [], []
    reg_track, reg_true = [], []
    for t in origins:
        context = norm_all.values[:, : t + 1]
        res = rollout(
            ckpt.params,
            cfg,
            context,
            series.start_offset + t,
            horizon,
            labels=region.labels,
        )
        node_pred.append(denormalize(res.node, stats))
        node_true.append(series.values[:, t + 1 : t + 1 + horizon])
        node_persist.append(persistence_forecast(series.values[:, : t + 1], horizon))
        reg_track.append(res.region_quantiles)
        reg_true.append(pooled_norm[:, t + 1 : t + 1 + horizon])

    pred = np.concatenate(node_pred, axis=0)
    truth = np.concatenate(node_true, axis=0)
    persist = np.concatenate(node_persist, axis=0)
    track = np.concatenate(reg_track, axis=1)
    pooled_truth = np.concatenate(reg_true, axis=0)

    report = {
        "horizon": horizon,
        "stride": stride,
        "n_origins": len(origins),
        "model": metrics_report(pred, truth, mape_threshold),
        "persistence": metrics_report(persist, truth, mape_threshold),
        "coverage": quantile_coverage(track, pooled_truth, cfg.quantiles),
        "per_step": {
            "model": per_step_metrics(pred, truth),
            "persistence": per_step_metrics(persist, truth),
        },
    }
    return report


def _per_step_rows(report) -> list[dict]:
    rows = []
    for h in sorted(report["per_step"]["model"]):
        model = report["per_step"]["model"][h]
        flat = report["per_step"]["persistence"][h]
        rows.append(
            {
                "step": h,
                "model_mae": model["mae"],
                "model_rmse": model["rmse"],
                "persistence_mae": flat["mae"],
                "persistence_rmse": flat["rmse"],
            }
        )
    return rows


# -- subcommands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    series = generate_synthetic(
        n_regions=args.regions,
        nodes_per_region=args.nodes_per_region,
        n_days=args.days,
        steps_per_day=args.steps_per_day,
        channels=args.channels,
        noise_sigma=args.noise,
        separation=args.separation,
        node_offset_sigma=args.offset_sigma,
        regime_period_days=args.regime_days,
        regime_strength=args.regime_strength,
        wander_strength=args.wander,
        wander_lag=args.wander_lag,
        start_offset=args.start_offset,
        seed=args.seed,
    )
    save_dataset(args.out, series)
    _write_manifest(
        args.out,
        "gen-data",
        args.seed,
        details={"n_nodes": series.n_nodes, "n_steps": series.n_steps},
    )
    _emit(
        {
            "out": args.out,
            "n_nodes": series.n_nodes,
            "n_steps": series.n_steps,
            "n_channels": series.n_channels,
            "steps_per_day": series.steps_per_day,
        }
    )
    return 0


def cmd_cluster(args) -> int:
    series = load_dataset(args.data)
    if not (0 < args.train_fraction <= 1):
        raise ValueError(f"--train-fraction must lie in (0, 1], got {args.train_fraction}")
    fit_steps = max(1, int(series.n_steps * args.train_fraction))
    fit_series = series.slice_time(0, fit_steps)
    if args.regions is not None:
        m = args.regions
    else:
        if not (0 < args.m_ratio <= 1):
            raise ValueError(f"--m-ratio must lie in (0, 1], got {args.m_ratio}")
        m = max(1, round(args.m_ratio * series.n_nodes))
    rcfg = RegionConfig(
        n_regions=m,
        n_chunks=min(args.chunks, fit_series.n_steps),
        sigma=args.sigma,
        affinity_mode=args.mode,
        kmeans_n_init=args.n_init,
        kmeans_max_iter=args.max_iter,
        seed=args.seed,
    )
    region = regionalize(fit_series, rcfg)
    save_region_model(args.out, region)
    _write_manifest(
        args.out,
        "cluster",
        args.seed,
        inputs=[args.data],
        details={"n_regions": region.n_regions, "sigma": region.sigma},
    )
    _emit(
        {
            "out": args.out,
            "n_nodes": region.n_nodes,
            "n_regions": region.n_regions,
            "sigma": region.sigma,
            "fit_steps": fit_steps,
        }
    )
    return 0


def cmd_train(args) -> int:
    runcfg = RunConfig.load(args.config)
    if args.seed is not None:
        runcfg = runcfg.replace("train", seed=args.seed)
    series = load_dataset(args.data)
    region = load_region_model(args.regions)
    ckpt_path, result = _train_pipeline(runcfg, series, region, args.out)
    _write_manifest(
        args.out,
        "train",
        runcfg["train"]["seed"],
        inputs=[args.config, args.data, args.regions],
        config_hash=runcfg.sha256(),
        details={"best_val_mae": result.best_val_mae, "epochs_run": result.epochs_run},
    )
    _emit(
        {
            "checkpoint": ckpt_path,
            "best_val_mae": result.best_val_mae,
            "best_epoch": result.best_epoch,
            "epochs_run": result.epochs_run,
            "early_stopped": result.early_stopped,
        }
    )
    return 0


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    series = load_dataset(args.data)
    region = load_region_model(args.regions)
    stats = _stats_from_checkpoint(ckpt)
    norm_all = normalize(series, stats)
    t_index = series.n_steps - 1 if args.t_index is None else args.t_index
    if not (0 <= t_index < series.n_steps):
        raise ValueError(f"--t-index {t_index} outside [0, {series.n_steps})")
    context = norm_all.values[:, : t_index + 1]
    res = rollout(
        ckpt.params,
        ckpt.config,
        context,
        series.start_offset + t_index,
        args.horizon,
        labels=region.labels,
    )
    node = denormalize(res.node, stats)
    np.savez(
        args.out,
        node=node,
        region_quantiles=res.region_quantiles,
        quantile_levels=np.asarray(ckpt.config.quantiles),
        t_index=t_index,
        horizon=args.horizon,
        start_offset=series.start_offset,
    )
    _write_manifest(
        args.out,
        "infer",
        ckpt.seed,
        inputs=[args.checkpoint, args.data, args.regions],
        details={
            "horizon": args.horizon,
            "t_index": int(t_index),
            "region_quantiles_space": "normalized-pooled",
        },
    )
    _emit(
        {
            "out": args.out,
            "horizon": args.horizon,
            "n_patches": res.n_patches,
            "t_index": int(t_index),
        }
    )
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    series = load_dataset(args.data)
    region = load_region_model(args.regions)
    stride = args.stride if args.stride is not None else args.horizon
    if stride < 1 or args.horizon < 1:
        raise ValueError("--horizon and --stride must be >= 1")
    report = _evaluate_checkpoint(
        ckpt, series, region, args.horizon, stride, args.mape_threshold
    )
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
        _write_manifest(
            args.json, "eval", ckpt.seed, inputs=[args.checkpoint, args.data, args.regions]
        )
    if args.csv:
        write_csv(args.csv, _per_step_rows(report))
        _write_manifest(
            args.csv, "eval", ckpt.seed, inputs=[args.checkpoint, args.data, args.regions]
        )
    _emit(report)
    return 0


def cmd_snr_check(args) -> int:
    if args.min_size < 1 or args.max_size < args.min_size:
        raise ValueError("need 1 <= --min-size <= --max-size")
    study = run_bound_study(
        n_clusters=args.clusters,
        seed=args.seed,
        tol=args.tol,
        n_steps=args.steps,
        size_range=(args.min_size, args.max_size),
    )
    report = dict(study.to_dict(), tol=args.tol)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
        _write_manifest(args.json, "snr-check", args.seed)
    _emit(report)
    return 0


def cmd_bench(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    if not sizes:
        raise ValueError("--sizes must list at least one node count")
    rows = []
    for n in sizes:
        mcfg = ModelConfig(
            n_nodes=n,
            n_regions=args.regions,
            channels=1,
            lookback=12,
            patch_len=4,
            embed_dim=args.embed,
            attn_dim=None,
            layers=args.layers,
            quantiles=(0.1, 0.5, 0.9),
            steps_per_day=96,
        )
        ps = init_params(mcfg, seed=args.seed)
        rng = np.random.default_rng([args.seed, 9, n])
        windows = rng.normal(size=(args.batch, n, mcfg.lookback, 1))
        guidance = rng.normal(size=(args.batch, args.regions, mcfg.patch_len, 1))
        node_t = rng.normal(size=(args.batch, n, mcfg.patch_len, 1))
        reg_t = rng.normal(size=(args.batch, args.regions, mcfg.patch_len, 1))
        t_last = np.full(args.batch, mcfg.steps_per_day)

        def step() -> None:
            bundle = forward(ps, mcfg, windows, guidance, t_last)
            total, _ = composite_loss(bundle, node_t, reg_t, reg_t, mcfg)
            ps.zero_grad()
            total.backward()

        timing = bench(step, n_runs=args.runs, n_warmup=args.warmup)
        cost = attention_cost(mcfg, batch=args.batch, with_guidance=True)
        rows.append(
            {
                "n_nodes": n,
                "n_regions": args.regions,
                "embed_dim": args.embed,
                "attn_dim": mcfg.attn_dim,
                "layers": args.layers,
                "batch": args.batch,
                "median_s": timing.median_s,
                "attention_madds": cost["attention"],
                "projection_madds": cost["projection"],
                "self_attention_reference_madds": self_attention_reference_cost(
                    n, mcfg.attn_dim, args.layers
                ),
            }
        )
    write_csv(args.out, rows)
    _write_manifest(args.out, "bench", args.seed, details={"sizes": sizes})
    ratios = [
        rows[i]["median_s"] / rows[i - 1]["median_s"] for i in range(1, len(rows))
    ]
    _emit({"out": args.out, "sizes": sizes, "wall_time_ratios": ratios})
    return 0


def cmd_demo(args) -> int:
    seed = args.seed
    out = args.out_dir
    os.makedirs(out, exist_ok=True)
    # weekly regime offsets plus lead-lag drift make the w/-FG vs w/o-FG
    # comparison informative: each region trails a shared random path, so a
    # lagging region's near future is knowable only from the leader's past
    runcfg = (
        RunConfig.defaults()
        .replace(
            "data",
            n_regions=2,
            nodes_per_region=24,
            n_days=28,
            steps_per_day=24,
            noise_sigma=3.5,
            regime_period_days=7.0,
            regime_strength=2.0,
            wander_strength=4.0,
            wander_lag=8,
            seed=seed,
        )
        .replace("regions", n_regions=2, seed=seed)
        .replace("model", embed_dim=24, lookback=8, patch_len=4, layers=1)
        .replace(
            "train",
            epochs=args.epochs,
            batch_size=64,
            lr=2e-3,
            ss_gamma=0.9,
            lam1=0.5,
            lam2=0.4,
            patience=args.epochs,
            seed=seed,
        )
        .replace("eval", horizon=4)
    )
    lines = []

    d = runcfg["data"]
    series = generate_synthetic(
        n_regions=d["n_regions"],
        nodes_per_region=d["nodes_per_region"],
        n_days=d["n_days"],
        steps_per_day=d["steps_per_day"],
        channels=d["channels"],
        noise_sigma=d["noise_sigma"],
        separation=d["separation"],
        node_offset_sigma=d["node_offset_sigma"],
        regime_period_days=d["regime_period_days"],
        regime_strength=d["regime_strength"],
        wander_strength=d["wander_strength"],
        wander_lag=d["wander_lag"],
        start_offset=d["start_offset"],
        seed=d["seed"],
    )
    data_path = os.path.join(out, "data.nest")
    save_dataset(data_path, series)
    _write_manifest(data_path, "demo:gen-data", seed)
    lines.append(
        f"dataset: nodes={series.n_nodes} steps={series.n_steps} "
        f"channels={series.n_channels} steps_per_day={series.steps_per_day}"
    )

    ratios = _split_ratios(runcfg)
    fit_steps = max(1, int(series.n_steps * ratios[0]))
    r = runcfg["regions"]
    m = r["n_regions"] if r["n_regions"] is not None else max(
        1, round(r["m_ratio"] * series.n_nodes)
    )
    rcfg = RegionConfig(
        n_regions=m,
        n_chunks=min(r["n_chunks"], fit_steps),
        sigma=r["sigma"],
        affinity_mode=r["affinity_mode"],
        kmeans_n_init=r["kmeans_n_init"],
        kmeans_max_iter=r["kmeans_max_iter"],
        seed=r["seed"],
    )
    region = regionalize(series.slice_time(0, fit_steps), rcfg)
    regions_path = os.path.join(out, "regions.nrm")
    save_region_model(regions_path, region)
    _write_manifest(regions_path, "demo:cluster", seed, inputs=[data_path])
    ari = adjusted_rand_index(region.labels, series.labels)
    lines.append(
        f"regions: m={region.n_regions} sigma={region.sigma:.4f} ari_vs_planted={ari:.3f}"
    )

    variants = {"full": runcfg, "wofg": runcfg.replace("model", guidance_mode="past")}
    ckpts = {}
    for name, vcfg in variants.items():
        ckpt_path, result = _train_pipeline(vcfg, series, region, os.path.join(out, name))
        _write_manifest(
            os.path.join(out, name),
            f"demo:train[{name}]",
            seed,
            inputs=[data_path, regions_path],
            config_hash=vcfg.sha256(),
        )
        ckpts[name] = ckpt_path
        lines.append(
            f"train[{name}]: best_val_mae={result.best_val_mae:.4f} "
            f"best_epoch={result.best_epoch} epochs_run={result.epochs_run}"
        )

    ckpt_full = load_checkpoint(ckpts["full"])
    stats = _stats_from_checkpoint(ckpt_full)
    norm_all = normalize(series, stats)
    horizon = runcfg["eval"]["horizon"]
    t_index = series.n_steps - 1
    res = rollout(
        ckpt_full.params,
        ckpt_full.config,
        norm_all.values,
        series.start_offset + t_index,
        horizon,
        labels=region.labels,
    )
    forecast_path = os.path.join(out, "forecast.npz")
    np.savez(
        forecast_path,
        node=denormalize(res.node, stats),
        region_quantiles=res.region_quantiles,
        quantile_levels=np.asarray(ckpt_full.config.quantiles),
        t_index=t_index,
        horizon=horizon,
    )
    _write_manifest(forecast_path, "demo:infer", seed, inputs=[ckpts["full"], data_path])
    lines.append(f"infer: horizon={horizon} patches={res.n_patches} out={forecast_path}")

    reports = {}
    for name in ("full", "wofg"):
        ckpt = load_checkpoint(ckpts[name])
        report = _evaluate_checkpoint(
            ckpt, series, region, horizon, horizon, runcfg["eval"]["mape_threshold"]
        )
        json_path = os.path.join(out, f"eval_{name}.json")
        with open(json_path, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
        _write_manifest(json_path, f"demo:eval[{name}]", seed, inputs=[ckpts[name], data_path])
        reports[name] = report

    full_mae = reports["full"]["model"]["mae"]
    wofg_mae = reports["wofg"]["model"]["mae"]
    flat_mae = reports["full"]["persistence"]["mae"]
    band = reports["full"]["coverage"]["band"]
    lines.append(
        f"eval[full]: test_mae={full_mae:.4f} rmse={reports['full']['model']['rmse']:.4f} "
        f"band_coverage={band:.3f}"
    )
    lines.append(f"eval[wofg]: test_mae={wofg_mae:.4f}")
    lines.append(f"baseline: persistence_mae={flat_mae:.4f}")
    beats = "yes" if full_mae < flat_mae else "no"
    gain = wofg_mae - full_mae
    lines.append(
        f"summary: beats_persistence={beats} "
        f"improvement_vs_persistence={100.0 * (flat_mae - full_mae) / flat_mae:.1f}% "
        f"future_guidance_gain_mae={gain:+.4f}"
    )
    cost = attention_cost(ckpt_full.config, batch=1, with_guidance=True)
    ref = self_attention_reference_cost(
        series.n_nodes, ckpt_full.config.attn_dim, ckpt_full.config.layers
    )
    lines.append(
        f"cost: cross_attention_madds={cost['attention']} "
        f"self_attention_reference_madds={ref}"
    )
    print("\n".join(lines))
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nestcast",
        description="Nested spatio-temporal forecasting pipeline.",
    )
    parser.add_argument("--version", action="version", version=f"nestcast {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic planted-region dataset")
    p.add_argument("--regions", type=int, default=3, help="number of planted regions")
    p.add_argument("--nodes-per-region", type=int, default=16, help="nodes per region")
    p.add_argument("--days", type=int, default=14, help="number of days to simulate")
    p.add_argument("--steps-per-day", type=int, default=96, help="samples per day")
    p.add_argument("--channels", type=int, default=1, help="channels per node")
    p.add_argument("--noise", type=float, default=1.0, help="per-node noise std")
    p.add_argument("--separation", type=float, default=5.0, help="trend scale vs noise")
    p.add_argument("--offset-sigma", type=float, default=0.25, help="per-node offset std")
    p.add_argument("--regime-days", type=float, default=0.0, help="regime shift period, days")
    p.add_argument("--regime-strength", type=float, default=0.0, help="regime shift size")
    p.add_argument("--wander", type=float, default=0.0, help="shared lead-lag drift size")
    p.add_argument("--wander-lag", type=int, default=4, help="per-region drift lag, steps")
    p.add_argument("--start-offset", type=int, default=0, help="calendar step of column 0")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--out", required=True, help="output dataset path")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("cluster", help="derive the node-to-region assignment")
    p.add_argument("--data", required=True, help="input dataset")
    p.add_argument("--out", required=True, help="output region model path")
    p.add_argument("--regions", type=int, default=None, help="region count (overrides ratio)")
    p.add_argument("--m-ratio", type=float, default=0.2, help="regions as fraction of nodes")
    p.add_argument("--chunks", type=int, default=100, help="temporal chunks for affinity")
    p.add_argument("--sigma", type=float, default=None, help="affinity bandwidth (default: median heuristic)")
    p.add_argument("--mode", choices=("subsequence", "chunk_mean"), default="subsequence", help="affinity distance mode")
    p.add_argument("--n-init", type=int, default=10, help="k-means restarts")
    p.add_argument("--max-iter", type=int, default=300, help="k-means iteration cap")
    p.add_argument("--train-fraction", type=float, default=0.6, help="leading fraction used to fit the clustering")
    p.add_argument("--seed", type=int, default=0, help="clustering seed")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("train", help="train a forecaster from a config file")
    p.add_argument("--config", required=True, help="run configuration file")
    p.add_argument("--data", required=True, help="input dataset")
    p.add_argument("--regions", required=True, help="region model file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override [train] seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="roll a trained model forward to a forecast file")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--data", required=True, help="input dataset")
    p.add_argument("--regions", required=True, help="region model file")
    p.add_argument("--horizon", type=int, default=12, help="steps to forecast")
    p.add_argument("--t-index", type=int, default=None, help="last observed step (default: dataset end)")
    p.add_argument("--out", required=True, help="output .npz path")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a checkpoint on the held-out test split")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--data", required=True, help="input dataset")
    p.add_argument("--regions", required=True, help="region model file")
    p.add_argument("--horizon", type=int, default=12, help="rollout length per origin")
    p.add_argument("--stride", type=int, default=None, help="origin spacing (default: horizon)")
    p.add_argument("--mape-threshold", type=float, default=1e-4, help="|truth| cutoff for MAPE")
    p.add_argument("--json", default=None, help="also write the report to this path")
    p.add_argument("--csv", default=None, help="also write per-step metrics CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("snr-check", help="stress the pooled-signal SNR bound")
    p.add_argument("--clusters", type=int, default=1000, help="random clusters to test")
    p.add_argument("--steps", type=int, default=48, help="signal length per cluster")
    p.add_argument("--min-size", type=int, default=2, help="smallest cluster size")
    p.add_argument("--max-size", type=int, default=20, help="largest cluster size")
    p.add_argument("--tol", type=float, default=1e-10, help="slack tolerance")
    p.add_argument("--seed", type=int, default=0, help="study seed")
    p.add_argument("--json", default=None, help="also write the report to this path")
    p.set_defaults(func=cmd_snr_check)

    p = sub.add_parser("bench", help="time forward+backward across node counts")
    p.add_argument("--sizes", default="512,1024,2048", help="comma-separated node counts")
    p.add_argument("--regions", type=int, default=64, help="region count, fixed across sizes")
    p.add_argument("--embed", type=int, default=32, help="embedding width")
    p.add_argument("--layers", type=int, default=2, help="cross-scale layers")
    p.add_argument("--batch", type=int, default=1, help="batch size")
    p.add_argument("--runs", type=int, default=10, help="timed runs per size")
    p.add_argument("--warmup", type=int, default=2, help="untimed warmup runs")
    p.add_argument("--seed", type=int, default=0, help="input seed")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("demo", help="run the whole pipeline end to end")
    p.add_argument("--seed", type=int, default=7, help="seed for every stage")
    p.add_argument("--epochs", type=int, default=100, help="training epochs per variant")
    p.add_argument("--out-dir", default="demo_out", help="artifact directory")
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv=None) -> int:
    try:
        _apply_thread_cap()
        parser = build_parser()
        args = parser.parse_args(argv)
        return args.func(args)
    except (ConfigError, DataFileError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
