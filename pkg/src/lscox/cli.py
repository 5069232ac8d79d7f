"""Command-line interface: simulate, fit, fit-st, predict, diagnose.

Heavy imports happen after argument parsing so --threads can cap the BLAS
thread pools through the environment before numpy loads; the realized chain
never depends on the thread count.
"""

import argparse
import json
import os
import sys
import time

from .config import ConfigError

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="lscox",
        description="Bayesian inference for level-set Cox processes with "
                    "piecewise constant intensity.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("simulate", "simulate a point pattern from the model"),
        ("fit", "fit the spatial model to a point pattern"),
        ("fit-st", "fit the spatiotemporal model to a time-stamped pattern"),
        ("predict", "posterior prediction from a completed run"),
        ("diagnose", "diagnostics (ESS, DIC, grid summary) for a run"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="path to a JSON run config")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--threads", type=int, default=None,
                       help="cap BLAS thread pools (results are unaffected)")
        p.add_argument("--out", required=True, help="output directory")
    return parser


def _versions():
    import numpy
    import scipy

    from . import __version__

    return {
        "lscox": __version__,
        "numpy": numpy.__version__,
        "scipy": scipy.__version__,
        "python": sys.version.split()[0],
    }


def _load(args, mode):
    from .config import load_config

    cfg = load_config(args.config, mode=mode)
    if args.seed is not None:
        cfg["seed"] = int(args.seed)
    os.makedirs(args.out, exist_ok=True)
    return cfg


def _manifest(cfg, args, stats, info, wall):
    return {
        "mode": cfg["mode"],
        "seed": cfg["seed"],
        "threads": args.threads,
        "versions": _versions(),
        "wall_time_s": wall,
        **stats,
        "final": info,
        "sampler": {k: cfg["sampler"][k] for k in
                    ("iterations", "burn_in", "thin")},
    }


def _cmd_fit(args, st):
    from . import io as lio
    from .sampler import run
    from .spatiotemporal import run_st

    cfg = _load(args, "fit-st" if st else "fit")
    if cfg["input"]["pattern"] is None:
        raise ConfigError("input.pattern is required for fit")
    window = lio.window_from_dict(cfg["window"])
    src = cfg["input"]["source_window"]
    pattern = lio.ingest_pattern(
        cfg["input"]["pattern"], window,
        lio.window_from_dict(src) if src else None, time_expected=st)
    model = lio.to_model(cfg)
    sconf = lio.to_sampler_config(cfg)
    lio.write_json(cfg, os.path.join(args.out, "resolved_config.json"))
    info = {}
    t0 = time.perf_counter()
    if st:
        stream = run_st(pattern, model, sconf, lio.to_temporal(cfg), info=info)
    else:
        stream = run(pattern, model, sconf, info=info)
    stats = lio.emit_samples(stream, args.out, cfg["io"]["binary_snapshots"])
    wall = time.perf_counter() - t0
    lio.write_json(_manifest(cfg, args, stats, info, wall),
                   os.path.join(args.out, "run_manifest.json"))
    return 0


def _cmd_simulate(args):
    import numpy as np

    from . import io as lio
    from . import rng as rngmod
    from .geometry import PartitionLevels, PointPattern, simulate_lscp
    from .nngp import CovarianceSpec, NNGPModel, build_reference, \
        conditional_block_draw, sample_grid_prior
    from .spatiotemporal import sample_dynamic_prior

    cfg = _load(args, "simulate")
    lam = cfg["simulate"]["lambda"]
    if lam is None:
        raise ConfigError("simulate.lambda is required")
    lam = np.asarray(lam, dtype=float)
    t_steps = cfg["simulate"]["t"]
    if lam.ndim == 2:
        t_steps = lam.shape[0] - 1
    else:
        lam = np.tile(lam, (t_steps + 1, 1))
    k = lam.shape[1]
    if cfg["k"] != k:
        raise ConfigError(f"k={cfg['k']} does not match simulate.lambda ({k} rates)")
    c_vals = cfg["simulate"]["c"]
    if k > 1 and (c_vals is None or len(c_vals) != k - 1):
        raise ConfigError("simulate.c must hold k-1 thresholds")
    levels = PartitionLevels(np.asarray(c_vals if c_vals else [], dtype=float))
    window = lio.window_from_dict(cfg["window"])
    grid = build_reference(window, cfg["grid"]["r"], cfg["grid"]["m"])
    static = NNGPModel(grid, CovarianceSpec(tau2=cfg["covariance"]["tau2"],
                                            gamma=cfg["covariance"]["gamma"]))
    rng = rngmod.substream(cfg["seed"], rngmod.BLOCK_SIMULATE)
    if t_steps == 0:
        grids = sample_grid_prior(static, rng)[None, :]
    else:
        innov = NNGPModel(grid, CovarianceSpec(
            tau2=cfg["temporal"]["varrho2"], gamma=cfg["covariance"]["gamma"],
            sigma2=cfg["temporal"]["xi2"]))
        grids = sample_dynamic_prior(static, innov, t_steps, rng)
    xy_all, t_all = [], []
    for t in range(t_steps + 1):
        sampler_fn = lambda pts, _g=grids[t]: conditional_block_draw(
            static, _g, pts, rng).values
        pat_t = simulate_lscp(window, levels, lam[t], sampler_fn, rng)
        xy_all.append(pat_t.xy)
        t_all.append(np.full(len(pat_t), t, dtype=int))
    xy = np.concatenate(xy_all)
    times = np.concatenate(t_all) if t_steps > 0 else None
    pattern = PointPattern(xy, window, times)
    lio.write_pattern(pattern, os.path.join(args.out, "pattern.csv"))
    lio.write_json(cfg, os.path.join(args.out, "resolved_config.json"))
    lio.write_json({
        "lambda": lam.tolist(),
        "c": levels.c.tolist(),
        "points": len(pattern),
        "points_per_time": [int(n.size) for n in t_all],
    }, os.path.join(args.out, "truth.json"))
    np.savetxt(os.path.join(args.out, "true_field_grid.csv"),
               np.column_stack([grid.locations, grids.T]),
               delimiter=",", fmt="%.17g",
               header="x,y," + ",".join(f"beta_t{t}" for t in range(t_steps + 1)),
               comments="")
    lio.write_json(_manifest(cfg, args, {"records": len(pattern)}, {}, 0.0),
                   os.path.join(args.out, "run_manifest.json"))
    return 0


def _read_run(run_dir):
    from . import io as lio
    from .config import load_config

    resolved = os.path.join(run_dir, "resolved_config.json")
    if not os.path.exists(resolved):
        raise ConfigError(f"no resolved_config.json under {run_dir}")
    run_cfg = load_config(resolved)
    model = lio.to_model(run_cfg)
    samples = lio.read_samples(run_dir, model=model)
    return run_cfg, model, samples


def _cmd_predict(args):
    import numpy as np

    from . import io as lio
    from . import rng as rngmod
    from .predict import (FutureDraw, draws_with_fields, future_draw,
                          integrated_intensity_draw, nngp_from_model,
                          replicate_pattern)

    cfg = _load(args, "predict")
    if cfg["predict"]["run_dir"] is None:
        raise ConfigError("predict.run_dir is required")
    run_cfg, model, samples = _read_run(cfg["predict"]["run_dir"])
    kind = cfg["predict"]["kind"]
    seed = cfg["seed"]
    nngp = nngp_from_model(model)
    draws = list(draws_with_fields(samples, nngp))
    lio.write_json(cfg, os.path.join(args.out, "resolved_config.json"))
    t0 = time.perf_counter()
    if kind == "integrated_intensity":
        region = cfg["predict"]["region"]
        region = lio.window_from_dict(region) if region else model.window
        values = np.array([
            integrated_intensity_draw(
                d, region, rngmod.substream(seed, rngmod.BLOCK_PREDICT, j))
            for j, d in enumerate(draws)])
        with open(os.path.join(args.out, "predictions.csv"), "w",
                  encoding="utf-8") as fh:
            fh.write("draw,value\n")
            fh.writelines(f"{j},{v:.17g}\n" for j, v in enumerate(values))
        summary = {
            "mean": float(values.mean()),
            "sd": float(values.std(ddof=1)) if values.size > 1 else 0.0,
            "q025": float(np.quantile(values, 0.025)),
            "q975": float(np.quantile(values, 0.975)),
            "draws": int(values.size),
        }
        ref = cfg["predict"]["reference"]
        if ref is not None:
            summary["expected_quadratic_error"] = float(
                np.mean((values - ref) ** 2))
        lio.write_json(summary, os.path.join(args.out, "summary.json"))
    elif kind == "replicate_pattern":
        n_rep = cfg["predict"]["replicates"] or len(draws)
        for j, d in enumerate(draws[:n_rep]):
            rng = rngmod.substream(seed, rngmod.BLOCK_PREDICT, j)
            rep = replicate_pattern(d, model.window, rng)
            lio.write_pattern(rep, os.path.join(args.out, f"replicate_{j:04d}.csv"))
    else:  # future
        if samples.lam.ndim != 3:
            raise ConfigError("future prediction needs a fit-st run")
        temporal = lio.to_temporal(run_cfg)
        from .nngp import CovarianceSpec, NNGPModel

        innov = NNGPModel(nngp.grid, CovarianceSpec(
            tau2=temporal.varrho2, gamma=model.cov.gamma, sigma2=temporal.xi2))
        d_hor = cfg["predict"]["horizons"]
        rows = []
        for j, d in enumerate(draws):
            rng = rngmod.substream(seed, rngmod.BLOCK_PREDICT, j)
            fut = future_draw(d, d_hor, temporal.ngar1, rng, innovation=innov,
                              window=model.window,
                              with_patterns=cfg["predict"]["with_patterns"])
            for h in range(d_hor):
                rows.append((j, h + 1, fut.rates[h]))
            if fut.patterns is not None:
                for h, pat in enumerate(fut.patterns):
                    lio.write_pattern(pat, os.path.join(
                        args.out, f"future_pattern_d{h + 1}_draw{j:04d}.csv"))
        with open(os.path.join(args.out, "future_rates.csv"), "w",
                  encoding="utf-8") as fh:
            k = model.k
            fh.write("draw,horizon," + ",".join(
                f"lambda_{i + 1}" for i in range(k)) + "\n")
            for j, h, rates in rows:
                fh.write(f"{j},{h}," + ",".join(
                    f"{v:.17g}" for v in rates) + "\n")
    wall = time.perf_counter() - t0
    lio.write_json(_manifest(cfg, args, {"records": len(draws)}, {}, wall),
                   os.path.join(args.out, "run_manifest.json"))
    return 0


def _cmd_diagnose(args):
    import numpy as np

    from . import io as lio
    from .diagnostics import dic, ess

    cfg = _load(args, "diagnose")
    if cfg["diagnose"]["run_dir"] is None:
        raise ConfigError("diagnose.run_dir is required")
    run_cfg, model, samples = _read_run(cfg["diagnose"]["run_dir"])
    t0 = time.perf_counter()
    out = {"acceptance": {name: float(samples.acc[:, i].mean())
                          for i, name in enumerate(
                              ("beta", "aux", "lambda", "levels"))}}
    ess_table = {}
    lam2d = samples.lam.reshape(len(samples), -1)
    labels = ([f"lambda_{i + 1}" for i in range(lam2d.shape[1])]
              if samples.lam.ndim == 2 else
              [f"lambda_t{t}_{k + 1}" for t in range(samples.lam.shape[1])
               for k in range(samples.lam.shape[2])])
    for i, name in enumerate(labels):
        ess_table[name] = ess(lam2d[:, i]) if len(samples) >= 10 else None
    for j in range(samples.c.shape[1]):
        ess_table[f"c_{j + 1}"] = (ess(samples.c[:, j])
                                   if len(samples) >= 10 else None)
    ess_table["log_pm_lik"] = (ess(samples.log_pm_lik)
                               if len(samples) >= 10 else None)
    out["ess"] = ess_table
    if samples.lam.ndim == 2 and run_cfg["input"]["pattern"] is not None:
        window = lio.window_from_dict(run_cfg["window"])
        src = run_cfg["input"]["source_window"]
        pattern = lio.ingest_pattern(
            run_cfg["input"]["pattern"], window,
            lio.window_from_dict(src) if src else None)
        out["dic"] = dic(samples, pattern, model,
                         mc_area_points=cfg["diagnose"]["mc_area_points"],
                         seed=cfg["seed"])
    lio.emit_grid_summary(samples, model, cfg["diagnose"]["grid_resolution"],
                          os.path.join(args.out, "grid_summary.csv"),
                          seed=cfg["seed"])
    lio.write_json(out, os.path.join(args.out, "diagnostics.json"))
    lio.write_json(cfg, os.path.join(args.out, "resolved_config.json"))
    wall = time.perf_counter() - t0
    lio.write_json(_manifest(cfg, args, {"records": len(samples)}, {}, wall),
                   os.path.join(args.out, "run_manifest.json"))
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads is not None and args.threads > 0:
        for var in _THREAD_VARS:
            os.environ.setdefault(var, str(args.threads))
    try:
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "fit":
            return _cmd_fit(args, st=False)
        if args.command == "fit-st":
            return _cmd_fit(args, st=True)
        if args.command == "predict":
            return _cmd_predict(args)
        return _cmd_diagnose(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
