"""Dataset ingestion and bit-stable output emission.

All text outputs carry reals at 17 significant digits, so emitted files
re-ingest to bit-identical values.  The sample writer consumes the sampler's
record stream one record at a time (single writer, no buffering of the chain).
"""

import json
import os
import warnings

import numpy as np

from .config import ConfigError
from .geometry import PointPattern, Window
from .nngp import CovarianceSpec
from .priors import NGAR1Spec, RGSpec
from .sampler import Model, SamplerConfig, Samples
from .spatiotemporal import TemporalSpec
from . import rng as rngmod

__all__ = ["ingest_pattern", "write_pattern", "emit_samples", "read_samples",
           "emit_grid_summary", "to_model", "to_sampler_config", "to_temporal",
           "window_from_dict"]

_FMT = "%.17g"


def window_from_dict(d):
    return Window(d["x_min"], d["x_max"], d["y_min"], d["y_max"])


def to_model(cfg):
    prior = RGSpec(alpha=cfg["prior"]["alpha"], eta=cfg["prior"]["eta"],
                   rho=cfg["prior"]["rho"], nu=cfg["prior"]["nu"],
                   truncation=cfg["prior"]["truncation"])
    cov = CovarianceSpec(tau2=cfg["covariance"]["tau2"],
                         gamma=cfg["covariance"]["gamma"])
    return Model(window=window_from_dict(cfg["window"]), k=cfg["k"], cov=cov,
                 prior=prior, r=cfg["grid"]["r"], m=cfg["grid"]["m"])


def to_sampler_config(cfg):
    s = cfg["sampler"]
    return SamplerConfig(
        iterations=s["iterations"], burn_in=s["burn_in"], thin=s["thin"],
        l_squares=s["l_squares"], delta=s["delta"], target_n=s["target_n"],
        varsigma0=s["varsigma0"], lambda_step0=s["lambda_step0"],
        c_halfwidth0=s["c_halfwidth0"], adapt_horizon=s["adapt_horizon"],
        seed=cfg["seed"], fixed_ordering=s["fixed_ordering"],
        log_walk=s["log_walk"], snapshot_every=s["snapshot_every"],
        audit=s["audit"], pilot_batch=s["pilot_batch"])


def to_temporal(cfg):
    t = cfg["temporal"]
    prior = RGSpec(alpha=cfg["prior"]["alpha"], eta=cfg["prior"]["eta"],
                   rho=cfg["prior"]["rho"], nu=cfg["prior"]["nu"],
                   truncation=cfg["prior"]["truncation"])
    ngar1 = NGAR1Spec(w=np.asarray(t["w"], dtype=float) if isinstance(t["w"], list)
                      else t["w"],
                      a=np.asarray(t["a"], dtype=float) if isinstance(t["a"], list)
                      else t["a"],
                      initial=prior)
    return TemporalSpec(xi2=t["xi2"], varrho2=t["varrho2"],
                        coupling=t["coupling"], ngar1=ngar1)


def _rescale(xy, source, target):
    out = np.empty_like(xy)
    out[:, 0] = target.x_min + (xy[:, 0] - source.x_min) / source.width * target.width
    out[:, 1] = target.y_min + (xy[:, 1] - source.y_min) / source.height * target.height
    return out


def ingest_pattern(path, window, source_window=None, time_expected=False):
    """Read a delimited ``x,y[,t]`` file into a PointPattern in model units.

    Coordinates are affinely rescaled from ``source_window`` to ``window``
    (identity when no source window is given).  Rows outside the source
    window, malformed rows and empty files are errors naming the offending
    line numbers.  A time column is ignored with a warning when the caller
    does not expect one.
    """
    try:
        with open(path, encoding="utf-8-sig") as fh:
            lines = fh.read().splitlines()
    except FileNotFoundError as exc:
        raise ConfigError(f"pattern file not found: {path}") from exc
    lines = [ln for ln in lines]
    if not lines or all(not ln.strip() for ln in lines):
        raise ConfigError(f"{path}: empty pattern file")
    header = [h.strip().lower() for h in lines[0].split(",")]
    if header[:2] != ["x", "y"] or len(header) > 3 or (
            len(header) == 3 and header[2] != "t"):
        raise ConfigError(f"{path}: header must be 'x,y' or 'x,y,t', got {lines[0]!r}")
    has_time = len(header) == 3
    if has_time and not time_expected:
        warnings.warn(f"{path}: time column ignored in spatial mode", stacklevel=2)
    if time_expected and not has_time:
        raise ConfigError(f"{path}: a time column 't' is required for fit-st")
    xs, ys, ts = [], [], []
    for lineno, ln in enumerate(lines[1:], start=2):
        if not ln.strip():
            continue
        parts = [p.strip() for p in ln.split(",")]
        if len(parts) != len(header):
            raise ConfigError(f"{path}:{lineno}: expected {len(header)} columns")
        try:
            xs.append(float(parts[0]))
            ys.append(float(parts[1]))
            if has_time:
                ts.append(int(parts[2]))
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: malformed row {ln!r}") from exc
    xy = np.column_stack([xs, ys]) if xs else np.empty((0, 2))
    if xy.shape[0] == 0:
        raise ConfigError(f"{path}: no data rows")
    source = source_window if source_window is not None else window
    inside = Window.contains(source, xy)
    if not inside.all():
        bad = np.nonzero(~inside)[0] + 2
        raise ConfigError(
            f"{path}: rows outside the source window (line numbers "
            f"{', '.join(map(str, bad[:20]))})")
    xy = _rescale(xy, source, window)
    # rescaling can land boundary points a half-ulp outside the target
    xy[:, 0] = np.clip(xy[:, 0], window.x_min, window.x_max)
    xy[:, 1] = np.clip(xy[:, 1], window.y_min, window.y_max)
    times = np.asarray(ts, dtype=int) if (has_time and time_expected) else None
    return PointPattern(xy, window, times)


def write_pattern(pattern, path):
    with open(path, "w", encoding="utf-8") as fh:
        if pattern.times is None:
            fh.write("x,y\n")
            for x, y in pattern.xy:
                fh.write(f"{x:.17g},{y:.17g}\n")
        else:
            fh.write("x,y,t\n")
            for (x, y), t in zip(pattern.xy, pattern.times):
                fh.write(f"{x:.17g},{y:.17g},{t}\n")


def _lam_headers(lam):
    if lam.ndim == 1:
        return [f"lambda_{k + 1}" for k in range(lam.size)]
    return [f"lambda_t{t}_{k + 1}" for t in range(lam.shape[0])
            for k in range(lam.shape[1])]


def _write_snapshot(grid, path, binary):
    if binary:
        np.save(path + ".npy", grid)
        return os.path.basename(path) + ".npy"
    with open(path + ".csv", "w", encoding="utf-8") as fh:
        if grid.ndim == 1:
            fh.write("beta\n")
            fh.writelines(f"{v:.17g}\n" for v in grid)
        else:
            fh.write(",".join(f"beta_t{t}" for t in range(grid.shape[0])) + "\n")
            for row in grid.T:
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
    return os.path.basename(path) + ".csv"


def emit_samples(records, out_dir, binary_snapshots=False):
    """Stream sample records to ``out_dir/samples.csv`` (+ snapshot files).

    Returns summary statistics for the run manifest.  Consumes the stream
    record by record; nothing is buffered beyond the current record.
    """
    os.makedirs(out_dir, exist_ok=True)
    snap_dir = os.path.join(out_dir, "snapshots")
    path = os.path.join(out_dir, "samples.csv")
    n = 0
    acc_sums = np.zeros(4)
    fh = None
    try:
        for rec in records:
            if fh is None:
                fh = open(path, "w", encoding="utf-8")
                head = (["iteration"] + _lam_headers(rec.lam)
                        + [f"c_{j + 1}" for j in range(rec.c.size)]
                        + ["log_pm_lik", "log_target", "n_aux", "acc_beta",
                           "acc_aux", "acc_lambda", "acc_levels", "snapshot"])
                fh.write(",".join(head) + "\n")
            snap_ref = ""
            if rec.beta_grid is not None:
                os.makedirs(snap_dir, exist_ok=True)
                base = os.path.join(snap_dir, f"beta_{rec.iteration:08d}")
                snap_ref = "snapshots/" + _write_snapshot(rec.beta_grid, base,
                                                          binary_snapshots)
            vals = ([str(rec.iteration)]
                    + [f"{v:.17g}" for v in np.ravel(rec.lam)]
                    + [f"{v:.17g}" for v in np.ravel(rec.c)]
                    + [f"{rec.log_pm_lik:.17g}", f"{rec.log_target:.17g}",
                       str(rec.n_aux), f"{rec.acc_beta:.17g}",
                       f"{rec.acc_aux:.17g}", f"{rec.acc_lambda:.17g}",
                       f"{rec.acc_levels:.17g}", snap_ref])
            fh.write(",".join(vals) + "\n")
            n += 1
            acc_sums += (rec.acc_beta, rec.acc_aux, rec.acc_lambda,
                         rec.acc_levels)
    finally:
        if fh is not None:
            fh.close()
    if n == 0:
        raise RuntimeError("sampler produced no records")
    return {
        "records": n,
        "acceptance": {
            "beta": acc_sums[0] / n,
            "aux": acc_sums[1] / n,
            "lambda": acc_sums[2] / n,
            "levels": acc_sums[3] / n,
        },
    }


def read_samples(run_dir, model=None):
    """Load samples.csv (and snapshots) back into a Samples container."""
    path = os.path.join(run_dir, "samples.csv")
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except FileNotFoundError as exc:
        raise ConfigError(f"no samples.csv under {run_dir}") from exc
    header = lines[0].split(",")
    lam_cols = [i for i, h in enumerate(header) if h.startswith("lambda_")]
    c_cols = [i for i, h in enumerate(header) if h.startswith("c_")]
    col = {h: i for i, h in enumerate(header)}
    st_shape = None
    if header[lam_cols[0]].startswith("lambda_t"):
        t_max = max(int(header[i].split("_")[1][1:]) for i in lam_cols)
        st_shape = (t_max + 1, len(lam_cols) // (t_max + 1))
    rows = [ln.split(",") for ln in lines[1:] if ln]
    n = len(rows)
    lam = np.array([[float(r[i]) for i in lam_cols] for r in rows])
    if st_shape is not None:
        lam = lam.reshape(n, *st_shape)
    c = np.array([[float(r[i]) for i in c_cols] for r in rows]).reshape(n, -1)
    snap_rows, snaps = [], []
    for j, r in enumerate(rows):
        ref = r[col["snapshot"]]
        if ref:
            fp = os.path.join(run_dir, ref)
            if ref.endswith(".npy"):
                grid = np.load(fp)
            else:
                with open(fp, encoding="utf-8") as fh:
                    snap_lines = fh.read().splitlines()
                grid = np.array([[float(v) for v in ln.split(",")]
                                 for ln in snap_lines[1:]])
                grid = grid[:, 0] if grid.shape[1] == 1 else grid.T
            snap_rows.append(j)
            snaps.append(grid)
    return Samples(
        iterations=np.array([int(r[col["iteration"]]) for r in rows]),
        lam=lam,
        c=c,
        log_pm_lik=np.array([float(r[col["log_pm_lik"]]) for r in rows]),
        log_target=np.array([float(r[col["log_target"]]) for r in rows]),
        n_aux=np.array([int(r[col["n_aux"]]) for r in rows]),
        acc=np.array([[float(r[col[h]]) for h in
                       ("acc_beta", "acc_aux", "acc_lambda", "acc_levels")]
                      for r in rows]),
        snapshot_rows=np.array(snap_rows, dtype=int),
        snapshots=np.array(snaps),
        model=model,
    )


def emit_grid_summary(samples, model, grid_resolution, path, seed=0):
    """Pointwise intensity summary on an evaluation lattice.

    For every stored snapshot the field is extended at each lattice site and
    mapped to its region; the file reports the across-draw mean intensity, the
    modal region (1-based) and the posterior-mean rate of the modal region.
    Dynamic fits are summarized at their last observation time.
    """
    from .predict import nngp_from_model

    nngp = nngp_from_model(model)
    win = model.window
    nx = max(2, int(round(grid_resolution * win.width
                          / max(win.width, win.height))))
    ny = max(2, int(round(grid_resolution * win.height
                          / max(win.width, win.height))))
    xs = win.x_min + (np.arange(nx) + 0.5) * win.width / nx
    ys = win.y_min + (np.arange(ny) + 0.5) * win.height / ny
    gx, gy = np.meshgrid(xs, ys)
    xy = np.column_stack([gx.ravel(), gy.ravel()])
    nbr, w, sd = nngp.offgrid_coeffs(xy)
    k = model.k
    votes = np.zeros((xy.shape[0], k), dtype=np.int64)
    mean_if = np.zeros(xy.shape[0])
    n_draws = len(samples.snapshot_rows)
    if n_draws == 0:
        raise RuntimeError("samples carry no grid snapshots")
    spatial = samples.lam.ndim == 2
    for j, row in enumerate(samples.snapshot_rows):
        grid = samples.snapshots[j] if spatial else samples.snapshots[j][-1]
        lam = samples.lam[row] if spatial else samples.lam[row][-1]
        rng = rngmod.substream(seed, rngmod.BLOCK_PREDICT, 2, j)
        beta = (w * grid[nbr]).sum(axis=1) + sd * rng.standard_normal(xy.shape[0])
        reg = np.searchsorted(samples.c[row], beta, side="left")
        mean_if += lam[reg]
        votes[np.arange(xy.shape[0]), reg] += 1
    mean_if /= n_draws
    modal = votes.argmax(axis=1)
    lam_bar = samples.lam.mean(axis=0) if spatial else samples.lam[:, -1].mean(axis=0)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("x,y,mean_if,modal_region,modal_if\n")
        for i in range(xy.shape[0]):
            fh.write(f"{xy[i, 0]:.17g},{xy[i, 1]:.17g},{mean_if[i]:.17g},"
                     f"{modal[i] + 1},{lam_bar[modal[i]]:.17g}\n")
    return path


def write_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
