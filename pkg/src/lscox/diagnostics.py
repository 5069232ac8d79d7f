"""Chain diagnostics: effective sample size and DIC model comparison."""

import numpy as np

from . import rng as rngmod
from .geometry import uniform_points
from .predict import nngp_from_model

__all__ = ["ess", "dic"]


def _autocovariance(x):
    n = x.size
    x = x - x.mean()
    nfft = int(2 ** np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x, nfft)
    acov = np.fft.irfft(f * np.conjugate(f), nfft)[:n].real
    return acov / n


def ess(trace):
    """Effective sample size via the initial monotone positive sequence.

    Adjacent autocovariances are paired; the sum is truncated at the first
    non-positive pair and forced non-increasing.  A constant trace has zero
    autocorrelation by convention, giving ESS = n; the estimate never exceeds
    the trace length and is invariant under affine maps of the trace.
    """
    x = np.asarray(trace, dtype=float).ravel()
    n = x.size
    if n < 10:
        raise ValueError("trace too short for an ESS estimate")
    acov = _autocovariance(x)
    if acov[0] == 0.0:
        return float(n)
    n_pairs = (n - 1) // 2
    pair_sums = acov[: 2 * n_pairs].reshape(n_pairs, 2).sum(axis=1)
    positive = np.nonzero(pair_sums <= 0)[0]
    cut = positive[0] if positive.size else n_pairs
    if cut == 0:
        return float(n)
    gamma = np.minimum.accumulate(pair_sums[:cut])
    sigma2 = -acov[0] + 2.0 * gamma.sum()
    if sigma2 <= 0:
        return float(n)
    return float(min(n, n * acov[0] / sigma2))


def dic(samples, pattern, model=None, mc_area_points=10_000, seed=0):
    """Deviance information criterion for a spatial fit.

    The deviance uses the model log likelihood with the intractable region
    areas replaced by uniform Monte Carlo estimates; the same uniform site set
    is reused across draws (common random numbers).  The plug-in point is the
    posterior mean of the rates combined with the pointwise modal partition.
    """
    if mc_area_points < 1_000:
        raise ValueError("mc_area_points must be at least 1000")
    if model is None:
        model = samples.model
    if len(samples.snapshot_rows) == 0:
        raise ValueError("samples carry no grid snapshots")
    nngp = nngp_from_model(model)
    k = model.k
    area = model.window.area
    site_rng = rngmod.substream(seed, rngmod.BLOCK_PREDICT, 0)
    mc_xy = uniform_points(model.window, mc_area_points, site_rng)
    mc_nbr, mc_w, mc_sd = nngp.offgrid_coeffs(mc_xy)
    y_nbr, y_w, y_sd = nngp.offgrid_coeffs(pattern.xy)
    votes_mc = np.zeros((mc_area_points, k), dtype=np.int64)
    votes_y = np.zeros((len(pattern), k), dtype=np.int64)
    deviances = np.empty(len(samples.snapshot_rows))
    for j, row in enumerate(samples.snapshot_rows):
        lam = samples.lam[row]
        c = samples.c[row]
        grid = samples.snapshots[j]
        rng = rngmod.substream(seed, rngmod.BLOCK_PREDICT, 1, j)
        beta_mc = (mc_w * grid[mc_nbr]).sum(axis=1) + mc_sd * rng.standard_normal(
            mc_area_points)
        beta_y = (y_w * grid[y_nbr]).sum(axis=1) + y_sd * rng.standard_normal(
            len(pattern))
        reg_mc = np.searchsorted(c, beta_mc, side="left")
        reg_y = np.searchsorted(c, beta_y, side="left")
        mu_hat = area * np.bincount(reg_mc, minlength=k) / mc_area_points
        counts_y = np.bincount(reg_y, minlength=k)
        deviances[j] = -2.0 * (-(lam @ mu_hat) + counts_y @ np.log(lam))
        votes_mc[np.arange(mc_area_points), reg_mc] += 1
        votes_y[np.arange(len(pattern)), reg_y] += 1
    lam_bar = samples.lam.mean(axis=0)
    modal_mc = votes_mc.argmax(axis=1)
    modal_y = votes_y.argmax(axis=1)
    mu_bar = area * np.bincount(modal_mc, minlength=k) / mc_area_points
    counts_y_bar = np.bincount(modal_y, minlength=k)
    plug_dev = -2.0 * (-(lam_bar @ mu_bar) + counts_y_bar @ np.log(lam_bar))
    return float(2.0 * deviances.mean() - plug_dev)
