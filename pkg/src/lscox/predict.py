"""Posterior prediction from collected samples.

Quantities that depend on the latent field at new locations are obtained by
retrospective extension: for each retained draw, field values wherever needed
are simulated from the conditional prior given that draw's grid snapshot.
"""

from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .geometry import PartitionLevels, PointPattern, region_of, uniform_points
from .nngp import NNGPModel, build_reference

__all__ = ["PosteriorDraw", "FutureDraw", "nngp_from_model", "draws_with_fields",
           "integrated_intensity_draw", "replicate_pattern", "future_draw"]


@dataclass
class PosteriorDraw:
    """One retained draw with its grid snapshot.

    ``grid_values`` is (r,) for spatial fits and (T+1, r) for dynamic fits;
    ``lam`` is (K,) or (T+1, K) accordingly.
    """

    nngp: NNGPModel
    grid_values: np.ndarray
    lam: np.ndarray
    c: np.ndarray

    def field_at(self, xy, rng, t=None):
        """Conditional field values at new sites given the (time-t) grid."""
        from .nngp import conditional_block_draw

        grid = self.grid_values if t is None else self.grid_values[t]
        return conditional_block_draw(self.nngp, grid, xy, rng).values

    def intensity_at(self, xy, rng, t=None):
        beta = self.field_at(xy, rng, t=t)
        lam = self.lam if self.lam.ndim == 1 else self.lam[t if t is not None else -1]
        levels = PartitionLevels(self.c)
        return lam[region_of(beta, levels) - 1]


def nngp_from_model(model):
    """Rebuild the reference-grid NNGP used by a fit (deterministic in model)."""
    return NNGPModel(build_reference(model.window, model.r, model.m), model.cov)


def draws_with_fields(samples, nngp=None):
    """Yield a PosteriorDraw per stored grid snapshot."""
    if nngp is None:
        nngp = nngp_from_model(samples.model)
    for j, row in enumerate(samples.snapshot_rows):
        yield PosteriorDraw(nngp, samples.snapshots[j], samples.lam[row],
                            samples.c[row])


def integrated_intensity_draw(draw, region, rng, t=None):
    """One draw of the unbiased estimator of the integrated intensity.

    Draws U uniform on ``region``, unveils the field there and returns
    area(region) * lam at U; conditionally unbiased for the integral of the
    intensity over the region.
    """
    u = uniform_points(region, 1, rng)
    return float(region.area * draw.intensity_at(u, rng, t=t)[0])


def replicate_pattern(draw, window, rng, t=None):
    """Replicate point pattern for one draw via Poisson thinning."""
    lam = draw.lam if draw.lam.ndim == 1 else draw.lam[t if t is not None else -1]
    lam_max = lam.max()
    n_cand = rng.poisson(lam_max * window.area)
    xy = uniform_points(window, n_cand, rng)
    if n_cand == 0:
        return PointPattern(xy, window)
    keep = rng.uniform(size=n_cand) < draw.intensity_at(xy, rng, t=t) / lam_max
    return PointPattern(xy[keep], window)


@dataclass
class FutureDraw:
    """Forward propagation of one posterior draw over d horizons."""

    fields: np.ndarray        # (d, r) grid values
    rates: np.ndarray         # (d, K)
    patterns: list | None


def future_draw(draw, d, ngar1, rng, innovation=None, window=None,
                with_patterns=False):
    """Propagate a dynamic-fit draw d steps ahead.

    The grid field advances by independent NNGP innovations (``innovation``
    model; None freezes the field), the rates by the multiplicative AR(1)
    with Beta innovations.  Optionally thins a replicate pattern per horizon.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    lam = draw.lam if draw.lam.ndim == 1 else draw.lam[-1]
    grid = draw.grid_values if draw.grid_values.ndim == 1 else draw.grid_values[-1]
    k = lam.size
    w, a = ngar1.per_level(k)
    fields = np.empty((d, grid.size))
    rates = np.empty((d, k))
    prev_f, prev_l = grid, lam
    for j in range(d):
        zeta = innovation.prior_grid_draw(rng) if innovation is not None else 0.0
        fields[j] = prev_f + zeta
        eps = rng.beta(w * a, (1.0 - w) * a)
        rates[j] = prev_l * eps / w
        prev_f, prev_l = fields[j], rates[j]
    patterns = None
    if with_patterns:
        if window is None:
            raise ValueError("window required for pattern prediction")
        patterns = []
        for j in range(d):
            horizon = PosteriorDraw(draw.nngp, fields[j], rates[j], draw.c)
            patterns.append(replicate_pattern(horizon, window, rng))
    return FutureDraw(fields, rates, patterns)
