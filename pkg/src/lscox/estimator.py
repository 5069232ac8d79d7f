"""Unbiased Poisson estimator of the intractable likelihood factor.

The likelihood of the model contains M = exp(-sum_k lambda_k mu_k) with the
region areas mu_k unavailable in closed form.  M is estimated without bias by
an auxiliary Poisson process: points uniform on the window with heights
uniform below lambda_star = delta * max(lambda) - min(lambda).  The estimator
is almost surely positive, which makes it a valid pseudo-marginal plug-in.
"""

from dataclasses import dataclass

import numpy as np

from .geometry import region_of, uniform_points

__all__ = [
    "RateVector",
    "AuxiliaryProcess",
    "sample_aux",
    "extend_aux_heights",
    "m_hat",
    "log_m_hat",
    "m_hat_variance",
    "count_regions",
    "log_rate_ratios",
    "delta_for_target",
]


@dataclass(frozen=True)
class RateVector:
    """Positive region rates with the derived dominating height lambda_star."""

    lam: np.ndarray
    delta: float

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=float).reshape(-1)
        object.__setattr__(self, "lam", lam)
        if np.any(lam <= 0):
            raise ValueError("rates must be positive")
        if self.delta <= 1:
            raise ValueError("delta must exceed 1")

    @property
    def lam_max(self):
        return float(self.lam.max())

    @property
    def lam_min(self):
        return float(self.lam.min())

    @property
    def lambda_star(self):
        return self.delta * self.lam_max - self.lam_min


def log_rate_ratios(lam, delta):
    """log of (delta*lam_max - lam_k) / (delta*lam_max - lam_min) per region."""
    lam = np.asarray(lam, dtype=float)
    if delta <= 1:
        raise ValueError("delta must exceed 1")
    top = delta * lam.max() - lam
    bot = delta * lam.max() - lam.min()
    return np.log(top) - np.log(bot)


def delta_for_target(lam, area, target_n, floor=1.05):
    """delta such that the auxiliary process has about ``target_n`` points.

    Solves (delta*lam_max - lam_min) * area = target_n for the current rates
    and clamps to ``floor``; the result is frozen for the whole run because
    delta enters the rate-update acceptance ratio on both sides.
    """
    lam = np.asarray(lam, dtype=float)
    delta = (target_n / area + lam.min()) / lam.max()
    return float(max(delta, floor))


@dataclass
class AuxiliaryProcess:
    """Unveiled part of the latent Poisson process: points below lambda_star.

    ``square`` holds the index of the partition cell containing each point;
    ``region`` caches the current level-set region of each point (maintained
    by the sampler, -1 when not yet assigned).
    """

    xy: np.ndarray
    heights: np.ndarray
    lambda_star: float
    square: np.ndarray
    region: np.ndarray

    def __post_init__(self):
        if np.any(self.heights < 0) or np.any(self.heights >= self.lambda_star):
            raise ValueError("heights must lie in [0, lambda_star)")

    def __len__(self):
        return self.xy.shape[0]


def sample_aux(window, lambda_star, squares, rng):
    """Fresh auxiliary process: PP(lambda_star) locations with uniform heights.

    Counts are Poisson(lambda_star * area); restricted to any cell of
    ``squares`` the process is an independent PP(lambda_star) on that cell.
    """
    if lambda_star <= 0:
        raise ValueError("lambda_star must be positive")
    n = rng.poisson(lambda_star * window.area)
    xy = uniform_points(window, n, rng)
    heights = rng.uniform(0.0, lambda_star, size=n)
    return AuxiliaryProcess(xy, heights, lambda_star, squares.index_of(xy),
                            np.full(n, -1, dtype=np.int64))


def extend_aux_heights(aux, new_lambda_star, window, squares, rng):
    """Unveil the slab between the current and a larger lambda_star.

    Adds Poisson((new - old) * area) fresh points with heights uniform on
    [old, new); the result is distributed exactly as a fresh draw at the new
    height.  ``new <= old`` is a no-op returning ``aux`` itself.
    """
    old = aux.lambda_star
    if new_lambda_star <= old:
        return aux
    n = rng.poisson((new_lambda_star - old) * window.area)
    xy = uniform_points(window, n, rng)
    heights = rng.uniform(old, new_lambda_star, size=n)
    return AuxiliaryProcess(
        np.concatenate([aux.xy, xy]),
        np.concatenate([aux.heights, heights]),
        new_lambda_star,
        np.concatenate([aux.square, squares.index_of(xy)]),
        np.concatenate([aux.region, np.full(n, -1, dtype=np.int64)]),
    )


def log_m_hat(lam, delta, region_counts, area):
    """log of the unbiased estimator of exp(-sum_k lambda_k mu_k)."""
    lam = np.asarray(lam, dtype=float)
    counts = np.asarray(region_counts)
    if np.any(counts < 0):
        raise ValueError("region counts must be non-negative")
    return float(-area * lam.min() + counts @ log_rate_ratios(lam, delta))


def m_hat(rate, delta, region_counts, area):
    """Poisson estimator of M; strictly positive for any delta > 1.

    ``rate`` may be a RateVector or a plain rate array.
    """
    lam = rate.lam if isinstance(rate, RateVector) else rate
    return float(np.exp(log_m_hat(lam, delta, region_counts, area)))


def m_hat_variance(rate, delta, areas, area):
    """Closed-form variance of the estimator when the region areas are known.

    Test oracle: requires the exact mu_k, which the sampler never has.  The
    variance is finite and strictly decreasing in delta.
    """
    lam = np.asarray(rate.lam if isinstance(rate, RateVector) else rate, float)
    areas = np.asarray(areas, dtype=float)
    if delta <= 1:
        raise ValueError("delta must exceed 1")
    if areas.shape != lam.shape:
        raise ValueError("need one area per region")
    lam_star = delta * lam.max() - lam.min()
    ratios = (delta * lam.max() - lam) / lam_star
    var_m1 = np.exp(-np.sum(areas * lam_star * (1.0 - ratios**2))) - np.exp(
        -2.0 * np.sum(areas * (lam - lam.min()))
    )
    return float(np.exp(-2.0 * area * lam.min()) * var_m1)


def count_regions(xy, field, levels, block=None):
    """Counts per region of points whose field values are already unveiled.

    ``block`` names the field block holding the values for ``xy``; the contract
    is retrospective: the field must have been extended at the sites first.
    """
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    k = levels.k
    if xy.shape[0] == 0:
        return np.zeros(k, dtype=np.int64)
    if block is None or block not in field.blocks:
        raise ValueError("field has no values for the requested sites")
    b = field.blocks[block]
    if len(b) != xy.shape[0] or not np.array_equal(b.xy, xy):
        raise ValueError("field block does not match the requested sites")
    regions = region_of(b.values, levels)
    return np.bincount(regions - 1, minlength=k).astype(np.int64)
