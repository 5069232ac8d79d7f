"""Rate priors: repulsive gamma for one time, multiplicative AR(1) across times.

The repulsive gamma prior multiplies independent gamma kernels by a factor
penalizing pairs of rates that are close on the scale of their Poisson
standard deviations, which pushes estimated levels apart and lets superfluous
regions collapse.  The temporal prior chains per-level rates through Beta
innovations so that E[lam_t | lam_{t-1}] = lam_{t-1}.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import betaln

__all__ = ["RGSpec", "NGAR1Spec", "rg_log_density_unnorm", "ngar1_log_density",
           "ngar1_simulate"]


@dataclass(frozen=True)
class RGSpec:
    """Repulsive gamma prior parameters.

    ``alpha`` and ``eta`` broadcast to one shape/rate per level; ``truncation``
    (optional) bounds the largest rate, matching prior truncation used for
    small datasets.
    """

    alpha: float | np.ndarray = 1.2
    eta: float | np.ndarray = 0.04
    rho: float = 1.0
    nu: float = 3.0
    truncation: float | None = None

    def __post_init__(self):
        if np.any(np.asarray(self.alpha) <= 0) or np.any(np.asarray(self.eta) <= 0):
            raise ValueError("alpha and eta must be positive")
        if self.rho <= 0 or self.nu <= 0:
            raise ValueError("rho and nu must be positive")
        if self.truncation is not None and self.truncation <= 0:
            raise ValueError("truncation bound must be positive")

    def per_level(self, k):
        alpha = np.broadcast_to(np.asarray(self.alpha, float), (k,))
        eta = np.broadcast_to(np.asarray(self.eta, float), (k,))
        return alpha, eta


def rg_log_density_unnorm(lam, spec):
    """Unnormalized log density of the repulsive gamma prior.

    Soft support: returns -inf for non-positive rates, truncation violations
    and exactly tied pairs (the repulsion factor vanishes there).  The
    normalizing constant is never needed: it cancels in acceptance ratios.
    """
    lam = np.asarray(lam, dtype=float).reshape(-1)
    if np.any(lam <= 0) or np.any(~np.isfinite(lam)):
        return -np.inf
    if spec.truncation is not None and lam.max() > spec.truncation:
        return -np.inf
    alpha, eta = spec.per_level(lam.size)
    out = float(np.sum((alpha - 1.0) * np.log(lam) - eta * lam))
    if lam.size > 1:
        i, j = np.triu_indices(lam.size, k=1)
        gap = np.abs(lam[i] - lam[j]) / np.sqrt(lam[i] + lam[j])
        if np.any(gap == 0.0):
            return -np.inf
        # log(1 - exp(-rho * gap^nu)) via expm1 for small gaps
        out += float(np.sum(np.log(-np.expm1(-spec.rho * gap**spec.nu))))
    return out


@dataclass(frozen=True)
class NGAR1Spec:
    """Temporal prior: lam_t = lam_{t-1} * eps_t / w, eps_t ~ Beta(w a, (1-w) a).

    ``w`` and ``a`` broadcast per level; the time-zero marginal is the
    repulsive gamma prior ``initial``.
    """

    w: float | np.ndarray = 0.5
    a: float | np.ndarray = 5.0
    initial: RGSpec = field(default_factory=RGSpec)

    def __post_init__(self):
        w = np.asarray(self.w, float)
        a = np.asarray(self.a, float)
        if np.any(w <= 0) or np.any(w >= 1):
            raise ValueError("w must be in (0, 1)")
        if np.any(a <= 0):
            raise ValueError("a must be positive")

    def per_level(self, k):
        w = np.broadcast_to(np.asarray(self.w, float), (k,))
        a = np.broadcast_to(np.asarray(self.a, float), (k,))
        return w, a


def _beta_logpdf(x, a, b):
    return (a - 1.0) * np.log(x) + (b - 1.0) * np.log1p(-x) - betaln(a, b)


def ngar1_log_density(traj, spec, level=0):
    """Log density of one level's trajectory given its starting value.

    ``traj`` holds T+1 values; the contribution of each transition is the Beta
    log density of eps_t = w * lam_t / lam_{t-1} plus the change-of-variables
    term log(w / lam_{t-1}).  Support violations (eps outside (0,1)) give -inf.
    The time-zero marginal is not included here; add the RG term separately.
    """
    traj = np.asarray(traj, dtype=float).reshape(-1)
    if np.any(traj <= 0):
        return -np.inf
    if traj.size < 2:
        return 0.0
    w_all = np.atleast_1d(np.asarray(spec.w, dtype=float))
    a_all = np.atleast_1d(np.asarray(spec.a, dtype=float))
    w = float(w_all[min(level, w_all.size - 1)])
    a = float(a_all[min(level, a_all.size - 1)])
    eps = w * traj[1:] / traj[:-1]
    if np.any(eps <= 0) or np.any(eps >= 1):
        return -np.inf
    return float(np.sum(_beta_logpdf(eps, w * a, (1.0 - w) * a)
                        + np.log(w / traj[:-1])))


def ngar1_log_density_matrix(lam, spec):
    """Transition log density of a (T+1, K) rate matrix, all levels summed."""
    lam = np.asarray(lam, dtype=float)
    if lam.ndim != 2:
        raise ValueError("expected a (T+1, K) matrix")
    if np.any(lam <= 0):
        return -np.inf
    if lam.shape[0] < 2:
        return 0.0
    w, a = spec.per_level(lam.shape[1])
    eps = w * lam[1:] / lam[:-1]
    if np.any(eps <= 0) or np.any(eps >= 1):
        return -np.inf
    return float(np.sum(_beta_logpdf(eps, w * a, (1.0 - w) * a)
                        + np.log(w / lam[:-1])))


def ngar1_simulate(initial, spec, t_steps, rng):
    """Forward-simulate the trajectory matrix from given time-zero rates.

    Returns a (t_steps + 1, K) matrix whose first row is ``initial``; all
    values stay positive and E[lam_t | lam_{t-1}] = lam_{t-1}.
    """
    initial = np.atleast_1d(np.asarray(initial, dtype=float))
    if t_steps < 0:
        raise ValueError("t_steps must be >= 0")
    k = initial.size
    w, a = spec.per_level(k)
    out = np.empty((t_steps + 1, k))
    out[0] = initial
    for t in range(1, t_steps + 1):
        eps = rng.beta(w * a, (1.0 - w) * a)
        out[t] = out[t - 1] * eps / w
    return out
