"""Rectangular windows, point patterns and Poisson-process simulation.

All coordinates are in rescaled model units; dataset ingestion performs the
affine rescale from the source window (see :mod:`lscox.io`).
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Window",
    "PointPattern",
    "PartitionLevels",
    "SquarePartition",
    "region_of",
    "uniform_points",
    "simulate_lscp",
]


@dataclass(frozen=True)
class Window:
    """Axis-aligned rectangular observation window."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError("window must satisfy x_min < x_max and y_min < y_max")

    @property
    def area(self):
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    def contains(self, xy):
        """Boolean containment mask for an (n, 2) coordinate array."""
        xy = np.atleast_2d(xy)
        return (
            (xy[:, 0] >= self.x_min)
            & (xy[:, 0] <= self.x_max)
            & (xy[:, 1] >= self.y_min)
            & (xy[:, 1] <= self.y_max)
        )


@dataclass
class PointPattern:
    """Observed event locations, optionally time-stamped.

    ``times``, when present, holds one non-negative integer index per point.
    """

    xy: np.ndarray
    window: Window
    times: np.ndarray | None = None

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=float).reshape(-1, 2)
        if self.times is not None:
            self.times = np.asarray(self.times, dtype=int).reshape(-1)
            if self.times.shape[0] != self.xy.shape[0]:
                raise ValueError("times must have one entry per point")
            if self.times.size and self.times.min() < 0:
                raise ValueError("time indices must be non-negative")
        if self.xy.size and not self.window.contains(self.xy).all():
            raise ValueError("every point must lie inside the window")

    def __len__(self):
        return self.xy.shape[0]

    @property
    def n_times(self):
        """Number of observation times T+1 (1 for purely spatial patterns)."""
        if self.times is None or len(self) == 0:
            return 1
        return int(self.times.max()) + 1

    def at_time(self, t):
        """Coordinates of the points observed at time index ``t``."""
        if self.times is None:
            return self.xy if t == 0 else np.empty((0, 2))
        return self.xy[self.times == t]


@dataclass(frozen=True)
class PartitionLevels:
    """Strictly increasing thresholds c_1 < ... < c_{K-1} (c_0 = -inf, c_K = +inf)."""

    c: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float).reshape(-1)
        object.__setattr__(self, "c", c)
        if c.size and not np.all(np.diff(c) > 0):
            raise ValueError("levels must be strictly increasing")

    @property
    def k(self):
        """Number of regions K."""
        return self.c.size + 1


def region_of(beta_value, levels):
    """Region index in 1..K of a latent-field value.

    Uses the right-closed convention c_{k-1} < beta <= c_k so the map is total;
    ties with a threshold occur with probability zero under the model.
    Accepts scalars or arrays.
    """
    c = levels.c if isinstance(levels, PartitionLevels) else np.asarray(levels, float)
    idx = np.searchsorted(c, beta_value, side="left") + 1
    return idx if np.ndim(beta_value) else int(idx)


def uniform_points(window, n, rng):
    """``n`` i.i.d. uniform locations in ``window`` as an (n, 2) array."""
    if n < 0:
        raise ValueError("n must be >= 0")
    xy = rng.uniform(size=(int(n), 2))
    xy[:, 0] = window.x_min + xy[:, 0] * window.width
    xy[:, 1] = window.y_min + xy[:, 1] * window.height
    return xy


def simulate_lscp(window, levels, lam, field_sampler, rng):
    """Simulate a level-set Cox process realization by Poisson thinning.

    A dominating homogeneous process with rate ``max(lam)`` is simulated and
    each candidate ``s`` is retained with probability ``lam[region(s)] / max(lam)``,
    where the region is determined by the latent field at ``s``.

    Parameters
    ----------
    window : Window
    levels : PartitionLevels
    lam : array_like
        K positive region rates, aligned with the K regions of ``levels``.
    field_sampler : callable
        Maps an (n, 2) array of locations to latent-field values; must be
        retrospectively consistent (repeated calls extend one realization).
    rng : numpy.random.Generator

    Returns
    -------
    PointPattern
    """
    lam = np.asarray(lam, dtype=float).reshape(-1)
    if lam.size != levels.k:
        raise ValueError("need one rate per region")
    if np.any(lam <= 0):
        raise ValueError("rates must be positive")
    lam_max = lam.max()
    n_cand = rng.poisson(lam_max * window.area)
    xy = uniform_points(window, n_cand, rng)
    if n_cand == 0:
        return PointPattern(xy, window)
    beta = np.asarray(field_sampler(xy), dtype=float).reshape(-1)
    if beta.shape[0] != n_cand:
        raise ValueError("field_sampler must return one value per location")
    keep = rng.uniform(size=n_cand) < lam[region_of(beta, levels) - 1] / lam_max
    return PointPattern(xy[keep], window)


@dataclass(frozen=True)
class SquarePartition:
    """Regular split of a window into L = nx * ny congruent rectangular cells.

    Cell shapes track the window aspect ratio so cells stay near-square.
    Cells are enumerated row-major (x fastest).
    """

    window: Window
    nx: int
    ny: int

    @classmethod
    def with_target(cls, window, n_cells):
        """Partition with cell count as close as possible to ``n_cells``."""
        n_cells = max(1, int(n_cells))
        aspect = window.width / window.height
        nx = max(1, int(round(np.sqrt(n_cells * aspect))))
        ny = max(1, int(round(n_cells / nx)))
        return cls(window, nx, ny)

    @property
    def n_cells(self):
        return self.nx * self.ny

    @property
    def cell_area(self):
        return self.window.area / self.n_cells

    def index_of(self, xy):
        """Cell index in 0..L-1 for each row of an (n, 2) array."""
        xy = np.atleast_2d(xy)
        ix = np.clip(
            ((xy[:, 0] - self.window.x_min) / self.window.width * self.nx).astype(int),
            0,
            self.nx - 1,
        )
        iy = np.clip(
            ((xy[:, 1] - self.window.y_min) / self.window.height * self.ny).astype(int),
            0,
            self.ny - 1,
        )
        return iy * self.nx + ix

    def uniform_in_cells(self, cell_counts, rng):
        """Uniform points per cell, concatenated in cell order.

        ``cell_counts`` has one entry per cell; returns (sum(counts), 2) array.
        """
        cell_counts = np.asarray(cell_counts, dtype=int)
        total = int(cell_counts.sum())
        cells = np.repeat(np.arange(self.n_cells), cell_counts)
        u = rng.uniform(size=(total, 2))
        wx = self.window.width / self.nx
        wy = self.window.height / self.ny
        x0 = self.window.x_min + (cells % self.nx) * wx
        y0 = self.window.y_min + (cells // self.nx) * wy
        return np.column_stack([x0 + u[:, 0] * wx, y0 + u[:, 1] * wy])
