"""Nearest-neighbor Gaussian process over a fixed reference lattice.

The latent field is anchored on a regular lattice (the reference set); lattice
values factorize sequentially, each site conditioned on its ``m`` closest
earlier sites, and any off-lattice location is conditionally independent of
all others given its ``m`` closest lattice sites.  This yields a valid GP with
sparse O(r m^2) computation and retrospective extension: further locations can
always be unveiled consistently with everything already drawn.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.sparse import csc_matrix, identity
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree

from .geometry import Window

__all__ = [
    "CovarianceSpec",
    "ReferenceGrid",
    "NNGPModel",
    "SiteBlock",
    "LatentField",
    "cov",
    "build_reference",
    "sample_grid_prior",
    "extend_offgrid",
    "pcn_propose",
    "prune_scratch",
    "grid_log_density",
    "field_log_density",
]

JITTER = 1e-10

LOG_2PI = np.log(2.0 * np.pi)

# lattice-offset packing base for off-grid neighbor patterns; offsets of the
# m nearest lattice sites never approach this span
_CODE_BASE = 1024


@dataclass(frozen=True)
class CovarianceSpec:
    """Powered-exponential covariance sigma2 * exp(-|d|^gamma / (2 tau2)).

    ``sigma2`` is fixed to 1 in fitted models (the latent scale is not
    identified); other values are used for temporal innovations.
    """

    tau2: float
    gamma: float = 1.95
    sigma2: float = 1.0

    def __post_init__(self):
        if self.tau2 <= 0:
            raise ValueError("tau2 must be positive")
        if not 0 < self.gamma <= 2:
            raise ValueError("gamma must be in (0, 2]")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")

    def of_distance(self, d):
        return self.sigma2 * np.exp(-np.power(d, self.gamma) / (2.0 * self.tau2))


def cov(spec, s, s2):
    """Covariance between locations ``s`` and ``s2`` (scalars pairs or arrays)."""
    s = np.asarray(s, dtype=float)
    s2 = np.asarray(s2, dtype=float)
    d = np.sqrt(((s - s2) ** 2).sum(axis=-1))
    return spec.of_distance(d)


@dataclass(frozen=True)
class ReferenceGrid:
    """Regular lattice with row-major ordering and earlier-index neighbor sets.

    ``neighbors[i]`` holds the indices of the ``min(i, m)`` closest sites with
    strictly smaller index, padded with -1; ties are broken by lower index.
    """

    window: Window
    locations: np.ndarray
    neighbors: np.ndarray
    nx: int
    ny: int
    m: int

    @property
    def r(self):
        return self.locations.shape[0]


def _nearest_earlier(tree, locations, m):
    """m closest strictly-earlier points per site, ties broken by lower index."""
    r = locations.shape[0]
    neighbors = np.full((r, m), -1, dtype=np.int64)
    pending = np.arange(1, r)
    k = min(r, 4 * m + 1)
    while pending.size:
        dist, idx = tree.query(locations[pending], k=k)
        dist, idx = np.atleast_2d(dist), np.atleast_2d(idx)
        solved = []
        for row, i in enumerate(pending):
            earlier = idx[row] < i
            found = int(earlier.sum())
            if found < min(i, m) and k < r:
                continue
            cand_idx = idx[row][earlier]
            cand_dist = dist[row][earlier]
            order = np.lexsort((cand_idx, cand_dist))[: min(i, m)]
            neighbors[i, : order.size] = cand_idx[order]
            solved.append(row)
        pending = np.delete(pending, solved)
        if k >= r:
            break
        k = min(r, 2 * k)
    return neighbors


def build_reference(window, r, m):
    """Build a near-square lattice of about ``r`` sites over ``window``.

    Sites are cell centers, enumerated row-major (x fastest).  ``m`` is clamped
    to the number of available earlier sites on small grids.
    """
    if r < 4:
        raise ValueError("reference grid needs r >= 4")
    if m < 1:
        raise ValueError("m must be >= 1")
    aspect = window.width / window.height
    nx = max(2, int(round(np.sqrt(r * aspect))))
    ny = max(2, int(round(r / nx)))
    r_actual = nx * ny
    if m >= r_actual:
        warnings.warn(
            f"m={m} clamped to {r_actual - 1} for a {r_actual}-site grid",
            stacklevel=2,
        )
        m = r_actual - 1
    xs = window.x_min + (np.arange(nx) + 0.5) * window.width / nx
    ys = window.y_min + (np.arange(ny) + 0.5) * window.height / ny
    gx, gy = np.meshgrid(xs, ys)
    locations = np.column_stack([gx.ravel(), gy.ravel()])
    tree = cKDTree(locations)
    neighbors = _nearest_earlier(tree, locations, m)
    return ReferenceGrid(window, locations, neighbors, nx, ny, m)


def _batched_kriging(spec, nbr_xy, site_xy):
    """Kriging weights and conditional sd of sites given their neighbor sets.

    ``nbr_xy``: (n, k, 2) neighbor coordinates, ``site_xy``: (n, 2).  The local
    joint covariance gets ``JITTER`` on its whole diagonal before factorization,
    so with k = r-1 the sequential law matches a dense factorization of
    C + JITTER*I exactly.
    """
    diff = nbr_xy[:, :, None, :] - nbr_xy[:, None, :, :]
    c_nn = spec.of_distance(np.sqrt((diff**2).sum(-1)))
    k = nbr_xy.shape[1]
    c_nn[:, np.arange(k), np.arange(k)] += JITTER
    c_cross = spec.of_distance(np.sqrt(((nbr_xy - site_xy[:, None, :]) ** 2).sum(-1)))
    try:
        w = np.linalg.solve(c_nn, c_cross[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            "local covariance not positive definite despite jitter"
        ) from exc
    var = spec.sigma2 + JITTER - (w * c_cross).sum(axis=1)
    if np.any(var <= 0) or np.any(~np.isfinite(var)):
        raise np.linalg.LinAlgError(
            "non-positive conditional variance despite jitter"
        )
    return w, np.sqrt(var)


class NNGPModel:
    """Reference grid + covariance, with cached sequential factors.

    Caches, per site i of the grid: kriging weights onto its earlier neighbors
    and the conditional sd.  ``lu`` factors (I - W) once so prior draws and
    log densities are O(r m).
    """

    def __init__(self, grid, spec):
        self.grid = grid
        self.spec = spec
        r, m = grid.r, grid.m
        w = np.zeros((r, m))
        sd = np.empty(r)
        sd[0] = np.sqrt(spec.sigma2 + JITTER)
        counts = np.minimum(np.arange(r), m)
        for k in np.unique(counts[1:]):
            sites = np.where(counts == k)[0]
            nbr = grid.neighbors[sites, :k]
            wk, sdk = _batched_kriging(spec, grid.locations[nbr], grid.locations[sites])
            w[sites, :k] = wk
            sd[sites] = sdk
        self.weights = w
        self.cond_sd = sd
        rows = np.repeat(np.arange(r), counts)
        cols = grid.neighbors[grid.neighbors >= 0]
        vals = w[grid.neighbors >= 0]
        self._w_sparse = csc_matrix((vals, (rows, cols)), shape=(r, r))
        self._lu = splu((identity(r, format="csc") - self._w_sparse).tocsc(),
                        permc_spec="NATURAL")
        self._offgrid_tree = cKDTree(grid.locations)
        # off-grid neighbor sets on a lattice repeat a handful of relative
        # patterns; their Gram inverses are cached by pattern, grouped by a
        # polynomial hash (exact codes verified before reuse)
        self._pattern_cache = {}
        self._hash_mults = np.random.Generator(
            np.random.Philox(key=np.array([0x9E3779B97F4A7C15, 0], dtype=np.uint64))
        ).integers(1, 2**63, size=max(m, 1), dtype=np.uint64) * 2 + 1

    def prior_grid_draw(self, rng):
        z = rng.standard_normal(self.grid.r)
        return self._lu.solve(self.cond_sd * z)

    def grid_conditional_mean(self, values):
        return self._w_sparse @ values

    def _pattern_inverse(self, codes_row):
        """Inverse of the jittered neighbor Gram for one offset pattern."""
        key = codes_row.tobytes()
        inv = self._pattern_cache.get(key)
        if inv is None:
            win = self.grid.window
            sx = win.width / self.grid.nx
            sy = win.height / self.grid.ny
            di, dj = np.divmod(codes_row, _CODE_BASE)
            pos = np.column_stack([dj * sx, di * sy])
            diff = pos[:, None, :] - pos[None, :, :]
            c_nn = self.spec.of_distance(np.sqrt((diff**2).sum(-1)))
            c_nn[np.arange(len(codes_row)), np.arange(len(codes_row))] += JITTER
            try:
                chol = np.linalg.cholesky(c_nn)
            except np.linalg.LinAlgError as exc:
                raise np.linalg.LinAlgError(
                    "local covariance not positive definite despite jitter"
                ) from exc
            eye = np.eye(len(codes_row))
            half = solve_triangular(chol, eye, lower=True, check_finite=False)
            inv = solve_triangular(chol.T, half, lower=False, check_finite=False)
            self._pattern_cache[key] = inv
        return inv

    def offgrid_coeffs(self, xy):
        """Neighbor indices, kriging weights and conditional sd for new sites.

        Neighbors are the ``m`` closest grid sites (ties by lower index),
        reordered canonically by lattice offset so sites sharing a neighbor
        pattern share one cached Gram inverse.
        """
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        n, m = xy.shape[0], self.grid.m
        if n == 0:
            return np.empty((0, m), dtype=np.int64), np.empty((0, m)), np.empty(0)
        k = min(self.grid.r, m + 4)
        dist, idx = self._offgrid_tree.query(xy, k=k)
        dist, idx = np.atleast_2d(dist), np.atleast_2d(idx)
        if k > m:
            # query rows come distance-sorted; re-resolve by (distance, index)
            # only where a tie straddles the selection boundary
            tied = np.nonzero(dist[:, m - 1] == dist[:, m])[0]
            for row in tied:
                order = np.lexsort((idx[row], dist[row]))
                idx[row] = idx[row][order]
                dist[row] = dist[row][order]
        nbr = np.ascontiguousarray(idx[:, :m])
        iy, ix = np.divmod(nbr, self.grid.nx)
        di = iy - iy.min(axis=1, keepdims=True)
        dj = ix - ix.min(axis=1, keepdims=True)
        codes = di * _CODE_BASE + dj
        order = np.argsort(codes, axis=1)
        codes = np.take_along_axis(codes, order, axis=1)
        nbr = np.take_along_axis(nbr, order, axis=1)
        nbr_xy = self.grid.locations[nbr]
        c_cross = self.spec.of_distance(
            np.sqrt(((nbr_xy - xy[:, None, :]) ** 2).sum(-1)))
        hashes = (codes.astype(np.uint64) * self._hash_mults[:m]).sum(
            axis=1, dtype=np.uint64)
        uniq, inverse = np.unique(hashes, return_inverse=True)
        w = np.empty((n, m))
        for u in range(uniq.size):
            rows = np.nonzero(inverse == u)[0]
            first = codes[rows[0]]
            same = np.all(codes[rows] == first, axis=1)
            gram_inv = self._pattern_inverse(first)
            w[rows[same]] = c_cross[rows[same]] @ gram_inv
            for row in rows[~same]:  # hash collision: compute directly
                w[row] = c_cross[row] @ self._pattern_inverse(codes[row])
        var = self.spec.sigma2 + JITTER - (w * c_cross).sum(axis=1)
        if np.any(var <= 0) or np.any(~np.isfinite(var)):
            raise np.linalg.LinAlgError(
                "non-positive conditional variance despite jitter")
        return nbr, w, np.sqrt(var)


@dataclass
class SiteBlock:
    """Off-grid sites with cached conditional coefficients and provenance.

    provenance is one of "data" (observed events), "aux" (auxiliary-process
    sites) or "scratch" (deletable without changing the law of what remains).
    """

    xy: np.ndarray
    values: np.ndarray
    nbr: np.ndarray
    w: np.ndarray
    sd: np.ndarray
    provenance: str

    def __len__(self):
        return self.values.shape[0]

    def conditional_mean(self, grid_values):
        if len(self) == 0:
            return np.empty(0)
        return (self.w * grid_values[self.nbr]).sum(axis=1)

    def subset(self, mask):
        return SiteBlock(self.xy[mask], self.values[mask], self.nbr[mask],
                         self.w[mask], self.sd[mask], self.provenance)

    @staticmethod
    def concat(a, b):
        return SiteBlock(
            np.concatenate([a.xy, b.xy]),
            np.concatenate([a.values, b.values]),
            np.concatenate([a.nbr, b.nbr]),
            np.concatenate([a.w, b.w]),
            np.concatenate([a.sd, b.sd]),
            a.provenance,
        )


@dataclass
class LatentField:
    """Latent-field values on the reference grid plus named off-grid blocks."""

    nngp: NNGPModel
    grid_values: np.ndarray
    blocks: dict = field(default_factory=dict)

    def copy(self):
        blocks = {
            name: SiteBlock(b.xy, b.values.copy(), b.nbr, b.w, b.sd, b.provenance)
            for name, b in self.blocks.items()
        }
        return LatentField(self.nngp, self.grid_values.copy(), blocks)

    def value_at(self, name):
        return self.blocks[name].values


def sample_grid_prior(nngp, rng):
    """Draw grid values from the NNGP prior via the sequential factorization."""
    return nngp.prior_grid_draw(rng)


def conditional_block_draw(nngp, grid_values, xy, rng, provenance="scratch",
                           coeffs=None):
    """Draw a new SiteBlock conditional on the grid (sites are independent)."""
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    nbr, w, sd = coeffs if coeffs is not None else nngp.offgrid_coeffs(xy)
    mean = (w * grid_values[nbr]).sum(axis=1) if xy.shape[0] else np.empty(0)
    values = mean + sd * rng.standard_normal(xy.shape[0])
    return SiteBlock(xy, values, nbr, w, sd, provenance)


def extend_offgrid(field, sites, rng, name=None, provenance="scratch"):
    """Unveil the field at new off-grid sites; existing sites are untouched.

    Each new site is drawn given its m nearest grid neighbors only, so batches
    may be extended in any order without changing the joint law.  Returns the
    block name under which the sites were stored.
    """
    sites = np.asarray(sites, dtype=float).reshape(-1, 2)
    if name is None:
        name = f"scratch{len(field.blocks)}"
    block = conditional_block_draw(field.nngp, field.grid_values, sites, rng,
                                   provenance)
    if name in field.blocks:
        existing = field.blocks[name]
        if len(existing):
            block = SiteBlock.concat(existing, block)
    if len(block):
        field.blocks[name] = block
    return name


def pcn_propose(field, varsigma, rng):
    """Preconditioned Crank-Nicolson proposal at every retained location.

    Returns a new field with values sqrt(1 - varsigma^2) * beta + varsigma * eps,
    where eps is a fresh prior draw (grid sequentially, off-grid conditionally).
    The proposal leaves the NNGP prior invariant for any varsigma in (0, 1].
    """
    if not 0 < varsigma <= 1:
        raise ValueError("varsigma must be in (0, 1]")
    keep = np.sqrt(1.0 - varsigma**2)
    eps_grid = field.nngp.prior_grid_draw(rng)
    out = LatentField(field.nngp, keep * field.grid_values + varsigma * eps_grid)
    for name, b in field.blocks.items():
        mean = b.conditional_mean(eps_grid)
        eps = mean + b.sd * rng.standard_normal(len(b))
        out.blocks[name] = SiteBlock(b.xy, keep * b.values + varsigma * eps,
                                     b.nbr, b.w, b.sd, b.provenance)
    return out


def prune_scratch(field, keep=("data", "aux")):
    """Delete all scratch blocks outside ``keep``; the law of the rest is unchanged.

    Returns ``(field, pruned_any)``.  Removing data or aux blocks is refused:
    they carry sites the sampler still conditions on.
    """
    for name, b in field.blocks.items():
        if b.provenance != "scratch" and name not in keep:
            raise ValueError(f"refusing to prune non-scratch block '{name}'")
    doomed = [name for name, b in field.blocks.items()
              if b.provenance == "scratch" and name not in keep]
    for name in doomed:
        del field.blocks[name]
    return field, bool(doomed)


def grid_log_density(nngp, values):
    """NNGP log density of grid values (sum of sequential conditionals)."""
    resid = values - nngp.grid_conditional_mean(values)
    sd = nngp.cond_sd
    return float(-0.5 * np.sum((resid / sd) ** 2) - np.sum(np.log(sd))
                 - 0.5 * values.size * LOG_2PI)


def block_log_density(block, grid_values):
    if len(block) == 0:
        return 0.0
    resid = block.values - block.conditional_mean(grid_values)
    return float(-0.5 * np.sum((resid / block.sd) ** 2)
                 - np.sum(np.log(block.sd)) - 0.5 * len(block) * LOG_2PI)


def field_log_density(field):
    """Joint NNGP log density of the grid and every retained off-grid block."""
    total = grid_log_density(field.nngp, field.grid_values)
    for b in field.blocks.values():
        total += block_log_density(b, field.grid_values)
    return total
