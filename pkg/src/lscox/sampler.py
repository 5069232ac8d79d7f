"""Pseudo-marginal Gibbs sampler for the spatial level-set Cox process.

One iteration updates, in order: the latent field (pCN proposal at the grid
and at every event/auxiliary site), the auxiliary process square by square,
the rate vector (adaptive random walk with retrospective extension of the
auxiliary process when the dominating height grows), and the level thresholds
(joint uniform walk).  Scratch field values are never stored, so the virtual
update that deletes them is implicit in the block implementations.

Acceptance ratios use per-region auxiliary counts throughout, which is the
form implied by the joint pseudo-marginal target: the estimator contributes
prod_k ratio_k^{|N_k|}, so a block move changes the log target by
sum_k (delta |N_k|) log ratio_k.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as rngmod
from .estimator import (
    AuxiliaryProcess,
    delta_for_target,
    log_rate_ratios,
    sample_aux,
)
from .geometry import PartitionLevels, SquarePartition, uniform_points
from .nngp import (
    CovarianceSpec,
    LatentField,
    NNGPModel,
    build_reference,
    conditional_block_draw,
    field_log_density,
    pcn_propose,
    sample_grid_prior,
    SiteBlock,
)
from .priors import RGSpec, rg_log_density_unnorm

__all__ = ["Model", "SamplerConfig", "ChainState", "SampleRecord",
           "initialize", "update_beta", "update_aux", "update_lambda",
           "update_levels", "run", "run_collect", "Samples"]

# default initial thresholds per K; other K use standard-normal quantiles
_C_DEFAULTS = {2: (0.0,), 3: (-0.5, 0.5), 4: (-0.7, 0.0, 0.7)}

# target acceptance of the rate walk by dimension
_LAMBDA_TARGETS = {1: 0.40, 2: 0.35, 3: 0.30, 4: 0.27}


@dataclass(frozen=True)
class Model:
    """Fixed model-level quantities: window, number of levels, covariance, prior."""

    window: object
    k: int
    cov: CovarianceSpec
    prior: RGSpec
    r: int = 2500
    m: int = 16

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass
class SamplerConfig:
    iterations: int = 50_000
    burn_in: int = 10_000
    thin: int = 10
    l_squares: int | None = None       # None: tuned toward 0.8 acceptance
    delta: float | None = None         # None: derived from target_n
    target_n: float = 6000.0
    varsigma0: float = 0.2
    lambda_step0: float = 0.1
    c_halfwidth0: float = 0.1
    adapt_horizon: int | None = None   # None: burn_in
    seed: int = 0
    fixed_ordering: bool | None = None  # None: on for k >= 3
    log_walk: bool = True
    snapshot_every: int = 10
    audit: bool = False
    pilot_batch: int = 200

    def __post_init__(self):
        if not self.iterations > self.burn_in >= 0:
            raise ValueError("need iterations > burn_in >= 0")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")

    @property
    def horizon(self):
        return self.burn_in if self.adapt_horizon is None else self.adapt_horizon

    def ordering_enforced(self, k):
        return k >= 3 if self.fixed_ordering is None else self.fixed_ordering


@dataclass
class Adaptation:
    """Adaptive tuning state: pCN step, rate-walk covariance, level-walk width."""

    logit_varsigma: float
    log_lambda_gain: float = 0.0
    log_c_halfwidth: float = 0.0
    n_lambda: int = 0
    lambda_mean: np.ndarray | None = None
    lambda_m2: np.ndarray | None = None

    @property
    def varsigma(self):
        return min(0.999, max(1e-3, 1.0 / (1.0 + math.exp(-self.logit_varsigma))))

    def c_halfwidth(self, h0):
        return h0 * math.exp(self.log_c_halfwidth)

    def observe_lambda(self, x):
        """Running mean/covariance of the (log) rate history."""
        x = np.asarray(x, dtype=float)
        if self.lambda_mean is None:
            self.lambda_mean = x.copy()
            self.lambda_m2 = np.zeros((x.size, x.size))
            self.n_lambda = 1
            return
        self.n_lambda += 1
        delta = x - self.lambda_mean
        self.lambda_mean += delta / self.n_lambda
        self.lambda_m2 += np.outer(delta, x - self.lambda_mean)

    def lambda_chol(self, k, step0):
        """Cholesky factor of the proposal covariance (Haario with global gain)."""
        scale = math.exp(self.log_lambda_gain)
        if self.n_lambda < 10 * k or self.lambda_m2 is None:
            return math.sqrt(scale) * step0 * np.eye(k)
        emp = self.lambda_m2 / (self.n_lambda - 1)
        prop = scale * (2.38**2 / k) * (emp + 1e-10 * np.eye(k))
        try:
            return np.linalg.cholesky(prop)
        except np.linalg.LinAlgError:
            return math.sqrt(scale) * step0 * np.eye(k)


@dataclass
class ChainState:
    field: LatentField
    aux: AuxiliaryProcess
    lam: np.ndarray
    c: np.ndarray
    delta: float
    squares: SquarePartition
    y_regions: np.ndarray          # 0-based region per event
    counts_y: np.ndarray
    counts_n: np.ndarray
    adapt: Adaptation
    iteration: int = 0
    acc: dict = field(default_factory=dict)

    @property
    def k(self):
        return self.lam.size

    @property
    def lambda_star(self):
        return self.delta * self.lam.max() - self.lam.min()

    @property
    def levels(self):
        return PartitionLevels(self.c)


@dataclass
class SampleRecord:
    iteration: int
    lam: np.ndarray
    c: np.ndarray
    log_pm_lik: float
    log_target: float
    n_aux: int
    acc_beta: float
    acc_aux: float
    acc_lambda: float
    acc_levels: float
    beta_grid: np.ndarray | None = None


@dataclass
class Samples:
    """Posterior draws collected from a run, with occasional grid snapshots."""

    iterations: np.ndarray
    lam: np.ndarray
    c: np.ndarray
    log_pm_lik: np.ndarray
    log_target: np.ndarray
    n_aux: np.ndarray
    acc: np.ndarray                  # (n, 4) beta/aux/lambda/levels
    snapshot_rows: np.ndarray
    snapshots: np.ndarray            # (n_snap, r) grid values
    model: Model | None = None
    config: SamplerConfig | None = None

    def __len__(self):
        return self.iterations.size


def _region0(c, values):
    return np.searchsorted(c, values, side="left")


def _default_levels(k):
    if k == 1:
        return np.empty(0)
    if k in _C_DEFAULTS:
        return np.asarray(_C_DEFAULTS[k], dtype=float)
    from scipy.stats import norm

    return norm.ppf(np.arange(1, k) / k)


def _initial_rates(n_events, area, k):
    base = n_events / area
    if k == 1:
        return np.array([base])
    # small deterministic spread: exact ties have zero prior density
    return base * (1.0 + 0.05 * np.linspace(-1.0, 1.0, k))


def initialize(pattern, model, config, l_squares=None):
    """Initial chain state: prior field, data-driven rates, fresh auxiliaries."""
    if len(pattern) == 0:
        raise ValueError("cannot fit an empty point pattern")
    rng = rngmod.substream(config.seed, rngmod.BLOCK_INIT)
    grid = build_reference(model.window, model.r, model.m)
    nngp = NNGPModel(grid, model.cov)
    grid_values = sample_grid_prior(nngp, rng)
    fld = LatentField(nngp, grid_values)
    fld.blocks["data"] = conditional_block_draw(nngp, grid_values, pattern.xy,
                                                rng, provenance="data")
    lam = _initial_rates(len(pattern), model.window.area, model.k)
    c = _default_levels(model.k)
    delta = config.delta if config.delta is not None else delta_for_target(
        lam, model.window.area, config.target_n)
    if delta <= 1:
        raise ValueError("delta must exceed 1")
    if l_squares is None:
        l_squares = config.l_squares if config.l_squares is not None else 25
    squares = SquarePartition.with_target(model.window, l_squares)
    lambda_star = delta * lam.max() - lam.min()
    aux = sample_aux(model.window, lambda_star, squares, rng)
    fld.blocks["aux"] = conditional_block_draw(nngp, grid_values, aux.xy, rng,
                                               provenance="aux")
    aux.region = _region0(c, fld.blocks["aux"].values)
    y_regions = _region0(c, fld.blocks["data"].values)
    counts_y = np.bincount(y_regions, minlength=model.k).astype(np.int64)
    counts_n = np.bincount(aux.region, minlength=model.k).astype(np.int64)
    adapt = Adaptation(logit_varsigma=math.log(config.varsigma0
                                               / (1.0 - config.varsigma0)))
    return ChainState(fld, aux, lam, c, delta, squares, y_regions,
                      counts_y, counts_n, adapt)


def _adapt_gain(t):
    return (t + 1) ** -0.6


def log_accept_counts(lam, delta, d_counts_n, d_counts_y):
    """Log acceptance ratio of a move that only changes region counts.

    Shared by the field and the level updates: the estimator contributes the
    per-region count differences against log rate ratios, the data term the
    event-count differences against log rates.
    """
    return float(np.asarray(d_counts_n) @ log_rate_ratios(lam, delta)
                 + np.asarray(d_counts_y) @ np.log(lam))


def log_accept_lambda(lam_new, lam, delta, counts_n_new, counts_n, counts_y,
                      area, prior, log_walk):
    """Log acceptance ratio of a rate move (prior and Jacobian included)."""
    lp_new = rg_log_density_unnorm(lam_new, prior)
    if lp_new == -np.inf:
        return -np.inf
    out = (-area * (lam_new.min() - lam.min())
           + counts_n_new @ log_rate_ratios(lam_new, delta)
           - counts_n @ log_rate_ratios(lam, delta)
           + counts_y @ (np.log(lam_new) - np.log(lam))
           + lp_new - rg_log_density_unnorm(lam, prior))
    if log_walk:
        out += np.sum(np.log(lam_new) - np.log(lam))
    return float(out)


def update_beta(state, model, config, rng):
    """pCN update of the latent field at the grid and all retained sites."""
    varsigma = state.adapt.varsigma
    prop = pcn_propose(state.field, varsigma, rng)
    y_reg = _region0(state.c, prop.blocks["data"].values)
    n_reg = _region0(state.c, prop.blocks["aux"].values)
    counts_y = np.bincount(y_reg, minlength=model.k)
    counts_n = np.bincount(n_reg, minlength=model.k)
    log_alpha = log_accept_counts(state.lam, state.delta,
                                  counts_n - state.counts_n,
                                  counts_y - state.counts_y)
    alpha = min(1.0, math.exp(min(log_alpha, 0.0)))
    accept = math.log(rng.uniform()) < log_alpha
    if accept:
        state.field = prop
        state.y_regions = y_reg
        state.aux.region = n_reg
        state.counts_y = counts_y.astype(np.int64)
        state.counts_n = counts_n.astype(np.int64)
    if state.iteration < config.horizon:
        state.adapt.logit_varsigma += _adapt_gain(state.iteration) * (alpha - 0.234)
    state.acc["beta"] = float(accept)
    return state


def update_aux(state, model, config, rng):
    """Per-square refresh of the auxiliary process (all squares each call).

    Each square's points are re-proposed from PP(lambda_star) restricted to
    the square, the field is unveiled at the proposed sites, and the move is
    accepted with the per-region count ratio for that square.
    """
    aux, k = state.aux, model.k
    n_sq = state.squares.n_cells
    lam_star = state.lambda_star
    prop_counts = rng.poisson(lam_star * state.squares.cell_area, n_sq)
    xy = state.squares.uniform_in_cells(prop_counts, rng)
    heights = rng.uniform(0.0, lam_star, size=xy.shape[0])
    block = conditional_block_draw(state.field.nngp, state.field.grid_values,
                                   xy, rng, provenance="aux")
    reg = _region0(state.c, block.values)
    sq = np.repeat(np.arange(n_sq), prop_counts)
    new_mat = np.bincount(sq * k + reg, minlength=n_sq * k).reshape(n_sq, k)
    old_mat = np.bincount(aux.square * k + aux.region,
                          minlength=n_sq * k).reshape(n_sq, k)
    log_alpha = (new_mat - old_mat) @ log_rate_ratios(state.lam, state.delta)
    accept = np.log(rng.uniform(size=n_sq)) < log_alpha
    keep_old = ~accept[aux.square]
    take_new = accept[sq]
    old_block = state.field.blocks["aux"]
    state.field.blocks["aux"] = SiteBlock.concat(old_block.subset(keep_old),
                                                 block.subset(take_new))
    state.aux = AuxiliaryProcess(
        np.concatenate([aux.xy[keep_old], xy[take_new]]),
        np.concatenate([aux.heights[keep_old], heights[take_new]]),
        lam_star,
        np.concatenate([aux.square[keep_old], sq[take_new]]),
        np.concatenate([aux.region[keep_old], reg[take_new]]),
    )
    state.counts_n = np.where(accept[:, None], new_mat, old_mat).sum(axis=0)
    state.acc["aux"] = float(accept.mean()) if n_sq else 1.0
    return state


def update_lambda(state, model, config, rng):
    """Adaptive random-walk update of the rate vector.

    A growing dominating height unveils the auxiliary slab retrospectively
    before evaluating the ratio; a shrinking one excludes points above the
    proposed height from the proposed counts and drops them on acceptance.
    """
    k, area = model.k, model.window.area
    chol = state.adapt.lambda_chol(k, config.lambda_step0)
    step = chol @ rng.standard_normal(k)
    # the uniform for the accept decision is drawn up front so the stream
    # stays aligned whether or not the proposal needs a slab extension
    log_u = math.log(rng.uniform())
    lam_new = state.lam * np.exp(step) if config.log_walk else state.lam + step
    ok = np.all(lam_new > 0)
    if ok and config.ordering_enforced(k):
        ok = bool(np.all(np.diff(lam_new) > 0))
    log_alpha = -np.inf
    ext_block = ext_heights = ext_reg = ext_sq = None
    star_new = None
    if ok:
        star_new = state.delta * lam_new.max() - lam_new.min()
        counts_new = state.counts_n
        if star_new > state.lambda_star:
            n_add = rng.poisson((star_new - state.lambda_star) * area)
            ext_xy = uniform_points(model.window, n_add, rng)
            ext_heights = rng.uniform(state.lambda_star, star_new, size=n_add)
            ext_block = conditional_block_draw(state.field.nngp,
                                               state.field.grid_values,
                                               ext_xy, rng, provenance="aux")
            ext_reg = _region0(state.c, ext_block.values)
            ext_sq = state.squares.index_of(ext_xy)
            counts_new = state.counts_n + np.bincount(ext_reg, minlength=k)
        elif star_new < state.lambda_star:
            live = state.aux.heights < star_new
            counts_new = np.bincount(state.aux.region[live], minlength=k)
        log_alpha = log_accept_lambda(lam_new, state.lam, state.delta,
                                      counts_new, state.counts_n,
                                      state.counts_y, area, model.prior,
                                      config.log_walk)
    accept = ok and log_u < log_alpha
    if accept:
        if star_new > state.lambda_star:
            aux = state.aux
            state.field.blocks["aux"] = SiteBlock.concat(
                state.field.blocks["aux"], ext_block)
            state.aux = AuxiliaryProcess(
                np.concatenate([aux.xy, ext_block.xy]),
                np.concatenate([aux.heights, ext_heights]),
                star_new,
                np.concatenate([aux.square, ext_sq]),
                np.concatenate([aux.region, ext_reg]),
            )
        elif star_new < state.lambda_star:
            live = state.aux.heights < star_new
            aux = state.aux
            state.field.blocks["aux"] = state.field.blocks["aux"].subset(live)
            state.aux = AuxiliaryProcess(aux.xy[live], aux.heights[live],
                                         star_new, aux.square[live],
                                         aux.region[live])
        else:
            state.aux = replace(state.aux, lambda_star=star_new)
        state.lam = lam_new
        state.counts_n = np.bincount(state.aux.region, minlength=k).astype(np.int64)
    if state.iteration < config.horizon:
        target = _LAMBDA_TARGETS.get(k, 0.234)
        alpha = min(1.0, math.exp(min(log_alpha, 0.0))) if ok else 0.0
        state.adapt.log_lambda_gain += _adapt_gain(state.iteration) * (alpha - target)
        x = np.log(state.lam) if config.log_walk else state.lam
        state.adapt.observe_lambda(x)
    state.acc["lambda"] = float(accept)
    return state


def update_levels(state, model, config, rng):
    """Joint uniform-walk update of the thresholds (no-op for K = 1)."""
    k = model.k
    if k == 1:
        state.acc["levels"] = 1.0
        return state
    h = state.adapt.c_halfwidth(config.c_halfwidth0)
    c_new = state.c + rng.uniform(-h, h, size=k - 1)
    log_u = math.log(rng.uniform())
    accept = False
    alpha = 0.0
    if np.all(np.diff(c_new) > 0):
        y_reg = _region0(c_new, state.field.blocks["data"].values)
        n_reg = _region0(c_new, state.field.blocks["aux"].values)
        counts_y = np.bincount(y_reg, minlength=k)
        counts_n = np.bincount(n_reg, minlength=k)
        log_alpha = log_accept_counts(state.lam, state.delta,
                                      counts_n - state.counts_n,
                                      counts_y - state.counts_y)
        alpha = min(1.0, math.exp(min(log_alpha, 0.0)))
        accept = log_u < log_alpha
        if accept:
            state.c = c_new
            state.y_regions = y_reg
            state.aux.region = n_reg
            state.counts_y = counts_y.astype(np.int64)
            state.counts_n = counts_n.astype(np.int64)
    if state.iteration < config.horizon:
        state.adapt.log_c_halfwidth += _adapt_gain(state.iteration) * (alpha - 0.3)
    state.acc["levels"] = float(accept)
    return state


def log_pm_likelihood(state, area):
    """Log of the pseudo-marginal likelihood estimate at the current state."""
    return float(-area * state.lam.min()
                 + state.counts_n @ log_rate_ratios(state.lam, state.delta)
                 + state.counts_y @ np.log(state.lam))


def log_target(state, model):
    """Log of the full augmented target (estimate times every prior factor)."""
    out = log_pm_likelihood(state, model.window.area)
    out += rg_log_density_unnorm(state.lam, model.prior)
    if state.k > 1 and not np.all(np.diff(state.c) > 0):
        return -np.inf
    out += field_log_density(state.field)
    return float(out)


def _audit(state, model):
    y_reg = _region0(state.c, state.field.blocks["data"].values)
    n_reg = _region0(state.c, state.field.blocks["aux"].values)
    assert np.array_equal(y_reg, state.y_regions), "cached event regions stale"
    assert np.array_equal(n_reg, state.aux.region), "cached aux regions stale"
    assert np.array_equal(np.bincount(y_reg, minlength=model.k), state.counts_y)
    assert np.array_equal(np.bincount(n_reg, minlength=model.k), state.counts_n)
    assert np.all(state.aux.heights < state.lambda_star + 1e-12)
    assert len(state.field.blocks["aux"]) == len(state.aux)
    assert np.isfinite(log_target(state, model))


def _tune_squares(state, model, config, acc_history):
    """Double or halve the square count toward ~0.8 mean per-square acceptance."""
    mean_acc = float(np.mean(acc_history))
    l_now = state.squares.n_cells
    if mean_acc < 0.7:
        l_new = min(4096, l_now * 2)
    elif mean_acc > 0.9:
        l_new = max(1, l_now // 2)
    else:
        return False
    if l_new == l_now:
        return False
    state.squares = SquarePartition.with_target(model.window, l_new)
    state.aux.square = state.squares.index_of(state.aux.xy)
    return True


def run(pattern, model, config, info=None):
    """Drive the Gibbs sampler; yields thinned post-burn-in sample records.

    Deterministic given the seed: every block of every iteration draws from
    its own keyed substream, so the realized chain does not depend on how the
    parallelizable parts (off-grid extension, per-square updates) are sharded.
    ``info``, when a dict, receives the final tuning values on completion.
    """
    state = initialize(pattern, model, config)
    tune_l = config.l_squares is None
    acc_batch = []
    retained = 0
    seed = config.seed
    for it in range(1, config.iterations + 1):
        state.iteration = it - 1
        update_beta(state, model, config, rngmod.substream(seed, it, rngmod.BLOCK_BETA))
        update_aux(state, model, config, rngmod.substream(seed, it, rngmod.BLOCK_AUX))
        update_lambda(state, model, config,
                      rngmod.substream(seed, it, rngmod.BLOCK_LAMBDA))
        update_levels(state, model, config,
                      rngmod.substream(seed, it, rngmod.BLOCK_LEVELS))
        if config.audit:
            _audit(state, model)
        if tune_l and it <= config.burn_in // 2:
            acc_batch.append(state.acc["aux"])
            if len(acc_batch) >= config.pilot_batch:
                if not _tune_squares(state, model, config, acc_batch):
                    tune_l = False
                acc_batch = []
        if it > config.burn_in and (it - config.burn_in) % config.thin == 0:
            snap = None
            if retained % config.snapshot_every == 0:
                snap = state.field.grid_values.copy()
            retained += 1
            yield SampleRecord(
                iteration=it,
                lam=state.lam.copy(),
                c=state.c.copy(),
                log_pm_lik=log_pm_likelihood(state, model.window.area),
                log_target=log_target(state, model),
                n_aux=len(state.aux),
                acc_beta=state.acc["beta"],
                acc_aux=state.acc["aux"],
                acc_lambda=state.acc["lambda"],
                acc_levels=state.acc["levels"],
                beta_grid=snap,
            )
    if info is not None:
        info.update(
            final_varsigma=state.adapt.varsigma,
            final_l_squares=state.squares.n_cells,
            final_c_halfwidth=state.adapt.c_halfwidth(config.c_halfwidth0),
            delta=state.delta,
        )


def collect(records, model=None, config=None):
    """Gather a record stream into a Samples container."""
    records = list(records)
    n = len(records)
    if n == 0:
        raise ValueError("no records to collect")
    samples = Samples(
        iterations=np.array([r.iteration for r in records]),
        lam=np.array([r.lam for r in records]),
        c=np.array([r.c for r in records]).reshape(n, -1),
        log_pm_lik=np.array([r.log_pm_lik for r in records]),
        log_target=np.array([r.log_target for r in records]),
        n_aux=np.array([r.n_aux for r in records]),
        acc=np.array([[r.acc_beta, r.acc_aux, r.acc_lambda, r.acc_levels]
                      for r in records]),
        snapshot_rows=np.array([i for i, r in enumerate(records)
                                if r.beta_grid is not None], dtype=int),
        snapshots=np.array([r.beta_grid for r in records
                            if r.beta_grid is not None]),
        model=model,
        config=config,
    )
    return samples


def run_collect(pattern, model, config):
    """Run to completion and return the collected Samples."""
    return collect(run(pattern, model, config), model=model, config=config)
