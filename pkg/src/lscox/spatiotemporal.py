"""Dynamic extension: per-time partitions driven by a random-walk latent field.

Grid values evolve as beta_t = beta_{t-1} + zeta_t with NNGP innovations, so
temporal dependence lives entirely on the reference lattice; off-grid values
at each time are drawn from the static conditional given that time's grid
values, independently across times.  Each time carries its own auxiliary
process and dominating height.  Rates are either independent across times
(repulsive gamma prior per time) or coupled by the multiplicative AR(1) prior,
in which case the whole rate matrix is proposed jointly.

With a single observation time every update reduces exactly to its spatial
counterpart, and the driver delegates to the spatial sampler so the traces
coincide bit for bit.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from . import sampler as sp
from .estimator import AuxiliaryProcess, delta_for_target, log_rate_ratios
from .geometry import PointPattern, SquarePartition, uniform_points
from .nngp import (
    CovarianceSpec,
    NNGPModel,
    SiteBlock,
    build_reference,
    block_log_density,
    grid_log_density,
)
from .priors import NGAR1Spec, ngar1_log_density_matrix, rg_log_density_unnorm

__all__ = ["TemporalSpec", "DynamicField", "STState", "sample_dynamic_prior",
           "extend_dynamic_offgrid", "st_pcn_propose", "st_update_blocks",
           "run_st", "initialize_st"]


@dataclass(frozen=True)
class TemporalSpec:
    """Innovation scales and rate coupling for the dynamic model.

    The innovation variance may not exceed the (unit) static variance and the
    innovation range may not fall below the static range.
    """

    xi2: float = 1.0
    varrho2: float = 0.5
    coupling: str = "independent"      # "independent" or "ngar1"
    ngar1: NGAR1Spec = field(default_factory=NGAR1Spec)

    def __post_init__(self):
        if self.xi2 <= 0 or self.varrho2 <= 0:
            raise ValueError("innovation parameters must be positive")
        if self.coupling not in ("independent", "ngar1"):
            raise ValueError("coupling must be 'independent' or 'ngar1'")

    def validate_against(self, cov):
        if self.xi2 > cov.sigma2:
            raise ValueError("innovation variance xi2 must be <= sigma2")
        if self.varrho2 < cov.tau2:
            raise ValueError("innovation range varrho2 must be >= tau2")


@dataclass
class DynamicField:
    """Grid values per time plus per-time off-grid blocks."""

    static: NNGPModel
    innovation: NNGPModel
    grid_values: np.ndarray            # (T+1, r)
    blocks: list                       # per time: dict name -> SiteBlock

    @property
    def n_times(self):
        return self.grid_values.shape[0]

    def copy(self):
        blocks = [
            {name: SiteBlock(b.xy, b.values.copy(), b.nbr, b.w, b.sd, b.provenance)
             for name, b in per_t.items()}
            for per_t in self.blocks
        ]
        return DynamicField(self.static, self.innovation,
                            self.grid_values.copy(), blocks)


def sample_dynamic_prior(static, innovation, t_steps, rng):
    """Grid values of the dynamic prior: static draw plus random-walk innovations."""
    if t_steps < 0:
        raise ValueError("t_steps must be >= 0")
    r = static.grid.r
    out = np.empty((t_steps + 1, r))
    out[0] = static.prior_grid_draw(rng)
    for t in range(1, t_steps + 1):
        out[t] = out[t - 1] + innovation.prior_grid_draw(rng)
    return out


def extend_dynamic_offgrid(dfield, t, sites, rng, name=None, provenance="scratch"):
    """Unveil time-``t`` values at new sites from the static conditional.

    Conditioning is on time ``t``'s grid values only, so extensions at
    different times are independent given the grids.
    """
    sites = np.asarray(sites, dtype=float).reshape(-1, 2)
    if name is None:
        name = f"scratch{len(dfield.blocks[t])}"
    from .nngp import conditional_block_draw

    block = conditional_block_draw(dfield.static, dfield.grid_values[t], sites,
                                   rng, provenance)
    if name in dfield.blocks[t] and len(dfield.blocks[t][name]):
        block = SiteBlock.concat(dfield.blocks[t][name], block)
    if len(block):
        dfield.blocks[t][name] = block
    return name


def st_pcn_propose(dfield, varsigma, rng):
    """Joint pCN proposal across times with a dynamic-prior innovation draw."""
    if not 0 < varsigma <= 1:
        raise ValueError("varsigma must be in (0, 1]")
    keep = math.sqrt(1.0 - varsigma**2)
    t_top = dfield.n_times - 1
    eps_grid = sample_dynamic_prior(dfield.static, dfield.innovation, t_top, rng)
    out = DynamicField(dfield.static, dfield.innovation,
                       keep * dfield.grid_values + varsigma * eps_grid,
                       [dict() for _ in range(dfield.n_times)])
    for t, per_t in enumerate(dfield.blocks):
        for name, b in per_t.items():
            mean = b.conditional_mean(eps_grid[t])
            eps = mean + b.sd * rng.standard_normal(len(b))
            out.blocks[t][name] = SiteBlock(b.xy, keep * b.values + varsigma * eps,
                                            b.nbr, b.w, b.sd, b.provenance)
    return out


def dynamic_field_log_density(dfield):
    """Joint log density: static start, innovation steps, off-grid conditionals."""
    out = grid_log_density(dfield.static, dfield.grid_values[0])
    for t in range(1, dfield.n_times):
        out += grid_log_density(dfield.innovation,
                                dfield.grid_values[t] - dfield.grid_values[t - 1])
    for t, per_t in enumerate(dfield.blocks):
        for b in per_t.values():
            out += block_log_density(b, dfield.grid_values[t])
    return float(out)


@dataclass
class STState:
    dfield: DynamicField
    aux: list                          # per-time AuxiliaryProcess
    lam: np.ndarray                    # (T+1, K)
    c: np.ndarray
    delta: np.ndarray                  # (T+1,)
    squares: SquarePartition
    counts_y: np.ndarray               # (T+1, K)
    counts_n: np.ndarray               # (T+1, K)
    adapt: sp.Adaptation
    lam_adapts: list                   # per-time (independent) or [joint] (ngar1)
    iteration: int = 0
    acc: dict = field(default_factory=dict)

    @property
    def n_times(self):
        return self.lam.shape[0]

    @property
    def k(self):
        return self.lam.shape[1]

    def lambda_star(self, t):
        return self.delta[t] * self.lam[t].max() - self.lam[t].min()


def initialize_st(pattern, model, config, temporal):
    """Initial state for the dynamic sampler (T+1 = number of observed times)."""
    if len(pattern) == 0:
        raise ValueError("cannot fit an empty point pattern")
    temporal.validate_against(model.cov)
    n_times = pattern.n_times
    rng = rngmod.substream(config.seed, rngmod.BLOCK_INIT)
    grid = build_reference(model.window, model.r, model.m)
    static = NNGPModel(grid, model.cov)
    innovation = NNGPModel(grid, CovarianceSpec(
        tau2=temporal.varrho2, gamma=model.cov.gamma, sigma2=temporal.xi2))
    grid_values = sample_dynamic_prior(static, innovation, n_times - 1, rng)
    dfield = DynamicField(static, innovation, grid_values,
                          [dict() for _ in range(n_times)])
    area = model.window.area
    lam = np.empty((n_times, model.k))
    for t in range(n_times):
        n_t = pattern.at_time(t).shape[0]
        if n_t == 0:
            raise ValueError(f"no events observed at time {t}")
        lam[t] = sp._initial_rates(n_t, area, model.k)
    c = sp._default_levels(model.k)
    if config.delta is not None:
        delta = np.full(n_times, float(config.delta))
    else:
        delta = np.array([delta_for_target(lam[t], area, config.target_n)
                          for t in range(n_times)])
    l_squares = config.l_squares if config.l_squares is not None else 25
    squares = SquarePartition.with_target(model.window, l_squares)
    aux = []
    counts_y = np.zeros((n_times, model.k), dtype=np.int64)
    counts_n = np.zeros((n_times, model.k), dtype=np.int64)
    from .estimator import sample_aux
    from .nngp import conditional_block_draw

    for t in range(n_times):
        xy_t = pattern.at_time(t)
        dfield.blocks[t]["data"] = conditional_block_draw(
            static, grid_values[t], xy_t, rng, provenance="data")
        star = delta[t] * lam[t].max() - lam[t].min()
        aux_t = sample_aux(model.window, star, squares, rng)
        dfield.blocks[t]["aux"] = conditional_block_draw(
            static, grid_values[t], aux_t.xy, rng, provenance="aux")
        aux_t.region = sp._region0(c, dfield.blocks[t]["aux"].values)
        y_reg = sp._region0(c, dfield.blocks[t]["data"].values)
        counts_y[t] = np.bincount(y_reg, minlength=model.k)
        counts_n[t] = np.bincount(aux_t.region, minlength=model.k)
        aux.append(aux_t)
    adapt = sp.Adaptation(logit_varsigma=math.log(config.varsigma0
                                                  / (1.0 - config.varsigma0)))
    if temporal.coupling == "ngar1":
        lam_adapts = [sp.Adaptation(0.0)]
    else:
        lam_adapts = [sp.Adaptation(0.0) for _ in range(n_times)]
    return STState(dfield, aux, lam, c, delta, squares, counts_y, counts_n,
                   adapt, lam_adapts)


def _st_count_move(state, model, c=None, dfield=None):
    """Per-time event/aux region counts under alternative levels or field."""
    c = state.c if c is None else c
    dfield = state.dfield if dfield is None else dfield
    k = model.k
    counts_y = np.zeros((state.n_times, k), dtype=np.int64)
    counts_n = np.zeros((state.n_times, k), dtype=np.int64)
    y_regs, n_regs = [], []
    for t in range(state.n_times):
        y_reg = sp._region0(c, dfield.blocks[t]["data"].values)
        n_reg = sp._region0(c, dfield.blocks[t]["aux"].values)
        counts_y[t] = np.bincount(y_reg, minlength=k)
        counts_n[t] = np.bincount(n_reg, minlength=k)
        y_regs.append(y_reg)
        n_regs.append(n_reg)
    return counts_y, counts_n, y_regs, n_regs


def _st_log_accept_counts(state, counts_y_new, counts_n_new):
    out = 0.0
    for t in range(state.n_times):
        out += sp.log_accept_counts(state.lam[t], state.delta[t],
                                    counts_n_new[t] - state.counts_n[t],
                                    counts_y_new[t] - state.counts_y[t])
    return out


def st_update_beta(state, model, config, rng):
    """Joint pCN move of all times, accepted with the time-product ratio."""
    varsigma = state.adapt.varsigma
    prop = st_pcn_propose(state.dfield, varsigma, rng)
    counts_y, counts_n, y_regs, n_regs = _st_count_move(state, model, dfield=prop)
    log_alpha = _st_log_accept_counts(state, counts_y, counts_n)
    alpha = min(1.0, math.exp(min(log_alpha, 0.0)))
    accept = math.log(rng.uniform()) < log_alpha
    if accept:
        state.dfield = prop
        state.counts_y, state.counts_n = counts_y, counts_n
        for t in range(state.n_times):
            state.aux[t].region = n_regs[t]
    if state.iteration < config.horizon:
        state.adapt.logit_varsigma += sp._adapt_gain(state.iteration) * (alpha - 0.234)
    state.acc["beta"] = float(accept)
    return state


def st_update_aux(state, model, config, rng_for_time):
    """Per-time, per-square refresh of the auxiliary processes."""
    k = model.k
    n_sq = state.squares.n_cells
    fractions = []
    for t in range(state.n_times):
        rng = rng_for_time(t)
        aux = state.aux[t]
        star = state.lambda_star(t)
        prop_counts = rng.poisson(star * state.squares.cell_area, n_sq)
        xy = state.squares.uniform_in_cells(prop_counts, rng)
        heights = rng.uniform(0.0, star, size=xy.shape[0])
        from .nngp import conditional_block_draw

        block = conditional_block_draw(state.dfield.static,
                                       state.dfield.grid_values[t], xy, rng,
                                       provenance="aux")
        reg = sp._region0(state.c, block.values)
        sq = np.repeat(np.arange(n_sq), prop_counts)
        new_mat = np.bincount(sq * k + reg, minlength=n_sq * k).reshape(n_sq, k)
        old_mat = np.bincount(aux.square * k + aux.region,
                              minlength=n_sq * k).reshape(n_sq, k)
        log_alpha = (new_mat - old_mat) @ log_rate_ratios(state.lam[t],
                                                          state.delta[t])
        accept = np.log(rng.uniform(size=n_sq)) < log_alpha
        keep_old = ~accept[aux.square]
        take_new = accept[sq]
        state.dfield.blocks[t]["aux"] = SiteBlock.concat(
            state.dfield.blocks[t]["aux"].subset(keep_old),
            block.subset(take_new))
        state.aux[t] = AuxiliaryProcess(
            np.concatenate([aux.xy[keep_old], xy[take_new]]),
            np.concatenate([aux.heights[keep_old], heights[take_new]]),
            star,
            np.concatenate([aux.square[keep_old], sq[take_new]]),
            np.concatenate([aux.region[keep_old], reg[take_new]]),
        )
        state.counts_n[t] = np.where(accept[:, None], new_mat, old_mat).sum(axis=0)
        fractions.append(float(accept.mean()) if n_sq else 1.0)
    state.acc["aux"] = float(np.mean(fractions))
    return state


def _propose_time_extension(state, model, t, lam_new_t, rng):
    """Slab unveiling for time t when the proposed dominating height grows."""
    star_old = state.lambda_star(t)
    star_new = state.delta[t] * lam_new_t.max() - lam_new_t.min()
    k = model.k
    if star_new > star_old:
        n_add = rng.poisson((star_new - star_old) * model.window.area)
        xy = uniform_points(model.window, n_add, rng)
        heights = rng.uniform(star_old, star_new, size=n_add)
        from .nngp import conditional_block_draw

        block = conditional_block_draw(state.dfield.static,
                                       state.dfield.grid_values[t], xy, rng,
                                       provenance="aux")
        reg = sp._region0(state.c, block.values)
        sq = state.squares.index_of(xy)
        counts_new = state.counts_n[t] + np.bincount(reg, minlength=k)
        ext = (block, heights, reg, sq)
    elif star_new < star_old:
        live = state.aux[t].heights < star_new
        counts_new = np.bincount(state.aux[t].region[live], minlength=k)
        ext = None
    else:
        counts_new = state.counts_n[t].copy()
        ext = None
    return star_new, counts_new, ext


def _apply_time_rates(state, t, lam_new_t, star_new, ext):
    state.lam[t] = lam_new_t
    aux = state.aux[t]
    if ext is not None:
        block, heights, reg, sq = ext
        state.dfield.blocks[t]["aux"] = SiteBlock.concat(
            state.dfield.blocks[t]["aux"], block)
        state.aux[t] = AuxiliaryProcess(
            np.concatenate([aux.xy, block.xy]),
            np.concatenate([aux.heights, heights]),
            star_new,
            np.concatenate([aux.square, sq]),
            np.concatenate([aux.region, reg]),
        )
    elif star_new < aux.lambda_star:
        live = aux.heights < star_new
        state.dfield.blocks[t]["aux"] = state.dfield.blocks[t]["aux"].subset(live)
        state.aux[t] = AuxiliaryProcess(aux.xy[live], aux.heights[live],
                                        star_new, aux.square[live],
                                        aux.region[live])
    else:
        aux.lambda_star = star_new
    state.counts_n[t] = np.bincount(state.aux[t].region,
                                    minlength=state.k).astype(np.int64)


def st_update_lambda_independent(state, model, config, rng_for_time):
    """Per-time rate updates with independent repulsive gamma priors."""
    k, area = model.k, model.window.area
    accepts = []
    for t in range(state.n_times):
        rng = rng_for_time(t)
        adapt = state.lam_adapts[t]
        chol = adapt.lambda_chol(k, config.lambda_step0)
        step = chol @ rng.standard_normal(k)
        log_u = math.log(rng.uniform())
        lam_t = state.lam[t]
        lam_new = lam_t * np.exp(step) if config.log_walk else lam_t + step
        ok = np.all(lam_new > 0)
        if ok and config.ordering_enforced(k):
            ok = bool(np.all(np.diff(lam_new) > 0))
        log_alpha = -np.inf
        if ok:
            star_new, counts_new, ext = _propose_time_extension(
                state, model, t, lam_new, rng)
            log_alpha = sp.log_accept_lambda(lam_new, lam_t, state.delta[t],
                                             counts_new, state.counts_n[t],
                                             state.counts_y[t], area,
                                             model.prior, config.log_walk)
        accept = ok and log_u < log_alpha
        if accept:
            _apply_time_rates(state, t, lam_new, star_new, ext)
        if state.iteration < config.horizon:
            target = sp._LAMBDA_TARGETS.get(k, 0.234)
            alpha = min(1.0, math.exp(min(log_alpha, 0.0))) if ok else 0.0
            adapt.log_lambda_gain += sp._adapt_gain(state.iteration) * (alpha - target)
            adapt.observe_lambda(np.log(state.lam[t]) if config.log_walk
                                 else state.lam[t])
        accepts.append(float(accept))
    state.acc["lambda"] = float(np.mean(accepts))
    return state


def st_update_lambda_ngar1(state, model, config, temporal, rng):
    """Joint update of the whole rate matrix under the AR(1) coupling prior."""
    k, area = model.k, model.window.area
    n_times = state.n_times
    d = n_times * k
    adapt = state.lam_adapts[0]
    chol = adapt.lambda_chol(d, config.lambda_step0)
    step = (chol @ rng.standard_normal(d)).reshape(n_times, k)
    log_u = math.log(rng.uniform())
    lam_new = state.lam * np.exp(step) if config.log_walk else state.lam + step
    ok = np.all(lam_new > 0)
    if ok and config.ordering_enforced(k):
        ok = bool(np.all(np.diff(lam_new, axis=1) > 0))
    log_alpha = -np.inf
    stars, counts, exts = [], [], []
    if ok:
        lp_new = (rg_log_density_unnorm(lam_new[0], temporal.ngar1.initial)
                  + ngar1_log_density_matrix(lam_new, temporal.ngar1))
        if lp_new > -np.inf:
            log_alpha = lp_new - (
                rg_log_density_unnorm(state.lam[0], temporal.ngar1.initial)
                + ngar1_log_density_matrix(state.lam, temporal.ngar1))
            for t in range(n_times):
                star_new, counts_new, ext = _propose_time_extension(
                    state, model, t, lam_new[t], rng)
                stars.append(star_new)
                counts.append(counts_new)
                exts.append(ext)
                log_alpha += (-area * (lam_new[t].min() - state.lam[t].min())
                              + counts_new @ log_rate_ratios(lam_new[t],
                                                             state.delta[t])
                              - state.counts_n[t] @ log_rate_ratios(
                                  state.lam[t], state.delta[t])
                              + state.counts_y[t] @ (np.log(lam_new[t])
                                                     - np.log(state.lam[t])))
            if config.log_walk:
                log_alpha += float(np.sum(np.log(lam_new) - np.log(state.lam)))
        else:
            ok = False
    accept = ok and log_u < log_alpha
    if accept:
        for t in range(n_times):
            _apply_time_rates(state, t, lam_new[t], stars[t], exts[t])
    if state.iteration < config.horizon:
        alpha = min(1.0, math.exp(min(log_alpha, 0.0))) if ok else 0.0
        adapt.log_lambda_gain += sp._adapt_gain(state.iteration) * (alpha - 0.234)
        adapt.observe_lambda(np.log(state.lam).ravel() if config.log_walk
                             else state.lam.ravel())
    state.acc["lambda"] = float(accept)
    return state


def st_update_levels(state, model, config, rng):
    """Shared thresholds updated jointly with the time-product acceptance."""
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
        counts_y, counts_n, y_regs, n_regs = _st_count_move(state, model, c=c_new)
        log_alpha = _st_log_accept_counts(state, counts_y, counts_n)
        alpha = min(1.0, math.exp(min(log_alpha, 0.0)))
        accept = log_u < log_alpha
        if accept:
            state.c = c_new
            state.counts_y, state.counts_n = counts_y, counts_n
            for t in range(state.n_times):
                state.aux[t].region = n_regs[t]
    if state.iteration < config.horizon:
        state.adapt.log_c_halfwidth += sp._adapt_gain(state.iteration) * (alpha - 0.3)
    state.acc["levels"] = float(accept)
    return state


def st_update_blocks(state, model, config, temporal, seed, it):
    """One full iteration over all blocks in the spatial order."""
    st_update_beta(state, model, config,
                   rngmod.substream(seed, it, rngmod.BLOCK_BETA))
    st_update_aux(state, model, config,
                  lambda t: rngmod.substream(seed, it, rngmod.BLOCK_AUX, t))
    if temporal.coupling == "ngar1":
        st_update_lambda_ngar1(state, model, config, temporal,
                               rngmod.substream(seed, it, rngmod.BLOCK_LAMBDA))
    else:
        st_update_lambda_independent(
            state, model, config,
            lambda t: rngmod.substream(seed, it, rngmod.BLOCK_LAMBDA, t))
    st_update_levels(state, model, config,
                     rngmod.substream(seed, it, rngmod.BLOCK_LEVELS))
    return state


def st_log_pm_likelihood(state, area):
    out = 0.0
    for t in range(state.n_times):
        out += (-area * state.lam[t].min()
                + state.counts_n[t] @ log_rate_ratios(state.lam[t],
                                                      state.delta[t])
                + state.counts_y[t] @ np.log(state.lam[t]))
    return float(out)


def st_log_target(state, model, temporal):
    out = st_log_pm_likelihood(state, model.window.area)
    if temporal.coupling == "ngar1":
        out += (rg_log_density_unnorm(state.lam[0], temporal.ngar1.initial)
                + ngar1_log_density_matrix(state.lam, temporal.ngar1))
    else:
        for t in range(state.n_times):
            out += rg_log_density_unnorm(state.lam[t], model.prior)
    if state.k > 1 and not np.all(np.diff(state.c) > 0):
        return -np.inf
    out += dynamic_field_log_density(state.dfield)
    return float(out)


def run_st(pattern, model, config, temporal, info=None):
    """Drive the dynamic sampler; yields thinned post-burn-in records.

    A pattern observed at a single time reduces the model exactly to the
    spatial one, so the run delegates to the spatial driver and reproduces its
    traces bit for bit under the same seed.
    """
    if pattern.n_times == 1:
        spatial = PointPattern(pattern.xy, pattern.window)
        yield from sp.run(spatial, model, config, info=info)
        return
    state = initialize_st(pattern, model, config, temporal)
    tune_l = config.l_squares is None
    acc_batch = []
    retained = 0
    seed = config.seed
    for it in range(1, config.iterations + 1):
        state.iteration = it - 1
        st_update_blocks(state, model, config, temporal, seed, it)
        if tune_l and it <= config.burn_in // 2:
            acc_batch.append(state.acc["aux"])
            if len(acc_batch) >= config.pilot_batch:
                if not _tune_squares_st(state, model, acc_batch):
                    tune_l = False
                acc_batch = []
        if it > config.burn_in and (it - config.burn_in) % config.thin == 0:
            snap = None
            if retained % config.snapshot_every == 0:
                snap = state.dfield.grid_values.copy()
            retained += 1
            yield sp.SampleRecord(
                iteration=it,
                lam=state.lam.copy(),
                c=state.c.copy(),
                log_pm_lik=st_log_pm_likelihood(state, model.window.area),
                log_target=st_log_target(state, model, temporal),
                n_aux=sum(len(a) for a in state.aux),
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
            delta=state.delta.tolist(),
        )


def _tune_squares_st(state, model, acc_history):
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
    for aux in state.aux:
        aux.square = state.squares.index_of(aux.xy)
    return True
