"""Exact Bayesian inference for level-set Cox processes.

The intensity of the observed Poisson process is piecewise constant on
regions cut out by the level sets of a latent Gaussian field.  Fitting uses a
pseudo-marginal Gibbs sampler whose only approximation error is Monte Carlo:
the latent field lives on a nearest-neighbor Gaussian process that is unveiled
retrospectively wherever needed, and the intractable likelihood factor is
replaced by an unbiased, almost surely positive Poisson estimator.
"""

from .geometry import (PartitionLevels, PointPattern, SquarePartition, Window,
                       region_of, simulate_lscp, uniform_points)
from .nngp import (CovarianceSpec, LatentField, NNGPModel, ReferenceGrid,
                   build_reference, cov, extend_offgrid, field_log_density,
                   grid_log_density, pcn_propose, prune_scratch,
                   sample_grid_prior)
from .estimator import (AuxiliaryProcess, RateVector, count_regions,
                        delta_for_target, extend_aux_heights, log_m_hat, m_hat,
                        m_hat_variance, sample_aux)
from .priors import (NGAR1Spec, RGSpec, ngar1_log_density, ngar1_simulate,
                     rg_log_density_unnorm)
from .sampler import (ChainState, Model, SampleRecord, Samples, SamplerConfig,
                      initialize, run, run_collect, update_aux, update_beta,
                      update_lambda, update_levels)
from .spatiotemporal import (DynamicField, TemporalSpec, extend_dynamic_offgrid,
                             initialize_st, run_st, sample_dynamic_prior,
                             st_pcn_propose, st_update_blocks)
from .predict import (FutureDraw, PosteriorDraw, draws_with_fields, future_draw,
                      integrated_intensity_draw, nngp_from_model,
                      replicate_pattern)
from .diagnostics import dic, ess

__version__ = "0.1.0"
