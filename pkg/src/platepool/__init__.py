"""Hierarchical Bayesian detection of plate deflections from strain data.

Desk-scale pipeline: synthetic two-level dataset generation, per-plate
GPR surrogates, NUTS posterior inference under partial-pooling and
no-pooling models, rank-normalized convergence diagnostics, and
KDE-based posterior predictive damage detection.
"""

__version__ = "0.1.0"

from .config import (DetectionConfig, PipelineConfig, SurrogateTrainConfig,
                     config_from_dict, config_hash, config_to_dict,
                     load_config, save_config)
from .detection import (DetectionReport, KdeResult, PlateDetection,
                        PredictiveSamples, ThresholdSet, compare_pooling,
                        draw_predictive, kde, threshold_strains)
from .diagnostics import (EssResult, RhatResult, Summary, ess,
                          rank_normalized_rhat, summarize)
from .distributions import (GammaParams, NormalParams, derive_seed,
                            gamma_logpdf, gamma_logpdf_grad, gamma_moments,
                            gamma_params_from_moments, normal_logpdf,
                            normal_logpdf_grad, rng_from_seed, sample_gamma,
                            sample_normal)
from .gpr import (GprModel, KernelConfig, coefficient_of_variation, gpr_fit,
                  gpr_mean_grad, gpr_predict, load_gpr,
                  log_marginal_likelihood, save_gpr)
from .model import (HIERARCHICAL, INDEPENDENT, Hyperpriors, LogDensityResult,
                    ModelSpec, ParamLayout, build_hierarchical_spec,
                    build_independent_specs, initial_unconstrained,
                    log_posterior, make_spec, transform, untransform)
from .nuts import (Chains, SamplerConfig, leapfrog, load_chains, nuts_draw,
                   run_chains, run_chains_generic, save_chains)
from .synthetic import (Dataset, DatasetConfig, GroundTruth, OracleConfig,
                        PlateGeometry, deflection_field, generate_dataset,
                        load_dataset, save_dataset, strain_oracle)
