"""Discrete-space MCMC through a learned rounding + flow transport map.

A discrete target pi over {0..K-1}^d is pulled back to a continuous latent
space through floor(T_phi(z)) with a learned dequantizer q(u | theta); random
walk Metropolis runs there and samples are pushed back with the floor map.
Gibbs and single-site Metropolis baselines and ESS diagnostics are included.
"""

from .diagnostics import EssReport, ess_1d, ess_multichain, grouped_ess, mean_logprob, tv_distance
from .errors import (ConfigError, DequantError, DimensionError, DomainError, FormatError,
                     NumericError, TrainingError)
from .flows import (DequantFlow, FlowStack, build_dequant_flow, build_latent_flow,
                    load_checkpoint, save_checkpoint)
from .samplers import (init_discrete_chains, init_latent_chains, mh_latent_step, push_samples,
                       run_chains, run_discrete)
from .targets import (BayesVarSelect, DiscreteTarget, DiscretizedGMM, IsingDenoise,
                      QuantizedLogReg, exact_distribution, make_gmm2d, make_synthetic_bvs)
from .train import LatentDensity, TrainConfig, fit, sample_direct

__version__ = "0.1.0"

__all__ = [
    "BayesVarSelect", "ConfigError", "DequantError", "DequantFlow", "DimensionError",
    "DiscreteTarget", "DiscretizedGMM", "DomainError", "EssReport", "FlowStack",
    "FormatError", "IsingDenoise", "LatentDensity", "NumericError", "QuantizedLogReg",
    "TrainConfig", "TrainingError", "build_dequant_flow", "build_latent_flow", "ess_1d",
    "ess_multichain", "exact_distribution", "fit", "grouped_ess", "init_discrete_chains",
    "init_latent_chains", "load_checkpoint", "make_gmm2d", "make_synthetic_bvs",
    "mean_logprob", "mh_latent_step", "push_samples", "run_chains", "run_discrete",
    "sample_direct", "save_checkpoint", "tv_distance", "__version__",
]
