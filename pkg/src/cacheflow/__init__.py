"""Conditional density estimation with a cached unconditional flow."""

from .basedensity import GmmHead, GmmParams, gmm_log_prob, gmm_sample, regress_gmm
from .cache import TripletCache, build_cache, load_cache, nearest, save_cache
from .cnf import Flow, IntegratorConfig, LinearField, MlpField, divergence, flow_forward, flow_inverse
from .codec import IdentityCodec, LinearCodec, fit_linear
from .estimator import CacheFlow
from .inference import estimate_density, sample_most_likely, sample_nn, sample_random
from .kde import ScottKDE, fit_kde, kde_log_prob

__version__ = "0.1.0"

__all__ = [
    "CacheFlow",
    "Flow",
    "GmmHead",
    "GmmParams",
    "IdentityCodec",
    "IntegratorConfig",
    "LinearCodec",
    "LinearField",
    "MlpField",
    "ScottKDE",
    "TripletCache",
    "build_cache",
    "divergence",
    "estimate_density",
    "fit_kde",
    "fit_linear",
    "flow_forward",
    "flow_inverse",
    "gmm_log_prob",
    "gmm_sample",
    "kde_log_prob",
    "load_cache",
    "nearest",
    "regress_gmm",
    "sample_most_likely",
    "sample_nn",
    "sample_random",
    "save_cache",
]
