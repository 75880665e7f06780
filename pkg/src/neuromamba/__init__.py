"""Affinity-based neuron segmentation with resolution-aware selective scans."""
from ._accel import get_backend, set_backend
from .errors import (ConfigError, MalformedHeaderError, MissingFileError, NeuroMambaError,
                     ParameterError, ShapeError)
from .metrics import adapted_rand_error, contingency, evaluate, variation_of_information
from .net import (ModelConfig, NeuroMamba, ResolutionPrior, cfi_forward, compute_lambdas,
                  model_forward, mpfi_forward, scfe_forward, strip_pool)
from .post import (affinity_from_labels, agglomerate_waterz, gaec, multicut_gaec,
                   watershed_fragments)
from .scan_orders import ScanOrder, Variant, build_order, flatten, locality_metrics, unflatten
from .ssm import (SsmParams, selective_scan_backward, selective_scan_chunked,
                  selective_scan_seq)

__version__ = "0.1.0"

__all__ = [
    "get_backend", "set_backend",
    "ConfigError", "MalformedHeaderError", "MissingFileError", "NeuroMambaError",
    "ParameterError", "ShapeError",
    "adapted_rand_error", "contingency", "evaluate", "variation_of_information",
    "ModelConfig", "NeuroMamba", "ResolutionPrior", "cfi_forward", "compute_lambdas",
    "model_forward", "mpfi_forward", "scfe_forward", "strip_pool",
    "affinity_from_labels", "agglomerate_waterz", "gaec", "multicut_gaec", "watershed_fragments",
    "ScanOrder", "Variant", "build_order", "flatten", "locality_metrics", "unflatten",
    "SsmParams", "selective_scan_backward", "selective_scan_chunked", "selective_scan_seq",
]
