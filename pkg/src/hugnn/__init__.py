"""Hierarchical uncertainty-gated graph neural network.

A from-scratch numpy implementation of a three-scale (node, community,
global) message-passing classifier whose attention is gated by learned
per-scale uncertainty, trained with a calibration-aware composite loss,
plus a robustness harness and executable checks of its fixed-point and
heterophily claims.
"""
from .errors import (ConfigError, ContractError, DataError, DomainError,
                     NumericError, ShapeError)
from .estimator import HUGNNClassifier
from .graph import (DatasetBundle, Graph, HomophilyReport, effective_degree,
                    homophily_ratio, homophily_report, load_bundle,
                    make_split, save_bundle, synth_heterophily,
                    two_hop_homophily)
from .metrics import EceReport, accuracy, ece
from .model import (HyperParams, ModelParams, ModelState, build_params,
                    compute_u0, forward, init_uncertainty, parse_ablate)
from .perturb import PerturbSpec, feature_pgd, perturb
from .rng import Rng, child_seed
from .tensor import Tape, Tensor, backward, constant
from .theory import (ContractionReport, GradCheckReport, contraction_probe,
                     gradient_check, theorem3_experiment, toy_bundle)
from .training import (LossBreakdown, MetricsRecord, TrainConfig, TrainResult,
                       calibration_warmup, evaluate, train)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DataError", "DomainError",
    "NumericError", "ShapeError",
    "HUGNNClassifier",
    "DatasetBundle", "Graph", "HomophilyReport", "effective_degree",
    "homophily_ratio", "homophily_report", "load_bundle", "make_split",
    "save_bundle", "synth_heterophily", "two_hop_homophily",
    "EceReport", "accuracy", "ece",
    "HyperParams", "ModelParams", "ModelState", "build_params", "compute_u0",
    "forward", "init_uncertainty", "parse_ablate",
    "PerturbSpec", "feature_pgd", "perturb",
    "Rng", "child_seed",
    "Tape", "Tensor", "backward", "constant",
    "ContractionReport", "GradCheckReport", "contraction_probe",
    "gradient_check", "theorem3_experiment", "toy_bundle",
    "LossBreakdown", "MetricsRecord", "TrainConfig", "TrainResult",
    "calibration_warmup", "evaluate", "train",
    "__version__",
]
