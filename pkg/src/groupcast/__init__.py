"""Group-structured, permutation-equivariant probabilistic forecasting."""

__version__ = "0.1.0"

from .data import (ChargedConfig, HierSynthConfig, SceneRecord,
                   build_charged_dataset, generate_hier_synth, load_dataset,
                   save_dataset, simulate_charged, standardize)
from .distribution import (GaussianForecast, gaussian_nll, linear_kernel,
                           rbf_kernel, sample)
from .grouping import GroupedSeriesTensor, group_and_pad, ungroup
from .harness import (check_equivariance, is_hierarchical_permutation,
                      random_hierarchical_permutation)
from .hierarchy import HierarchyTree, aggregate_features, aggregate_targets
from .metrics import MetricReport, ade, fde, nll_metric, per_level_metrics
from .model import Forecaster, ModelConfig, load_checkpoint, save_checkpoint
from .tensor import Parameter, Tensor, backward
from .training import TrainSettings, train_model

__all__ = [
    "ChargedConfig", "HierSynthConfig", "SceneRecord", "build_charged_dataset",
    "generate_hier_synth", "load_dataset", "save_dataset", "simulate_charged",
    "standardize", "GaussianForecast", "gaussian_nll", "linear_kernel",
    "rbf_kernel", "sample", "GroupedSeriesTensor", "group_and_pad", "ungroup",
    "check_equivariance", "is_hierarchical_permutation",
    "random_hierarchical_permutation", "HierarchyTree", "aggregate_features",
    "aggregate_targets", "MetricReport", "ade", "fde", "nll_metric",
    "per_level_metrics", "Forecaster", "ModelConfig", "load_checkpoint",
    "save_checkpoint", "Parameter", "Tensor", "backward", "TrainSettings",
    "train_model",
]
