"""Unsupervised cross-view metric learning with asymmetric per-view transformations."""

from .camel import (
    AsymmetricMetric,
    CamelConfig,
    CamelResult,
    camel_fit,
    eigen_step,
    symmetric_fit,
)
from .clustering import ClusterState, kmeans
from .dataset import (
    Dataset,
    SyntheticConfig,
    generate_synthetic,
    load_dataset,
    save_dataset,
    split_train_test,
)
from .errors import (
    ConfigurationError,
    DecamelError,
    InvariantError,
    NumericalError,
    ParseError,
    ProtocolError,
    TrainingError,
)
from .evaluation import EvalReport, cmc, mean_ap, run_protocol, s_value
from .joint import DecamelConfig, TrainedModel, decamel_train, freeze_variants
from .pipeline import TrainOptions, evaluate, train
from .views import ViewPrototypeSet, cluster_views

__version__ = "0.1.0"

__all__ = [
    "AsymmetricMetric",
    "CamelConfig",
    "CamelResult",
    "ClusterState",
    "ConfigurationError",
    "Dataset",
    "DecamelConfig",
    "DecamelError",
    "EvalReport",
    "InvariantError",
    "NumericalError",
    "ParseError",
    "ProtocolError",
    "SyntheticConfig",
    "TrainOptions",
    "TrainedModel",
    "TrainingError",
    "ViewPrototypeSet",
    "camel_fit",
    "cluster_views",
    "cmc",
    "decamel_train",
    "eigen_step",
    "evaluate",
    "freeze_variants",
    "generate_synthetic",
    "kmeans",
    "load_dataset",
    "mean_ap",
    "run_protocol",
    "s_value",
    "save_dataset",
    "split_train_test",
    "symmetric_fit",
    "train",
]
