"""Active selective prediction under distribution shift.

Checkpoint ensembles with self-training (ASPEST) and the Softmax Response
and Deep Ensemble baselines, with the acquisition functions, selective
prediction metrics and data utilities needed to evaluate them.
"""

from .ensemble import CheckpointEnsemble, deep_ensemble_probs, top_two
from .estimators import ASPEST, DeepEnsemble, MLPClassifier, SoftmaxResponse
from .exceptions import (
    AspestError,
    BudgetError,
    ConfigurationError,
    DegenerateFrameError,
    EmptyEnsembleError,
    ExperimentError,
    IngestionError,
    NumericError,
    ProtocolError,
    ShapeError,
    UndefinedMetricError,
)
from .harness import (
    ExperimentConfig,
    ResultRecord,
    aggregate_runs,
    export_results,
    parse_config,
    run_experiment,
)
from .loop import AspestConfig, Oracle, RunResult, run_aspest, run_de, run_sr, source_train
from .metrics import EvalFrame, auacc, metric_bundle
from .nn import MlpModel, TrainConfig, mlp_forward, mlp_init

__version__ = "0.1.0"

__all__ = [
    "ASPEST", "AspestConfig", "AspestError", "BudgetError", "CheckpointEnsemble",
    "ConfigurationError", "DeepEnsemble", "DegenerateFrameError", "EmptyEnsembleError",
    "EvalFrame", "ExperimentConfig", "ExperimentError", "IngestionError", "MLPClassifier",
    "MlpModel", "NumericError", "Oracle", "ProtocolError", "ResultRecord", "RunResult",
    "ShapeError", "SoftmaxResponse", "TrainConfig", "UndefinedMetricError",
    "aggregate_runs", "auacc", "deep_ensemble_probs", "export_results", "metric_bundle",
    "mlp_forward", "mlp_init", "parse_config", "run_aspest", "run_de", "run_experiment",
    "run_sr", "source_train", "top_two",
]
