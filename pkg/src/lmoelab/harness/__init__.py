from .config import ConfigError, ExperimentConfig, desk_config, load_config
from .evaluate import EvalResult, evaluate
from .experiment import Report, ablation_run, emit_reports, run_experiment
from .model import Model, Predictions, forward_scene
from .train import batch_losses, train, training_step

__all__ = [
    "ConfigError", "ExperimentConfig", "desk_config", "load_config", "EvalResult", "evaluate",
    "Report", "ablation_run", "emit_reports", "run_experiment", "Model", "Predictions",
    "forward_scene", "batch_losses", "train", "training_step",
]
