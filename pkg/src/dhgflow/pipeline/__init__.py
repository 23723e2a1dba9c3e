"""Three-stage training, evaluation, the experiment suite and the CLI."""

from .checkpoint import Checkpoint
from .cli import main
from .config import RunConfig, load_config
from .evaluate import evaluate_model, generate_groups
from .stages import run_stage1, run_stage2, run_stage3
from .suite import ExperimentResult, comparison_table, metrics_json, run_experiment_suite
