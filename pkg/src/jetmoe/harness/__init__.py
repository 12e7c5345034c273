"""Training harness: run configs, data, loops, and the CLI."""
from .config import FinetuneConfig, OptimizerConfig, TrainRunConfig, load_run_config
from .train import dpo, dump_schedule, eval_perplexity, pretrain, sft

__all__ = ["FinetuneConfig", "OptimizerConfig", "TrainRunConfig", "load_run_config",
           "pretrain", "sft", "dpo", "eval_perplexity", "dump_schedule"]
