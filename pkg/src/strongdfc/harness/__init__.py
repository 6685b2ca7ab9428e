"""Training orchestration, baselines, metrics, configuration and the CLI."""

from .config import Method, RunConfig, load_config
from .train import pretrain_feedback, train
from .verify import verify

__all__ = ["Method", "RunConfig", "load_config", "pretrain_feedback", "train", "verify"]
