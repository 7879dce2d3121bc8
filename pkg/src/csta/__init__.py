"""CNN-based spatiotemporal attention for video summarisation, with the surrounding pipeline."""

__version__ = "0.1.0"

from .dataio import Dataset, VideoRecord, gen_synthetic, load_dataset, save_dataset
from .model import CstaModel, ModelConfig, forward, load_checkpoint, predict, save_checkpoint
from .shots import ShotSegmentation, kts_segment, knapsack_select, shot_scores
from .metrics import evaluate_video, kendall_tau, spearman_rho
from .trainer import TrainConfig, train_split
from .crossval import cross_validate

__all__ = [
    "CstaModel", "Dataset", "ModelConfig", "ShotSegmentation", "TrainConfig", "VideoRecord",
    "cross_validate", "evaluate_video", "forward", "gen_synthetic", "kendall_tau", "knapsack_select",
    "kts_segment", "load_checkpoint", "load_dataset", "predict", "save_checkpoint", "save_dataset",
    "shot_scores", "spearman_rho", "train_split",
]
