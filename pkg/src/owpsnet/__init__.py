"""Overlapping-particle segmentation with a dual-decoder attention network.

The package is self-contained on numpy: a small reverse-mode autodiff tape
(tensor), composable normalization variants (norm), overlap-aware losses
(losses), the encoder/dual-decoder/attention network (model), mask
postprocessing into labeled instances (postprocess), synthetic scene
generation (data), and training plus checkpointing plus the comparison grid
(train).  The `owps` console script in cli ties them together.
"""

from .tensor import (Tensor, ShapeError, DomainError, backward,
                     finite_diff_check)
from .norm import NormConfig, NormLayer, NORM_VARIANTS
from .losses import (LossConfig, LOSS_KINDS, ce_loss, dice_loss,
                     square_dice_loss, exp_log_dice_loss,
                     exp_square_dice_loss, compute_loss, total_loss,
                     analytic_grad)
from .model import ModelConfig, OWPSNet, build_model
from .postprocess import (SegmentationResult, binarize, subtract_edge,
                          morph_open, connected_components, segment_pipeline)
from .data import (SyntheticSceneConfig, Sample, DatasetError,
                   generate_scene, generate_dataset, derive_edge_labels,
                   augment, write_dataset, read_dataset)
from .train import (TrainConfig, TrainResult, TrainingDiverged,
                    CheckpointError, Adam, EvalReport, dice_per_case, train,
                    evaluate, save_checkpoint, load_checkpoint, run_grid,
                    MODEL_VARIANTS)

__version__ = "0.1.0"

__all__ = [
    "Tensor", "ShapeError", "DomainError", "backward", "finite_diff_check",
    "NormConfig", "NormLayer", "NORM_VARIANTS",
    "LossConfig", "LOSS_KINDS", "ce_loss", "dice_loss", "square_dice_loss",
    "exp_log_dice_loss", "exp_square_dice_loss", "compute_loss", "total_loss",
    "analytic_grad",
    "ModelConfig", "OWPSNet", "build_model",
    "SegmentationResult", "binarize", "subtract_edge", "morph_open",
    "connected_components", "segment_pipeline",
    "SyntheticSceneConfig", "Sample", "DatasetError", "generate_scene",
    "generate_dataset", "derive_edge_labels", "augment", "write_dataset",
    "read_dataset",
    "TrainConfig", "TrainResult", "TrainingDiverged", "CheckpointError",
    "Adam", "EvalReport", "dice_per_case", "train", "evaluate",
    "save_checkpoint", "load_checkpoint", "run_grid", "MODEL_VARIANTS",
    "__version__",
]
