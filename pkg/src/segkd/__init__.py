"""segkd: two-phase knowledge distillation for promptable segmentation.

Phase 1 distills a large image encoder into a lightweight student by matching
embeddings with a combined MSE + perceptual objective; phase 2 fine-tunes a
prompt-guided mask decoder against the frozen student with dice loss. The
package covers data ingestion, synthetic desk-scale datasets, teacher
embedding caching, training orchestration with plateau scheduling / early
stopping / exact-resume checkpoints, dice evaluation, and reporting.
"""

from .errors import (
    ConfigError,
    CorruptionError,
    DomainError,
    EvalError,
    FormatError,
    LockError,
    ManifestError,
    NumericsError,
    PromptError,
    SegkdError,
    ShapeError,
    WeightsError,
)
from .losses import LossValue, combined_loss, dice_loss, dice_metric, mse_loss, perceptual_loss

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "CorruptionError",
    "DomainError",
    "EvalError",
    "FormatError",
    "LockError",
    "LossValue",
    "ManifestError",
    "NumericsError",
    "PromptError",
    "SegkdError",
    "ShapeError",
    "WeightsError",
    "combined_loss",
    "dice_loss",
    "dice_metric",
    "mse_loss",
    "perceptual_loss",
    "__version__",
]
