"""Noise-tolerant segmentation training lab.

A self-contained CPU laboratory for studying segmentation under noisy
labels: a minimal reverse-mode autodiff engine, a small encoder-decoder
network, synthetic data with morphological label corruption, EMA-teacher
uncertainty estimation, rectified losses at pixel and image level, and a
two-phase training protocol with ablations.
"""

from .autodiff import SGD, Tensor, backward, load_tensors, save_tensors
from .data import (
    NoiseSpec,
    SegmentationSample,
    corrupt_labels,
    generate_dataset,
    generate_shapes,
    load_dataset,
    normalize,
    save_dataset,
)
from .errors import (
    ConfigError,
    ContractError,
    DataFormatError,
    DataVersionError,
    DegenerateInputError,
    DivergenceError,
    NumericError,
    PintError,
    ShapeError,
    TruncatedFileError,
    UndefinedMetricError,
)
from .metrics import asd, boundary_mask, dice
from .model import MiniSegNet
from .noise import (
    PerturbationSpec,
    TeacherState,
    UncertaintyBundle,
    confidence_weight,
    cross_entropy_loss,
    ema_update,
    estimate_uncertainty,
    image_rectified_loss,
    image_uncertainty,
    make_teacher,
    mc_pseudo_labels,
    pixel_rectified_loss,
    pixel_uncertainty,
)
from .trainer import (
    EvalResult,
    MetricsRecord,
    TrainConfig,
    TrainResult,
    evaluate,
    load_checkpoint,
    train,
    write_checkpoint,
)

__version__ = "0.1.0"
