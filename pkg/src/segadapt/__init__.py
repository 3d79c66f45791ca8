"""Self-supervised Sim2Real adaptation for semantic segmentation, desk scale.

A supervised segmentation loss on an annotated synthetic domain is combined
with segment-pooled invariance/variance regularization on an unannotated
real domain, using precomputed overlapping segment masks. Everything runs on
a from-scratch float64 reverse-mode autodiff engine for full determinism.
"""

from .autodiff import Tape, Tensor, backward
from .errors import ContractViolation, DataError, EmptyMaskError, ShapeError
from .losses import cross_entropy, real_loss, segment_pool
from .masks import MaskSet, OracleParams, SegmentMask, oversegment_oracle
from .network import ModelConfig, ModelParams, forward, init
from .scenegen import REAL_DOMAIN, SYN_DOMAIN, gen_dataset, render_frame
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "ContractViolation",
    "DataError",
    "EmptyMaskError",
    "ShapeError",
    "cross_entropy",
    "real_loss",
    "segment_pool",
    "MaskSet",
    "OracleParams",
    "SegmentMask",
    "oversegment_oracle",
    "ModelConfig",
    "ModelParams",
    "forward",
    "init",
    "REAL_DOMAIN",
    "SYN_DOMAIN",
    "gen_dataset",
    "render_frame",
    "TrainConfig",
    "load_checkpoint",
    "save_checkpoint",
    "train",
    "__version__",
]
