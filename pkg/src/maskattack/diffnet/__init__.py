"""Reverse-mode differentiation, MFCC frontend and the x-vector classifier."""

from .frontend import FrontendConfig, MFCCTransformer, mfcc
from .model import Checkpoint, CheckpointError, ModelConfig, forward, grad_wrt_input, logits, predict_index
from .tape import NonFiniteError, Tape, Tensor, cross_entropy
from .training import TrainConfig, TrainingDivergedError, XVectorClassifier, train

__all__ = [
    "Checkpoint", "CheckpointError", "FrontendConfig", "MFCCTransformer", "ModelConfig",
    "NonFiniteError", "Tape", "Tensor", "TrainConfig", "TrainingDivergedError", "XVectorClassifier",
    "cross_entropy", "forward", "grad_wrt_input", "logits", "mfcc", "predict_index", "train",
]
