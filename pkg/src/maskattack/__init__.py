"""Masked targeted adversarial attacks on x-vector speaker classifiers."""

from ._validation import ValidationError
from .attack import (
    AttackAborted, MaskingAttack, Stage1Config, Stage2Config, attack_utterance, combined_loss, stage1, stage2,
    threshold_loss,
)
from .audio_io import (
    AttackResult, CorpusManifest, ManifestEntry, ManifestError, StageMetrics, StageTrace, Waveform,
    WavFormatError, load_manifest, load_result, read_wav, write_wav,
)
from .diffnet import Checkpoint, CheckpointError, XVectorClassifier
from .dsp import StftConfig, normalized_psd, perturbation_psd, stft
from .metrics import RunSummary, exceedance, snr_db, success_rate, summarize
from .psycho import MaskingThreshold, MaskingThresholdTransformer, ath, bark_scale, masking_threshold

__version__ = "0.1.0"

__all__ = [
    "AttackAborted", "AttackResult", "Checkpoint", "CheckpointError", "CorpusManifest", "ManifestEntry",
    "ManifestError", "MaskingAttack", "MaskingThreshold", "MaskingThresholdTransformer", "RunSummary",
    "Stage1Config", "Stage2Config", "StageMetrics", "StageTrace", "StftConfig", "ValidationError",
    "WavFormatError", "Waveform", "XVectorClassifier", "ath", "attack_utterance", "bark_scale",
    "combined_loss", "exceedance", "load_manifest", "load_result", "masking_threshold", "normalized_psd",
    "perturbation_psd", "read_wav", "snr_db", "stage1", "stage2", "stft", "success_rate", "summarize",
    "threshold_loss", "write_wav",
]
