"""Token-to-spectrogram synthesis with learned duration-driven upsampling and banded Soft-DTW."""
from .aligner import TokenSequence, align, inferred_frame_count, length_regulator
from .autodiff import ParameterStore, Tensor, backward, check_gradients, precision
from .data import SyntheticCorpusSpec, Utterance, generate_corpus, load_corpus, save_corpus, split_corpus
from .estimator import DurationAlignedSynthesizer
from .model import ModelConfig, Trainer, control_durations, forward, infer, init_params, total_loss
from .softdtw import SoftDtwConfig, soft_dtw, soft_dtw_grad

__version__ = "0.1.0"

__all__ = [
    "DurationAlignedSynthesizer", "ModelConfig", "ParameterStore", "SoftDtwConfig", "SyntheticCorpusSpec",
    "Tensor", "TokenSequence", "Trainer", "Utterance", "align", "backward", "check_gradients",
    "control_durations", "forward", "generate_corpus", "infer", "inferred_frame_count", "init_params",
    "length_regulator", "load_corpus", "precision", "save_corpus", "soft_dtw", "soft_dtw_grad",
    "split_corpus", "total_loss",
]
