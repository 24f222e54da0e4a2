"""Two-layer temporal-attention LSTM video captioner with late fusion."""

from .autodiff import Tape, Tensor, backward
from .data import Checkpoint, Vocabulary, build_vocab, gen_toy_corpus, load_checkpoint, save_checkpoint
from .decoding import DecodeConfig, beam_decode, caption_events, greedy_decode
from .metrics import EvalPair, MetricReport, evaluate
from .model import Captioner, CaptionerParams, FeatureSequence, ModelConfig, init_params, zero_params
from .training import TrainConfig, TrainingExample, scst_finetune, train, xe_loss

__all__ = [
    "Tape", "Tensor", "backward",
    "Checkpoint", "Vocabulary", "build_vocab", "gen_toy_corpus", "load_checkpoint", "save_checkpoint",
    "DecodeConfig", "beam_decode", "caption_events", "greedy_decode",
    "EvalPair", "MetricReport", "evaluate",
    "Captioner", "CaptionerParams", "FeatureSequence", "ModelConfig", "init_params", "zero_params",
    "TrainConfig", "TrainingExample", "scst_finetune", "train", "xe_loss",
]

__version__ = "0.1.0"
