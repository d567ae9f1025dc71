"""Context-aware encoder-decoder transformers on a from-scratch numpy autodiff core."""

from .data import ExampleTriple, Vocabulary, synth_lookup_task
from .decoding import DecodeConfig, beam_search, greedy_decode
from .model import DecoderStrategy, ModelConfig, Seq2SeqModel, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

__all__ = [
    "DecodeConfig", "DecoderStrategy", "ExampleTriple", "ModelConfig", "Seq2SeqModel", "TrainConfig",
    "Vocabulary", "beam_search", "greedy_decode", "load_checkpoint", "save_checkpoint",
    "synth_lookup_task", "train",
]
__version__ = "0.1.0"
