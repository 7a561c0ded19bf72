"""Video captioning with a K-means video dictionary, concept selection by
cross-attention and gated conceptual integration, on a numpy autodiff core."""

__version__ = "0.1.0"

from .corpus import Video, Vocabulary, generate_synthetic_corpus, load_corpus, save_corpus
from .dictionary import VideoDictionary, kmeans_fit, load_dictionary, save_dictionary
from .inference import beam_search, decode, dump_attention, greedy_decode
from .metrics import bleu4, cider
from .model import VCRN, ModelConfig
from .training import TrainConfig, gradcheck, load_checkpoint, train

__all__ = [
    "VCRN", "ModelConfig", "TrainConfig", "Video", "VideoDictionary", "Vocabulary", "beam_search", "bleu4",
    "cider", "decode", "dump_attention", "generate_synthetic_corpus", "gradcheck", "greedy_decode",
    "kmeans_fit", "load_checkpoint", "load_corpus", "load_dictionary", "save_corpus", "save_dictionary",
    "train",
]
