"""Recurrent kernel networks."""
from .core import AnchorSet, PoolingMode, RknModel, embed_dataset, forward_embed, multilayer_forward
from .encoding import DNA, PROTEIN, Alphabet, EncodedSequence, Encoder, LabeledDataset, read_fasta
from .estimator import RKNClassifier, RKNEmbedding
from .exceptions import RKNError
from .metrics import auroc, auroc50, topk_accuracy
from .model_io import load_model, save_model
from .oracle import GapWeighting, KernelSpec, gram_matrix
from .synth import synth_gen
from .training import Architecture, TrainConfig, train_supervised, train_unsupervised

__version__ = "0.1.0"

__all__ = [
    "Alphabet", "AnchorSet", "Architecture", "DNA", "EncodedSequence", "Encoder", "GapWeighting",
    "KernelSpec", "LabeledDataset", "PROTEIN", "PoolingMode", "RKNClassifier", "RKNEmbedding",
    "RKNError", "RknModel", "TrainConfig", "auroc", "auroc50", "embed_dataset", "forward_embed",
    "gram_matrix", "load_model", "multilayer_forward", "read_fasta", "save_model", "synth_gen",
    "topk_accuracy", "train_supervised", "train_unsupervised",
]
