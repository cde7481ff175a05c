"""scikit-learn style estimators over raw or encoded sequences."""
from __future__ import annotations

import numpy as np
from scipy.special import expit, softmax
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import embed_dataset
from .encoding import EncodedSequence, Encoder, LabeledDataset
from .exceptions import DimensionMismatch, LabelMismatch, RKNError
from .training import Architecture, TrainConfig, _standardization, init_model, train_supervised, \
    train_unsupervised

__all__ = ["check_sequences", "RKNClassifier", "RKNEmbedding"]


def check_sequences(X, encoder="dna"):
    """Coerce ``X`` to a list of :class:`EncodedSequence`.

    Items may be strings (encoded with ``encoder``), ``(id, string)`` pairs,
    encoded sequences, or ``(m, d)`` arrays of per-position embeddings.
    """
    if isinstance(X, (str, bytes)) or (isinstance(X, np.ndarray) and X.ndim < 2):
        raise RKNError("expected a collection of sequences, got a single item")
    enc = encoder if isinstance(encoder, Encoder) else Encoder.from_id(encoder)
    out = []
    for i, item in enumerate(X):
        if isinstance(item, EncodedSequence):
            out.append(item)
        elif isinstance(item, str):
            out.append(enc(item, f"seq{i}"))
        elif isinstance(item, tuple) and len(item) == 2 and isinstance(item[1], str):
            out.append(enc(item[1], str(item[0])))
        else:
            arr = np.asarray(item, dtype=np.float64)
            if arr.ndim != 2:
                raise DimensionMismatch(f"item {i}: expected an (m, d) array, got shape {arr.shape}")
            out.append(EncodedSequence(f"seq{i}", arr.T))
    if not out:
        raise RKNError("no sequences given")
    dims = {s.dim for s in out}
    if len(dims) != 1:
        raise DimensionMismatch(f"sequences have mixed embedding dimensions {sorted(dims)}")
    return out


def _encoder_id(encoder, seqs):
    if isinstance(encoder, Encoder):
        return encoder.id
    try:
        return Encoder.from_id(encoder).id
    except RKNError:
        return f"vectors:{seqs[0].dim}"


class _RKNBase(BaseEstimator):
    def _architecture(self):
        return Architecture(k=self.k, q=self.q, alpha=self.alpha, lam=self.lam, weighting=self.weighting,
                            pooling=self.pooling, gmp_gamma=self.gmp_gamma, layers=self.layers,
                            epsilon=self.epsilon)

    def _embed(self, X, concat=False):
        check_is_fitted(self, "model_")
        seqs = check_sequences(X, self.encoder)
        if seqs[0].dim != self.model_.layers[0].dim:
            raise DimensionMismatch(f"input dimension {seqs[0].dim} != model dimension {self.model_.layers[0].dim}")
        return embed_dataset(seqs, self.model_, concat=concat, workers=self.workers, standardize=not concat)


class RKNClassifier(ClassifierMixin, _RKNBase):
    """Recurrent kernel network classifier.

    Parameters
    ----------
    k, q : int
        Motif length and number of motifs (per layer).
    alpha, lam : float
        Gaussian bandwidth of the k-mer kernel and gap penalty.
    weighting : {"gaps", "end"}
        Gap weighting of the last layer.
    pooling : {"mean", "max", "gmp"}
        Pooling over positions.
    mode : {"supervised", "unsupervised"}
        Learn the motifs end to end, or keep the k-means anchors and fit only
        the linear layer (ridge weight picked by cross-validation).
    mu : float
        Ridge weight of the linear layer in supervised mode.
    encoder : str
        ``"dna"``, ``"protein"``, ``"blosum62"`` or ``"onehot:<symbols>"``;
        used for string inputs.

    Attributes
    ----------
    classes_ : ndarray
    model_ : RknModel
    """

    def __init__(self, k=6, q=16, alpha=0.5, lam=0.5, weighting="gaps", pooling="mean", gmp_gamma=1.0,
                 layers=1, epsilon=None, mode="supervised", mu=1e-3, epochs=100, lr=0.05, batch_size=32,
                 patience=5, val_fraction=0.25, train_alpha=False, encoder="dna", seed=0, workers=1):
        self.k = k
        self.q = q
        self.alpha = alpha
        self.lam = lam
        self.weighting = weighting
        self.pooling = pooling
        self.gmp_gamma = gmp_gamma
        self.layers = layers
        self.epsilon = epsilon
        self.mode = mode
        self.mu = mu
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.patience = patience
        self.val_fraction = val_fraction
        self.train_alpha = train_alpha
        self.encoder = encoder
        self.seed = seed
        self.workers = workers

    def fit(self, X, y, log_stream=None):
        seqs = check_sequences(X, self.encoder)
        y = np.asarray(y)
        if y.ndim != 1 or len(y) != len(seqs):
            raise LabelMismatch(f"{len(seqs)} sequences but labels of shape {y.shape}")
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise LabelMismatch("need at least two classes")
        binary = len(self.classes_) == 2
        labels = 2 * codes - 1 if binary else codes
        data = LabeledDataset(seqs, labels, "binary" if binary else "multiclass")
        config = TrainConfig(loss="logistic" if binary else "multinomial", mu=self.mu, epochs=self.epochs,
                             lr=self.lr, batch_size=self.batch_size, patience=self.patience, seed=self.seed,
                             mode=self.mode, val_fraction=self.val_fraction, train_alpha=self.train_alpha,
                             workers=self.workers)
        encoder_id = _encoder_id(self.encoder, seqs)
        if self.mode == "unsupervised":
            self.model_ = train_unsupervised(data, config, self._architecture(), encoder_id)
        else:
            self.model_ = train_supervised(data, None, config, arch=self._architecture(),
                                           encoder_id=encoder_id, log_stream=log_stream)
        self.n_features_out_ = self.model_.out_dim
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        F = embed_dataset(check_sequences(X, self.encoder), self.model_, workers=self.workers)
        return self.model_.scores(F)

    def predict_proba(self, X):
        scores = self.decision_function(X)
        if scores.ndim == 1:
            p = expit(scores)
            return np.column_stack([1.0 - p, p])
        return softmax(scores, axis=1)

    def predict(self, X):
        scores = self.decision_function(X)
        idx = (scores > 0).astype(int) if scores.ndim == 1 else scores.argmax(axis=1)
        return self.classes_[idx]

    def transform(self, X):
        """Pooled (standardized, in unsupervised mode) sequence representations."""
        return self._embed(X)


class RKNEmbedding(TransformerMixin, _RKNBase):
    """Unsupervised sequence embedding with k-means motifs.

    ``fit`` clusters contiguous k-mers of the training sequences into ``q``
    anchors per layer; ``transform`` returns the pooled features (width ``q``,
    or ``k * q`` with ``concat=True`` for mean/max pooling).
    """

    def __init__(self, k=6, q=16, alpha=0.5, lam=0.5, weighting="gaps", pooling="mean", gmp_gamma=1.0,
                 layers=1, epsilon=None, concat=False, standardize=True, kmer_sample=30000,
                 encoder="dna", seed=0, workers=1):
        self.k = k
        self.q = q
        self.alpha = alpha
        self.lam = lam
        self.weighting = weighting
        self.pooling = pooling
        self.gmp_gamma = gmp_gamma
        self.layers = layers
        self.epsilon = epsilon
        self.concat = concat
        self.standardize = standardize
        self.kmer_sample = kmer_sample
        self.encoder = encoder
        self.seed = seed
        self.workers = workers

    def fit(self, X, y=None):
        seqs = check_sequences(X, self.encoder)
        config = TrainConfig(seed=self.seed, kmer_sample=self.kmer_sample, workers=self.workers)
        self.model_ = init_model(seqs, self._architecture(), config, _encoder_id(self.encoder, seqs))
        F = embed_dataset(seqs, self.model_, concat=self.concat, workers=self.workers)
        if self.standardize:
            self.mean_, self.scale_ = _standardization(F)
        else:
            self.mean_, self.scale_ = np.zeros(F.shape[1]), np.ones(F.shape[1])
        self.n_features_out_ = F.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        seqs = check_sequences(X, self.encoder)
        F = embed_dataset(seqs, self.model_, concat=self.concat, workers=self.workers)
        return (F - self.mean_) / self.scale_
