"""Sequence input: FASTA/label parsing and per-position character embeddings.

Every encoder returns columns of unit Euclidean norm, which the kernels rely
on (the Gaussian k-mer kernel is then a dot-product kernel).
"""
from __future__ import annotations

import hashlib
import io
import os
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Sequence

import numpy as np

from .exceptions import MalformedFasta, RKNError, UnknownSymbol

__all__ = [
    "Alphabet",
    "DNA",
    "PROTEIN",
    "EncodedSequence",
    "LabeledDataset",
    "Encoder",
    "encode_onehot",
    "encode_blosum62",
    "encode_vectors",
    "blosum62_embedding",
    "parse_fasta",
    "read_fasta",
    "write_fasta",
    "read_labels",
    "write_labels",
]

NORM_TOL = 1e-9


@dataclass(frozen=True)
class Alphabet:
    """Ordered set of symbols; one-hot dimension equals the number of symbols."""

    symbols: str

    def __post_init__(self):
        if len(self.symbols) == 0:
            raise RKNError("alphabet must contain at least one symbol")
        if len(set(self.symbols)) != len(self.symbols):
            raise RKNError(f"alphabet symbols must be unique: {self.symbols!r}")

    @property
    def dim(self) -> int:
        return len(self.symbols)

    def index(self, char: str) -> int:
        return self.symbols.index(char)

    def __contains__(self, char) -> bool:
        return len(char) == 1 and char in self.symbols

    def __len__(self) -> int:
        return len(self.symbols)


DNA = Alphabet("ACGT")
PROTEIN = Alphabet("ARNDCQEGHILKMFPSTWYV")


@dataclass
class EncodedSequence:
    """A sequence of ``m`` characters embedded as a ``d x m`` real matrix.

    Column ``t`` holds the embedding of character ``t``.  Columns are expected
    to have unit norm; ``m = 0`` is allowed here but rejected by the kernels.
    """

    id: str
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise RKNError(f"sequence {self.id!r}: data must be a d x m matrix")

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    @property
    def length(self) -> int:
        return self.data.shape[1]

    def __len__(self) -> int:
        return self.length

    @property
    def positions(self) -> np.ndarray:
        """Row-major view ``(m, d)`` used by the recursion."""
        return self.data.T


@dataclass
class LabeledDataset:
    sequences: list
    labels: np.ndarray
    task: str = "binary"  # "binary" ({-1, +1}) or "multiclass" (0..C-1)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.sequences) != len(self.labels):
            raise RKNError(
                f"{len(self.sequences)} sequences but {len(self.labels)} labels"
            )
        if self.task == "binary":
            bad = set(np.unique(self.labels)) - {-1, 1}
            if bad:
                raise RKNError(f"binary labels must be -1/+1, got {sorted(bad)}")
        elif self.task == "multiclass":
            if len(self.labels) and self.labels.min() < 0:
                raise RKNError("multiclass labels must be class indices >= 0")
        else:
            raise RKNError(f"unknown task type {self.task!r}")

    def __len__(self):
        return len(self.sequences)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset([self.sequences[i] for i in idx], self.labels[idx], self.task)


def _clean(raw: str) -> str:
    return "".join(raw.split()).upper()


def encode_onehot(raw: str, alphabet: Alphabet, seq_id: str = "") -> EncodedSequence:
    raw = _clean(raw)
    idx = np.empty(len(raw), dtype=np.int64)
    for pos, char in enumerate(raw, start=1):
        if char not in alphabet:
            raise UnknownSymbol(pos, char, seq_id or None)
        idx[pos - 1] = alphabet.index(char)
    data = np.zeros((alphabet.dim, len(raw)))
    data[idx, np.arange(len(raw))] = 1.0
    return EncodedSequence(seq_id, data)


_BLOSUM_CACHE: dict = {}


def _load_blosum62():
    if "scores" in _BLOSUM_CACHE:
        return _BLOSUM_CACHE["scores"], _BLOSUM_CACHE["background"]
    pkg = resources.files("rkn") / "data"
    raw = (pkg / "blosum62.txt").read_bytes()
    expected = (pkg / "blosum62.sha256").read_text().split()[0]
    digest = hashlib.sha256(raw).hexdigest()
    if digest != expected:
        raise RKNError(f"blosum62.txt checksum mismatch: {digest} != {expected}")
    rows = [line.split() for line in raw.decode().splitlines() if line and not line.startswith("#")]
    header = rows[0]
    if "".join(header) != PROTEIN.symbols:
        raise RKNError("blosum62.txt residue order differs from the protein alphabet")
    scores = np.array([[float(v) for v in r[1:]] for r in rows[1:21]])
    background = np.array([float(v) for v in rows[21][1:]])
    _BLOSUM_CACHE["scores"] = scores
    _BLOSUM_CACHE["background"] = background
    return scores, background


def blosum62_embedding() -> np.ndarray:
    """20 x 20 matrix whose column ``a`` is the embedding of residue ``a``.

    Row ``a`` of the conditional substitution probabilities
    ``p(b | a) ~ q_b 2^{s(a,b)/2}`` is centered and scaled to unit norm.
    """
    scores, background = _load_blosum62()
    p = background[None, :] * np.power(2.0, scores / 2.0)
    p /= p.sum(axis=1, keepdims=True)
    p -= p.mean(axis=1, keepdims=True)
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    return p.T.copy()


def encode_blosum62(raw: str, seq_id: str = "") -> EncodedSequence:
    raw = _clean(raw)
    table = blosum62_embedding()
    idx = np.empty(len(raw), dtype=np.int64)
    for pos, char in enumerate(raw, start=1):
        if char not in PROTEIN:
            raise UnknownSymbol(pos, char, seq_id or None)
        idx[pos - 1] = PROTEIN.index(char)
    return EncodedSequence(seq_id, table[:, idx])


def encode_vectors(matrix, seq_id: str = "", normalize: bool = False) -> EncodedSequence:
    """Wrap arbitrary per-position vectors (``d x m``), e.g. profile features.

    With ``normalize=True`` every nonzero column is rescaled to unit norm;
    otherwise columns must already be unit norm.
    """
    data = np.array(matrix, dtype=np.float64, ndmin=2)
    norms = np.linalg.norm(data, axis=0)
    if normalize:
        if np.any(norms == 0):
            raise RKNError(f"sequence {seq_id!r}: zero column cannot be normalized")
        data = data / norms
    elif data.shape[1] and np.max(np.abs(norms - 1.0)) > NORM_TOL:
        raise RKNError(f"sequence {seq_id!r}: columns must have unit norm")
    return EncodedSequence(seq_id, data)


@dataclass(frozen=True)
class Encoder:
    """Serializable choice of character embedding: ``onehot:<symbols>`` or ``blosum62``."""

    kind: str = "onehot"
    alphabet: Alphabet = field(default=DNA)

    def __post_init__(self):
        if self.kind not in ("onehot", "blosum62"):
            raise RKNError(f"unknown encoder {self.kind!r}")
        if self.kind == "blosum62" and self.alphabet != PROTEIN:
            object.__setattr__(self, "alphabet", PROTEIN)

    @property
    def dim(self) -> int:
        return self.alphabet.dim

    @property
    def id(self) -> str:
        return "blosum62" if self.kind == "blosum62" else f"onehot:{self.alphabet.symbols}"

    @classmethod
    def from_id(cls, ident: str) -> "Encoder":
        if ident == "blosum62":
            return cls("blosum62", PROTEIN)
        if ident.startswith("onehot:"):
            return cls("onehot", Alphabet(ident[len("onehot:"):]))
        named = {"dna": DNA, "protein": PROTEIN}
        if ident.lower() in named:
            return cls("onehot", named[ident.lower()])
        raise RKNError(f"unknown encoder id {ident!r}")

    def __call__(self, raw: str, seq_id: str = "") -> EncodedSequence:
        if self.kind == "blosum62":
            return encode_blosum62(raw, seq_id)
        return encode_onehot(raw, self.alphabet, seq_id)


def parse_fasta(stream: Iterable[str]) -> list:
    """Parse FASTA text into ``[(id, sequence), ...]`` in file order.

    The id is the first whitespace-delimited token of the header.  Wrapped
    sequence lines are concatenated and all whitespace is removed.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    records = []
    current_id = None
    chunks: list = []
    for line_no, line in enumerate(stream, start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith(">"):
            if current_id is not None:
                records.append((current_id, "".join(chunks)))
            parts = line[1:].split()
            current_id = parts[0] if parts else ""
            chunks = []
        else:
            if current_id is None:
                raise MalformedFasta(line_no)
            chunks.append("".join(line.split()))
    if current_id is not None:
        records.append((current_id, "".join(chunks)))
    return records


def read_fasta(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return parse_fasta(fh)


def write_fasta(records: Sequence, stream, width: int = 60) -> None:
    for seq_id, seq in records:
        stream.write(f">{seq_id}\n")
        if not seq:
            continue
        for start in range(0, len(seq), width):
            stream.write(seq[start:start + width] + "\n")


def read_labels(path_or_stream) -> dict:
    """Read ``<id><TAB><integer>`` lines into an ordered ``{id: label}`` dict."""
    if isinstance(path_or_stream, (str, os.PathLike)):
        with open(path_or_stream, encoding="utf-8") as fh:
            return read_labels(fh)
    labels = {}
    for line_no, line in enumerate(path_or_stream, start=1):
        line = line.rstrip("\n\r")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise RKNError(f"label file line {line_no}: expected '<id>\\t<label>'")
        try:
            labels[parts[0]] = int(parts[1])
        except ValueError:
            raise RKNError(f"label file line {line_no}: label {parts[1]!r} is not an integer") from None
    return labels


def write_labels(pairs: Iterable, stream) -> None:
    for seq_id, label in pairs:
        stream.write(f"{seq_id}\t{int(label)}\n")
