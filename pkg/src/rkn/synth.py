"""Seeded motif-implant benchmark generator."""
from __future__ import annotations

import numpy as np

from .encoding import DNA
from .exceptions import RKNError

__all__ = ["synth_gen"]


def synth_gen(seed=0, n=100, length=100, motif_length=8, gap_rate=0.2, alphabet=DNA):
    """Balanced positive/negative sequences; positives carry one gapped copy of a hidden motif.

    Background characters are i.i.d. uniform.  Gaps between consecutive
    motif characters are geometric, ``P(g) = (1 - gap_rate) gap_rate**g``;
    draws whose span exceeds ``length`` are redrawn.  Labels alternate
    ``+1, -1, ...`` so every even-length prefix is balanced.

    Returns ``(records, labels, motif)`` with ``records`` a list of
    ``(id, sequence)`` and ``labels`` an int array.
    """
    if not 0 < motif_length < length:
        raise RKNError("need 0 < motif length < sequence length")
    if not 0 <= gap_rate < 1:
        raise RKNError("gap rate must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    symbols = np.array(list(getattr(alphabet, "symbols", alphabet)))
    motif = symbols[rng.integers(len(symbols), size=motif_length)]
    records, labels = [], []
    for i in range(n):
        seq = symbols[rng.integers(len(symbols), size=length)]
        label = 1 if i % 2 == 0 else -1
        if label == 1:
            while True:
                gaps = rng.geometric(1.0 - gap_rate, size=motif_length - 1) - 1
                span = motif_length + int(gaps.sum())
                if span <= length:
                    break
            start = int(rng.integers(length - span + 1))
            pos = start + np.r_[0, np.cumsum(gaps + 1)]
            seq[pos] = motif
        records.append((f"seq{i:05d}", "".join(seq)))
        labels.append(label)
    return records, np.array(labels, dtype=np.int64), "".join(motif)
