import re

import numpy as np
import pytest

from rkn.encoding import PROTEIN
from rkn.exceptions import RKNError
from rkn.synth import synth_gen


def test_balanced():
    _, y, _ = synth_gen(seed=1, n=10)
    assert (y == 1).sum() == 5 and (y == -1).sum() == 5


def test_deterministic():
    a, ya, ma = synth_gen(seed=4, n=20)
    b, yb, mb = synth_gen(seed=4, n=20)
    assert a == b and ma == mb
    np.testing.assert_array_equal(ya, yb)
    assert synth_gen(seed=5, n=20)[0] != a


def test_gap_rate_zero_contiguous():
    recs, y, motif = synth_gen(seed=2, n=40, length=50, motif_length=6, gap_rate=0.0)
    for (_, s), label in zip(recs, y):
        if label == 1:
            assert motif in s


def test_gapped_motif_present():
    recs, y, motif = synth_gen(seed=3, n=20, length=60, motif_length=5, gap_rate=0.5)
    pattern = re.compile(".*".join(motif))
    assert all(pattern.search(s) for (_, s), label in zip(recs, y) if label == 1)
    assert all(len(s) == 60 for _, s in recs)


def test_protein_alphabet():
    recs, _, motif = synth_gen(seed=0, n=4, length=30, motif_length=4, alphabet=PROTEIN)
    assert set("".join(s for _, s in recs)) <= set(PROTEIN.symbols)


def test_bad_arguments():
    with pytest.raises(RKNError):
        synth_gen(n=4, length=5, motif_length=5)
    with pytest.raises(RKNError):
        synth_gen(n=4, gap_rate=1.0)
