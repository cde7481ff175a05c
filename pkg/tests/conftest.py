import numpy as np
import pytest
from hypothesis import settings

from rkn.encoding import DNA, Alphabet, EncodedSequence, encode_onehot

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def onehot(text, symbols="ACGT", seq_id="x"):
    return encode_onehot(text, Alphabet(symbols) if symbols != "ACGT" else DNA, seq_id)


def random_unit_sequence(rng, m, d, seq_id="x"):
    X = rng.normal(size=(d, m))
    return EncodedSequence(seq_id, X / np.linalg.norm(X, axis=0))


def random_onehot_sequence(rng, m, d, seq_id="x"):
    return EncodedSequence(seq_id, np.eye(d)[:, rng.integers(0, d, m)])


def random_motifs(rng, q, k, d):
    Z = rng.normal(size=(q, k, d))
    return Z / np.linalg.norm(Z, axis=2, keepdims=True)
