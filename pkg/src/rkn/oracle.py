"""Exact reference kernels between pairs of sequences.

Two evaluation routes exist for each kernel: brute-force enumeration over
index sets (tiny inputs only) and an ``O(k |x| |y|)`` pairwise dynamic
program.  They are kept independent so that each checks the other, and both
serve as ground truth for the recurrent Nystrom embedding in :mod:`rkn.core`.
"""
from __future__ import annotations

import itertools
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .encoding import EncodedSequence
from .exceptions import (
    EmptySequence,
    EnumerationTooLarge,
    NonIndicatorEncoding,
    RKNError,
    SequenceShorterThanK,
)

__all__ = [
    "GapWeighting",
    "KernelSpec",
    "GramMatrix",
    "enum_index_sets",
    "gaps",
    "substring_kernel_enum",
    "relaxed_kernel_enum",
    "relaxed_sum_kernel",
    "local_alignment_kernel",
    "local_alignment_terms",
    "contiguous_kmer_kernel",
    "relaxed_kernel_dp",
    "relaxed_kernel_dp_all",
    "kernel_value",
    "gram_matrix",
    "save_gram",
    "load_gram",
]

MAX_ENUMERATION = 10**6

GAP_COUNT = "gaps"
END_ANCHORED = "end"


@dataclass(frozen=True)
class GapWeighting:
    """Weight of an index set ``i`` in a sequence of length ``m``.

    ``gaps``: ``lam ** (i_k - i_1 - k + 1)`` (number of skipped positions).
    ``end``:  ``lam ** (m - i_1 - k + 1)`` (distance of the start from the end).
    ``0 ** 0`` is taken to be 1.
    """

    mode: str = GAP_COUNT
    lam: float = 0.5

    def __post_init__(self):
        if self.mode not in (GAP_COUNT, END_ANCHORED):
            raise RKNError(f"unknown gap weighting {self.mode!r}; use 'gaps' or 'end'")
        if not 0.0 <= self.lam <= 1.0:
            raise RKNError(f"lambda must lie in [0, 1], got {self.lam}")

    def exponent(self, idx, m: int) -> int:
        k = len(idx)
        if self.mode == GAP_COUNT:
            return idx[-1] - idx[0] - k + 1
        return m - idx[0] - k + 1

    def weight(self, idx, m: int) -> float:
        return float(self.lam) ** self.exponent(idx, m)


KINDS = ("substring", "relaxed", "relaxed_sum", "local_align")


@dataclass(frozen=True)
class KernelSpec:
    """Kernel selection and hyperparameters.

    ``kind`` is one of ``substring`` (exact matches, one-hot input),
    ``relaxed`` (Gaussian k-mer kernel), ``relaxed_sum`` (sum over
    ``k = 1..kmax``) or ``local_align`` (local alignment kernel with linear
    gap penalty ``g(n) = c n``, summed over ``k = 1..kmax``).
    """

    kind: str = "relaxed"
    k: int = 1
    alpha: float = 1.0
    weighting: GapWeighting = field(default_factory=GapWeighting)
    beta: float = 1.0
    c: float = 1.0
    kmax: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise RKNError(f"unknown kernel kind {self.kind!r}")
        if self.k < 1:
            raise RKNError("k must be >= 1")
        if self.alpha <= 0:
            raise RKNError("alpha must be > 0")
        if self.kind in ("relaxed_sum", "local_align") and self.kmax < 1:
            raise RKNError("kmax must be >= 1")
        if self.kind == "local_align" and (self.beta <= 0 or self.c <= 0):
            raise RKNError("beta and c must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weighting"] = {"mode": self.weighting.mode, "lambda": self.weighting.lam}
        return d


@dataclass
class GramMatrix:
    values: np.ndarray
    spec: KernelSpec
    ids: list
    normalized: bool = False

    def min_eigenvalue_ratio(self) -> float:
        ev = np.linalg.eigvalsh(self.values)
        return float(ev.min() / max(ev.max(), np.finfo(float).tiny))


def enum_index_sets(m: int, k: int) -> list:
    """All strictly increasing 1-based ``k``-tuples from ``{1..m}``, lexicographic."""
    if k > m:
        return []
    return list(itertools.combinations(range(1, m + 1), k))


def gaps(idx) -> int:
    return idx[-1] - idx[0] - len(idx) + 1


def _columns(x: EncodedSequence) -> np.ndarray:
    if x.length == 0:
        raise EmptySequence(f"sequence {x.id!r} is empty")
    return x.positions


def _guard(m: int, k: int):
    if k <= m and math.comb(m, k) > MAX_ENUMERATION:
        raise EnumerationTooLarge(f"C({m},{k}) = {math.comb(m, k)} index sets exceeds {MAX_ENUMERATION}")


def _indicator_symbols(x: EncodedSequence) -> np.ndarray:
    cols = _columns(x)
    ok = np.all((cols == 0.0) | (cols == 1.0), axis=1) & (cols.sum(axis=1) == 1.0)
    if not np.all(ok):
        raise NonIndicatorEncoding(f"sequence {x.id!r} has a column that is not a canonical basis vector")
    return cols.argmax(axis=1)


def substring_kernel_enum(x: EncodedSequence, y: EncodedSequence, k: int, lam: float) -> float:
    """Gap-weighted count of common ordered subsequences of length ``k``."""
    sx, sy = _indicator_symbols(x), _indicator_symbols(y)
    _guard(len(sx), k)
    _guard(len(sy), k)

    def features(symbols):
        phi: dict = {}
        for idx in enum_index_sets(len(symbols), k):
            u = tuple(symbols[i - 1] for i in idx)
            phi[u] = phi.get(u, 0.0) + float(lam) ** gaps(idx)
        return phi

    fx, fy = features(sx), features(sy)
    return float(sum(v * fy[u] for u, v in fx.items() if u in fy))


def _kmer_stack(cols: np.ndarray, k: int, weighting: GapWeighting):
    m = cols.shape[0]
    _guard(m, k)
    sets = enum_index_sets(m, k)
    if not sets:
        return np.zeros((0, k, cols.shape[1])), np.zeros(0)
    arr = np.array(sets) - 1
    weights = np.array([weighting.weight(idx, m) for idx in sets])
    return cols[arr], weights


def _relaxed_enum(cx, cy, k, alpha, weighting) -> float:
    kx, wx = _kmer_stack(cx, k, weighting)
    ky, wy = _kmer_stack(cy, k, weighting)
    if len(wx) == 0 or len(wy) == 0:
        return 0.0
    # ||x_i - y_j||^2 summed over the k selected columns (Frobenius)
    diff = kx[:, None, :, :] - ky[None, :, :, :]
    sq = np.einsum("abkd,abkd->ab", diff, diff)
    return float(wx @ np.exp(-0.5 * alpha * sq) @ wy)


def relaxed_kernel_enum(x: EncodedSequence, y: EncodedSequence, spec: KernelSpec) -> float:
    """Gaussian k-mer kernel summed over all gapped index-set pairs."""
    cx, cy = _columns(x), _columns(y)
    if len(cx) < spec.k or len(cy) < spec.k:
        raise SequenceShorterThanK(f"sequences of length {len(cx)}, {len(cy)} shorter than k={spec.k}")
    return _relaxed_enum(cx, cy, spec.k, spec.alpha, spec.weighting)


def relaxed_sum_kernel(x: EncodedSequence, y: EncodedSequence, spec: KernelSpec, method: str = "enum") -> float:
    """Relaxed kernel summed over ``k = 1..min(kmax, max(|x|, |y|))``."""
    cx, cy = _columns(x), _columns(y)
    top = min(spec.kmax, max(len(cx), len(cy)))
    if method == "dp":
        per_k = relaxed_kernel_dp_all(cx, cy, top, spec.alpha, spec.weighting)
        return float(per_k.sum())
    return float(sum(_relaxed_enum(cx, cy, k, spec.alpha, spec.weighting) for k in range(1, top + 1)))


def local_alignment_terms(x: EncodedSequence, y: EncodedSequence, beta: float, c: float, kmax: int) -> np.ndarray:
    """Per-``k`` local alignment kernel terms ``K_LA^k`` for ``k = 1..kmax``.

    Each alignment ``pi = (i, j)`` of ``k`` positions scores
    ``S = sum_t <x_{i_t}, y_{j_t}> - sum_t [g(i_{t+1}-i_t-1) + g(j_{t+1}-j_t-1)]``
    with ``g(n) = c n``, and contributes ``exp(beta S)``.
    """
    cx, cy = _columns(x), _columns(y)
    sim = cx @ cy.T
    out = np.zeros(kmax)
    for k in range(1, kmax + 1):
        if k > len(cx) or k > len(cy):
            break
        _guard(len(cx), k)
        _guard(len(cy), k)
        total = 0.0
        for i in enum_index_sets(len(cx), k):
            gi = sum(c * (i[t + 1] - i[t] - 1) for t in range(k - 1))
            for j in enum_index_sets(len(cy), k):
                gj = sum(c * (j[t + 1] - j[t] - 1) for t in range(k - 1))
                score = sum(sim[i[t] - 1, j[t] - 1] for t in range(k)) - gi - gj
                total += math.exp(beta * score)
        out[k - 1] = total
    return out


def local_alignment_kernel(x: EncodedSequence, y: EncodedSequence, spec: KernelSpec, method: str = "enum") -> float:
    if method == "dp":
        cx, cy = _columns(x), _columns(y)
        lam = math.exp(-spec.c * spec.beta)
        per_k = _pairwise_dp(np.exp(spec.beta * (cx @ cy.T)), spec.kmax, lam, GAP_COUNT)
        return float(per_k.sum())
    return float(local_alignment_terms(x, y, spec.beta, spec.c, spec.kmax).sum())


def contiguous_kmer_kernel(x: EncodedSequence, y: EncodedSequence, k: int, alpha: float) -> float:
    """Sum of the Gaussian k-mer kernel over all contiguous k-mer pairs."""
    cx, cy = _columns(x), _columns(y)
    total = 0.0
    for s in range(len(cx) - k + 1):
        for t in range(len(cy) - k + 1):
            d = cx[s:s + k] - cy[t:t + k]
            total += math.exp(-0.5 * alpha * float(np.sum(d * d)))
    return total


def _discounted_cumsum(Q: np.ndarray, lam: float, axis: int) -> np.ndarray:
    out = np.array(Q, copy=True)
    n = out.shape[axis]
    view = np.moveaxis(out, axis, 0)
    for s in range(1, n):
        view[s] += lam * view[s - 1]
    return out


def _pairwise_dp(Kmat: np.ndarray, kmax: int, lam: float, mode: str) -> np.ndarray:
    """Per-``j`` kernel values (``j = 1..kmax``) from a position-similarity matrix.

    ``P_j[s, t]`` is the weighted sum over pairs of ``j``-index sets inside
    ``x[:s], y[:t]`` with weight ``lam^{(s - i_1 - j + 1) + (t - j_1 - j + 1)}``;
    it satisfies ``P_j = D(Q_j)`` with ``Q_j[s, t] = P_{j-1}[s-1, t-1] K[s, t]``
    and ``D`` the separable discounted cumulative sum.  The gap-count kernel
    sums ``Q_j`` (index sets ending exactly at ``(s, t)``); the end-anchored
    kernel reads ``P_j`` at the last cell.
    """
    m, n = Kmat.shape
    out = np.zeros(kmax)
    prev = np.ones((m + 1, n + 1))  # P_0 padded: P_0[s, t] = 1 incl. s=0 or t=0
    for j in range(1, kmax + 1):
        Q = prev[:-1, :-1] * Kmat
        if mode == GAP_COUNT:
            out[j - 1] = Q.sum()
        P = _discounted_cumsum(_discounted_cumsum(Q, lam, 0), lam, 1)
        if mode == END_ANCHORED:
            out[j - 1] = P[-1, -1]
        prev = np.zeros((m + 1, n + 1))
        prev[1:, 1:] = P
    return out


def relaxed_kernel_dp_all(cx: np.ndarray, cy: np.ndarray, kmax: int, alpha: float, weighting: GapWeighting) -> np.ndarray:
    Kmat = np.exp(alpha * (cx @ cy.T - 1.0))
    return _pairwise_dp(Kmat, kmax, float(weighting.lam), weighting.mode)


def relaxed_kernel_dp(x: EncodedSequence, y: EncodedSequence, spec: KernelSpec) -> float:
    cx, cy = _columns(x), _columns(y)
    if len(cx) < spec.k or len(cy) < spec.k:
        raise SequenceShorterThanK(f"sequences of length {len(cx)}, {len(cy)} shorter than k={spec.k}")
    return float(relaxed_kernel_dp_all(cx, cy, spec.k, spec.alpha, spec.weighting)[-1])


def _substring_dp(x, y, spec):
    sx, sy = _indicator_symbols(x), _indicator_symbols(y)
    Kmat = (sx[:, None] == sy[None, :]).astype(np.float64)
    return float(_pairwise_dp(Kmat, spec.k, float(spec.weighting.lam), GAP_COUNT)[-1])


def kernel_value(x: EncodedSequence, y: EncodedSequence, spec: KernelSpec, method: str = "dp") -> float:
    """Evaluate the kernel described by ``spec`` with the chosen method."""
    if method not in ("dp", "enum"):
        raise RKNError(f"unknown method {method!r}")
    if spec.kind == "substring":
        if method == "enum":
            return substring_kernel_enum(x, y, spec.k, spec.weighting.lam)
        return _substring_dp(x, y, spec)
    if spec.kind == "relaxed":
        if method == "enum":
            return relaxed_kernel_enum(x, y, spec)
        return relaxed_kernel_dp(x, y, spec)
    if spec.kind == "relaxed_sum":
        return relaxed_sum_kernel(x, y, spec, method=method)
    return local_alignment_kernel(x, y, spec, method=method)


def gram_matrix(sequences, spec: KernelSpec, method: str = "dp", normalize: bool = False, workers: int = 1) -> GramMatrix:
    """Symmetric matrix of pairwise kernel values.

    Entries are computed on the upper triangle (optionally by a thread pool)
    and mirrored, so the result does not depend on ``workers``.
    """
    n = len(sequences)
    pairs = [(i, j) for i in range(n) for j in range(i, n)]

    def entry(pair):
        i, j = pair
        try:
            return kernel_value(sequences[i], sequences[j], spec, method)
        except RKNError as exc:
            raise type(exc)(f"pair ({sequences[i].id!r}, {sequences[j].id!r}): {exc}") from exc

    if workers > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            vals = list(pool.map(entry, pairs))
    else:
        vals = [entry(p) for p in pairs]
    K = np.zeros((n, n))
    for (i, j), v in zip(pairs, vals):
        K[i, j] = K[j, i] = v
    if normalize:
        d = np.sqrt(np.diag(K))
        if np.any(d == 0):
            raise RKNError("cannot normalize: a sequence has zero self-similarity")
        K = K / np.outer(d, d)
    return GramMatrix(K, spec, [s.id for s in sequences], normalize)


def save_gram(gram: GramMatrix, path) -> None:
    """Write the matrix as text (header row of ids) plus a JSON sidecar ``<path>.meta.json``."""
    from .io import atomic_write_text

    lines = ["\t".join(["id"] + list(gram.ids))]
    for sid, row in zip(gram.ids, gram.values):
        lines.append("\t".join([sid] + ["%.17g" % v for v in row]))
    atomic_write_text(path, "\n".join(lines) + "\n")
    spec = gram.spec
    meta = {
        "kind": spec.kind,
        "k": spec.k,
        "alpha": spec.alpha,
        "lambda": spec.weighting.lam,
        "weighting": spec.weighting.mode,
        "beta": spec.beta,
        "c": spec.c,
        "kmax": spec.kmax,
        "normalized": gram.normalized,
        "n": len(gram.ids),
    }
    atomic_write_text(os.fspath(path) + ".meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_gram(path) -> GramMatrix:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")[1:]
        rows = [line.rstrip("\n").split("\t") for line in fh if line.strip()]
    with open(os.fspath(path) + ".meta.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    values = np.array([[float(v) for v in r[1:]] for r in rows]).reshape(len(header), len(header))
    spec = KernelSpec(
        kind=meta["kind"], k=meta["k"], alpha=meta["alpha"],
        weighting=GapWeighting(meta["weighting"], meta["lambda"]),
        beta=meta["beta"], c=meta["c"], kmax=meta["kmax"],
    )
    return GramMatrix(values, spec, header, meta["normalized"])
