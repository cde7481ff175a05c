"""Recurrent kernel network: the recursion, Nystrom projection, pooling, stacking.

Sequences are processed in batches, left-padded with zero columns.  A zero
column yields ``b_j[t] = 0``, which leaves every recursion state untouched, so
padding is exact for all weightings and pooling modes.

Arrays follow these layouts:

* input positions ``X``: ``(B, m, d)``
* motifs ``Z``: ``(q, k, d)`` (motif ``i``, position ``j``, embedding dim)
* ``b`` vectors: ``(m, B, k, q)``
* recursion states ``c``: ``(m + 1, B, k + 1, q)`` with ``c[:, :, 0] = 1``
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .encoding import EncodedSequence
from .exceptions import (
    DegenerateTrace,
    DimensionMismatch,
    EmptySequence,
    NonFinite,
    RKNError,
)
from .linalg import InvSqrtCache, inverse_sqrt, inverse_sqrt_adjoint, ridge_solve
from .oracle import END_ANCHORED, GAP_COUNT, GapWeighting

__all__ = [
    "PoolingMode",
    "AnchorSet",
    "EmbeddingState",
    "EmbeddingResult",
    "RknModel",
    "bvec",
    "forward_embed",
    "anchor_gram",
    "nystrom_project",
    "pool",
    "gmp_closed_form",
    "multilayer_forward",
    "embed_dataset",
    "forward_batch",
    "backward_batch",
    "pad_batch",
]

POOLINGS = ("mean", "max", "gmp")


@dataclass(frozen=True)
class PoolingMode:
    kind: str = "mean"
    gamma: float = 1.0  # ridge parameter of generalized max pooling

    def __post_init__(self):
        if self.kind not in POOLINGS:
            raise RKNError(f"unknown pooling {self.kind!r}; use one of {POOLINGS}")
        if self.kind == "gmp" and not self.gamma > 0:
            raise RKNError("GMP gamma must be > 0")


class AnchorSet:
    """``q`` motifs of ``k`` unit-norm columns in ``R^d`` plus kernel hyperparameters.

    The inverse square roots of the prefix Gram matrices ``K_{Z_j Z_j}`` are
    cached per ``j`` and dropped whenever ``Z`` or ``alpha`` is reassigned.
    """

    def __init__(self, Z, alpha=1.0, weighting: GapWeighting | None = None, epsilon=None, layer_index=0):
        self._Z = np.array(Z, dtype=np.float64)
        if self._Z.ndim != 3:
            raise DimensionMismatch("motifs must have shape (q, k, d)")
        if alpha <= 0:
            raise RKNError("alpha must be > 0")
        self._alpha = float(alpha)
        self.weighting = weighting or GapWeighting()
        self.layer_index = layer_index
        self._cache: dict = {}
        if epsilon is None:
            # 1e-6 * trace(K_ZZ) / q on the initial motifs; fixed afterwards
            K = anchor_gram(self, self.k)
            epsilon = 1e-6 * float(np.trace(K)) / self.q
        self.epsilon = float(epsilon)

    @property
    def Z(self) -> np.ndarray:
        return self._Z

    @Z.setter
    def Z(self, value):
        value = np.array(value, dtype=np.float64)
        if value.shape != self._Z.shape:
            raise DimensionMismatch(f"motif shape {value.shape} != {self._Z.shape}")
        self._Z = value
        self._cache.clear()

    @property
    def alpha(self) -> float:
        return self._alpha

    @alpha.setter
    def alpha(self, value):
        if value <= 0:
            raise RKNError("alpha must be > 0")
        self._alpha = float(value)
        self._cache.clear()

    @property
    def lam(self) -> float:
        return float(self.weighting.lam)

    @property
    def q(self) -> int:
        return self._Z.shape[0]

    @property
    def k(self) -> int:
        return self._Z.shape[1]

    @property
    def dim(self) -> int:
        return self._Z.shape[2]

    def normalize(self) -> None:
        """Project every motif column back onto the unit sphere."""
        norms = np.linalg.norm(self._Z, axis=2, keepdims=True)
        self.Z = self._Z / np.where(norms > 0, norms, 1.0)

    def inv_sqrt(self, j: int | None = None) -> InvSqrtCache:
        j = self.k if j is None else j
        if j not in self._cache:
            self._cache[j] = inverse_sqrt(anchor_gram(self, j), self.epsilon)
        return self._cache[j]

    def copy(self) -> "AnchorSet":
        return AnchorSet(self._Z.copy(), self._alpha, self.weighting, self.epsilon, self.layer_index)


def anchor_gram(anchors: AnchorSet, j: int | None = None) -> np.ndarray:
    """``K_{Z_j Z_j}[i, l] = prod_{s <= j} exp(alpha (<z_i^s, z_l^s> - 1))``."""
    j = anchors.k if j is None else j
    Zj = anchors.Z[:, :j, :]
    dots = np.einsum("isd,lsd->il", Zj, Zj)
    return np.exp(anchors.alpha * (dots - j))


# --------------------------------------------------------------------------
# recursion


@dataclass
class EmbeddingState:
    """Recursion buffers at position ``t``: ``c`` is ``(k+1, q)`` with row 0 all ones,
    ``h`` is ``(k, q)`` holding ``h_1..h_k``.  Leading batch axes are allowed."""

    c: np.ndarray
    h: np.ndarray
    t: int = 0

    @classmethod
    def initial(cls, k: int, q: int, batch: tuple = ()) -> "EmbeddingState":
        c = np.zeros(batch + (k + 1, q))
        c[..., 0, :] = 1.0
        return cls(c, np.zeros(batch + (k, q)), 0)

    def advance(self, b_t: np.ndarray, lam: float, mode: str = "sum") -> "EmbeddingState":
        c, h = _step(self.c, self.h, b_t, lam, mode)
        return EmbeddingState(c, h, self.t + 1)


def _step(c_prev, h_prev, b_t, lam, mode):
    p = c_prev[..., :-1, :] * b_t
    c = np.empty_like(c_prev)
    c[..., 0, :] = 1.0
    if mode == "sum":
        c[..., 1:, :] = lam * c_prev[..., 1:, :] + p
        h = h_prev + p
    else:
        # ties resolve toward the first argument (lam * c, resp. previous h)
        c[..., 1:, :] = np.maximum(lam * c_prev[..., 1:, :], p)
        h = np.maximum(h_prev, p)
    return c, h


def _recurse(b, lam, mode):
    """Run the recursion over ``b`` of shape ``(m, B, k, q)``; keep all states."""
    m, B, k, q = b.shape
    C = np.empty((m + 1, B, k + 1, q))
    H = np.empty((m + 1, B, k, q))
    state = EmbeddingState.initial(k, q, (B,))
    C[0], H[0] = state.c, state.h
    for t in range(m):
        C[t + 1], H[t + 1] = _step(C[t], H[t], b[t], lam, mode)
    return C, H


def _recurse_backward(b, C, H, lam, mode, g_c_final=None, g_h_final=None, g_trace=None):
    """Reverse sweep.  ``g_c_final``/``g_h_final``: ``(B, k, q)`` gradients on
    ``c_1..k[m]`` and ``h_1..k[m]``; ``g_trace``: ``(m, B, q)`` gradient on
    ``c_k[t]`` for ``t = 1..m``.  Returns the gradient on ``b``."""
    m, B, k, q = b.shape
    gb = np.zeros_like(b)
    gC = np.zeros((B, k + 1, q))
    gH = np.zeros((B, k, q))
    if g_c_final is not None:
        gC[:, 1:] = g_c_final
    if g_h_final is not None:
        gH = np.array(g_h_final, dtype=np.float64)
    for t in range(m, 0, -1):
        if g_trace is not None:
            gC[:, k] += g_trace[t - 1]
        Cp = C[t - 1]
        bt = b[t - 1]
        if mode == "sum":
            G = gC[:, 1:] + gH
            gCp = np.zeros_like(gC)
            gCp[:, 1:] = lam * gC[:, 1:]
        else:
            p = Cp[:, :-1] * bt
            sel_c = p > lam * Cp[:, 1:]
            sel_h = p > H[t - 1]
            G = gC[:, 1:] * sel_c + gH * sel_h
            gCp = np.zeros_like(gC)
            gCp[:, 1:] = lam * gC[:, 1:] * ~sel_c
            gH = gH * ~sel_h
        gb[t - 1] = G * Cp[:, :-1]
        gCp[:, :-1] += G * bt
        gC = gCp
    return gb


# --------------------------------------------------------------------------
# b vectors


def _similarities(X, Z):
    B, m, d = X.shape
    q, k, _ = Z.shape
    S = X.reshape(B * m, d) @ Z.transpose(1, 0, 2).reshape(k * q, d).T
    return S.reshape(B, m, k, q).transpose(1, 0, 2, 3)  # (m, B, k, q)


def _bvectors(X, anchors: AnchorSet, homogeneous: bool):
    """``b_j[t]_i = ||x_t|| exp(alpha(<z_i^j, x_t / ||x_t||> - 1))``, zero for zero columns.

    For unit-norm inputs (first layer) this is ``exp(alpha(<x_t, z_i^j> - 1))``.
    """
    alpha = anchors.alpha
    S = _similarities(X, anchors.Z)
    norms = np.linalg.norm(X, axis=2).T  # (m, B)
    live = norms > 0
    if homogeneous:
        safe = np.where(live, norms, 1.0)[:, :, None, None]
        s = S / safe
        e = np.exp(alpha * (s - 1.0)) * live[:, :, None, None]
        b = e * safe
    else:
        s = S
        e = np.exp(alpha * (S - 1.0)) * live[:, :, None, None]
        b = e
    return b, {"X": X, "s": s, "e": e, "norms": norms, "live": live, "homogeneous": homogeneous}


def _bvectors_backward(gb, cache, anchors: AnchorSet, need_x: bool):
    alpha = anchors.alpha
    X, s, e, live = cache["X"], cache["s"], cache["e"], cache["live"]
    B, m, d = X.shape
    q, k, _ = anchors.Z.shape
    gS = gb * e * alpha  # d b / d S = alpha e in both forms
    g_alpha = float(np.sum(gb * e * (s - 1.0) * (cache["norms"][:, :, None, None] if cache["homogeneous"] else 1.0)))
    gS2 = gS.transpose(1, 0, 2, 3).reshape(B * m, k * q)
    gZ = (gS2.T @ X.reshape(B * m, d)).reshape(k, q, d).transpose(1, 0, 2)
    gX = None
    if need_x:
        gX = (gS2 @ anchors.Z.transpose(1, 0, 2).reshape(k * q, d)).reshape(B, m, d)
        if cache["homogeneous"]:
            norms = cache["norms"]
            gn = np.sum(gb * e * (1.0 - alpha * s), axis=(2, 3))  # (m, B)
            safe = np.where(live, norms, 1.0)
            gX += (gn / safe).T[:, :, None] * X
        gX *= live.T[:, :, None]
    return gZ, g_alpha, gX


def _gram_backward(gA, anchors: AnchorSet, j: int):
    """Pull a symmetric gradient on ``K_{Z_j Z_j}`` back to ``Z`` and ``alpha``."""
    Zj = anchors.Z[:, :j, :]
    dots = np.einsum("isd,lsd->il", Zj, Zj)
    K = np.exp(anchors.alpha * (dots - j))
    W = gA * K
    gZ = np.zeros_like(anchors.Z)
    gZ[:, :j, :] = anchors.alpha * np.einsum("il,lsd->isd", W + W.T, Zj)
    g_alpha = float(np.sum(W * (dots - j)))
    return gZ, g_alpha


# --------------------------------------------------------------------------
# single-sequence operations


def bvec(anchors: AnchorSet, j: int, xt) -> np.ndarray:
    """Entry ``i`` is ``exp(alpha (<x_t, z_i^j> - 1))`` (``j`` is 1-based)."""
    if not 1 <= j <= anchors.k:
        raise RKNError(f"position j={j} outside 1..{anchors.k}")
    return np.exp(anchors.alpha * (anchors.Z[:, j - 1, :] @ np.asarray(xt, dtype=np.float64) - 1.0))


@dataclass
class EmbeddingResult:
    """Raw (unprojected) recursion output for one sequence.

    ``c[j-1]`` and ``h[j-1]`` are ``c_j[m]`` and ``h_j[m]``; ``trace[t-1, j-1]``
    is ``c_j[t]`` when requested.
    """

    c: np.ndarray
    h: np.ndarray
    trace: np.ndarray | None = None

    def raw(self, weighting: str, j: int | None = None) -> np.ndarray:
        j = self.c.shape[0] if j is None else j
        return (self.c if weighting == END_ANCHORED else self.h)[j - 1]


def _positions(x) -> np.ndarray:
    if isinstance(x, EncodedSequence):
        if x.length == 0:
            raise EmptySequence(f"sequence {x.id!r} is empty")
        return x.positions
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape[0] == 0:
        raise EmptySequence("sequence is empty")
    return arr


def forward_embed(x, anchors: AnchorSet, mode: str = "sum", trace: bool = False, homogeneous: bool = False) -> EmbeddingResult:
    """Run the recursion on one sequence and return the final raw states.

    ``mode`` is ``"sum"`` or ``"max"``.  ``x`` is an :class:`EncodedSequence`
    or an ``(m, d)`` array of positions (``homogeneous=True`` for
    non-normalized inputs such as upper-layer features).
    """
    if mode not in ("sum", "max"):
        raise RKNError(f"unknown recursion mode {mode!r}")
    X = _positions(x)[None]
    if X.shape[2] != anchors.dim:
        raise DimensionMismatch(f"input dimension {X.shape[2]} != motif dimension {anchors.dim}")
    b, _ = _bvectors(X, anchors, homogeneous)
    C, H = _recurse(b, anchors.lam, mode)
    _check_finite(C, "recursion state")
    return EmbeddingResult(C[-1, 0, 1:].copy(), H[-1, 0].copy(), C[1:, 0, 1:].copy() if trace else None)


def nystrom_project(raw, anchors: AnchorSet, j: int | None = None) -> np.ndarray:
    """``(K_{Z_j Z_j} + eps I)^{-1/2} raw`` (``raw`` may carry leading axes)."""
    S = anchors.inv_sqrt(j).result
    return np.asarray(raw, dtype=np.float64) @ S


def pool(raw, anchors: AnchorSet, mode: PoolingMode) -> np.ndarray:
    """Pool one sequence.

    For ``mean``/``max`` pass the final raw state (``q``-vector) of the sum or
    max recursion; it is projected.  For ``gmp`` pass the ``(m, q)`` raw
    end-anchored prefix trace; the result solves
    ``min_psi ||Psi^T psi - 1||^2 + gamma ||psi||^2`` over the projected trace.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if mode.kind != "gmp":
        return nystrom_project(raw, anchors)
    if not np.any(raw):
        raise DegenerateTrace("prefix trace is identically zero")
    Psi = nystrom_project(raw, anchors).T
    return ridge_solve(Psi, mode.gamma)


def gmp_closed_form(raw_trace, anchors: AnchorSet, gamma: float) -> np.ndarray:
    """``A^{1/2} (K_ZX K_ZX^T + gamma A)^{-1} K_ZX 1`` with ``A = K_ZZ + eps I``."""
    KZX = np.asarray(raw_trace, dtype=np.float64).T
    cache = anchors.inv_sqrt()
    A = anchor_gram(anchors) + cache.epsilon * np.eye(anchors.q)
    U, s = cache.eig.U, np.sqrt(cache.shifted)
    A_half = (U * s) @ U.T
    return A_half @ np.linalg.solve(KZX @ KZX.T + gamma * A, KZX.sum(axis=1))


# --------------------------------------------------------------------------
# model


@dataclass
class RknModel:
    """Stack of anchor sets, pooling of the last layer, and a linear read-out.

    ``W`` is ``(q,)`` for binary/regression tasks (score ``F @ W + bias``) or
    ``(q, C)`` for multiclass.  ``feat_mean``/``feat_std`` standardize the
    pooled features when set (unsupervised mode).
    """

    layers: list
    pooling: PoolingMode = field(default_factory=PoolingMode)
    W: np.ndarray | None = None
    bias: np.ndarray | float = 0.0
    feat_mean: np.ndarray | None = None
    feat_std: np.ndarray | None = None
    encoder_id: str = "onehot:ACGT"
    task: str = "binary"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.layers:
            raise DimensionMismatch("a model needs at least one layer")
        for lower, upper in zip(self.layers, self.layers[1:]):
            if upper.dim != lower.q:
                raise DimensionMismatch(
                    f"layer {upper.layer_index} motif dimension {upper.dim} != layer {lower.layer_index} width {lower.q}"
                )
        if self.W is not None and np.shape(self.W)[0] != self.out_dim:
            raise DimensionMismatch(f"linear input {np.shape(self.W)[0]} != feature width {self.out_dim}")

    @property
    def out_dim(self) -> int:
        return self.layers[-1].q

    def standardize(self, F):
        if self.feat_mean is None:
            return F
        return (F - self.feat_mean) / self.feat_std

    def scores(self, F):
        if self.W is None:
            raise RKNError("model has no linear layer; fit it first")
        return self.standardize(F) @ self.W + self.bias


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"non-finite values in {what}")


def pad_batch(seqs):
    """Left-pad ``(m_i, d)`` arrays with zero rows to a common length."""
    lengths = [len(s) for s in seqs]
    m = max(lengths) if lengths else 0
    d = seqs[0].shape[1] if seqs else 0
    X = np.zeros((len(seqs), m, d))
    for i, s in enumerate(seqs):
        if len(s):
            X[i, m - len(s):] = s
    return X


def _layer_mode(model: RknModel, index: int):
    """(recursion mode, output kind) for a layer: hidden layers emit end-anchored traces."""
    last = index == len(model.layers) - 1
    if not last:
        return "sum", "trace"
    kind = model.pooling.kind
    if kind == "gmp":
        return "sum", "trace"
    return ("max" if kind == "max" else "sum"), "final"


def forward_batch(model: RknModel, X, keep: bool = False, concat: bool = False):
    """Pooled (unstandardized) features for a padded batch ``X`` of shape ``(B, m, d)``.

    With ``keep=True`` a tape for :func:`backward_batch` is returned as well.
    ``concat=True`` returns ``[psi_1, ..., psi_k]`` of the last layer
    (mean/max pooling only, no tape).
    """
    if X.shape[2] != model.layers[0].dim:
        raise DimensionMismatch(f"input dimension {X.shape[2]} != motif dimension {model.layers[0].dim}")
    tape = []
    inp = X
    for index, layer in enumerate(model.layers):
        mode, out = _layer_mode(model, index)
        b, bcache = _bvectors(inp, layer, homogeneous=index > 0)
        C, H = _recurse(b, layer.lam, mode)
        _check_finite(C, f"layer {index} recursion")
        entry = {"b": b, "bcache": bcache, "C": C, "H": H, "mode": mode, "out": out}
        S = layer.inv_sqrt().result
        if out == "trace":
            R = C[1:, :, layer.k, :].transpose(1, 0, 2)  # (B, m, q): c_k[t]
            U = R @ S
            entry.update(R=R, U=U)
            if index < len(model.layers) - 1:
                inp = U
                tape.append(entry)
                continue
            gamma = model.pooling.gamma
            M = np.einsum("bti,btj->bij", U, U) + gamma * np.eye(layer.q)
            v = U.sum(axis=1)
            g = np.linalg.solve(M, v[..., None])[..., 0]
            entry.update(M=M, g=g)
            F = g
        else:
            final = C[-1, :, 1:] if layer.weighting.mode == END_ANCHORED else H[-1]
            if concat:
                return np.concatenate(
                    [final[:, j - 1] @ layer.inv_sqrt(j).result for j in range(1, layer.k + 1)], axis=1
                )
            R = final[:, -1]
            entry["R"] = R
            F = R @ S
        tape.append(entry)
        _check_finite(F, "pooled features")
        return (F, tape) if keep else F
    raise AssertionError("unreachable")


def backward_batch(model: RknModel, tape, gF, need_alpha: bool = False):
    """Reverse pass.  ``gF``: ``(B, q)`` gradient on the pooled features.

    Returns per-layer lists ``gZ`` (same shape as each ``Z``) and ``g_alpha``.
    """
    n_layers = len(model.layers)
    gZs = [None] * n_layers
    g_alphas = [0.0] * n_layers
    gU = None
    for index in range(n_layers - 1, -1, -1):
        layer = model.layers[index]
        entry = tape[index]
        cache = layer.inv_sqrt()
        S = cache.result
        m, B, k, q = entry["b"].shape
        g_c_final = g_h_final = g_trace = None
        if entry["out"] == "trace":
            U = entry["U"]
            if index == n_layers - 1:
                g, M = entry["g"], entry["M"]
                u = np.linalg.solve(M, gF[..., None])[..., 0]
                Ug = np.einsum("btq,bq->bt", U, g)
                Uu = np.einsum("btq,bq->bt", U, u)
                gU = u[:, None, :] - u[:, None, :] * Ug[..., None] - g[:, None, :] * Uu[..., None]
            gS = np.einsum("bti,btj->ij", gU, entry["R"])
            g_trace = (gU @ S).transpose(1, 0, 2)
        else:
            gS = gF.T @ entry["R"]
            gR = gF @ S
            gfinal = np.zeros((B, k, q))
            gfinal[:, -1] = gR
            if layer.weighting.mode == END_ANCHORED:
                g_c_final = gfinal
            else:
                g_h_final = gfinal
        gA = inverse_sqrt_adjoint(cache.eig, gS, cache.epsilon)
        gZ_gram, ga_gram = _gram_backward(gA, layer, layer.k)
        gb = _recurse_backward(entry["b"], entry["C"], entry["H"], layer.lam, entry["mode"],
                               g_c_final, g_h_final, g_trace)
        gZ_b, ga_b, gX = _bvectors_backward(gb, entry["bcache"], layer, need_x=index > 0)
        gZs[index] = gZ_gram + gZ_b
        g_alphas[index] = ga_gram + ga_b
        gU = gX
        if not np.all(np.isfinite(gZs[index])):
            raise NonFinite(f"non-finite motif gradient in layer {index}")
    return gZs, g_alphas


# --------------------------------------------------------------------------
# whole sequences / datasets


def multilayer_forward(x, model: RknModel) -> np.ndarray:
    """Pooled feature vector of one sequence (before standardization)."""
    X = _positions(x)[None]
    return forward_batch(model, X)[0]


def _chunks(order, lengths, batch_size):
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


def embed_dataset(sequences, model: RknModel, concat: bool = False, workers: int = 1,
                  batch_size: int = 64, standardize: bool = False) -> np.ndarray:
    """Feature matrix, one row per sequence in input order.

    Sequences are grouped by length into batches; ``workers > 1`` embeds
    batches on a thread pool.  Errors are collected for every sequence and
    reported together.
    """
    seqs = list(sequences)
    last = model.layers[-1]
    width = last.q * (last.k if concat else 1)
    if concat and model.pooling.kind == "gmp":
        raise RKNError("concatenated embeddings are defined for mean and max pooling only")
    if not seqs:
        return np.zeros((0, width))
    errors = []
    arrays = []
    for pos, s in enumerate(seqs):
        sid = getattr(s, "id", str(pos))
        try:
            arr = _positions(s)
            if arr.shape[1] != model.layers[0].dim:
                raise DimensionMismatch(f"dimension {arr.shape[1]} != {model.layers[0].dim}")
            arrays.append(arr)
        except RKNError as exc:
            errors.append(f"{sid}: {exc}")
            arrays.append(None)
    if errors:
        raise RKNError(f"{len(errors)} sequence(s) could not be embedded: " + "; ".join(errors))
    lengths = np.array([len(a) for a in arrays])
    order = np.argsort(lengths, kind="stable")
    batches = list(_chunks(order, lengths, batch_size))

    def run(idx):
        return forward_batch(model, pad_batch([arrays[i] for i in idx]), concat=concat)

    if workers > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(run, batches))
    else:
        results = [run(idx) for idx in batches]
    out = np.empty((len(seqs), width))
    for idx, F in zip(batches, results):
        out[idx] = F
    return model.standardize(out) if standardize else out
