"""Dense symmetric linear algebra: inverse square root and its adjoint, ridge, k-means."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateInput, EigengapWarning, NoConvergence, NonPositive, NotSymmetric, Singular

__all__ = [
    "SymEig",
    "InvSqrtCache",
    "sym_eig",
    "default_epsilon",
    "inverse_sqrt",
    "inverse_sqrt_adjoint",
    "ridge_solve",
    "kmeans",
    "kmeans_objective",
]

SYMMETRY_TOL = 1e-8
EIGENGAP_WARN = 1e-8


@dataclass(frozen=True)
class SymEig:
    """``A = U diag(delta) U^T`` with eigenvalues sorted in descending order."""

    U: np.ndarray
    delta: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.delta) @ self.U.T


@dataclass(frozen=True)
class InvSqrtCache:
    eig: SymEig
    epsilon: float
    result: np.ndarray

    @property
    def shifted(self) -> np.ndarray:
        """Regularized eigenvalues ``delta + epsilon``."""
        return self.eig.delta + self.epsilon


def sym_eig(A) -> SymEig:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise NotSymmetric(f"expected a square matrix, got shape {A.shape}")
    scale = max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0
    if A.size and np.max(np.abs(A - A.T)) > SYMMETRY_TOL * scale:
        raise NotSymmetric(f"asymmetry {np.max(np.abs(A - A.T)):.3e} exceeds tolerance")
    try:
        delta, U = np.linalg.eigh(0.5 * (A + A.T))
    except np.linalg.LinAlgError as exc:
        raise NoConvergence(-1) from exc
    order = np.argsort(delta, kind="stable")[::-1]
    return SymEig(U[:, order], delta[order])


def default_epsilon(A) -> float:
    """``1e-6 * trace(A) / q``: the regularization used when none is given."""
    A = np.asarray(A)
    return 1e-6 * float(np.trace(A)) / A.shape[0]


def inverse_sqrt(A, epsilon=None, eig: SymEig | None = None) -> InvSqrtCache:
    """``(A + epsilon I)^{-1/2}`` through an eigendecomposition of ``A``."""
    if epsilon is None:
        epsilon = default_epsilon(A)
    if eig is None:
        eig = sym_eig(A)
    shifted = eig.delta + epsilon
    if shifted.size and shifted.min() <= 0:
        raise NonPositive(float(shifted.min()))
    result = (eig.U / np.sqrt(shifted)) @ eig.U.T
    return InvSqrtCache(eig, float(epsilon), 0.5 * (result + result.T))


def inverse_sqrt_adjoint(eig: SymEig, Bbar, epsilon: float = 0.0) -> np.ndarray:
    """Pull a gradient ``Bbar`` on ``(A + eps I)^{-1/2}`` back to ``A``.

    Returns ``Abar = -U (F o (U^T Bbar_sym U)) U^T`` with
    ``F_kl = 1 / (s_k s_l (s_k + s_l))`` and ``s = sqrt(delta + eps)``, so that
    ``<Bbar, d(A^{-1/2})> = <Abar, dA>`` for symmetric perturbations ``dA``.
    """
    shifted = eig.delta + epsilon
    if shifted.size and shifted.min() <= 0:
        raise NonPositive(float(shifted.min()))
    if shifted.size > 1 and np.min(np.abs(np.diff(eig.delta))) < EIGENGAP_WARN:
        warnings.warn("near-degenerate eigenvalues in inverse square root adjoint", EigengapWarning)
    Bbar = np.asarray(Bbar, dtype=np.float64)
    Bsym = 0.5 * (Bbar + Bbar.T)
    s = np.sqrt(shifted)
    F = 1.0 / (s[:, None] * s[None, :] * (s[:, None] + s[None, :]))
    U = eig.U
    Abar = -U @ (F * (U.T @ Bsym @ U)) @ U.T
    return 0.5 * (Abar + Abar.T)


def ridge_solve(Psi, gamma: float, rhs=None) -> np.ndarray:
    """Solve ``(Psi Psi^T + gamma I) w = Psi rhs``; ``rhs`` defaults to ones."""
    Psi = np.asarray(Psi, dtype=np.float64)
    q, n = Psi.shape
    rhs = np.ones(n) if rhs is None else np.asarray(rhs, dtype=np.float64)
    if gamma < 0:
        raise Singular("ridge parameter must be nonnegative")
    if gamma == 0 and np.linalg.matrix_rank(Psi) < q:
        raise Singular("Psi Psi^T is rank deficient and gamma = 0")
    M = Psi @ Psi.T + gamma * np.eye(q)
    try:
        return np.linalg.solve(M, Psi @ rhs)
    except np.linalg.LinAlgError as exc:
        raise Singular(str(exc)) from exc


def kmeans_objective(points, centroids) -> float:
    d2 = _sq_dists(points, centroids)
    return float(d2.min(axis=1).sum())


def _sq_dists(points, centroids):
    d2 = (
        np.einsum("ij,ij->i", points, points)[:, None]
        - 2.0 * points @ centroids.T
        + np.einsum("ij,ij->i", centroids, centroids)[None, :]
    )
    return np.maximum(d2, 0.0)


def kmeans(points, q: int, iters: int = 100, seed: int = 0, return_history: bool = False):
    """Lloyd's algorithm from a seeded k-means++ initialization.

    Seeding contract: points are first put in lexicographic order, then
    ``numpy.random.default_rng(seed)`` draws the first center uniformly and
    each later center with probability proportional to the squared distance
    to the nearest chosen center.  The result therefore does not depend on the
    input order of the points.  Clusters that become empty are re-seeded with
    the point farthest from its centroid.

    Returns the ``q x p`` centroids (and the per-iteration objective when
    ``return_history`` is set).
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if q < 1 or n < q:
        raise DegenerateInput(f"need n >= q >= 1 points, got n={n}, q={q}")
    order = np.lexsort(points.T[::-1])
    X = points[order]
    rng = np.random.default_rng(seed)

    centers = np.empty((q, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    closest = _sq_dists(X, centers[:1])[:, 0]
    for c in range(1, q):
        total = closest.sum()
        if total <= 0:
            # fewer distinct points than clusters so far: take the first unused index
            idx = c
        else:
            cum = np.cumsum(closest)
            idx = int(np.searchsorted(cum, rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[c] = X[idx]
        closest = np.minimum(closest, _sq_dists(X, centers[c:c + 1])[:, 0])

    history = []
    labels = None
    for _ in range(iters):
        d2 = _sq_dists(X, centers)
        new_labels = d2.argmin(axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=q)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, X)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        empty = np.flatnonzero(~nonempty)
        if empty.size:
            dist = d2[np.arange(n), labels]
            far = np.argsort(-dist, kind="stable")
            for c, idx in zip(empty, far):
                centers[c] = X[idx]
        history.append(kmeans_objective(X, centers))
    if not history:
        history.append(kmeans_objective(X, centers))
    if return_history:
        return centers, history
    return centers
