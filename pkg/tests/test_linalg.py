import warnings

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given
from hypothesis import strategies as st

from rkn.exceptions import DegenerateInput, EigengapWarning, NonPositive, NotSymmetric, Singular
from rkn.linalg import (
    default_epsilon,
    inverse_sqrt,
    inverse_sqrt_adjoint,
    kmeans,
    kmeans_objective,
    ridge_solve,
    sym_eig,
)


def random_spd(rng, q, shift=1e-3):
    B = rng.normal(size=(q, q))
    return B @ B.T + shift * np.eye(q)


def test_sym_eig_identity():
    e = sym_eig(np.eye(3))
    np.testing.assert_allclose(e.delta, 1.0)
    np.testing.assert_allclose(np.abs(e.U.T @ e.U), np.eye(3), atol=1e-12)


def test_sym_eig_descending():
    np.testing.assert_allclose(sym_eig(np.diag([1.0, 4.0])).delta, [4.0, 1.0])


def test_sym_eig_reconstruction(rng):
    A = random_spd(rng, 8)
    e = sym_eig(A)
    assert np.max(np.abs(e.U.T @ e.U - np.eye(8))) <= 1e-8
    assert np.max(np.abs(e.reconstruct() - A)) <= 1e-8 * np.max(np.abs(A))


def test_sym_eig_rejects_asymmetric():
    with pytest.raises(NotSymmetric):
        sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_inverse_sqrt_examples():
    np.testing.assert_allclose(inverse_sqrt(np.eye(3), 0.0).result, np.eye(3))
    np.testing.assert_allclose(inverse_sqrt(np.diag([4.0, 9.0]), 0.0).result, np.diag([0.5, 1 / 3]), atol=1e-15)


def test_inverse_sqrt_against_scipy(rng):
    A = random_spd(rng, 8)
    eps = 1e-4
    S = inverse_sqrt(A, eps).result
    ref = np.linalg.inv(scipy.linalg.sqrtm(A + eps * np.eye(8)).real)
    np.testing.assert_allclose(S, ref, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(S @ S @ (A + eps * np.eye(8)), np.eye(8), atol=1e-6)
    assert np.max(np.abs(S - S.T)) <= 1e-10
    assert np.max(np.abs(S @ A - A @ S)) <= 1e-8 * np.max(np.abs(A))


def test_inverse_sqrt_non_positive():
    with pytest.raises(NonPositive):
        inverse_sqrt(np.diag([1.0, -1.0]), 0.5)


def test_default_epsilon():
    assert default_epsilon(np.diag([2.0, 4.0])) == pytest.approx(3e-6)


@pytest.mark.filterwarnings("ignore::rkn.exceptions.EigengapWarning")
def test_adjoint_identity_closed_form(rng):
    Bbar = rng.normal(size=(4, 4))
    Abar = inverse_sqrt_adjoint(sym_eig(np.eye(4)), Bbar)
    np.testing.assert_allclose(Abar, -0.5 * (Bbar + Bbar.T) / 2, atol=1e-12)


def test_adjoint_diagonal_example():
    Bbar = np.zeros((2, 2))
    Bbar[0, 0] = 1.0
    Abar = inverse_sqrt_adjoint(sym_eig(np.diag([1.0, 4.0])), Bbar)
    assert Abar[0, 0] == pytest.approx(-0.5)
    assert Abar[1, 1] == pytest.approx(0.0, abs=1e-15)


def fd_check(A, Bbar, dA, eps=0.0, h=1e-6):
    plus = inverse_sqrt(A + h * dA, eps).result
    minus = inverse_sqrt(A - h * dA, eps).result
    fd = np.sum(Bbar * (plus - minus)) / (2 * h)
    an = np.sum(inverse_sqrt_adjoint(sym_eig(A), Bbar, eps) * dA)
    return fd, an


def test_adjoint_finite_differences(rng):
    A = random_spd(rng, 5, shift=0.5)
    Bbar = rng.normal(size=(5, 5))
    dA = rng.normal(size=(5, 5))
    dA = dA + dA.T
    fd, an = fd_check(A, Bbar, dA)
    scale = np.linalg.norm(Bbar) * np.linalg.norm(dA)
    assert abs(fd - an) <= 1e-5 * scale


def test_adjoint_with_epsilon(rng):
    A = random_spd(rng, 4, shift=0.2)
    Bbar, dA = rng.normal(size=(4, 4)), np.eye(4) + 0.1
    fd, an = fd_check(A, Bbar, dA, eps=0.3)
    assert an == pytest.approx(fd, rel=1e-6)


def test_adjoint_warns_on_degenerate_spectrum(rng):
    with pytest.warns(EigengapWarning):
        adj = inverse_sqrt_adjoint(sym_eig(np.eye(3)), rng.normal(size=(3, 3)))
    assert np.all(np.isfinite(adj))


def test_ridge_examples(rng):
    np.testing.assert_allclose(ridge_solve(np.eye(4), 0.0), np.ones(4))
    Psi = rng.normal(size=(6, 20))
    base = np.linalg.norm(ridge_solve(Psi, 1.0))
    assert np.linalg.norm(ridge_solve(Psi, 1e9)) <= 1e-6 * base
    rhs = rng.normal(size=20)
    sol = ridge_solve(Psi, 0.1, rhs)
    assert np.linalg.norm((Psi @ Psi.T + 0.1 * np.eye(6)) @ sol - Psi @ rhs) <= 1e-8


def test_ridge_singular():
    with pytest.raises(Singular):
        ridge_solve(np.zeros((3, 5)), 0.0)


def test_kmeans_q_equals_n(rng):
    P = rng.normal(size=(6, 3))
    C = kmeans(P, 6, seed=1)
    assert kmeans_objective(P, C) == pytest.approx(0.0, abs=1e-12)
    assert sorted(map(tuple, C)) == sorted(map(tuple, P))


def test_kmeans_two_blobs(rng):
    n, sigma = 200, 0.1
    a = rng.normal(size=(n, 2)) * sigma + [5, 0]
    b = rng.normal(size=(n, 2)) * sigma + [-5, 0]
    C = kmeans(np.vstack([a, b]), 2, seed=3)
    C = C[np.argsort(C[:, 0])]
    tol = 3 * sigma / np.sqrt(n) * 2
    np.testing.assert_allclose(C[0], b.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(C[1], a.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(C[0], [-5, 0], atol=tol)
    np.testing.assert_allclose(C[1], [5, 0], atol=tol)


@given(st.integers(0, 10_000), st.integers(1, 6))
def test_kmeans_monotone_and_permutation_invariant(seed, q):
    rng = np.random.default_rng(seed)
    P = rng.normal(size=(30, 3))
    C, hist = kmeans(P, q, seed=seed, return_history=True)
    assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))
    C2 = kmeans(P[rng.permutation(30)], q, seed=seed)
    np.testing.assert_array_equal(C, C2)


def test_kmeans_degenerate():
    with pytest.raises(DegenerateInput):
        kmeans(np.zeros((2, 3)), 3)


def test_kmeans_duplicate_points():
    P = np.array([[0.0, 0.0]] * 5 + [[1.0, 1.0]] * 5)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        C = kmeans(P, 3, seed=0)
    assert np.all(np.isfinite(C))
    assert kmeans_objective(P, C) == 0.0
