from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stackdyn import (
    CovarianceGan,
    JointPoint,
    LinearMap,
    SolveConfig,
    SpectrumReport,
    cg_solve,
    covariance_gan,
    duopoly_game,
    eig_dense,
    eig_extremal,
    jacobian_simgrad,
    materialize,
    scalar_quadratic,
    schur_complement,
)
from stackdyn.errors import ContractError, IndefiniteOperatorError, SizeError
from stackdyn.linalg import definiteness, dense_cap
from stackdyn.operators import block_operator
from stackdyn.oracle import follower_hessian


def counting(M):
    calls = []

    def apply(v):
        calls.append(1)
        return M @ v

    return LinearMap(M.shape[0], M.shape[1], apply, True), calls


def test_cg_identity_one_step():
    A, calls = counting(np.eye(5))
    b = np.arange(1.0, 6.0)
    x, res = cg_solve(A, b, SolveConfig(max_iters=50))
    np.testing.assert_array_equal(x, b)
    assert res == 0.0
    # initial residual, one step, final residual check
    assert len(calls) == 3


def test_cg_diag_two_steps():
    x, res = cg_solve(LinearMap.from_matrix(np.diag([1.0, 2.0])), np.array([2.0, 2.0]), SolveConfig(max_iters=2))
    np.testing.assert_allclose(x, [2.0, 1.0], atol=1e-14)
    assert res < 1e-12


def test_cg_regularized_gan_follower():
    eta = 5000.0
    gan = covariance_gan(CovarianceGan(np.eye(2), eta))
    x = JointPoint(np.ones(4), np.zeros(4))
    b = np.array([1.0, -2.0, 3.0, 0.5])
    sol, res = cg_solve(follower_hessian(gan, x), b, SolveConfig(max_iters=1))
    np.testing.assert_allclose(sol, b / eta, rtol=1e-15)
    assert res < 1e-15


def test_cg_rejects_indefinite():
    with pytest.raises(IndefiniteOperatorError):
        cg_solve(LinearMap.from_matrix(np.diag([1.0, -1.0])), np.array([1.0, 1.0]), SolveConfig(max_iters=5))


def test_cg_rejects_nonsymmetric_and_shape():
    with pytest.raises(ContractError):
        cg_solve(LinearMap.from_matrix(np.array([[1.0, 2.0], [0.0, 1.0]])), np.ones(2))
    with pytest.raises(ContractError):
        cg_solve(LinearMap.from_matrix(np.eye(2)), np.ones(3))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 12), seed=st.integers(0, 10_000))
def test_cg_terminates_in_rank_steps(n, seed):
    rng = np.random.default_rng(seed)
    R = rng.standard_normal((n, n))
    M = R @ R.T + n * np.eye(n)
    b = rng.standard_normal(n)
    x, res = cg_solve(LinearMap.from_matrix(M), b, SolveConfig(max_iters=n, tol=1e-13))
    np.testing.assert_allclose(M @ x, b, atol=1e-8 * (1 + np.linalg.norm(b)))


def test_materialize_examples():
    np.testing.assert_array_equal(materialize(LinearMap(2, 2, lambda v: 2 * v, True)), [[2.0, 0.0], [0.0, 2.0]])
    q = scalar_quadratic(1.0, 2.0, 1.0)
    x = JointPoint([0.3], [-0.7])
    np.testing.assert_array_equal(materialize(block_operator(q, x, 2, 2, 1)), [[-2.0]])
    np.testing.assert_array_equal(materialize(jacobian_simgrad(duopoly_game(), JointPoint([10.0], [20.0]))), [[2.0, 1.0], [1.0, 2.0]])


def test_materialize_cap(monkeypatch):
    monkeypatch.setenv("STACKDYN_DENSE_CAP", "3")
    assert dense_cap() == 3
    with pytest.raises(SizeError):
        materialize(LinearMap.from_matrix(np.eye(4)))
    assert materialize(LinearMap.from_matrix(np.eye(3))).shape == (3, 3)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_linear_map_is_linear(seed):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((4, 3))
    A = LinearMap.from_matrix(M)
    u, v = rng.standard_normal(3), rng.standard_normal(3)
    a, b = rng.standard_normal(2)
    np.testing.assert_allclose(A(a * u + b * v), a * A(u) + b * A(v), atol=1e-12)


def test_eig_dense_examples():
    np.testing.assert_allclose(eig_dense(np.eye(2)).eigenvalues, [1.0, 1.0])
    rep = eig_dense([[-1.0, 2.0], [-2.0, 2.0]])
    expect = np.array([0.5 - 0.5j * np.sqrt(7), 0.5 + 0.5j * np.sqrt(7)])
    np.testing.assert_allclose(rep.eigenvalues, expect, atol=1e-12)
    np.testing.assert_allclose(eig_dense([[2.0, 1.0], [1.0, 2.0]]).eigenvalues, [1.0, 3.0], atol=1e-14)
    assert rep.residuals.max() < 1e-12


def test_eig_dense_rejects_nonsquare_and_nan():
    with pytest.raises(ContractError):
        eig_dense(np.ones((2, 3)))
    with pytest.raises(ContractError):
        eig_dense([[np.nan, 0.0], [0.0, 1.0]])


def test_spectrum_report_roundtrip():
    rep = eig_dense([[-1.0, 2.0], [-2.0, 2.0]])
    back = SpectrumReport.from_json(json.loads(json.dumps(rep.to_json())))
    np.testing.assert_array_equal(back.eigenvalues, rep.eigenvalues)
    assert back.method == "dense" and back.k_requested == 2


def test_eig_extremal_examples():
    A = LinearMap(3, 3, lambda v: 1.0 * v, True)
    for which in ("smallest", "largest"):
        np.testing.assert_allclose(eig_extremal(A, 1, which).eigenvalues, [1.0])
    D = LinearMap.from_matrix(np.diag(np.arange(1.0, 11.0)))
    np.testing.assert_allclose(eig_extremal(D, 2, "smallest").eigenvalues, [1.0, 2.0], atol=1e-12)
    S = schur_complement(scalar_quadratic(1.0, 2.0, 1.0), JointPoint([0.0], [0.0]))
    np.testing.assert_allclose(eig_extremal(S, 1).eigenvalues, [5.0], atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(5, 40), seed=st.integers(0, 10_000), which=st.sampled_from(["smallest", "largest"]))
def test_lanczos_matches_dense(n, seed, which):
    rng = np.random.default_rng(seed)
    R = rng.standard_normal((n, n))
    M = 0.5 * (R + R.T)
    A = LinearMap.from_matrix(M)
    dense = eig_extremal(A, 2, which, method="dense")
    it = eig_extremal(A, 2, which, method="iterative", seed=seed)
    assert it.converged
    np.testing.assert_allclose(it.eigenvalues.real, dense.eigenvalues.real, atol=1e-7 * (1 + np.abs(M).max()))


def test_eig_extremal_contract():
    with pytest.raises(ContractError):
        eig_extremal(LinearMap.from_matrix(np.array([[1.0, 2.0], [0.0, 1.0]])), 1)
    with pytest.raises(ContractError):
        eig_extremal(LinearMap.from_matrix(np.eye(2)), 3)


def test_definiteness_verdicts():
    assert definiteness([1.0, 2.0]) == "pd"
    assert definiteness([0.0, 2.0]) == "psd"
    assert definiteness([-1e-3, 2.0]) == "indefinite"
    # the approximate band is ten times wider
    assert definiteness([-5e-6, 1.0]) == "indefinite"
    assert definiteness([-5e-6, 1.0], approximate=True) == "psd"
