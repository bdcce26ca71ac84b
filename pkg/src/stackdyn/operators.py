"""Game Jacobians and the leader Schur complement as operators."""

from __future__ import annotations

import numpy as np

from .errors import IndefiniteOperatorError, SingularFollowerHessianError, SizeError
from .linalg import LinearMap, SolveConfig, cg_solve, dense_cap, materialize
from .oracle import BlockDims, GameOracle, JointPoint, as_point, omega_stackelberg


def block_operator(oracle: GameOracle, x: JointPoint, i: int, j: int, k: int) -> LinearMap:
    """``v -> D_jk f_i(x) v`` as a ``d_j x d_k`` map."""
    dims = oracle.dims
    return LinearMap(dims.size(j), dims.size(k), lambda v: oracle.sovp(i, j, k, x, v), symmetric_hint=(j == k))


def block_matrix(oracle: GameOracle, x: JointPoint, i: int, j: int, k: int) -> np.ndarray:
    M = materialize(block_operator(oracle, x, i, j, k))
    return 0.5 * (M + M.T) if j == k else M


def jacobian_simgrad(oracle: GameOracle, x) -> LinearMap:
    """Jacobian of the simultaneous field: ``[[D11 f1, D12 f1], [D21 f2, D22 f2]]``."""
    x = as_point(x, oracle.dims)
    dims = oracle.dims

    def apply(z):
        v = JointPoint.from_flat(z, dims)
        top = oracle.sovp(1, 1, 1, x, v.x1) + oracle.sovp(1, 1, 2, x, v.x2)
        bot = oracle.sovp(2, 2, 1, x, v.x1) + oracle.sovp(2, 2, 2, x, v.x2)
        return np.concatenate([top, bot])

    return LinearMap(dims.d, dims.d, apply, symmetric_hint=False)


def follower_solver(oracle: GameOracle, x: JointPoint, eta: float = 0.0):
    """Classification-grade solver for ``(D22 f2 + eta I) w = b``.

    Dense inverse when ``d2`` fits the cap (works for indefinite but nonsingular
    follower Hessians), otherwise CG with budget ``d2``.
    """
    d2 = oracle.dims.d2
    if d2 <= dense_cap():
        H = block_matrix(oracle, x, 2, 2, 2) + eta * np.eye(d2)
        sv = np.linalg.svd(H, compute_uv=False)
        scale = max(1.0, float(sv[0]))
        if sv[-1] <= 1e-12 * scale:
            raise SingularFollowerHessianError(
                f"follower Hessian is singular (smallest singular value {sv[-1]:.3e})", residual=float(sv[-1])
            )
        Hinv = np.linalg.inv(H)
        return lambda b: Hinv @ b
    H = LinearMap(d2, d2, lambda v: oracle.sovp(2, 2, 2, x, v) + eta * v, True)
    cfg = SolveConfig(max_iters=d2, tol=1e-12)

    def solve(b):
        try:
            w, res = cg_solve(H, b, cfg)
        except IndefiniteOperatorError as exc:
            raise SingularFollowerHessianError(f"follower solve broke down: {exc}") from exc
        if res > 1e-8 * max(1.0, np.linalg.norm(b)):
            raise SingularFollowerHessianError(f"follower solve residual {res:.3e}", residual=res, partial=w)
        return w

    return solve


def schur_complement(oracle: GameOracle, x, eta: float = 0.0) -> LinearMap:
    """``v -> D11 f1 v - D12 f1 (D22 f2 + eta I)^{-1} D21 f2 v``."""
    x = as_point(x, oracle.dims)
    solve = follower_solver(oracle, x, eta)
    d1 = oracle.dims.d1

    def apply(v):
        p = oracle.sovp(1, 1, 1, x, v)
        w = solve(oracle.sovp(2, 2, 1, x, v))
        return p - oracle.sovp(1, 1, 2, x, w)

    return LinearMap(d1, d1, apply, symmetric_hint=bool(oracle.zero_sum))


def fd_jacobian(field, z: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central-difference Jacobian of ``field: R^n -> R^n`` (step scaled by ``max(1, |z|_inf)``)."""
    z = np.asarray(z, dtype=float)
    h = step * max(1.0, float(np.max(np.abs(z))))
    n = z.size
    cols = []
    for a in range(n):
        e = np.zeros(n)
        e[a] = h
        cols.append((field(z + e) - field(z - e)) / (2 * h))
    return np.column_stack(cols)


def jacobian_stackelberg(oracle: GameOracle, x, eta: float = 0.0, fd_step: float = 1e-4) -> np.ndarray:
    """Dense central-difference Jacobian of the hierarchical field."""
    x = as_point(x, oracle.dims)
    dims: BlockDims = oracle.dims
    if dims.d > dense_cap():
        raise SizeError(f"Stackelberg Jacobian needs a dense {dims.d}x{dims.d} estimate, above cap {dense_cap()}")
    solver = SolveConfig(method="dense") if dims.d2 <= dense_cap() else SolveConfig(max_iters=dims.d2, tol=1e-12)

    def field(z):
        return omega_stackelberg(oracle, JointPoint.from_flat(z, dims), eta, solver).flat

    return fd_jacobian(field, x.flat, fd_step)
