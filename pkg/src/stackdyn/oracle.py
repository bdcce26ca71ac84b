"""Game interface, the two driving vector fields, and finite-difference tools.

Players and blocks are indexed 1 (leader) and 2 (follower).  Second-order
information is only ever exposed as vector products:
``sovp(i, j, k, x, v)`` is ``(D_jk f_i)(x) v``, the derivative of the block
gradient ``D_j f_i`` along ``v`` in block ``k``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, EvaluationError, IndefiniteOperatorError, SingularFollowerHessianError
from .linalg import LinearMap, SolveConfig, cg_solve, dense_cap, materialize

BLOCKS = (1, 2)


@dataclass(frozen=True)
class BlockDims:
    d1: int
    d2: int

    def __post_init__(self):
        if int(self.d1) < 1 or int(self.d2) < 1:
            raise ContractError(f"block dimensions must be >= 1, got ({self.d1}, {self.d2})")

    @property
    def d(self) -> int:
        return self.d1 + self.d2

    def size(self, j: int) -> int:
        return self.d1 if j == 1 else self.d2

    def slice(self, j: int) -> slice:
        return slice(0, self.d1) if j == 1 else slice(self.d1, self.d)


@dataclass(frozen=True, eq=False)
class JointPoint:
    """A joint action ``(x1, x2)``; also used for block vectors such as ``omega(x)``."""

    x1: np.ndarray
    x2: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x1", np.atleast_1d(np.asarray(self.x1, dtype=float)).ravel())
        object.__setattr__(self, "x2", np.atleast_1d(np.asarray(self.x2, dtype=float)).ravel())

    @property
    def dims(self) -> BlockDims:
        return BlockDims(self.x1.size, self.x2.size)

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([self.x1, self.x2])

    def block(self, j: int) -> np.ndarray:
        return self.x1 if j == 1 else self.x2

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.x1)) and np.all(np.isfinite(self.x2)))

    @classmethod
    def from_flat(cls, z, dims: BlockDims) -> "JointPoint":
        z = np.asarray(z, dtype=float).ravel()
        if z.size != dims.d:
            raise ContractError(f"flat vector has length {z.size}, expected {dims.d}")
        return cls(z[: dims.d1], z[dims.d1 :])

    def to_list(self) -> list[list[float]]:
        return [self.x1.tolist(), self.x2.tolist()]

    def __eq__(self, other):
        if not isinstance(other, JointPoint):
            return NotImplemented
        return np.array_equal(self.x1, other.x1) and np.array_equal(self.x2, other.x2)

    def __repr__(self):
        return f"JointPoint(x1={self.x1.tolist()}, x2={self.x2.tolist()})"


def as_point(x, dims: BlockDims) -> JointPoint:
    """Coerce ``x`` (JointPoint, ``(x1, x2)`` pair or flat vector) to ``dims``."""
    if isinstance(x, JointPoint):
        p = x
    elif isinstance(x, (tuple, list)) and len(x) == 2 and not np.isscalar(x[0]):
        p = JointPoint(x[0], x[1])
    else:
        z = np.asarray(x, dtype=float).ravel()
        if z.size != dims.d:
            raise ContractError(f"point has length {z.size}, expected {dims.d}")
        p = JointPoint.from_flat(z, dims)
    if p.x1.size != dims.d1 or p.x2.size != dims.d2:
        raise ContractError(f"point blocks ({p.x1.size}, {p.x2.size}) do not match dims ({dims.d1}, {dims.d2})")
    if not p.is_finite():
        raise ContractError("point has non-finite entries")
    return p


@dataclass(frozen=True)
class FdConfig:
    step: float = 1e-5
    rel_tol: float = 1e-5
    abs_tol: float = 1e-6
    hess_step: float = 1e-4

    def __post_init__(self):
        if self.step <= 0 or self.hess_step <= 0:
            raise ContractError("finite-difference steps must be > 0")
        if self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ContractError("finite-difference tolerances must be > 0")


def _scaled_step(step: float, x: JointPoint) -> float:
    return step * max(1.0, float(np.max(np.abs(x.flat))))


def _perturb(x: JointPoint, k: int, dv) -> JointPoint:
    if k == 1:
        return JointPoint(x.x1 + dv, x.x2)
    return JointPoint(x.x1, x.x2 + dv)


class GameOracle:
    """Two-player game: costs, block gradients and second-order vector products.

    Subclasses implement :meth:`cost` and :meth:`grad`; :meth:`sovp` defaults
    to a central difference of :meth:`grad` (step ``fd_step`` scaled by
    ``max(1, |x|_inf)``).  Oracles are immutable once built.
    """

    dims: BlockDims
    approximate: bool = False
    zero_sum: bool = False
    periodic: bool = False
    fd_step: float = 1e-5

    def cost(self, i: int, x: JointPoint) -> float:
        raise NotImplementedError

    def grad(self, i: int, j: int, x: JointPoint) -> np.ndarray:
        raise NotImplementedError

    def sovp(self, i: int, j: int, k: int, x: JointPoint, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        vn = np.linalg.norm(v)
        if vn == 0.0:
            return np.zeros(self.dims.size(j))
        t = _scaled_step(self.fd_step, x) / vn
        gp = self.grad(i, j, _perturb(x, k, t * v))
        gm = self.grad(i, j, _perturb(x, k, -t * v))
        return (gp - gm) / (2.0 * t)

    def quadratic_form(self):
        """``(H1, g1, H2, g2)`` with ``f_i = x'H_i x/2 + g_i'x + c`` when the game is
        quadratic, else ``None``.  Enables the compiled affine dynamics kernels."""
        return None

    def metrics(self, x: JointPoint) -> dict[str, float]:
        """Game-specific convergence metrics (used by sweeps)."""
        return {}

    def sample_point(self, rng: np.random.Generator) -> JointPoint:
        """A random point from the game's natural domain."""
        return JointPoint(rng.standard_normal(self.dims.d1), rng.standard_normal(self.dims.d2))

    def wrap(self, z: np.ndarray) -> np.ndarray:
        """Canonical representative of a flat point (identity unless periodic)."""
        return z


def _checked(values: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise EvaluationError(f"{what} is not finite")
    return values


def omega(oracle: GameOracle, x) -> JointPoint:
    """Simultaneous-play field ``(D1 f1, D2 f2)``."""
    x = as_point(x, oracle.dims)
    return JointPoint(oracle.grad(1, 1, x), oracle.grad(2, 2, x))


def follower_hessian(oracle: GameOracle, x: JointPoint, eta: float = 0.0) -> LinearMap:
    d2 = oracle.dims.d2
    if eta:
        return LinearMap(d2, d2, lambda v: oracle.sovp(2, 2, 2, x, v) + eta * v, True)
    return LinearMap(d2, d2, lambda v: oracle.sovp(2, 2, 2, x, v), True)


def solve_follower(oracle: GameOracle, x: JointPoint, b, eta: float, solver: SolveConfig) -> tuple[np.ndarray, float]:
    """Solve ``(D2^2 f2 + eta I) w = b``.

    CG breakdown or (for ``eta == 0``) a residual above ``1e-6 max(1, |b|)``
    after the iteration budget raises :class:`SingularFollowerHessianError`.
    ``eta > 0`` solves never raise for budget exhaustion.
    """
    H = follower_hessian(oracle, x, eta)
    b = np.asarray(b, dtype=float)
    if solver.method == "dense":
        M = materialize(H, cap=max(dense_cap(), H.rows))
        M = 0.5 * (M + M.T)
        try:
            cond = np.linalg.cond(M)
            if not np.isfinite(cond) or cond > 1e12:
                raise np.linalg.LinAlgError(f"condition number {cond:.3e}")
            w = np.linalg.solve(M, b)
        except np.linalg.LinAlgError as exc:
            raise SingularFollowerHessianError(f"follower Hessian is singular: {exc}") from exc
        return w, float(np.linalg.norm(M @ w - b))
    try:
        w, res = cg_solve(H, b, solver)
    except IndefiniteOperatorError as exc:
        raise SingularFollowerHessianError(
            f"follower solve broke down (eta={eta}): {exc}", residual=float(np.linalg.norm(b))
        ) from exc
    if not np.isfinite(res) or (eta == 0 and res > 1e-6 * max(1.0, np.linalg.norm(b))):
        raise SingularFollowerHessianError(
            f"follower solve did not converge with eta=0 (residual {res:.3e})", residual=res, partial=w
        )
    return w, res


def leader_total_gradient(
    oracle: GameOracle, x: JointPoint, eta: float = 0.0, solver: SolveConfig | None = None
) -> tuple[np.ndarray, np.ndarray | None]:
    """``D1 f1 - (D21 f2)' (D2^2 f2 + eta I)^{-1} D2 f1`` and the solve iterate.

    The transpose is applied as ``D12 f2`` (symmetry of mixed partials), so a
    single follower solve is needed per evaluation.
    """
    solver = solver or SolveConfig()
    g11 = oracle.grad(1, 1, x)
    b = oracle.grad(1, 2, x)
    if not np.any(b):
        return g11, None
    w, _ = solve_follower(oracle, x, b, eta, solver)
    return g11 - oracle.sovp(2, 1, 2, x, w), w


def omega_stackelberg(oracle: GameOracle, x, eta: float = 0.0, solver: SolveConfig | None = None) -> JointPoint:
    """Hierarchical-play field ``(Df1, D2 f2)`` with optional regularization ``eta``."""
    if eta < 0:
        raise ContractError(f"eta must be >= 0, got {eta}")
    x = as_point(x, oracle.dims)
    lead, _ = leader_total_gradient(oracle, x, eta, solver)
    return JointPoint(lead, oracle.grad(2, 2, x))


@dataclass
class CheckReport:
    passed: bool
    max_rel_err: float
    max_abs_err: float
    entries: list[dict] = field(default_factory=list)


def _compare(analytic, approx, cfg: FdConfig) -> tuple[float, float, bool]:
    diff = float(np.linalg.norm(np.asarray(analytic) - np.asarray(approx)))
    scale = float(np.linalg.norm(approx))
    rel = diff / max(scale, cfg.abs_tol)
    return rel, diff, rel <= cfg.rel_tol or diff <= cfg.abs_tol


def _report(entries: list[dict]) -> CheckReport:
    return CheckReport(
        passed=all(e["passed"] for e in entries),
        max_rel_err=max((e["rel_err"] for e in entries), default=0.0),
        max_abs_err=max((e["abs_err"] for e in entries), default=0.0),
        entries=entries,
    )


def fd_grad_check(oracle: GameOracle, x, cfg: FdConfig | None = None) -> CheckReport:
    """Compare every block gradient with central differences of the cost."""
    cfg = cfg or FdConfig()
    x = as_point(x, oracle.dims)
    h = _scaled_step(cfg.step, x)
    entries = []
    for i in BLOCKS:
        for j in BLOCKS:
            n = oracle.dims.size(j)
            fd = np.empty(n)
            for a in range(n):
                e = np.zeros(n)
                e[a] = h
                fp = oracle.cost(i, _perturb(x, j, e))
                fm = oracle.cost(i, _perturb(x, j, -e))
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise EvaluationError(f"cost {i} is not finite near x")
                fd[a] = (fp - fm) / (2 * h)
            rel, diff, ok = _compare(oracle.grad(i, j, x), fd, cfg)
            entries.append({"cost": i, "block": j, "rel_err": rel, "abs_err": diff, "passed": ok})
    return _report(entries)


ALL_PAIRS = tuple((i, j, k) for i in BLOCKS for j in BLOCKS for k in BLOCKS)


def fd_sovp_check(oracle: GameOracle, x, v, cfg: FdConfig | None = None, pairs: Sequence[tuple[int, int, int]] = ALL_PAIRS) -> CheckReport:
    """Compare ``sovp(i, j, k, x, v_k)`` with central differences of ``grad(i, j)``.

    ``v`` is either a joint direction (block ``k`` is used for each pair) or,
    when every requested pair shares the same ``k``, a vector of length ``d_k``.
    """
    cfg = cfg or FdConfig()
    x = as_point(x, oracle.dims)
    if isinstance(v, JointPoint):
        vj = v
    else:
        v = np.atleast_1d(np.asarray(v, dtype=float))
        ks = {k for _, _, k in pairs}
        if v.size == oracle.dims.d:
            vj = JointPoint.from_flat(v, oracle.dims)
        elif len(ks) == 1 and v.size == oracle.dims.size(next(iter(ks))):
            k0 = next(iter(ks))
            vj = JointPoint(v, np.zeros(oracle.dims.d2)) if k0 == 1 else JointPoint(np.zeros(oracle.dims.d1), v)
        else:
            raise ContractError(f"direction of length {v.size} does not fit the requested pairs")
    h = _scaled_step(cfg.step, x)
    entries = []
    for i, j, k in pairs:
        vk = vj.block(k)
        vn = np.linalg.norm(vk)
        analytic = oracle.sovp(i, j, k, x, vk)
        if vn == 0:
            fd = np.zeros(oracle.dims.size(j))
        else:
            t = h / vn
            gp = oracle.grad(i, j, _perturb(x, k, t * vk))
            gm = oracle.grad(i, j, _perturb(x, k, -t * vk))
            if not (np.all(np.isfinite(gp)) and np.all(np.isfinite(gm))):
                raise EvaluationError(f"grad({i},{j}) is not finite near x")
            fd = (gp - gm) / (2 * t)
        rel, diff, ok = _compare(analytic, fd, cfg)
        entries.append({"cost": i, "pair": (j, k), "rel_err": rel, "abs_err": diff, "passed": ok})
    return _report(entries)


class FdOracle(GameOracle):
    """Oracle defined by costs alone; all derivatives are central differences.

    Flagged ``approximate`` so downstream definiteness tests widen their zero
    thresholds.  Mixed second derivatives use the four-point formula with
    step ``cfg.hess_step``.
    """

    approximate = True

    def __init__(self, costs: Sequence[Callable], dims: BlockDims, cfg: FdConfig | None = None, zero_sum: bool = False):
        if len(costs) != 2:
            raise ContractError("need exactly two cost functions")
        self._costs = tuple(costs)
        self.dims = dims
        self.cfg = cfg or FdConfig()
        self.zero_sum = zero_sum

    def cost(self, i, x):
        val = float(self._costs[i - 1](x.x1, x.x2))
        if not np.isfinite(val):
            raise EvaluationError(f"cost {i} is not finite")
        return val

    def grad(self, i, j, x):
        h = _scaled_step(self.cfg.step, x)
        n = self.dims.size(j)
        out = np.empty(n)
        for a in range(n):
            e = np.zeros(n)
            e[a] = h
            out[a] = (self.cost(i, _perturb(x, j, e)) - self.cost(i, _perturb(x, j, -e))) / (2 * h)
        return out

    def sovp(self, i, j, k, x, v):
        v = np.asarray(v, dtype=float)
        vn = np.linalg.norm(v)
        n = self.dims.size(j)
        if vn == 0:
            return np.zeros(n)
        h = _scaled_step(self.cfg.hess_step, x)
        u = v / vn
        out = np.empty(n)
        for a in range(n):
            e = np.zeros(n)
            e[a] = h
            acc = 0.0
            for sa, sb in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                p = _perturb(_perturb(x, j, sa * e), k, sb * h * u)
                acc += sa * sb * self.cost(i, p)
            out[a] = acc / (4 * h * h)
        return out * vn


def fd_oracle_from_costs(costs: Sequence[Callable], dims: BlockDims, cfg: FdConfig | None = None, zero_sum: bool = False) -> FdOracle:
    """Wrap ``(f1, f2)``, each called as ``f(x1, x2)``, into an approximate oracle."""
    return FdOracle(costs, dims, cfg, zero_sum)
