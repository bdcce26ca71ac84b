"""Matrix-free linear algebra: operators, conjugate gradients, spectra."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import ContractError, IndefiniteOperatorError, NumericalError, SizeError

DEFAULT_DENSE_CAP = 64


def dense_cap() -> int:
    """Largest dimension that may be materialized (env ``STACKDYN_DENSE_CAP``)."""
    raw = os.environ.get("STACKDYN_DENSE_CAP")
    if raw is None or raw.strip() == "":
        return DEFAULT_DENSE_CAP
    cap = int(raw)
    if cap < 1:
        raise ContractError(f"STACKDYN_DENSE_CAP must be >= 1, got {cap}")
    return cap


@dataclass(frozen=True)
class LinearMap:
    """A ``rows x cols`` linear operator known only through ``apply``."""

    rows: int
    cols: int
    apply: Callable[[np.ndarray], np.ndarray]
    symmetric_hint: bool = False

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ContractError(f"LinearMap dims must be positive, got {self.rows}x{self.cols}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def __call__(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != (self.cols,):
            raise ContractError(f"expected vector of length {self.cols}, got shape {v.shape}")
        out = np.asarray(self.apply(v), dtype=float)
        if out.shape != (self.rows,):
            raise ContractError(f"operator returned shape {out.shape}, expected ({self.rows},)")
        return out

    def __matmul__(self, v):
        return self(v)

    @classmethod
    def from_matrix(cls, M, symmetric_hint: bool | None = None) -> "LinearMap":
        M = np.array(M, dtype=float, ndmin=2)
        if symmetric_hint is None:
            symmetric_hint = M.shape[0] == M.shape[1] and np.allclose(M, M.T, rtol=1e-12, atol=1e-14)
        return cls(M.shape[0], M.shape[1], lambda v: M @ v, symmetric_hint)


@dataclass(frozen=True)
class SolveConfig:
    """Settings for the follower linear solve.

    ``method='cg'`` runs at most ``max_iters`` conjugate-gradient steps from
    ``warm_start``; ``method='dense'`` materializes and factorizes (exact, for
    classification and small problems).
    """

    max_iters: int = 5
    tol: float = 1e-10
    warm_start: np.ndarray | None = field(default=None, compare=False)
    method: str = "cg"

    def __post_init__(self):
        if self.max_iters < 1:
            raise ContractError("SolveConfig.max_iters must be >= 1")
        if self.tol <= 0:
            raise ContractError("SolveConfig.tol must be > 0")
        if self.method not in ("cg", "dense"):
            raise ContractError(f"unknown solve method {self.method!r}")

    def with_warm_start(self, x0) -> "SolveConfig":
        return replace(self, warm_start=None if x0 is None else np.array(x0, dtype=float))


def cg_solve(A: LinearMap, b, cfg: SolveConfig | None = None) -> tuple[np.ndarray, float]:
    """Conjugate gradients on a symmetric positive definite operator.

    Runs ``min(cfg.max_iters, A.rows)`` steps at most and stops early once
    ``||Ax - b|| <= cfg.tol * max(1, ||b||)``.  Returns the iterate and the
    true final residual norm.  Non-positive curvature raises
    :class:`IndefiniteOperatorError`.
    """
    cfg = cfg or SolveConfig()
    if A.rows != A.cols:
        raise ContractError(f"cg_solve needs a square operator, got {A.shape}")
    if not A.symmetric_hint:
        raise ContractError("cg_solve needs an operator flagged symmetric")
    b = np.asarray(b, dtype=float)
    if b.shape != (A.rows,):
        raise ContractError(f"rhs has shape {b.shape}, expected ({A.rows},)")

    x = np.zeros(A.rows) if cfg.warm_start is None else np.array(cfg.warm_start, dtype=float)
    if x.shape != b.shape:
        x = np.zeros(A.rows)
    bnorm = np.linalg.norm(b)
    stop = cfg.tol * max(1.0, bnorm)
    r = b - A(x)
    p = r.copy()
    rr = r @ r
    for _ in range(min(cfg.max_iters, A.rows)):
        if np.sqrt(rr) <= stop:
            break
        Ap = A(p)
        curv = p @ Ap
        # curv <= ||p|| ||Ap||; a tiny ratio means p is (numerically) a null or negative direction
        if not np.isfinite(curv) or curv <= 1e-14 * np.linalg.norm(p) * np.linalg.norm(Ap):
            raise IndefiniteOperatorError(
                f"non-positive curvature {curv:.3e} in conjugate gradients",
                partial=x,
            )
        alpha = rr / curv
        x = x + alpha * p
        r = r - alpha * Ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
    residual = float(np.linalg.norm(A(x) - b))
    return x, residual


def materialize(A: LinearMap, cap: int | None = None) -> np.ndarray:
    """Dense matrix of ``A`` built column by column."""
    cap = dense_cap() if cap is None else cap
    if max(A.rows, A.cols) > cap:
        raise SizeError(f"operator {A.rows}x{A.cols} exceeds dense cap {cap}")
    M = np.empty((A.rows, A.cols))
    e = np.zeros(A.cols)
    for j in range(A.cols):
        e[j] = 1.0
        M[:, j] = A(e)
        e[j] = 0.0
    return M


@dataclass
class SpectrumReport:
    """Eigenvalues sorted by ascending real part, with backward-error residuals."""

    eigenvalues: np.ndarray
    k_requested: int
    method: str
    residuals: np.ndarray
    converged: bool = True

    @property
    def real(self) -> np.ndarray:
        return self.eigenvalues.real

    def to_json(self) -> dict:
        return {
            "eigs": [
                {"re": float(z.real), "im": float(z.imag), "residual": float(r)}
                for z, r in zip(self.eigenvalues, self.residuals)
            ],
            "method": self.method,
            "k": int(self.k_requested),
        }

    @classmethod
    def from_json(cls, data: dict) -> "SpectrumReport":
        eigs = np.array([complex(e["re"], e["im"]) for e in data["eigs"]], dtype=complex)
        res = np.array([e["residual"] for e in data["eigs"]], dtype=float)
        return cls(eigs, int(data["k"]), data["method"], res)


def _sort_spectrum(vals, res):
    order = np.lexsort((vals.imag, vals.real))
    return vals[order], res[order]


def eig_dense(M) -> SpectrumReport:
    """All eigenvalues of a small dense matrix.

    Symmetric inputs go through ``eigh`` (real spectrum); the backward error of
    each pair is ``||M v - lam v|| / (||M|| ||v||)``.
    """
    M = np.array(M, dtype=float, ndmin=2)
    if M.shape[0] != M.shape[1]:
        raise ContractError(f"eig_dense needs a square matrix, got {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ContractError("eig_dense: matrix has non-finite entries")
    n = M.shape[0]
    norm = np.linalg.norm(M, 2) if n else 0.0
    try:
        if np.allclose(M, M.T, rtol=1e-12, atol=1e-14 * max(1.0, norm)):
            vals, vecs = np.linalg.eigh(0.5 * (M + M.T))
            vals = vals.astype(complex)
        else:
            vals, vecs = np.linalg.eig(M)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise NumericalError(f"eigenvalue iteration failed: {exc}") from exc
    denom = max(norm, 1e-300) * np.linalg.norm(vecs, axis=0)
    res = np.linalg.norm(M @ vecs - vecs * vals, axis=0) / np.where(denom > 0, denom, 1.0)
    vals, res = _sort_spectrum(vals.astype(complex), res)
    return SpectrumReport(vals, n, "dense", res)


def lanczos(A: LinearMap, m: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray, float]:
    """``m`` Lanczos steps with full reorthogonalization.

    Returns the orthonormal basis ``Q`` (n x m'), the tridiagonal ``T``
    (m' x m') and the last off-diagonal ``beta``; ``m' < m`` on invariant
    subspace breakdown.
    """
    n = A.rows
    m = min(m, n)
    rng = np.random.default_rng(seed)
    Q = np.zeros((n, m))
    alphas = np.zeros(m)
    betas = np.zeros(m)
    q = rng.standard_normal(n)
    q /= np.linalg.norm(q)
    beta = 0.0
    q_prev = np.zeros(n)
    steps = m
    for i in range(m):
        Q[:, i] = q
        u = A(q)
        alpha = q @ u
        r = u - alpha * q - beta * q_prev
        r -= Q[:, : i + 1] @ (Q[:, : i + 1].T @ r)
        r -= Q[:, : i + 1] @ (Q[:, : i + 1].T @ r)
        alphas[i] = alpha
        beta = np.linalg.norm(r)
        betas[i] = beta
        if beta <= 1e-12 * max(1.0, abs(alpha)):
            steps = i + 1
            break
        q_prev, q = q, r / beta
    T = np.diag(alphas[:steps]) + np.diag(betas[: steps - 1], 1) + np.diag(betas[: steps - 1], -1)
    return Q[:, :steps], T, float(betas[steps - 1]) if steps == m else 0.0


def eig_extremal(
    A: LinearMap,
    k: int,
    which: str = "smallest",
    method: str = "auto",
    cap: int | None = None,
    tol: float = 1e-10,
    max_steps: int | None = None,
    seed: int = 0,
) -> SpectrumReport:
    """``k`` extremal eigenvalues of a symmetric operator.

    ``method='auto'`` uses a dense solve when the operator fits under the
    dense cap and Lanczos otherwise.  Lanczos grows its Krylov space until the
    Ritz residual estimates drop below ``tol * max(1, |theta|)`` or the step
    budget is spent; in the latter case the report has ``converged=False``.
    """
    if not A.symmetric_hint or A.rows != A.cols:
        raise ContractError("eig_extremal needs a square operator flagged symmetric")
    if which not in ("smallest", "largest"):
        raise ContractError(f"which must be 'smallest' or 'largest', got {which!r}")
    n = A.rows
    if not 1 <= k <= n:
        raise ContractError(f"k must lie in [1, {n}], got {k}")
    cap = dense_cap() if cap is None else cap
    if method == "auto":
        method = "dense" if n <= cap else "iterative"

    if method == "dense":
        rep = eig_dense(materialize(A, cap=max(cap, n)))
        sl = slice(0, k) if which == "smallest" else slice(n - k, n)
        return SpectrumReport(rep.eigenvalues[sl], k, "dense", rep.residuals[sl])

    max_steps = n if max_steps is None else min(max_steps, n)
    m = min(max(2 * k + 10, 30), max_steps)
    while True:
        Q, T, beta = lanczos(A, m, seed=seed)
        theta, S = np.linalg.eigh(T)
        resid = np.abs(beta * S[-1, :])
        idx = np.arange(k) if which == "smallest" else np.arange(len(theta) - k, len(theta))
        idx = idx[idx >= 0]
        ok = np.all(resid[idx] <= tol * np.maximum(1.0, np.abs(theta[idx])))
        if ok or m >= max_steps or Q.shape[1] < m:
            break
        m = min(2 * m, max_steps)
    vals = theta[idx].astype(complex)
    scale = max(np.abs(theta).max(), 1e-300)
    rep = SpectrumReport(vals, k, "iterative", resid[idx] / scale, converged=bool(ok) or Q.shape[1] < m)
    if len(idx) < k:
        rep.converged = False
    return rep


def definiteness(eigs, scale: float | None = None, rel: float = 1e-6, approximate: bool = False) -> str:
    """Verdict ``'pd'``, ``'psd'`` (marginal band) or ``'indefinite'``.

    The zero threshold is ``rel * (1 + scale)``, widened 10x for
    finite-difference oracles; ``scale`` defaults to ``max |eig|``.
    """
    ev = np.real(np.asarray(eigs))
    if ev.size == 0:
        return "pd"
    if scale is None:
        scale = float(np.abs(ev).max())
    thr = zero_threshold(scale, rel, approximate)
    if ev.min() > thr:
        return "pd"
    if ev.min() >= -thr:
        return "psd"
    return "indefinite"


def zero_threshold(scale: float, rel: float = 1e-6, approximate: bool = False) -> float:
    return rel * (1.0 + scale) * (10.0 if approximate else 1.0)
