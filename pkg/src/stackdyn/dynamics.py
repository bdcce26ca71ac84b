"""Discrete learning dynamics: rules, schedules, noise, trajectories, lock-in."""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy.stats import binomtest

from . import kernels
from .errors import (
    ConditioningError,
    ConfigError,
    ContractError,
    FollowerNonConvergenceError,
    NumericalError,
    SingularFollowerHessianError,
)
from .linalg import SolveConfig, eig_dense, eig_extremal
from .operators import block_matrix, schur_complement
from .oracle import GameOracle, JointPoint, as_point, leader_total_gradient, omega

CHUNK = 4096

# ---------------------------------------------------------------- schedules


@dataclass(frozen=True)
class Schedule:
    """Step size ``gamma_k`` for ``k >= 1``.

    ``constant``: ``gamma``; ``polynomial``: ``gamma * k**-p``;
    ``exponential``: ``gamma * nu**k``.
    """

    kind: str = "constant"
    gamma: float = 0.1
    p: float = 0.0
    nu: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "polynomial", "exponential"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}", field="schedule.kind")
        if not self.gamma > 0:
            raise ConfigError("schedule gamma must be > 0", field="schedule.gamma")
        if self.p < 0:
            raise ConfigError("schedule exponent p must be >= 0", field="schedule.p")
        if not 0 < self.nu <= 1:
            raise ConfigError("schedule decay nu must lie in (0, 1]", field="schedule.nu")

    @classmethod
    def constant(cls, gamma: float) -> "Schedule":
        return cls("constant", gamma)

    @classmethod
    def polynomial(cls, gamma: float, p: float) -> "Schedule":
        return cls("polynomial", gamma, p=p)

    @classmethod
    def exponential(cls, gamma: float, nu: float) -> "Schedule":
        return cls("exponential", gamma, nu=nu)

    def values(self, k) -> np.ndarray:
        k = np.maximum(np.asarray(k, dtype=float), 1.0)
        if self.kind == "polynomial":
            return self.gamma * k ** (-self.p)
        if self.kind == "exponential":
            return self.gamma * np.exp(k * math.log(self.nu))
        return np.full(k.shape, self.gamma)

    def at(self, k: int) -> float:
        return float(self.values(np.array([k]))[0])

    def _normal_form(self) -> tuple[str, float]:
        if self.kind == "polynomial" and self.p > 0:
            return "polynomial", self.p
        if self.kind == "exponential" and self.nu < 1:
            return "exponential", self.nu
        return "constant", 0.0

    def to_json(self) -> dict:
        return {"kind": self.kind, "gamma": self.gamma, "p": self.p, "nu": self.nu}

    @classmethod
    def from_json(cls, d: dict) -> "Schedule":
        if not isinstance(d, dict):
            raise ConfigError("schedule must be an object", field="schedules")
        return cls(str(d.get("kind", "constant")), float(d.get("gamma", 0.1)), float(d.get("p", 0.0)), float(d.get("nu", 1.0)))


def two_timescale_ok(leader: Schedule, follower: Schedule) -> bool:
    """Whether ``gamma_1k / gamma_2k -> 0``, decided from the schedule kinds."""
    lk, lv = leader._normal_form()
    fk, fv = follower._normal_form()
    rank = {"constant": 0, "polynomial": 1, "exponential": 2}
    if lk == fk:
        if lk == "polynomial":
            return lv > fv
        if lk == "exponential":
            return lv < fv
        return False
    return rank[lk] > rank[fk]


# -------------------------------------------------------------------- noise


@dataclass(frozen=True)
class NoiseModel:
    kind: str = "none"
    sigma: tuple[float, float] = (0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "gaussian"):
            raise ConfigError(f"unknown noise kind {self.kind!r}", field="noise.kind")
        s = tuple(float(v) for v in np.broadcast_to(np.asarray(self.sigma, dtype=float), (2,)))
        if min(s) < 0:
            raise ConfigError("noise sigma must be >= 0", field="noise.sigma")
        object.__setattr__(self, "sigma", s)
        object.__setattr__(self, "seed", int(self.seed) & 0xFFFFFFFFFFFFFFFF)

    @property
    def active(self) -> bool:
        return self.kind == "gaussian" and max(self.sigma) > 0

    def generator(self, task_index: int = 0, replica: int | None = None) -> np.random.Generator:
        """Stream for the run (``replica=None``) or for Monte-Carlo replica ``r``.

        Splitting rule: ``SeedSequence(seed, spawn_key=(task_index, 0))`` for
        a run and ``(task_index, 1 + r)`` for replica ``r``.
        """
        sub = 0 if replica is None else 1 + int(replica)
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(int(task_index), sub)))

    def scale(self, dims) -> np.ndarray:
        return np.concatenate([np.full(dims.d1, self.sigma[0]), np.full(dims.d2, self.sigma[1])])

    def draw(self, rng: np.random.Generator, n: int, dims) -> np.ndarray:
        if not self.active:
            return np.zeros((n, dims.d))
        return rng.standard_normal((n, dims.d)) * self.scale(dims)

    def to_json(self) -> dict:
        return {"kind": self.kind, "sigma": list(self.sigma), "seed": self.seed}


# -------------------------------------------------------------------- rules


@dataclass(frozen=True)
class SimGrad:
    name = "simgrad"


@dataclass(frozen=True)
class Stackelberg:
    eta: float = 0.0
    solver: SolveConfig = field(default_factory=SolveConfig)
    name = "stackelberg"

    def __post_init__(self):
        if self.eta < 0:
            raise ConfigError("Stackelberg eta must be >= 0", field="rule.eta")


@dataclass(frozen=True)
class LOLA:
    name = "lola"


@dataclass(frozen=True)
class BestResponse:
    inner_tol: float = 1e-10
    inner_max_iters: int = 10_000
    inner_step: float = 0.1
    eta: float = 0.0
    name = "best_response"

    def __post_init__(self):
        if not self.inner_tol > 0:
            raise ConfigError("inner_tol must be > 0", field="rule.inner_tol")
        if self.inner_max_iters < 1:
            raise ConfigError("inner_max_iters must be >= 1", field="rule.inner_max_iters")
        if not self.inner_step > 0:
            raise ConfigError("inner_step must be > 0", field="rule.inner_step")


UpdateRule = Union[SimGrad, Stackelberg, LOLA, BestResponse]


def rule_to_json(rule: UpdateRule) -> dict:
    out = {"name": rule.name}
    if isinstance(rule, Stackelberg):
        out.update(eta=rule.eta, cg_iters=rule.solver.max_iters, cg_tol=rule.solver.tol)
    elif isinstance(rule, BestResponse):
        out.update(inner_tol=rule.inner_tol, inner_max_iters=rule.inner_max_iters, inner_step=rule.inner_step, eta=rule.eta)
    return out


def rule_from_json(d) -> UpdateRule:
    if isinstance(d, str):
        d = {"name": d}
    if not isinstance(d, dict) or "name" not in d:
        raise ConfigError("rule must name one of simgrad, stackelberg, lola, best_response", field="rule")
    name = d["name"]
    if name == "simgrad":
        return SimGrad()
    if name == "lola":
        return LOLA()
    if name == "stackelberg":
        return Stackelberg(float(d.get("eta", 0.0)), SolveConfig(int(d.get("cg_iters", 5)), float(d.get("cg_tol", 1e-10))))
    if name == "best_response":
        return BestResponse(
            float(d.get("inner_tol", 1e-10)), int(d.get("inner_max_iters", 10_000)), float(d.get("inner_step", 0.1)), float(d.get("eta", 0.0))
        )
    raise ConfigError(f"unknown rule {name!r}", field="rule.name")


def uses_hierarchical_field(rule: UpdateRule) -> bool:
    return isinstance(rule, (Stackelberg, BestResponse))


# --------------------------------------------------------------- run config


@dataclass(frozen=True, eq=False)
class RunConfig:
    rule: UpdateRule
    schedules: tuple[Schedule, Schedule]
    x0: JointPoint
    max_iters: int
    noise: NoiseModel = field(default_factory=NoiseModel)
    stop_grad_tol: float | None = None
    record_every: int = 1
    spectra_every: int | None = None
    spectra_k: int = 6
    task_index: int = 0
    fast_path: bool = True

    def __post_init__(self):
        if len(self.schedules) != 2:
            raise ConfigError("need one schedule per player", field="schedules")
        if self.max_iters < 0:
            raise ConfigError("max_iters must be >= 0", field="max_iters")
        if self.record_every < 1:
            raise ConfigError("record_every must be >= 1", field="record_every")
        if self.spectra_every is not None and self.spectra_every < 1:
            raise ConfigError("spectra_every must be >= 1", field="spectra_every")
        if isinstance(self.rule, Stackelberg) and self.noise.active and not self.two_timescale:
            warnings.warn(
                "Stackelberg rule with noise but the leader step does not vanish relative to the follower step",
                RuntimeWarning,
                stacklevel=3,
            )

    @property
    def two_timescale(self) -> bool:
        return two_timescale_ok(*self.schedules)

    @property
    def stop_tol(self) -> float:
        """Effective stopping tolerance; 0 disables it."""
        if self.stop_grad_tol is not None:
            return float(self.stop_grad_tol)
        return 0.0 if self.noise.active else 1e-8

    def tau(self, k) -> np.ndarray:
        return self.schedules[0].values(k) / self.schedules[1].values(k)


# --------------------------------------------------------------- trajectory


@dataclass(eq=False)
class Trajectory:
    dims: object
    k: np.ndarray
    X: np.ndarray
    f1: np.ndarray
    f2: np.ndarray
    grad_norm: np.ndarray
    tau: np.ndarray
    terminal_reason: str
    iterations: int
    x_final: JointPoint
    message: str = ""
    backend: str = "python"
    spectra: list[dict] = field(default_factory=list)
    metrics: dict[str, np.ndarray] = field(default_factory=dict)

    def iterations_to(self, thresholds: dict[str, float]) -> int | None:
        """First recorded ``k`` at which every named quantity is below its
        threshold (``grad_norm`` or any game metric), else ``None``."""
        cols = []
        for name, thr in sorted(thresholds.items()):
            vals = self.grad_norm if name == "grad_norm" else self.metrics.get(name)
            if vals is None:
                raise ContractError(f"trajectory has no metric {name!r}")
            cols.append(np.asarray(vals) < thr)
        hit = np.logical_and.reduce(cols) if cols else np.ones(len(self.k), dtype=bool)
        idx = np.flatnonzero(hit)
        return int(self.k[idx[0]]) if idx.size else None

    @property
    def final(self) -> JointPoint:
        return JointPoint.from_flat(self.X[-1], self.dims)

    @property
    def records(self) -> list[dict]:
        return [
            {
                "k": int(self.k[r]),
                "x": JointPoint.from_flat(self.X[r], self.dims),
                "f1": float(self.f1[r]),
                "f2": float(self.f2[r]),
                "grad_norm": float(self.grad_norm[r]),
                "tau_k": float(self.tau[r]),
            }
            for r in range(len(self.k))
        ]

    def header(self) -> list[str]:
        return (
            ["k"]
            + [f"x1_{i}" for i in range(self.dims.d1)]
            + [f"x2_{i}" for i in range(self.dims.d2)]
            + ["f1", "f2", "grad_norm", "tau"]
        )

    def to_csv_string(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        for r in range(len(self.k)):
            row = [str(int(self.k[r]))] + [repr(float(v)) for v in self.X[r]]
            row += [repr(float(self.f1[r])), repr(float(self.f2[r])), repr(float(self.grad_norm[r])), repr(float(self.tau[r]))]
            w.writerow(row)
        return buf.getvalue()

    def sidecar(self) -> dict:
        return {
            "terminal_reason": self.terminal_reason,
            "iterations": int(self.iterations),
            "records": int(len(self.k)),
            "x_final": self.x_final.to_list(),
            "message": self.message,
        }

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv_string())
        with open(str(path) + ".json", "w", encoding="utf-8") as fh:
            json.dump(self.sidecar(), fh, sort_keys=True, indent=2)
            fh.write("\n")


# ---------------------------------------------------------------- one step


def _follower_equilibrate(rule: BestResponse, oracle: GameOracle, x1: np.ndarray, x2: np.ndarray) -> tuple[np.ndarray, float]:
    x = JointPoint(x1, x2)
    g = oracle.grad(2, 2, x)
    res = float(np.linalg.norm(g))
    it = 0
    while res > rule.inner_tol:
        if it >= rule.inner_max_iters or not np.isfinite(res):
            raise FollowerNonConvergenceError(f"follower inner loop stalled at residual {res:.3e} after {it} steps", residual=res)
        x = JointPoint(x1, x.x2 - rule.inner_step * g)
        g = oracle.grad(2, 2, x)
        res = float(np.linalg.norm(g))
        it += 1
    return x.x2, res


def driving_field(rule: UpdateRule, oracle: GameOracle, x: JointPoint, k: int, schedules, state: dict | None = None) -> JointPoint:
    """The vector the rule descends at ``x`` on iteration ``k`` (before noise)."""
    if isinstance(rule, SimGrad):
        return omega(oracle, x)
    if isinstance(rule, LOLA):
        b = oracle.grad(1, 2, x)
        corr = oracle.sovp(2, 1, 2, x, b) if np.any(b) else 0.0
        g2 = schedules[1].at(k)
        return JointPoint(oracle.grad(1, 1, x) - g2 * corr, oracle.grad(2, 2, x))
    eta = rule.eta
    solver = rule.solver if isinstance(rule, Stackelberg) else SolveConfig(max_iters=oracle.dims.d2, tol=1e-12)
    if state is not None and state.get("warm") is not None:
        solver = solver.with_warm_start(state["warm"])
    lead, w = leader_total_gradient(oracle, x, eta, solver)
    if state is not None:
        state["warm"] = w
    return JointPoint(lead, oracle.grad(2, 2, x))


def step(rule: UpdateRule, oracle: GameOracle, x, k: int, schedules, noise_draw=None, state: dict | None = None) -> JointPoint:
    """One iteration ``x_k -> x_{k+1}`` using step sizes ``gamma_{i,k}`` (``k >= 1``).

    ``noise_draw`` is a joint vector added to the driving field.  For the
    best-response rule the follower is re-equilibrated before and after the
    leader moves, so the returned point lies on the reaction curve.
    """
    x = as_point(x, oracle.dims)
    g1, g2 = schedules[0].at(k), schedules[1].at(k)
    w = np.zeros(oracle.dims.d) if noise_draw is None else np.asarray(noise_draw, dtype=float).ravel()
    w1, w2 = w[: oracle.dims.d1], w[oracle.dims.d1 :]
    if isinstance(rule, BestResponse):
        x2, _ = _follower_equilibrate(rule, oracle, x.x1, x.x2)
        xe = JointPoint(x.x1, x2)
        lead, _ = leader_total_gradient(oracle, xe, rule.eta, SolveConfig(max_iters=oracle.dims.d2, tol=1e-12))
        x1 = x.x1 - g1 * (lead + w1)
        x2, _ = _follower_equilibrate(rule, oracle, x1, x2)
        out = JointPoint(x1, x2)
    else:
        F = driving_field(rule, oracle, x, k, schedules, state)
        out = JointPoint(x.x1 - g1 * (F.x1 + w1), x.x2 - g2 * (F.x2 + w2))
    if not out.is_finite():
        raise NumericalError("iterate became non-finite", partial=out)
    return out


def stop_field(rule: UpdateRule, oracle: GameOracle, x: JointPoint, state: dict | None = None) -> JointPoint:
    if uses_hierarchical_field(rule):
        return driving_field(rule, oracle, x, 1, None, state)
    return omega(oracle, x)


# ---------------------------------------------------------- affine fast path


def affine_system(rule: UpdateRule, oracle: GameOracle):
    """``(P, p, Q, q)`` of the rule's affine field for a quadratic game, or ``None``."""
    form = oracle.quadratic_form()
    if form is None or isinstance(rule, BestResponse):
        return None
    H1, g1, H2, g2 = form
    s1, s2 = oracle.dims.slice(1), oracle.dims.slice(2)
    P = np.vstack([H1[s1], H2[s2]])
    p = np.concatenate([g1[s1], g2[s2]])
    Q = np.zeros_like(P)
    q = np.zeros_like(p)
    C = H2[s2, s1]  # D21 f2
    if isinstance(rule, Stackelberg):
        Hf = H2[s2, s2] + rule.eta * np.eye(oracle.dims.d2)
        if not np.any(H1[s2]) and not np.any(g1[s2]):
            return P, p, Q, q
        if np.linalg.cond(Hf) > 1e12:
            raise SingularFollowerHessianError("follower Hessian is singular for the Stackelberg rule")
        P[s1] = H1[s1] - C.T @ np.linalg.solve(Hf, H1[s2])
        p[s1] = g1[s1] - C.T @ np.linalg.solve(Hf, g1[s2])
    elif isinstance(rule, LOLA):
        Q[s1] = C.T @ H1[s2]
        q[s1] = C.T @ g1[s2]
    return P, p, Q, q


def _record_metrics(oracle: GameOracle, X: np.ndarray) -> dict[str, np.ndarray]:
    if len(X) == 0 or not oracle.metrics(JointPoint.from_flat(X[0], oracle.dims)):
        return {}
    rows = [oracle.metrics(JointPoint.from_flat(z, oracle.dims)) for z in X]
    return {name: np.array([r[name] for r in rows]) for name in sorted(rows[0])}


def _costs_quadratic(form, X):
    H1, g1, H2, g2 = form
    f1 = 0.5 * np.einsum("ij,jk,ik->i", X, H1, X) + X @ g1
    f2 = 0.5 * np.einsum("ij,jk,ik->i", X, H2, X) + X @ g2
    return f1, f2


def _run_affine(config: RunConfig, oracle: GameOracle, system, use_numba: bool | None) -> Trajectory:
    P, p, Q, q = (np.ascontiguousarray(a, dtype=float) for a in system)
    dims = oracle.dims
    lola = isinstance(config.rule, LOLA)
    x = np.array(as_point(config.x0, dims).flat)
    n_rec_max = config.max_iters // config.record_every + 1
    rec_x = np.empty((n_rec_max, dims.d))
    rec_k = np.zeros(n_rec_max, dtype=np.int64)
    rec_g = np.empty(n_rec_max)
    rec_x[0] = x
    rec_g[0] = float(np.linalg.norm(P @ x + p))
    nrec = 1
    stop_tol = config.stop_tol
    rng = config.noise.generator(config.task_index)
    status = kernels.CONVERGED if (stop_tol > 0 and rec_g[0] < stop_tol) else kernels.CONTINUE
    done = 0
    while status == kernels.CONTINUE and done < config.max_iters:
        n = min(CHUNK, config.max_iters - done)
        ks = np.arange(done + 1, done + n + 1)
        gam1 = config.schedules[0].values(ks)
        gam2 = config.schedules[1].values(ks)
        noise = config.noise.draw(rng, n, dims)
        taken, nrec, status = kernels.rollout(
            x, P, p, Q, q, lola, gam1, gam2, noise, dims.d1, done, config.record_every, stop_tol, rec_x, rec_k, rec_g, nrec,
            use_numba=use_numba,
        )
        done += int(taken)
    reason = {kernels.CONVERGED: "converged", kernels.DIVERGED: "numerical_failure"}.get(int(status), "max_iters")
    X = rec_x[:nrec].copy()
    f1, f2 = _costs_quadratic(oracle.quadratic_form(), X)
    ks = rec_k[:nrec].copy()
    return Trajectory(
        dims=dims,
        k=ks,
        X=X,
        f1=f1,
        f2=f2,
        grad_norm=rec_g[:nrec].copy(),
        tau=config.tau(ks),
        terminal_reason=reason,
        iterations=done,
        x_final=JointPoint.from_flat(x, dims),
        message="iterate became non-finite" if reason == "numerical_failure" else "",
        backend=kernels.backend() if use_numba is None else ("numba" if use_numba else "numpy"),
        metrics=_record_metrics(oracle, X),
    )


# ------------------------------------------------------------------ spectra


def spectra_snapshot(oracle: GameOracle, x: JointPoint, eta: float, k: int) -> dict:
    """``k`` smallest and largest real eigenvalues of J, S1, D11 f1 and D22 f2."""
    from .operators import jacobian_simgrad
    from .linalg import materialize

    out = {}
    J = materialize(jacobian_simgrad(oracle, x))
    re = np.sort(eig_dense(J).eigenvalues.real)
    out["J"] = re
    for name, build in (
        ("S1", lambda: schur_complement(oracle, x, eta)),
        ("H1", lambda: _sym_map(block_matrix(oracle, x, 1, 1, 1))),
        ("H2", lambda: _sym_map(block_matrix(oracle, x, 2, 2, 2))),
    ):
        try:
            A = build()
            n = A.rows
            kk = min(k, n)
            lo = eig_extremal(A, kk, "smallest").eigenvalues.real
            hi = eig_extremal(A, kk, "largest").eigenvalues.real
            out[name] = np.unique(np.concatenate([lo, hi])) if 2 * kk >= n else np.concatenate([lo, hi])
        except SingularFollowerHessianError:
            out[name] = np.full(min(2 * k, oracle.dims.d1), np.nan)
    res = {}
    for name, vals in out.items():
        vals = np.sort(np.asarray(vals, dtype=float))
        kk = min(k, vals.size)
        res[name] = {"smallest": vals[:kk].tolist(), "largest": vals[::-1][:kk].tolist()}
    return res


def _sym_map(M):
    from .linalg import LinearMap

    return LinearMap.from_matrix(M, symmetric_hint=True)


# --------------------------------------------------------------------- run


def run(config: RunConfig, oracle: GameOracle, use_numba: bool | None = None) -> Trajectory:
    """Iterate ``config.rule`` from ``config.x0``.

    Records every ``record_every`` iterations (plus ``k = 0``), checking the
    stopping rule at those records.  Quadratic games without spectra requests
    use the compiled affine kernels; everything else runs the generic loop.
    Numerical failures end the run with a partial trajectory.
    """
    if isinstance(config.rule, BestResponse):
        return run_best_response(config, oracle)
    system = None
    if config.fast_path and config.spectra_every is None:
        try:
            system = affine_system(config.rule, oracle)
        except SingularFollowerHessianError:
            system = None
    if system is not None:
        return _run_affine(config, oracle, system, use_numba)
    return _run_generic(config, oracle)


def _run_generic(config: RunConfig, oracle: GameOracle) -> Trajectory:
    dims = oracle.dims
    rule = config.rule
    x = as_point(config.x0, dims)
    state: dict = {}
    stop_tol = config.stop_tol
    ks, xs, gs, spectra = [], [], [], []
    eta = getattr(rule, "eta", 0.0)
    reason, message = "max_iters", ""

    def record(k, x):
        g = float(np.linalg.norm(stop_field(rule, oracle, x, dict(state)).flat))
        ks.append(k)
        xs.append(x.flat)
        gs.append(g)
        return g

    def maybe_spectra(k, x):
        if config.spectra_every is not None and k % config.spectra_every == 0:
            spectra.append({"k": k, **spectra_snapshot(oracle, x, eta, config.spectra_k)})

    rng = config.noise.generator(config.task_index)
    done = 0
    try:
        g0 = record(0, x)
        maybe_spectra(0, x)
        if stop_tol > 0 and g0 < stop_tol:
            reason = "converged"
        noise = np.zeros((0, dims.d))
        while reason == "max_iters" and done < config.max_iters:
            if done % CHUNK == 0:
                noise = config.noise.draw(rng, min(CHUNK, config.max_iters - done), dims)
            k = done + 1
            x = step(rule, oracle, x, k, config.schedules, noise[done % CHUNK], state)
            done = k
            if k % config.record_every == 0:
                g = record(k, x)
                if stop_tol > 0 and g < stop_tol:
                    reason = "converged"
            maybe_spectra(k, x)
    except (NumericalError, FloatingPointError) as exc:
        if isinstance(exc, FollowerNonConvergenceError):
            raise
        reason, message = "numerical_failure", str(exc)
        state.clear()
    X = np.array(xs)
    pts = [JointPoint.from_flat(z, dims) for z in X]
    f1 = np.array([oracle.cost(1, pt) for pt in pts])
    f2 = np.array([oracle.cost(2, pt) for pt in pts])
    k_arr = np.array(ks, dtype=np.int64)
    return Trajectory(
        dims=dims,
        k=k_arr,
        X=X,
        f1=f1,
        f2=f2,
        grad_norm=np.array(gs),
        tau=config.tau(k_arr),
        terminal_reason=reason,
        iterations=done,
        x_final=x,
        message=message,
        backend="python",
        spectra=spectra,
        metrics=_record_metrics(oracle, X),
    )


def run_best_response(config: RunConfig, oracle: GameOracle) -> Trajectory:
    """Leader descends its total derivative while the follower plays a local best response.

    The follower's inner gradient loop must reach ``inner_tol`` at the first
    leader iterate and at every later one; a stall raises
    :class:`FollowerNonConvergenceError` carrying the last residual.
    """
    rule = config.rule
    if not isinstance(rule, BestResponse):
        raise ContractError("run_best_response needs a BestResponse rule")
    x0 = as_point(config.x0, oracle.dims)
    x2, _ = _follower_equilibrate(rule, oracle, x0.x1, x0.x2)
    cfg = RunConfig(
        rule=rule,
        schedules=config.schedules,
        x0=JointPoint(x0.x1, x2),
        max_iters=config.max_iters,
        noise=config.noise,
        stop_grad_tol=config.stop_grad_tol,
        record_every=config.record_every,
        spectra_every=config.spectra_every,
        spectra_k=config.spectra_k,
        task_index=config.task_index,
        fast_path=False,
    )
    return _run_generic(cfg, oracle)


# ------------------------------------------------------------------ lock-in


@dataclass(frozen=True, eq=False)
class LockInSpec:
    target: JointPoint
    epsilon: float
    n_bar: int
    q0: float
    replicas: int = 1000
    n0: int = 0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be > 0", field="lockin.epsilon")
        if not self.q0 > 0:
            raise ConfigError("q0 must be > 0", field="lockin.q0")
        if self.n0 < 0 or self.n_bar < self.n0:
            raise ConfigError("need 0 <= n0 <= n_bar", field="lockin.n_bar")
        if self.replicas < 1:
            raise ConfigError("replicas must be >= 1", field="lockin.replicas")


@dataclass
class LockInResult:
    epsilon: float
    p_hat: float
    ci_halfwidth: float
    ci_low: float
    ci_high: float
    n_locked: int
    n_conditioned: int

    def to_json(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "p_hat": self.p_hat,
            "ci_halfwidth": self.ci_halfwidth,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "n_locked": self.n_locked,
            "n_conditioned": self.n_conditioned,
        }


def wilson(successes: int, n: int) -> tuple[float, float]:
    ci = binomtest(int(successes), int(n)).proportion_ci(confidence_level=0.95, method="wilson")
    return float(ci.low), float(ci.high)


def _ball_starts(spec: LockInSpec, gens, d: int) -> np.ndarray:
    X = np.empty((len(gens), d))
    c = spec.target.flat
    for r, g in enumerate(gens):
        u = g.standard_normal(d)
        u /= np.linalg.norm(u)
        X[r] = c + spec.q0 * g.random() ** (1.0 / d) * u
    return X


def _lockin_deviations(config: RunConfig, oracle: GameOracle, spec: LockInSpec, use_numba: bool | None):
    """Per-replica (conditioned flag, max deviation from the target over ``[n_bar, max_iters]``)."""
    dims = oracle.dims
    if spec.target.dims != dims:
        raise ContractError("lock-in target does not match the game dimensions")
    R = spec.replicas
    gens = [config.noise.generator(config.task_index, r) for r in range(R)]
    X = _ball_starts(spec, gens, dims.d)
    xstar = spec.target.flat
    dev0 = np.linalg.norm(X - xstar, axis=1)
    cond = dev0 <= spec.q0 if spec.n0 == 0 else np.zeros(R, dtype=bool)
    maxdev = dev0.copy() if spec.n_bar == 0 else np.zeros(R)
    system = None
    if config.fast_path and not isinstance(config.rule, BestResponse):
        try:
            system = affine_system(config.rule, oracle)
        except SingularFollowerHessianError:
            system = None
    if system is not None:
        P, p, Q, q = (np.ascontiguousarray(a, dtype=float) for a in system)
        lola = isinstance(config.rule, LOLA)
        done = 0
        while done < config.max_iters:
            n = min(CHUNK // 4, config.max_iters - done)
            ks = np.arange(done + 1, done + n + 1)
            gam1 = config.schedules[0].values(ks)
            gam2 = config.schedules[1].values(ks)
            noise = np.stack([config.noise.draw(g, n, dims) for g in gens])
            kernels.lockin(
                X, P, p, Q, q, lola, gam1, gam2, noise, dims.d1, done, xstar, spec.n0, spec.q0, spec.n_bar, cond, maxdev,
                use_numba=use_numba,
            )
            done += n
        return cond, maxdev

    def one(r):
        x = JointPoint.from_flat(X[r], dims)
        c, m = bool(cond[r]), float(maxdev[r])
        state: dict = {}
        noise = np.zeros((0, dims.d))
        try:
            for k in range(1, config.max_iters + 1):
                if (k - 1) % CHUNK == 0:
                    noise = config.noise.draw(gens[r], min(CHUNK, config.max_iters - k + 1), dims)
                x = step(config.rule, oracle, x, k, config.schedules, noise[(k - 1) % CHUNK], state)
                dev = float(np.linalg.norm(x.flat - xstar))
                if k == spec.n0:
                    c = dev <= spec.q0
                if k >= spec.n_bar:
                    m = max(m, dev)
        except NumericalError:
            m = math.inf
        return c, m

    with ThreadPoolExecutor() as pool:
        results = list(pool.map(one, range(R)))
    return np.array([c for c, _ in results]), np.array([m for _, m in results])


def lockin_curve(config: RunConfig, oracle: GameOracle, spec: LockInSpec, epsilons, use_numba: bool | None = None) -> list[LockInResult]:
    """Lock-in estimates for several radii from one shared set of replicas.

    Sharing the replicas makes the events nested, so the estimates are
    monotone in the radius by construction.
    """
    cond, maxdev = _lockin_deviations(config, oracle, spec, use_numba)
    n = int(np.sum(cond))
    if n == 0:
        raise ConditioningError(f"no replica was inside the radius-{spec.q0} ball at iteration {spec.n0}")
    out = []
    for eps in epsilons:
        locked = int(np.sum(cond & (maxdev <= eps)))
        lo, hi = wilson(locked, n)
        out.append(LockInResult(float(eps), locked / n, 0.5 * (hi - lo), lo, hi, locked, n))
    return out


def monte_carlo_lockin(config: RunConfig, oracle: GameOracle, spec: LockInSpec, use_numba: bool | None = None) -> LockInResult:
    """Fraction of replicas, started uniformly in the ``q0``-ball around the
    target, that stay within ``epsilon`` of it for every iteration in
    ``[n_bar, max_iters]``, with a 95% Wilson interval."""
    return lockin_curve(config, oracle, spec, [spec.epsilon], use_numba)[0]
