"""Critical-point search and equilibrium classification.

A point is a differential Nash equilibrium when the simultaneous field
vanishes and both players' own Hessians are positive definite; it is a
differential Stackelberg equilibrium when the hierarchical field vanishes,
the leader's total second derivative is positive definite and so is the
follower's Hessian.  Stability of either dynamic means the spectrum of the
corresponding Jacobian lies strictly in the right half-plane.  All sign
tests use a relative zero band (see :func:`stackdyn.linalg.definiteness`);
eigenvalues inside the band set ``marginal`` instead of a verdict.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, PreconditionError, SingularFollowerHessianError
from .linalg import SolveConfig, SpectrumReport, definiteness, eig_dense, materialize, zero_threshold
from .operators import (
    block_matrix,
    block_operator,
    fd_jacobian,
    jacobian_simgrad,
    jacobian_stackelberg,
    schur_complement,
)
from .oracle import GameOracle, JointPoint, as_point, omega, omega_stackelberg

DEDUP_RADIUS = 1e-4


@dataclass
class CriticalPoint:
    x: JointPoint
    residual_sim: float
    residual_stack: float
    basin_seed: JointPoint

    def to_json(self) -> dict:
        return {
            "x": self.x.to_list(),
            "residual_sim": _num(self.residual_sim),
            "residual_stack": _num(self.residual_stack),
            "basin_seed": self.basin_seed.to_list(),
        }


def _num(v: float):
    v = float(v)
    return v if math.isfinite(v) else None


@dataclass
class Classification:
    x: JointPoint
    eta: float
    residual_sim: float
    residual_stack: float
    is_dne: bool
    is_dse: bool
    stable_simgrad: bool
    stable_stackelberg: bool
    non_nash_attractor: bool
    marginal: bool
    degenerate: bool
    verdicts: dict[str, str]
    spectra: dict[str, SpectrumReport] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "x": self.x.to_list(),
            "eta": self.eta,
            "residual_sim": _num(self.residual_sim),
            "residual_stack": _num(self.residual_stack),
            "is_dne": self.is_dne,
            "is_dse": self.is_dse,
            "stable_simgrad": self.stable_simgrad,
            "stable_stackelberg": self.stable_stackelberg,
            "non_nash_attractor": self.non_nash_attractor,
            "marginal": self.marginal,
            "degenerate": self.degenerate,
            "verdicts": dict(self.verdicts),
            "spectra": {k: v.to_json() for k, v in self.spectra.items()},
        }


def _half_plane(rep: SpectrumReport, scale: float, rel: float, approximate: bool) -> str:
    thr = zero_threshold(scale, rel, approximate)
    re = rep.eigenvalues.real
    if re.size == 0 or re.min() > thr:
        return "stable"
    if re.min() >= -thr:
        return "marginal"
    return "unstable"


def _sym_verdict(M: np.ndarray, rel: float, approximate: bool) -> tuple[str, SpectrumReport]:
    rep = eig_dense(0.5 * (M + M.T))
    return definiteness(rep.eigenvalues, None, rel, approximate), rep


def leader_second_derivative(oracle: GameOracle, x: JointPoint, eta: float, JS: np.ndarray | None = None) -> np.ndarray:
    """Leader's total second derivative used by the Stackelberg test.

    Zero-sum games: the Schur complement.  General-sum games: differentiate
    the hierarchical leader field along the reaction curve,
    ``J_S11 + J_S12 Dr`` with ``Dr = -(D22 f2)^{-1} D21 f2`` (``eta = 0``), or
    ``J_S11`` alone when the follower solve is regularized.
    """
    if oracle.zero_sum:
        return materialize(schur_complement(oracle, x, eta))
    d1 = oracle.dims.d1
    if JS is None:
        JS = jacobian_stackelberg(oracle, x, eta)
    L = JS[:d1, :d1]
    if eta == 0:
        H2 = block_matrix(oracle, x, 2, 2, 2)
        Dr = -np.linalg.solve(H2, block_matrix(oracle, x, 2, 2, 1))
        L = L + JS[:d1, d1:] @ Dr
    return L


def classify(oracle: GameOracle, x, eta: float = 0.0, tol_eig: float = 1e-6, crit_tol: float = 1e-6) -> Classification:
    """Classify ``x`` as Nash / Stackelberg / attractor of either dynamic."""
    x = as_point(x, oracle.dims)
    approx = bool(oracle.approximate)
    res_sim = float(np.linalg.norm(omega(oracle, x).flat))
    H1 = block_matrix(oracle, x, 1, 1, 1)
    H2 = block_matrix(oracle, x, 2, 2, 2)
    J = materialize(jacobian_simgrad(oracle, x))
    v_h1, s_h1 = _sym_verdict(H1, tol_eig, approx)
    v_h2, s_h2 = _sym_verdict(H2, tol_eig, approx)
    s_j = eig_dense(J)
    v_j = _half_plane(s_j, float(np.linalg.norm(J, 2)), tol_eig, approx)
    verdicts = {"H1": v_h1, "H2": v_h2, "J": v_j}
    spectra = {"J": s_j, "D11f1": s_h1, "D22f2": s_h2}

    degenerate = False
    try:
        res_stack = float(np.linalg.norm(omega_stackelberg(oracle, x, eta, SolveConfig(method="dense")).flat))
        JS = jacobian_stackelberg(oracle, x, eta)
        S1 = materialize(schur_complement(oracle, x, eta))
        spectra["S1"] = eig_dense(0.5 * (S1 + S1.T))
        L = S1 if oracle.zero_sum else leader_second_derivative(oracle, x, eta, JS)
        v_l, s_l = _sym_verdict(L, tol_eig, approx)
        if not oracle.zero_sum:
            spectra["leader"] = s_l
        s_js = eig_dense(JS)
        spectra["J_S"] = s_js
        # J_S is always a finite-difference estimate
        v_js = _half_plane(s_js, float(np.linalg.norm(JS, 2)), tol_eig, True)
        verdicts.update(leader=v_l, S1=definiteness(spectra["S1"].eigenvalues, None, tol_eig, approx), J_S=v_js)
    except SingularFollowerHessianError:
        degenerate = True
        res_stack = float("nan")
        v_l, v_js = "degenerate", "degenerate"
        verdicts.update(leader=v_l, S1="degenerate", J_S=v_js)

    is_dne = res_sim < crit_tol and v_h1 == "pd" and v_h2 == "pd"
    is_dse = (not degenerate) and res_stack < crit_tol and v_l == "pd" and v_h2 == "pd"
    stable_sim = v_j == "stable"
    stable_stack = v_js == "stable"
    marginal = degenerate or any(v in ("psd", "marginal") for v in verdicts.values())
    return Classification(
        x=x,
        eta=float(eta),
        residual_sim=res_sim,
        residual_stack=res_stack,
        is_dne=bool(is_dne),
        is_dse=bool(is_dse),
        stable_simgrad=bool(stable_sim),
        stable_stackelberg=bool(stable_stack),
        non_nash_attractor=bool(stable_sim and res_sim < crit_tol and not is_dne),
        marginal=bool(marginal),
        degenerate=degenerate,
        verdicts=verdicts,
        spectra=spectra,
    )


# ------------------------------------------------------------------ search


def _field_fn(oracle: GameOracle, field: str, eta: float):
    dims = oracle.dims
    if field == "sim":
        return lambda z: omega(oracle, JointPoint.from_flat(z, dims)).flat
    if field == "stackelberg":
        solver = SolveConfig(method="dense")
        return lambda z: omega_stackelberg(oracle, JointPoint.from_flat(z, dims), eta, solver).flat
    raise ContractError(f"field must be 'sim' or 'stackelberg', got {field!r}")


def _safe_norm(F, z) -> tuple[np.ndarray | None, float]:
    try:
        f = F(z)
    except SingularFollowerHessianError:
        return None, math.inf
    n = float(np.linalg.norm(f))
    return (f, n) if math.isfinite(n) else (None, math.inf)


def newton_solve(F, z0: np.ndarray, tol: float, max_iters: int = 100, wrap=None, fd_step: float = 1e-6):
    """Damped Newton with a finite-difference Jacobian and backtracking on ``|F|``."""
    z = np.array(z0, dtype=float)
    f, nf = _safe_norm(F, z)
    for _ in range(max_iters):
        if f is None or nf < tol:
            break
        try:
            Jm = fd_jacobian(F, z, fd_step)
        except SingularFollowerHessianError:
            return z, math.inf
        dz = np.linalg.lstsq(Jm, -f, rcond=None)[0]
        t = 1.0
        while t > 1e-10:
            zn = z + t * dz
            if wrap is not None:
                zn = wrap(zn)
            fn, nn = _safe_norm(F, zn)
            if nn < (1.0 - 1e-4 * t) * nf:
                break
            t *= 0.5
        else:
            break
        z, f, nf = zn, fn, nn
    return z, nf


def _inside(z, lo, hi) -> bool:
    slack = 1e-9 * (1.0 + np.abs(hi - lo))
    return bool(np.all(z >= lo - slack) and np.all(z <= hi + slack))


def _dist(a, b, periodic: bool) -> float:
    d = a - b
    if periodic:
        d = np.mod(d + np.pi, 2 * np.pi) - np.pi
    return float(np.linalg.norm(d))


def find_critical_points(
    oracle: GameOracle,
    field: str = "sim",
    region=None,
    n_starts: int = 64,
    tol: float = 1e-8,
    eta: float = 0.0,
    seed: int = 0,
    max_iters: int = 100,
) -> list[CriticalPoint]:
    """Multi-start damped Newton on ``field`` ('sim' or 'stackelberg').

    Starts are uniform in ``region = (lo, hi)`` (per-coordinate bounds).
    Converged points outside the region are dropped; survivors are sorted by
    coordinates and merged within a radius of 1e-4 (wrapped distance for
    periodic games).
    """
    dims = oracle.dims
    if region is None:
        raise ContractError("a search region (lo, hi) is required")
    lo = np.broadcast_to(np.asarray(region[0], dtype=float), (dims.d,)).copy()
    hi = np.broadcast_to(np.asarray(region[1], dtype=float), (dims.d,)).copy()
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)) and np.all(hi > lo)):
        raise ContractError("region must be a finite box with hi > lo")
    if n_starts < 1:
        raise ContractError("n_starts must be >= 1")
    F = _field_fn(oracle, field, eta)
    wrap = oracle.wrap if oracle.periodic else None
    starts = np.random.default_rng(seed).uniform(lo, hi, size=(n_starts, dims.d))

    def solve(z0):
        z, nf = newton_solve(F, z0, tol, max_iters, wrap)
        if wrap is not None:
            z = wrap(z)
        return z, nf

    with ThreadPoolExecutor() as pool:
        results = list(pool.map(solve, starts))
    found = [(z, z0) for (z, nf), z0 in zip(results, starts) if nf < tol and _inside(z, lo, hi)]
    found.sort(key=lambda t: tuple(np.round(t[0], 8)))
    kept: list[tuple[np.ndarray, np.ndarray]] = []
    for z, z0 in found:
        if all(_dist(z, k, oracle.periodic) > DEDUP_RADIUS for k, _ in kept):
            kept.append((z, z0))
    out = []
    for z, z0 in kept:
        x = JointPoint.from_flat(z, dims)
        rs = float(np.linalg.norm(omega(oracle, x).flat))
        try:
            rh = float(np.linalg.norm(omega_stackelberg(oracle, x, eta, SolveConfig(method="dense")).flat))
        except SingularFollowerHessianError:
            rh = float("nan")
        out.append(CriticalPoint(x, rs, rh, JointPoint.from_flat(z0, dims)))
    return out


# ---------------------------------------------------------------- theory checks


def _require_zero_sum(oracle: GameOracle, n: int = 10) -> None:
    if not oracle.zero_sum:
        raise PreconditionError("game is not flagged zero-sum", gate="zero_sum")
    rng = np.random.default_rng(20_200)
    for _ in range(n):
        p = oracle.sample_point(rng)
        f1, f2 = oracle.cost(1, p), oracle.cost(2, p)
        if abs(f1 + f2) > 1e-9 * (1.0 + abs(f1)):
            raise PreconditionError(f"costs do not sum to zero at {p}", gate="zero_sum")


def check_prop2(oracle: GameOracle, x, tol_eig: float = 1e-6, crit_tol: float = 1e-6) -> bool:
    """For a stable differential Nash point of a zero-sum game, report the Stackelberg verdict (expected true)."""
    _require_zero_sum(oracle)
    c = classify(oracle, x, 0.0, tol_eig, crit_tol)
    if not (c.is_dne and c.stable_simgrad):
        raise PreconditionError("point is not a stable differential Nash equilibrium", gate="stable_dne")
    return c.is_dse


@dataclass
class ConditionReport:
    kappa: float
    mu: list[float]
    lam: list[float]
    r_neg: int
    p_ker: int
    n: int
    margins: list[float]
    necessary_holds: bool
    structure_holds: bool | None = None
    sufficient_structure_holds: bool | None = None
    kappa_user: bool = False

    def to_json(self) -> dict:
        return {
            "kappa": self.kappa,
            "mu": list(self.mu),
            "lambda": list(self.lam),
            "r_neg": self.r_neg,
            "p_ker": self.p_ker,
            "n": self.n,
            "margins": [{"i": i + 1, "kappa2_lambda_plus_mu": m} for i, m in enumerate(self.margins)],
            "necessary_holds": self.necessary_holds,
            "structure_holds": self.structure_holds,
            "sufficient_structure_holds": self.sufficient_structure_holds,
            "kappa_user": self.kappa_user,
        }


def _attractor_gate(oracle, x, eta, tol_eig, crit_tol, allow_marginal: bool) -> Classification:
    _require_zero_sum(oracle)
    c = classify(oracle, x, eta, tol_eig, crit_tol)
    ok = c.non_nash_attractor or (
        allow_marginal and c.verdicts["J"] == "marginal" and c.residual_sim < crit_tol and not c.is_dne
    )
    if not ok:
        raise PreconditionError("point is not a non-Nash attractor of simultaneous play", gate="non_nash_attractor")
    if c.verdicts["H2"] != "pd":
        raise PreconditionError("follower Hessian is not positive definite", gate="follower_hessian")
    return c


def _spectral_conditions(oracle, x, kappa, tol_eig) -> ConditionReport:
    H1 = block_matrix(oracle, x, 1, 1, 1)
    H2 = block_matrix(oracle, x, 2, 2, 2)  # equals -D22 f1 in a zero-sum game
    C = block_matrix(oracle, x, 2, 2, 1)
    k_exact = float(np.linalg.norm(C, 2)) if C.size else 0.0
    k = k_exact if kappa is None else float(kappa)
    if kappa is not None and k < k_exact - 1e-12 * (1 + k_exact):
        raise ContractError(f"kappa={k} is below the coupling norm {k_exact}")
    mu = np.linalg.eigvalsh(H1)
    lam = np.linalg.eigvalsh(H2)[::-1]
    thr = zero_threshold(float(np.abs(mu).max()) if mu.size else 0.0, tol_eig, oracle.approximate)
    r = int(np.sum(mu < -thr))
    p = int(np.sum(np.abs(mu) <= thr))
    n = int(lam.size)
    idx = range(max(r - p, 0))
    margins = [float(k * k * lam[i] + mu[i]) for i in idx if i < n]
    holds = r <= n and all(m > 0 for m in margins)
    return ConditionReport(k, mu.tolist(), lam.tolist(), r, p, n, margins, bool(holds), kappa_user=kappa is not None)


def check_necessary_prop3(oracle: GameOracle, x, eta: float = 0.0, kappa: float | None = None, tol_eig: float = 1e-6, crit_tol: float = 1e-6) -> ConditionReport:
    """Necessary spectral conditions for a non-Nash attractor to be a Stackelberg equilibrium.

    With ``mu`` the ascending spectrum of the leader Hessian (``r`` negative,
    ``p`` zero eigenvalues) and ``lam`` the descending spectrum of the negated
    follower block, reports ``r <= n`` and ``kappa^2 lam_i + mu_i > 0`` for
    ``i = 1..r-p``.
    """
    x = as_point(x, oracle.dims)
    _attractor_gate(oracle, x, eta, tol_eig, crit_tol, allow_marginal=False)
    return _spectral_conditions(oracle, x, kappa, tol_eig)


def _clusters(vals: np.ndarray, tol: float) -> list[np.ndarray]:
    groups, cur = [], [0]
    for i in range(1, vals.size):
        if abs(vals[i] - vals[cur[-1]]) <= tol:
            cur.append(i)
        else:
            groups.append(np.array(cur))
            cur = [i]
    groups.append(np.array(cur))
    return groups


def coupling_structure(H1: np.ndarray, H2: np.ndarray, B: np.ndarray, structure_tol: float = 1e-8) -> bool:
    """Whether ``B`` maps each eigenspace of ``H1`` onto a single eigenspace of
    ``H2`` with full rank (a generalized diagonal in the eigenbases).

    Repeated eigenvalues make the bases non-unique, so the test runs on
    eigenspace blocks rather than individual vectors.
    """
    mu, W1 = np.linalg.eigh(H1)
    lam, W2 = np.linalg.eigh(H2)
    T = W1.T @ B @ W2
    bnorm = float(np.linalg.norm(B, 2)) if B.size else 0.0
    tol = structure_tol * (1.0 + bnorm)
    rows = _clusters(mu, structure_tol * (1.0 + float(np.abs(mu).max())))
    cols = _clusters(lam, structure_tol * (1.0 + float(np.abs(lam).max())))
    nz = np.array([[np.linalg.norm(T[np.ix_(a, b)]) > tol for b in cols] for a in rows])
    perm = bool(np.all(nz.sum(axis=0) <= 1) and np.all(nz.sum(axis=1) <= 1))
    sv = np.linalg.svd(B, compute_uv=False)
    full_rank = int(np.sum(sv > tol)) == min(B.shape)
    return perm and full_rank


def check_sufficient_prop4(
    oracle: GameOracle, x, structure_tol: float = 1e-8, eta: float = 0.0, kappa: float | None = None, tol_eig: float = 1e-6, crit_tol: float = 1e-6
) -> ConditionReport:
    """Sufficient structure: coupling diagonal in the Hessian eigenbases with
    nonzero entries, plus the spectral conditions of the necessary check.

    Marginal attractors pass the gate so that degenerate constructions reach
    the structure test.
    """
    x = as_point(x, oracle.dims)
    for i, j in ((1, 1), (2, 2)):
        M = materialize(block_operator(oracle, x, i, j, j))
        if np.linalg.norm(M - M.T) > 1e-8 * (1.0 + np.linalg.norm(M)):
            raise PreconditionError("Hessian blocks are not symmetric", gate="symmetric_blocks")
    _attractor_gate(oracle, x, eta, tol_eig, crit_tol, allow_marginal=True)
    rep = _spectral_conditions(oracle, x, kappa, tol_eig)
    H1 = block_matrix(oracle, x, 1, 1, 1)
    H2 = block_matrix(oracle, x, 2, 2, 2)
    B = block_matrix(oracle, x, 1, 1, 2)
    rep.structure_holds = coupling_structure(H1, H2, B, structure_tol)
    rep.sufficient_structure_holds = bool(rep.structure_holds and rep.necessary_holds)
    return rep


def check_corollary1(oracle: GameOracle, x, tol_eig: float = 1e-6, crit_tol: float = 1e-6) -> bool:
    """Scalar zero-sum non-Nash attractor with a convex follower: report the Stackelberg verdict (expected true)."""
    if oracle.dims.d1 != 1 or oracle.dims.d2 != 1:
        raise PreconditionError("both players must be scalar", gate="scalar")
    c = _attractor_gate(oracle, as_point(x, oracle.dims), 0.0, tol_eig, crit_tol, allow_marginal=False)
    return c.is_dse


def check_realizable(oracle: GameOracle, x, tol: float = 1e-8, eta: float = 0.0, tol_eig: float = 1e-6, crit_tol: float = 1e-6) -> dict:
    """Leader-Hessian-vanishing test and the resulting marginal stability of the hierarchical dynamics."""
    x = as_point(x, oracle.dims)
    res = float(np.linalg.norm(omega(oracle, x).flat))
    if res >= crit_tol:
        raise PreconditionError(f"point is not critical for simultaneous play (residual {res:.3e})", gate="critical")
    H1 = block_matrix(oracle, x, 1, 1, 1)
    h1 = float(np.linalg.norm(H1, 2))
    realizable = h1 < tol
    out = {"realizable": bool(realizable), "marginal_stack": False, "leader_hessian_norm": h1, "js_min_real": None}
    if realizable:
        v_h2, _ = _sym_verdict(block_matrix(oracle, x, 2, 2, 2), tol_eig, oracle.approximate)
        if v_h2 in ("pd", "psd"):
            try:
                JS = jacobian_stackelberg(oracle, x, eta)
            except SingularFollowerHessianError:
                return out
            rep = eig_dense(JS)
            out["js_min_real"] = float(rep.eigenvalues.real.min())
            out["marginal_stack"] = _half_plane(rep, float(np.linalg.norm(JS, 2)), tol_eig, True) in ("stable", "marginal")
    return out


def leader_cost_comparison(oracle: GameOracle, nash_points, stackelberg_points, tol: float = 0.0) -> dict:
    """Compare the leader's cost at Stackelberg points with its best Nash cost.

    Meaningful when the follower's reaction set is a singleton (the caller's
    responsibility).  A violation is a Stackelberg leader cost above the
    smallest Nash leader cost by more than ``tol``.
    """
    nash_points = [as_point(p.x if isinstance(p, (CriticalPoint, Classification)) else p, oracle.dims) for p in nash_points]
    stack_points = [as_point(p.x if isinstance(p, (CriticalPoint, Classification)) else p, oracle.dims) for p in stackelberg_points]
    if not nash_points or not stack_points:
        raise ContractError("need at least one Nash and one Stackelberg point")
    fn = [oracle.cost(1, p) for p in nash_points]
    fs = [oracle.cost(1, p) for p in stack_points]
    best = min(fn)
    violations = [i for i, f in enumerate(fs) if f > best + tol]
    return {
        "nash_leader_costs": fn,
        "stackelberg_leader_costs": fs,
        "nash_min": best,
        "violations": violations,
        "ok": not violations,
    }
