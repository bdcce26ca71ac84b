"""Benchmark games with analytic derivatives."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .oracle import BlockDims, GameOracle, JointPoint


class QuadraticGame(GameOracle):
    """``f_i(x) = x'H_i x / 2 + g_i'x + c_i`` on the joint vector ``x = (x1, x2)``.

    ``H_i`` are symmetric ``d x d`` matrices.  Derivative blocks are slices of
    ``H_i``; every field of a quadratic game is affine, which lets the
    dynamics module hand these games to the compiled kernels.
    """

    def __init__(self, H1, g1, H2, g2, dims: BlockDims, c=(0.0, 0.0), zero_sum: bool | None = None, name: str = "quadratic"):
        H = [np.array(H1, dtype=float), np.array(H2, dtype=float)]
        g = [np.array(g1, dtype=float).ravel(), np.array(g2, dtype=float).ravel()]
        for Hi, gi in zip(H, g):
            if Hi.shape != (dims.d, dims.d) or gi.shape != (dims.d,):
                raise ContractError(f"quadratic blocks do not match dims {dims}")
            if not np.allclose(Hi, Hi.T, rtol=0, atol=1e-12):
                raise ContractError("quadratic Hessians must be symmetric")
        self.H = (0.5 * (H[0] + H[0].T), 0.5 * (H[1] + H[1].T))
        self.g = tuple(g)
        self.c = (float(c[0]), float(c[1]))
        self.dims = dims
        if zero_sum is None:
            zero_sum = bool(np.array_equal(self.H[0], -self.H[1]) and np.array_equal(self.g[0], -self.g[1]) and self.c[0] == -self.c[1])
        self.zero_sum = zero_sum
        self.name = name

    def cost(self, i, x):
        z = x.flat
        return float(0.5 * z @ self.H[i - 1] @ z + self.g[i - 1] @ z + self.c[i - 1])

    def grad(self, i, j, x):
        s = self.dims.slice(j)
        return self.H[i - 1][s] @ x.flat + self.g[i - 1][s]

    def sovp(self, i, j, k, x, v):
        return self.H[i - 1][self.dims.slice(j), self.dims.slice(k)] @ np.asarray(v, dtype=float)

    def quadratic_form(self):
        return self.H[0], self.g[0], self.H[1], self.g[1]


def scalar_quadratic(a: float, b: float, c: float) -> QuadraticGame:
    """Zero-sum scalar game ``f = a x1^2/2 + b x1 x2 - c x2^2/2`` with ``(f1, f2) = (f, -f)``."""
    H = np.array([[a, b], [b, -c]], dtype=float)
    return QuadraticGame(H, np.zeros(2), -H, np.zeros(2), BlockDims(1, 1), zero_sum=True, name=f"Q({a},{b},{c})")


def zero_sum_quadratic(A, B, C, g1=None, g2=None) -> QuadraticGame:
    """Zero-sum game ``f = x1'A x1/2 + x1'B x2 + x2'C x2/2 + g1'x1 + g2'x2``, ``(f1, f2) = (f, -f)``."""
    A, B, C = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, C))
    d1, d2 = A.shape[0], C.shape[0]
    if B.shape != (d1, d2):
        raise ContractError(f"coupling block has shape {B.shape}, expected {(d1, d2)}")
    H = np.block([[A, B], [B.T, C]])
    g = np.concatenate([np.zeros(d1) if g1 is None else np.ravel(g1), np.zeros(d2) if g2 is None else np.ravel(g2)])
    return QuadraticGame(H, g, -H, -g, BlockDims(d1, d2), zero_sum=True)


@dataclass(frozen=True)
class DuopolyGame:
    A: float = 100.0
    c1: float = 5.0
    c2: float = 2.0

    def __post_init__(self):
        if not (self.A > self.c1 and self.A > self.c2):
            raise ConfigError(f"duopoly needs A > c1 and A > c2, got A={self.A}, c=({self.c1}, {self.c2})", field="A")


class DuopolyOracle(QuadraticGame):
    """Cournot duopoly on the branch ``P = A - q1 - q2``; costs are negated profits."""

    def __init__(self, params: DuopolyGame):
        self.params = params
        A, c1, c2 = params.A, params.c1, params.c2
        H1 = np.array([[2.0, 1.0], [1.0, 0.0]])
        H2 = np.array([[0.0, 1.0], [1.0, 2.0]])
        super().__init__(H1, [-(A - c1), 0.0], H2, [0.0, -(A - c2)], BlockDims(1, 1), zero_sum=False, name="duopoly")

    def cost(self, i, x):
        if x.x1[0] + x.x2[0] > self.params.A:
            warnings.warn("total quantity exceeds A; price is clipped to zero in the market model", RuntimeWarning, stacklevel=2)
        return super().cost(i, x)

    def profits(self, x: JointPoint) -> tuple[float, float]:
        return -self.cost(1, x), -self.cost(2, x)

    def sample_point(self, rng):
        q = rng.uniform(0.0, self.params.A / 2, size=2)
        return JointPoint(q[:1], q[1:])


def duopoly_game(params: DuopolyGame | None = None) -> DuopolyOracle:
    return DuopolyOracle(params or DuopolyGame())


def duopoly_equilibria(g: DuopolyGame) -> dict:
    """Closed-form Nash and Stackelberg (firm 1 leads) quantities and profits."""
    A, c1, c2 = g.A, g.c1, g.c2
    nash = JointPoint([(A + c2 - 2 * c1) / 3], [(A + c1 - 2 * c2) / 3])
    q1 = (A + c2 - 2 * c1) / 2
    stack = JointPoint([q1], [(A - q1 - c2) / 2])

    def profits(p: JointPoint):
        q1, q2 = float(p.x1[0]), float(p.x2[0])
        price = A - q1 - q2
        return ((price - c1) * q1, (price - c2) * q2)

    return {
        "nash": nash,
        "stackelberg": stack,
        "profits_nash": profits(nash),
        "profits_stackelberg": profits(stack),
    }


def _wrap_angle(z):
    # (-pi, pi]
    w = np.mod(np.asarray(z, dtype=float) + np.pi, 2 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


@dataclass(frozen=True)
class TorusGame:
    alpha: tuple[float, float] = (1.0, 1.3)
    phi: tuple[float, float] = (math.pi / 8, math.pi / 8)

    def __post_init__(self):
        if len(self.alpha) != 2 or len(self.phi) != 2:
            raise ConfigError("torus game needs two alphas and two phis", field="alpha")
        if min(self.alpha) <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}", field="alpha")


class TorusOracle(GameOracle):
    """Location game on the torus: ``f_i = -alpha_i cos(t_i - phi_i) + cos(t_i - t_other)``."""

    periodic = True

    def __init__(self, params: TorusGame):
        self.params = params
        self.dims = BlockDims(1, 1)

    def _own(self, i, x):
        t = (float(x.x1[0]), float(x.x2[0]))
        return t[i - 1], t[2 - i]

    def cost(self, i, x):
        own, other = self._own(i, x)
        a, p = self.params.alpha[i - 1], self.params.phi[i - 1]
        return -a * math.cos(own - p) + math.cos(own - other)

    def grad(self, i, j, x):
        own, other = self._own(i, x)
        a, p = self.params.alpha[i - 1], self.params.phi[i - 1]
        if j == i:
            return np.array([a * math.sin(own - p) - math.sin(own - other)])
        return np.array([math.sin(own - other)])

    def sovp(self, i, j, k, x, v):
        own, other = self._own(i, x)
        a, p = self.params.alpha[i - 1], self.params.phi[i - 1]
        cd = math.cos(own - other)
        if j == i and k == i:
            h = a * math.cos(own - p) - cd
        elif j != i and k != i:
            h = -cd
        else:
            h = cd
        return h * np.asarray(v, dtype=float)

    def sample_point(self, rng):
        t = rng.uniform(-np.pi, np.pi, size=2)
        return JointPoint(t[:1], t[1:])

    def wrap(self, z):
        return _wrap_angle(z)


def torus_game(params: TorusGame | None = None) -> TorusOracle:
    return TorusOracle(params or TorusGame())


class PolyZeroSumGame(GameOracle):
    """Zero-sum scalar game ``f = -exp(-r^2/100) ((a x1^2 + x2)^2 + (b x2^2 + x1)^2)``, ``(f1, f2) = (f, -f)``.

    Gradients are analytic; second-order products use the inherited
    central-difference fallback.
    """

    zero_sum = True
    # second derivatives come from finite differences
    approximate = True

    def __init__(self, a: float = 0.15, b: float = 0.25):
        self.a, self.b = float(a), float(b)
        self.dims = BlockDims(1, 1)

    def _f_and_grad(self, x):
        x1, x2 = float(x.x1[0]), float(x.x2[0])
        P = self.a * x1 * x1 + x2
        Q = self.b * x2 * x2 + x1
        g = P * P + Q * Q
        E = math.exp(-0.01 * (x1 * x1 + x2 * x2))
        dg1 = 4 * self.a * x1 * P + 2 * Q
        dg2 = 2 * P + 4 * self.b * x2 * Q
        f = -E * g
        return f, (0.02 * x1 * E * g - E * dg1, 0.02 * x2 * E * g - E * dg2)

    def cost(self, i, x):
        f, _ = self._f_and_grad(x)
        return f if i == 1 else -f

    def grad(self, i, j, x):
        _, df = self._f_and_grad(x)
        val = df[j - 1]
        return np.array([val if i == 1 else -val])

    def sample_point(self, rng):
        t = rng.uniform(-6.0, 6.0, size=2)
        return JointPoint(t[:1], t[1:])


def poly_zero_sum(a: float = 0.15, b: float = 0.25) -> PolyZeroSumGame:
    return PolyZeroSumGame(a, b)


@dataclass(frozen=True, eq=False)
class CovarianceGan:
    sigma_target: np.ndarray
    eta_follower: float = 0.0

    def __post_init__(self):
        S = np.atleast_2d(np.asarray(self.sigma_target, dtype=float))
        object.__setattr__(self, "sigma_target", S)
        if S.shape[0] != S.shape[1]:
            raise ConfigError("sigma_target must be square", field="sigma")
        if not np.allclose(S, S.T, atol=1e-12):
            raise ConfigError("sigma_target must be symmetric", field="sigma")
        if np.linalg.eigvalsh(S)[0] <= 0:
            raise ConfigError("sigma_target must be positive definite", field="sigma")
        if self.eta_follower < 0:
            raise ConfigError("eta_follower must be >= 0", field="eta")

    @property
    def m(self) -> int:
        return self.sigma_target.shape[0]


class CovarianceGanOracle(GameOracle):
    """Linear generator ``G(z) = V z`` against a quadratic critic ``D(x) = x'W x``.

    Leader (generator) cost ``f = <W, Sigma - V V'>``; follower (critic) cost
    ``-f + eta/2 |W|_F^2``.  Blocks are row-major flattenings of ``V`` and ``W``.
    """

    def __init__(self, spec: CovarianceGan):
        self.spec = spec
        self.m = spec.m
        self.eta = float(spec.eta_follower)
        self.S = spec.sigma_target
        self.dims = BlockDims(self.m * self.m, self.m * self.m)

    def _mats(self, x):
        m = self.m
        return x.x1.reshape(m, m), x.x2.reshape(m, m)

    def _mat(self, v):
        return np.asarray(v, dtype=float).reshape(self.m, self.m)

    def cost(self, i, x):
        V, W = self._mats(x)
        f = float(np.sum(W * (self.S - V @ V.T)))
        return f if i == 1 else -f + 0.5 * self.eta * float(np.sum(W * W))

    def grad(self, i, j, x):
        V, W = self._mats(x)
        if j == 1:
            g = -(W + W.T) @ V
        else:
            g = self.S - V @ V.T
        if i == 2:
            g = -g + (self.eta * W if j == 2 else 0.0)
        return np.ravel(g)

    def sovp(self, i, j, k, x, v):
        V, W = self._mats(x)
        dv = self._mat(v)
        if (j, k) == (1, 1):
            out = -(W + W.T) @ dv
        elif (j, k) == (1, 2):
            out = -(dv + dv.T) @ V
        elif (j, k) == (2, 1):
            out = -(dv @ V.T + V @ dv.T)
        else:
            out = np.zeros_like(dv)
        if i == 2:
            out = -out + (self.eta * dv if (j, k) == (2, 2) else 0.0)
        return np.ravel(out)

    def metrics(self, x):
        V, W = self._mats(x)
        return {
            "generator_error": float(np.linalg.norm(self.S - V @ V.T, 2)),
            "discriminator_norm": float(np.linalg.norm(0.5 * (W + W.T), 2)),
        }

    def sample_point(self, rng):
        n = self.m * self.m
        return JointPoint(rng.standard_normal(n), rng.standard_normal(n))


def covariance_gan(spec: CovarianceGan) -> CovarianceGanOracle:
    return CovarianceGanOracle(spec)


@dataclass(frozen=True)
class QuadraticGameSpec:
    """Recipe for a random quadratic game.

    Self blocks are symmetrized standard normals (plus ``definite_shift``
    times the identity, pushed toward each player's own convexity); coupling
    blocks are standard normals scaled by ``coupling``.  ``linear`` adds
    standard-normal linear terms.
    """

    d1: int
    d2: int
    kind: str = "zero_sum"
    seed: int = 0
    coupling: float = 1.0
    definite_shift: float = 0.0
    linear: bool = False

    def __post_init__(self):
        if self.kind not in ("zero_sum", "general_sum"):
            raise ConfigError(f"unknown quadratic class {self.kind!r}", field="class")
        BlockDims(self.d1, self.d2)


def _sym(rng, n):
    M = rng.standard_normal((n, n))
    return 0.5 * (M + M.T)


def random_quadratic(spec: QuadraticGameSpec) -> QuadraticGame:
    rng = np.random.default_rng(spec.seed)
    d1, d2 = spec.d1, spec.d2
    dims = BlockDims(d1, d2)
    if spec.kind == "zero_sum":
        A = _sym(rng, d1) + spec.definite_shift * np.eye(d1)
        C = _sym(rng, d2) - spec.definite_shift * np.eye(d2)
        B = spec.coupling * rng.standard_normal((d1, d2))
        g = rng.standard_normal(d1 + d2) if spec.linear else np.zeros(d1 + d2)
        game = zero_sum_quadratic(A, B, C, g[:d1], g[d1:])
        game.name = f"random_zero_sum[{spec.seed}]"
        return game
    Hs, gs = [], []
    for i in (1, 2):
        H = _sym(rng, d1 + d2)
        s = dims.slice(i)
        H[s, s] += spec.definite_shift * np.eye(dims.size(i))
        o = dims.slice(3 - i)
        H[s, o] *= spec.coupling
        H[o, s] *= spec.coupling
        Hs.append(H)
        gs.append(rng.standard_normal(d1 + d2) if spec.linear else np.zeros(d1 + d2))
    return QuadraticGame(Hs[0], gs[0], Hs[1], gs[1], dims, zero_sum=False, name=f"random_general_sum[{spec.seed}]")


def random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    Q, R = np.linalg.qr(rng.standard_normal((n, n)))
    return Q * np.sign(np.diag(R))


def prop4_instance(M, Lam, Sig, seed: int = 0) -> QuadraticGame:
    """Zero-sum quadratic with coupling aligned to the Hessian eigenbases.

    ``D11 f = W1 diag(M) W1'``, ``-D22 f = W2 diag(Lam) W2'`` and
    ``D12 f = W1 Sig W2'`` for random orthogonal ``W1``, ``W2``.  ``Sig`` is
    a vector (placed on the leading diagonal) or a full ``d1 x d2`` matrix.
    """
    M, Lam = np.asarray(M, dtype=float), np.asarray(Lam, dtype=float)
    d1, d2 = M.size, Lam.size
    S = np.asarray(Sig, dtype=float)
    if S.ndim == 1:
        Smat = np.zeros((d1, d2))
        Smat[np.arange(S.size), np.arange(S.size)] = S
        S = Smat
    rng = np.random.default_rng(seed)
    W1, W2 = random_orthogonal(d1, rng), random_orthogonal(d2, rng)
    A = W1 @ np.diag(M) @ W1.T
    C = -(W2 @ np.diag(Lam) @ W2.T)
    B = W1 @ S @ W2.T
    game = zero_sum_quadratic(0.5 * (A + A.T), B, 0.5 * (C + C.T))
    game.name = "aligned_zero_sum"
    return game


GAME_KINDS = ("duopoly", "torus", "poly", "covariance", "quadratic", "scalar_quadratic")


def _req(d: dict, key: str):
    if key not in d:
        raise ConfigError(f"game spec is missing {key!r}", field=f"game.{key}")
    return d[key]


def game_from_json(spec: dict) -> GameOracle:
    """Build an oracle from ``{"game": kind, ...}``."""
    if not isinstance(spec, dict):
        raise ConfigError("game spec must be an object", field="game")
    kind = _req(spec, "game")
    try:
        if kind == "duopoly":
            return duopoly_game(DuopolyGame(float(spec.get("A", 100.0)), float(spec.get("c1", 5.0)), float(spec.get("c2", 2.0))))
        if kind == "torus":
            alpha = tuple(float(a) for a in spec.get("alpha", (1.0, 1.3)))
            phi = tuple(float(p) for p in spec.get("phi", (math.pi / 8, math.pi / 8)))
            return torus_game(TorusGame(alpha, phi))
        if kind == "poly":
            return poly_zero_sum(float(spec.get("a", 0.15)), float(spec.get("b", 0.25)))
        if kind == "covariance":
            sigma = spec.get("sigma")
            if sigma is None:
                m = int(_req(spec, "m"))
                sigma = random_spd(m, int(spec.get("sigma_seed", 0)))
            return covariance_gan(CovarianceGan(np.asarray(sigma, dtype=float), float(spec.get("eta", 0.0))))
        if kind == "quadratic":
            return random_quadratic(
                QuadraticGameSpec(
                    int(_req(spec, "d1")),
                    int(_req(spec, "d2")),
                    str(spec.get("class", "zero_sum")),
                    int(spec.get("seed", 0)),
                    float(spec.get("coupling", 1.0)),
                    float(spec.get("definite_shift", 0.0)),
                    bool(spec.get("linear", False)),
                )
            )
        if kind == "scalar_quadratic":
            return scalar_quadratic(float(_req(spec, "a")), float(_req(spec, "b")), float(_req(spec, "c")))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad {kind} game spec: {exc}", field="game") from exc
    raise ConfigError(f"unknown game {kind!r}; expected one of {', '.join(GAME_KINDS)}", field="game.game")


def random_spd(m: int, seed: int = 0, floor: float = 0.5) -> np.ndarray:
    """Well-conditioned random SPD matrix ``R R'/m + floor I``."""
    rng = np.random.default_rng(seed)
    R = rng.standard_normal((m, m))
    return R @ R.T / m + floor * np.eye(m)
