"""Compiled inner loops for games whose driving fields are affine.

Every rule applied to a quadratic game iterates

    x_{k} = x_{k-1} - G_k * (P x + p - lam_k (Q x + q) + w_k)

where ``G_k`` holds the leader step on the first ``d1`` coordinates and the
follower step on the rest, and ``lam_k`` is the follower step when the
opponent-shaping correction is on (zero otherwise).  ``P x + p`` is also the
field whose norm decides convergence.

Two implementations share one signature: numba-compiled loops and plain
numpy.  :data:`USE_NUMBA` picks one at import time (see :mod:`stackdyn._jit`).
"""

from __future__ import annotations

import math

import numpy as np

from ._jit import HAS_NUMBA, USE_NUMBA, njit

CONTINUE, CONVERGED, DIVERGED = 0, 1, 2


def _rollout_py(x, P, p, Q, q, lola, gam1, gam2, noise, d1, k0, record_every, stop_tol, rec_x, rec_k, rec_g, nrec):
    n = gam1.shape[0]
    d = x.shape[0]
    step = np.empty(d)
    for t in range(n):
        k = k0 + t + 1
        F = P @ x + p
        if lola:
            F[:d1] -= gam2[t] * (Q[:d1] @ x + q[:d1])
        step[:d1] = gam1[t]
        step[d1:] = gam2[t]
        x -= step * (F + noise[t])
        if not np.all(np.isfinite(x)):
            return t + 1, nrec, DIVERGED
        if k % record_every == 0:
            gn = math.sqrt(float(np.sum((P @ x + p) ** 2)))
            rec_x[nrec] = x
            rec_k[nrec] = k
            rec_g[nrec] = gn
            nrec += 1
            if stop_tol > 0.0 and gn < stop_tol:
                return t + 1, nrec, CONVERGED
    return n, nrec, CONTINUE


def _rollout_nb(x, P, p, Q, q, lola, gam1, gam2, noise, d1, k0, record_every, stop_tol, rec_x, rec_k, rec_g, nrec):
    n = gam1.shape[0]
    d = x.shape[0]
    F = np.empty(d)
    for t in range(n):
        k = k0 + t + 1
        for i in range(d):
            acc = p[i]
            for j in range(d):
                acc += P[i, j] * x[j]
            F[i] = acc
        if lola:
            for i in range(d1):
                acc = q[i]
                for j in range(d):
                    acc += Q[i, j] * x[j]
                F[i] -= gam2[t] * acc
        finite = True
        for i in range(d):
            g = gam1[t] if i < d1 else gam2[t]
            x[i] -= g * (F[i] + noise[t, i])
            if not math.isfinite(x[i]):
                finite = False
        if not finite:
            return t + 1, nrec, DIVERGED
        if k % record_every == 0:
            s = 0.0
            for i in range(d):
                acc = p[i]
                for j in range(d):
                    acc += P[i, j] * x[j]
                s += acc * acc
            gn = math.sqrt(s)
            for i in range(d):
                rec_x[nrec, i] = x[i]
            rec_k[nrec] = k
            rec_g[nrec] = gn
            nrec += 1
            if stop_tol > 0.0 and gn < stop_tol:
                return t + 1, nrec, CONVERGED
    return n, nrec, CONTINUE


def _lockin_py(X, P, p, Q, q, lola, gam1, gam2, noise, d1, k0, xstar, n0, q0, n_bar, cond, maxdev):
    # vectorized across replicas; noise has shape (replicas, steps, d)
    n = gam1.shape[0]
    d = X.shape[1]
    step = np.empty(d)
    for t in range(n):
        k = k0 + t + 1
        F = X @ P.T + p
        if lola:
            F[:, :d1] -= gam2[t] * (X @ Q[:d1].T + q[:d1])
        step[:d1] = gam1[t]
        step[d1:] = gam2[t]
        X -= step * (F + noise[:, t, :])
        dev = np.sqrt(np.sum((X - xstar) ** 2, axis=1))
        dev[~np.isfinite(dev)] = np.inf
        if k == n0:
            cond[:] = dev <= q0
        if k >= n_bar:
            np.maximum(maxdev, dev, out=maxdev)


def _lockin_nb(X, P, p, Q, q, lola, gam1, gam2, noise, d1, k0, xstar, n0, q0, n_bar, cond, maxdev):
    n = gam1.shape[0]
    R, d = X.shape
    x = np.empty(d)
    F = np.empty(d)
    for r in range(R):
        for i in range(d):
            x[i] = X[r, i]
        for t in range(n):
            k = k0 + t + 1
            for i in range(d):
                acc = p[i]
                for j in range(d):
                    acc += P[i, j] * x[j]
                F[i] = acc
            if lola:
                for i in range(d1):
                    acc = q[i]
                    for j in range(d):
                        acc += Q[i, j] * x[j]
                    F[i] -= gam2[t] * acc
            s = 0.0
            for i in range(d):
                g = gam1[t] if i < d1 else gam2[t]
                x[i] -= g * (F[i] + noise[r, t, i])
                e = x[i] - xstar[i]
                s += e * e
            dev = math.sqrt(s)
            if not math.isfinite(dev):
                dev = math.inf
            if k == n0:
                cond[r] = dev <= q0
            if k >= n_bar and dev > maxdev[r]:
                maxdev[r] = dev
        for i in range(d):
            X[r, i] = x[i]


if HAS_NUMBA:
    rollout_numba = njit(_rollout_nb)
    lockin_numba = njit(_lockin_nb)
else:  # pragma: no cover
    rollout_numba = _rollout_nb
    lockin_numba = _lockin_nb

rollout_numpy = _rollout_py
lockin_numpy = _lockin_py


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


def rollout(*args, use_numba: bool | None = None):
    """Advance one trajectory over a chunk of steps; see module docstring.

    Mutates ``x`` and the record buffers in place; returns
    ``(steps_taken, records_written, status)``.
    """
    fn = rollout_numba if (USE_NUMBA if use_numba is None else use_numba) else rollout_numpy
    return fn(*args)


def lockin(*args, use_numba: bool | None = None):
    """Advance a batch of replicas over a chunk of steps, tracking the
    conditioning flag at step ``n0`` and the running max deviation from
    ``xstar`` over steps ``>= n_bar``.  Mutates its array arguments."""
    fn = lockin_numba if (USE_NUMBA if use_numba is None else use_numba) else lockin_numpy
    fn(*args)
