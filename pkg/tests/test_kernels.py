from __future__ import annotations

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stackdyn import kernels


def _system(rng, d):
    P = rng.standard_normal((d, d)) + 3 * np.eye(d)
    return P, rng.standard_normal(d), 0.1 * rng.standard_normal((d, d)), rng.standard_normal(d)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), d1=st.integers(1, 3), d2=st.integers(1, 3), lola=st.booleans(), every=st.integers(1, 9))
def test_rollout_backends_agree(seed, d1, d2, lola, every):
    rng = np.random.default_rng(seed)
    d = d1 + d2
    P, p, Q, q = _system(rng, d)
    n = 200
    gam1 = 0.02 * np.ones(n)
    gam2 = 0.03 * np.ones(n)
    noise = 0.1 * rng.standard_normal((n, d))
    x0 = rng.standard_normal(d)
    outs = []
    for fn in (kernels.rollout_numba, kernels.rollout_numpy):
        x = x0.copy()
        nmax = n // every + 2
        rec_x, rec_k, rec_g = np.zeros((nmax, d)), np.zeros(nmax, dtype=np.int64), np.zeros(nmax)
        res = fn(x, P, p, Q, q, lola, gam1, gam2, noise, d1, 0, every, 0.0, rec_x, rec_k, rec_g, 0)
        outs.append((x, res, rec_x, rec_k, rec_g))
    (xa, ra, Xa, Ka, Ga), (xb, rb, Xb, Kb, Gb) = outs
    assert tuple(int(v) for v in ra) == tuple(int(v) for v in rb)
    np.testing.assert_allclose(xa, xb, rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(Ka, Kb)
    np.testing.assert_allclose(Xa, Xb, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(Ga, Gb, rtol=1e-12, atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), n0=st.integers(0, 20), n_bar=st.integers(20, 40))
def test_lockin_backends_agree(seed, n0, n_bar):
    rng = np.random.default_rng(seed)
    d1, d2, R, n = 1, 2, 17, 60
    P, p, Q, q = _system(rng, 3)
    X0 = rng.standard_normal((R, 3))
    noise = 0.1 * rng.standard_normal((R, n, 3))
    gam = 0.05 * np.ones(n)
    xstar = np.zeros(3)
    outs = []
    for fn in (kernels.lockin_numba, kernels.lockin_numpy):
        X = X0.copy()
        cond = np.zeros(R, dtype=bool)
        maxdev = np.zeros(R)
        fn(X, P, p, Q, q, False, gam, gam, noise, d1, 0, xstar, n0, 1.0, n_bar, cond, maxdev)
        outs.append((X, cond, maxdev))
    np.testing.assert_allclose(outs[0][0], outs[1][0], rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(outs[0][1], outs[1][1])
    np.testing.assert_allclose(outs[0][2], outs[1][2], rtol=1e-12, atol=1e-12)


def test_rollout_stops_on_tolerance():
    P = np.eye(2)
    x = np.array([1.0, 1.0])
    n = 1000
    rec_x, rec_k, rec_g = np.zeros((n + 1, 2)), np.zeros(n + 1, dtype=np.int64), np.zeros(n + 1)
    taken, nrec, status = kernels.rollout(
        x, P, np.zeros(2), np.zeros((2, 2)), np.zeros(2), False, 0.5 * np.ones(n), 0.5 * np.ones(n), np.zeros((n, 2)), 1, 0, 1, 1e-8,
        rec_x, rec_k, rec_g, 0,
    )
    assert status == kernels.CONVERGED
    assert rec_g[nrec - 1] < 1e-8 and taken == rec_k[nrec - 1] < n


@pytest.mark.parametrize("value,expected", [("1", "numpy"), ("0", "numba")])
def test_env_flag_selects_backend(value, expected):
    env = dict(os.environ, STACKDYN_DISABLE_NUMBA=value)
    code = "from stackdyn import kernels; print(kernels.backend())"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expected


def test_disabled_numba_runs_reproduce_compiled_runs():
    code = (
        "import math; from stackdyn import *; "
        "rc = RunConfig(Stackelberg(), (Schedule.polynomial(1, 1), Schedule.polynomial(1, 2/3)), JointPoint([50.0], [50.0]), 3000, "
        "NoiseModel('gaussian', math.sqrt(10), 7), record_every=100); "
        "t = run(rc, duopoly_game()); print(t.backend); print(t.to_csv_string())"
    )
    outs = []
    for value in ("1", "0"):
        env = dict(os.environ, STACKDYN_DISABLE_NUMBA=value)
        outs.append(subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True).stdout)
    (ba, ca), (bb, cb) = (o.split("\n", 1) for o in outs)
    assert (ba, bb) == ("numpy", "numba")
    rows_a = [r.split(",") for r in ca.strip().splitlines()[1:]]
    rows_b = [r.split(",") for r in cb.strip().splitlines()[1:]]
    np.testing.assert_allclose(np.array(rows_a, dtype=float), np.array(rows_b, dtype=float), rtol=1e-12, atol=1e-12)
