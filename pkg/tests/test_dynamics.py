from __future__ import annotations

import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stackdyn import (
    LOLA,
    BestResponse,
    CovarianceGan,
    JointPoint,
    LockInSpec,
    NoiseModel,
    QuadraticGameSpec,
    RunConfig,
    Schedule,
    SimGrad,
    Stackelberg,
    covariance_gan,
    duopoly_game,
    lockin_curve,
    monte_carlo_lockin,
    omega,
    omega_stackelberg,
    random_quadratic,
    run,
    run_best_response,
    scalar_quadratic,
    step,
    torus_game,
    two_timescale_ok,
)
from stackdyn.dynamics import rule_from_json, rule_to_json, wilson
from stackdyn.errors import ConditioningError, ConfigError, ContractError, FollowerNonConvergenceError
from stackdyn.games import random_spd

Q121 = scalar_quadratic(1.0, 2.0, 1.0)
CONST01 = (Schedule.constant(0.1), Schedule.constant(0.1))
DUOPOLY_STACK = (Schedule.polynomial(1.0, 1.0), Schedule.polynomial(1.0, 2.0 / 3.0))


# ---------------------------------------------------------------- schedules


def test_schedule_values():
    np.testing.assert_allclose(Schedule.polynomial(2.0, 0.5).values([1, 4, 16]), [2.0, 1.0, 0.5])
    np.testing.assert_allclose(Schedule.exponential(0.015, 0.5).values([1, 2]), [0.0075, 0.00375])
    assert Schedule.constant(0.3).at(1000) == 0.3


def test_schedule_json_roundtrip():
    for s in (Schedule.constant(0.2), Schedule.polynomial(1.0, 2 / 3), Schedule.exponential(0.015, 1 - 1e-5)):
        assert Schedule.from_json(json.loads(json.dumps(s.to_json()))) == s


@pytest.mark.parametrize(
    "kwargs,field",
    [({"kind": "cubic"}, "schedule.kind"), ({"gamma": 0.0}, "schedule.gamma"), ({"kind": "exponential", "nu": 1.5}, "schedule.nu")],
)
def test_schedule_validation(kwargs, field):
    with pytest.raises(ConfigError) as err:
        Schedule(**kwargs)
    assert err.value.field == field


def test_two_timescale_detection():
    assert two_timescale_ok(*DUOPOLY_STACK)
    assert not two_timescale_ok(Schedule.polynomial(1.0, 1.0), Schedule.polynomial(1.0, 1.0))
    assert two_timescale_ok(Schedule.exponential(0.015, 1 - 1e-5), Schedule.exponential(0.015, 1 - 1e-7))
    assert two_timescale_ok(Schedule.polynomial(1.0, 0.5), Schedule.constant(0.1))
    assert not two_timescale_ok(Schedule.constant(0.1), Schedule.constant(0.1))


@settings(max_examples=40, deadline=None)
@given(p1=st.floats(0.5, 1.0), p2=st.floats(0.1, 0.5), g1=st.floats(0.1, 2.0), g2=st.floats(0.1, 2.0))
def test_timescale_ratio_nonincreasing(p1, p2, g1, g2):
    rc = RunConfig(SimGrad(), (Schedule.polynomial(g1, p1), Schedule.polynomial(g2, p2)), JointPoint([0.0], [0.0]), 1)
    tau = rc.tau(np.arange(1, 2000))
    assert np.all(np.diff(tau) <= 1e-15 * tau[:-1])


# -------------------------------------------------------------------- noise


def test_noise_is_centered_and_scaled():
    nm = NoiseModel("gaussian", (1.0, 3.0), seed=5)
    rng = nm.generator(0)
    W = nm.draw(rng, 200_000, Q121.dims)
    n = W.shape[0]
    assert abs(W[:, 0].mean()) < 4 / math.sqrt(n)
    assert abs(W[:, 1].mean()) < 4 * 3 / math.sqrt(n)
    assert W[:, 1].std() == pytest.approx(3.0, rel=0.01)


def test_noise_streams_split_by_task_and_replica():
    nm = NoiseModel("gaussian", 1.0, seed=9)
    a = nm.generator(0).standard_normal(4)
    np.testing.assert_array_equal(a, nm.generator(0).standard_normal(4))
    assert not np.array_equal(a, nm.generator(1).standard_normal(4))
    assert not np.array_equal(a, nm.generator(0, replica=0).standard_normal(4))
    assert not np.array_equal(nm.generator(0, 0).standard_normal(4), nm.generator(0, 1).standard_normal(4))


def test_no_noise_draws_zero():
    nm = NoiseModel()
    assert not nm.active
    assert not np.any(nm.draw(nm.generator(), 10, Q121.dims))


# -------------------------------------------------------------------- rules


def test_rule_json_roundtrip():
    for rule in (SimGrad(), LOLA(), Stackelberg(0.5), BestResponse(1e-9, 500, 0.2, 0.0)):
        assert rule_from_json(json.loads(json.dumps(rule_to_json(rule)))) == rule
    with pytest.raises(ConfigError):
        rule_from_json({"name": "adam"})


def test_step_examples():
    x = JointPoint([1.0], [1.0])
    np.testing.assert_allclose(step(SimGrad(), Q121, x, 1, CONST01).flat, [0.7, 1.1], atol=1e-14)
    np.testing.assert_allclose(step(LOLA(), Q121, x, 1, CONST01).flat, [0.68, 1.1], atol=1e-14)
    q = JointPoint([46.0], [26.0])
    np.testing.assert_allclose(step(Stackelberg(), duopoly_game(), q, 1, DUOPOLY_STACK).flat, [46.0, 26.0], atol=1e-10)


def test_step_adds_noise_to_field():
    x = JointPoint([1.0], [1.0])
    out = step(SimGrad(), Q121, x, 1, CONST01, noise_draw=[1.0, -2.0])
    np.testing.assert_allclose(out.flat, [0.6, 1.3], atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 5000))
def test_fixed_points_of_rules_are_field_zeros(seed):
    g = random_quadratic(QuadraticGameSpec(2, 1, "zero_sum", seed=seed, definite_shift=2.0))
    x = JointPoint(np.zeros(2), np.zeros(1))
    for rule in (SimGrad(), Stackelberg(), LOLA()):
        np.testing.assert_allclose(step(rule, g, x, 3, CONST01).flat, x.flat, atol=1e-12)


def test_stackelberg_and_simgrad_share_follower_update():
    rng = np.random.default_rng(0)
    g = random_quadratic(QuadraticGameSpec(2, 2, "general_sum", seed=3, definite_shift=3.0, linear=True))
    for _ in range(10):
        x = g.sample_point(rng)
        a = step(SimGrad(), g, x, 2, CONST01)
        b = step(Stackelberg(), g, x, 2, CONST01)
        np.testing.assert_array_equal(a.x2, b.x2)


# ---------------------------------------------------------------------- run


def test_run_q121_converges():
    traj = run(RunConfig(SimGrad(), CONST01, JointPoint([1.0], [1.0]), 10_000), Q121)
    assert traj.terminal_reason == "converged"
    assert np.linalg.norm(omega(Q121, traj.x_final).flat) < 1e-8
    assert traj.final.norm() < 1e-7


@pytest.mark.parametrize("use_numba", [True, False])
def test_run_duopoly_stackelberg_noisy(use_numba):
    rc = RunConfig(Stackelberg(), DUOPOLY_STACK, JointPoint([50.0], [50.0]), 100_000, NoiseModel("gaussian", math.sqrt(10), 1), record_every=1000)
    traj = run(rc, duopoly_game(), use_numba=use_numba)
    assert np.linalg.norm(traj.x_final.flat - [46.0, 26.0]) < 0.5
    assert traj.backend == ("numba" if use_numba else "numpy")


def test_run_duopoly_nash_noisy():
    sched = (Schedule.polynomial(1.0, 1.0), Schedule.polynomial(1.0, 1.0))
    rc = RunConfig(SimGrad(), sched, JointPoint([50.0], [50.0]), 100_000, NoiseModel("gaussian", math.sqrt(10), 2), record_every=1000)
    traj = run(rc, duopoly_game())
    assert np.linalg.norm(traj.x_final.flat - [92 / 3, 101 / 3]) < 0.5


@pytest.mark.filterwarnings("ignore:Stackelberg rule with noise")
@pytest.mark.parametrize("rule", [SimGrad(), Stackelberg(), LOLA()], ids=lambda r: r.name)
def test_fast_path_matches_generic_loop(rule):
    g = random_quadratic(QuadraticGameSpec(2, 2, "general_sum", seed=11, definite_shift=3.0, linear=True))
    base = dict(rule=rule, schedules=CONST01, x0=JointPoint([1.0, -1.0], [0.5, 2.0]), max_iters=300, noise=NoiseModel("gaussian", 0.3, 4), record_every=7)
    fast = run(RunConfig(**base), g)
    slow = run(RunConfig(**base, fast_path=False), g)
    assert fast.backend != "python" and slow.backend == "python"
    np.testing.assert_array_equal(fast.k, slow.k)
    np.testing.assert_allclose(fast.X, slow.X, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(fast.f1, slow.f1, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(fast.grad_norm, slow.grad_norm, rtol=1e-8, atol=1e-9)


def test_run_is_deterministic():
    rc = RunConfig(Stackelberg(), DUOPOLY_STACK, JointPoint([50.0], [50.0]), 5000, NoiseModel("gaussian", 3.0, 42), record_every=10)
    a = run(rc, duopoly_game()).to_csv_string()
    assert a == run(rc, duopoly_game()).to_csv_string()
    other = RunConfig(Stackelberg(), DUOPOLY_STACK, JointPoint([50.0], [50.0]), 5000, NoiseModel("gaussian", 3.0, 43), record_every=10)
    assert a != run(other, duopoly_game()).to_csv_string()


@pytest.mark.parametrize("max_iters,every", [(1005, 10), (100, 1), (99, 100), (0, 3)])
def test_csv_row_count(max_iters, every):
    rc = RunConfig(SimGrad(), CONST01, JointPoint([1.0], [1.0]), max_iters, NoiseModel("gaussian", 0.1, 0), record_every=every)
    traj = run(rc, Q121)
    rows = list(csv.reader(io.StringIO(traj.to_csv_string())))
    assert rows[0] == ["k", "x1_0", "x2_0", "f1", "f2", "grad_norm", "tau"]
    assert len(rows) - 1 == traj.iterations // every + 1
    assert traj.iterations == max_iters


def test_csv_writes_sidecar(tmp_path):
    traj = run(RunConfig(SimGrad(), CONST01, JointPoint([1.0], [1.0]), 50), Q121)
    traj.to_csv(tmp_path / "t.csv")
    side = json.loads((tmp_path / "t.csv.json").read_text())
    assert side["terminal_reason"] == traj.terminal_reason
    assert side["records"] == len(traj.k)


def test_iterations_to_thresholds():
    gan = covariance_gan(CovarianceGan(random_spd(1, 1), 0.2))
    rc = RunConfig(Stackelberg(), (Schedule.exponential(0.015, 1 - 1e-5), Schedule.exponential(0.015, 1 - 1e-7)), JointPoint([1.0], [0.0]), 500)
    traj = run(rc, gan)
    k = traj.iterations_to({"generator_error": 0.05, "discriminator_norm": 0.05})
    assert k is not None and k <= traj.iterations
    idx = int(np.flatnonzero(traj.k == k)[0])
    assert traj.metrics["generator_error"][idx] < 0.05
    with pytest.raises(ContractError):
        traj.iterations_to({"nope": 1.0})


def test_spectra_recorded_on_request():
    rc = RunConfig(SimGrad(), CONST01, JointPoint([1.0], [1.0]), 20, spectra_every=10)
    traj = run(rc, Q121)
    assert [s["k"] for s in traj.spectra] == [0, 10, 20]
    assert traj.spectra[0]["S1"]["smallest"] == pytest.approx([5.0])
    assert traj.spectra[0]["J"]["smallest"] == pytest.approx([1.0, 1.0])


@pytest.mark.filterwarnings("ignore:overflow")
def test_divergent_run_reports_numerical_failure():
    rc = RunConfig(SimGrad(), (Schedule.constant(10.0), Schedule.constant(10.0)), JointPoint([1.0], [1.0]), 5000, fast_path=False)
    traj = run(rc, Q121)
    assert traj.terminal_reason == "numerical_failure"
    assert traj.iterations < 5000


def test_noisy_stackelberg_without_separation_warns():
    with pytest.warns(RuntimeWarning, match="does not vanish"):
        RunConfig(Stackelberg(), CONST01, JointPoint([0.0], [0.0]), 10, NoiseModel("gaussian", 1.0))


def test_regularized_stackelberg_on_gan_generic_path():
    gan = covariance_gan(CovarianceGan(random_spd(2, 0), 0.0))
    x0 = JointPoint(np.eye(2).ravel(), np.zeros(4))
    traj = run(RunConfig(Stackelberg(eta=0.4), (Schedule.constant(0.01), Schedule.constant(0.05)), x0, 2000, record_every=100), gan)
    assert traj.terminal_reason in ("converged", "max_iters")
    assert traj.metrics["generator_error"][-1] < traj.metrics["generator_error"][0]


# ------------------------------------------------------------ best response


def test_best_response_duopoly():
    rc = RunConfig(BestResponse(inner_tol=1e-10), (Schedule.constant(0.5), Schedule.constant(0.1)), JointPoint([0.0], [0.0]), 200)
    traj = run_best_response(rc, duopoly_game())
    assert traj.x_final.x1[0] == pytest.approx(46.0, abs=1e-6)
    assert traj.x_final.x2[0] == pytest.approx((100 - 46 - 2) / 2, abs=1e-6)
    assert traj.terminal_reason == "converged"


def test_best_response_torus():
    rc = RunConfig(BestResponse(), (Schedule.constant(0.1), Schedule.constant(0.1)), JointPoint([-0.5], [1.2]), 5000)
    traj = run_best_response(rc, torus_game())
    assert np.linalg.norm(traj.x_final.flat - [-0.53, 1.25]) < 0.05


def test_best_response_at_stackelberg_point_stays():
    q = JointPoint([46.0], [26.0])
    out = step(BestResponse(), duopoly_game(), q, 1, (Schedule.constant(0.5), Schedule.constant(0.1)))
    np.testing.assert_allclose(out.flat, q.flat, atol=1e-9)


def test_best_response_inner_stall_raises():
    rc = RunConfig(BestResponse(inner_max_iters=1), CONST01, JointPoint([0.0], [0.0]), 10)
    with pytest.raises(FollowerNonConvergenceError) as err:
        run_best_response(rc, duopoly_game())
    assert err.value.residual > 0


def test_run_dispatches_best_response():
    rc = RunConfig(BestResponse(), (Schedule.constant(0.5), Schedule.constant(0.1)), JointPoint([0.0], [0.0]), 100)
    assert run(rc, duopoly_game()).x_final.x1[0] == pytest.approx(46.0, abs=1e-6)


# ------------------------------------------------------------------ lock-in


def test_lockin_deterministic_fixed_point():
    rc = RunConfig(SimGrad(), CONST01, JointPoint([0.0], [0.0]), 200)
    res = monte_carlo_lockin(rc, Q121, LockInSpec(JointPoint([0.0], [0.0]), 0.01, n_bar=0, q0=1e-3, replicas=50))
    assert res.p_hat == 1.0 and res.n_conditioned == 50


def test_lockin_monotone_in_radius():
    sched = Schedule.polynomial(0.5, 0.6)
    rc = RunConfig(SimGrad(), (sched, sched), JointPoint([0.0], [0.0]), 300, NoiseModel("gaussian", 0.1, 3))
    spec = LockInSpec(JointPoint([0.0], [0.0]), 0.05, n_bar=20, q0=0.5, replicas=300)
    lo = monte_carlo_lockin(rc, Q121, spec)
    hi = monte_carlo_lockin(rc, Q121, LockInSpec(spec.target, 0.5, 20, 0.5, 300))
    assert hi.p_hat >= lo.p_hat
    assert lo.ci_low <= lo.p_hat <= lo.ci_high


def test_lockin_duopoly_after_decay():
    rc = RunConfig(Stackelberg(), DUOPOLY_STACK, JointPoint([46.0], [26.0]), 3000, NoiseModel("gaussian", math.sqrt(10), 8))
    spec = LockInSpec(JointPoint([46.0], [26.0]), 1.0, n_bar=500, q0=1.0, replicas=200, n0=500)
    res = monte_carlo_lockin(rc, duopoly_game(), spec)
    assert res.n_conditioned > 0
    assert res.p_hat >= 0.9


@pytest.mark.parametrize("use_numba", [True, False])
def test_lockin_generic_path_matches_kernel(use_numba):
    sched = Schedule.polynomial(0.5, 0.6)
    base = dict(rule=SimGrad(), schedules=(sched, sched), x0=JointPoint([0.0], [0.0]), max_iters=100, noise=NoiseModel("gaussian", 0.1, 3))
    spec = LockInSpec(JointPoint([0.0], [0.0]), 0.05, n_bar=10, q0=0.5, replicas=40)
    eps = [0.02, 0.05, 0.2]
    fast = lockin_curve(RunConfig(**base), Q121, spec, eps, use_numba=use_numba)
    slow = lockin_curve(RunConfig(**base, fast_path=False), Q121, spec, eps)
    assert [r.n_locked for r in fast] == [r.n_locked for r in slow]


def test_lockin_conditioning_error():
    rc = RunConfig(SimGrad(), CONST01, JointPoint([0.0], [0.0]), 50)
    spec = LockInSpec(JointPoint([5.0], [5.0]), 0.1, n_bar=10, q0=0.01, replicas=10, n0=10)
    with pytest.raises(ConditioningError):
        monte_carlo_lockin(rc, Q121, spec)


def test_wilson_interval_known_value():
    lo, hi = wilson(50, 100)
    assert lo == pytest.approx(0.4038, abs=1e-4)
    assert hi == pytest.approx(0.5962, abs=1e-4)


def test_lockin_spec_validation():
    with pytest.raises(ConfigError):
        LockInSpec(JointPoint([0.0], [0.0]), 0.0, 1, 1.0)
    with pytest.raises(ConfigError):
        LockInSpec(JointPoint([0.0], [0.0]), 0.1, 1, 1.0, n0=5)


def test_stackelberg_field_at_duopoly_reaction_curve_is_linear():
    g = duopoly_game()
    for q1 in (0.0, 20.0, 60.0):
        q2 = (100 - q1 - 2) / 2
        w = omega_stackelberg(g, JointPoint([q1], [q2]))
        assert w.x1[0] == pytest.approx(q1 - 46.0, abs=1e-9)
