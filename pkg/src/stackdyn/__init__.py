"""Gradient-based learning dynamics in two-player Stackelberg games.

Games expose costs, block gradients and second-order block products
(:mod:`stackdyn.oracle`); :mod:`stackdyn.dynamics` iterates simultaneous,
hierarchical, opponent-shaping and best-response updates;
:mod:`stackdyn.equilibria` finds and classifies critical points.
"""

from __future__ import annotations

from .dynamics import (
    LOLA,
    BestResponse,
    LockInSpec,
    NoiseModel,
    RunConfig,
    Schedule,
    SimGrad,
    Stackelberg,
    Trajectory,
    lockin_curve,
    monte_carlo_lockin,
    run,
    run_best_response,
    step,
    two_timescale_ok,
)
from .equilibria import (
    Classification,
    ConditionReport,
    CriticalPoint,
    check_corollary1,
    check_necessary_prop3,
    check_prop2,
    check_realizable,
    check_sufficient_prop4,
    classify,
    find_critical_points,
    leader_cost_comparison,
)
from .games import (
    CovarianceGan,
    DuopolyGame,
    QuadraticGame,
    QuadraticGameSpec,
    TorusGame,
    covariance_gan,
    duopoly_equilibria,
    duopoly_game,
    poly_zero_sum,
    prop4_instance,
    random_quadratic,
    scalar_quadratic,
    torus_game,
)
from .linalg import LinearMap, SolveConfig, SpectrumReport, cg_solve, eig_dense, eig_extremal, materialize
from .operators import jacobian_simgrad, jacobian_stackelberg, schur_complement
from .oracle import (
    BlockDims,
    FdConfig,
    GameOracle,
    JointPoint,
    fd_grad_check,
    fd_oracle_from_costs,
    fd_sovp_check,
    omega,
    omega_stackelberg,
)

__version__ = "0.1.0"
