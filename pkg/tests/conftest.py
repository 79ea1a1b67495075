"""Shared problem fixtures"""

import numpy as np
import pytest

from penalight.model import (ProblemSpec, TerminalConstraint, LeftEndpoint, TimeMode, builtin_problem,
                             register_problem)
from penalight.bench import analytic_oscillator


def _integrator(**kwargs) -> dict:
    base = dict(
        state_dim=1,
        control_dim=1,
        dynamics=lambda x, u, t: np.array([u[0]]),
        dynamics_jac_x=lambda x, u, t: np.zeros((1, 1)),
        dynamics_jac_u=lambda x, u, t: np.ones((1, 1)),
        control_lower=[-1.0],
        control_upper=[1.0],
        x0=[0.0],
    )
    base.update(kwargs)
    return base


def moving_target_problem() -> ProblemSpec:
    """x' = u, |u| <= 1, x(0) = 0, reach x(T) = T - 1 in minimum time (T* = 1/2, u = -1)."""
    return ProblemSpec(**_integrator(
        name="moving_target",
        terminal_cost=TerminalConstraint(name="T", value=lambda x, T: T, grad_x=lambda x, T: np.zeros(1),
                                         partial_t=lambda x, T: 1.0),
        eq_constraints=[TerminalConstraint(name="x(T) - (T - 1)", value=lambda x, T: x[0] - (T - 1.0),
                                           grad_x=lambda x, T: np.ones(1), partial_t=lambda x, T: -1.0)],
        time_mode=TimeMode.FREE,
    ))


def left_endpoint_problem() -> ProblemSpec:
    """x' = u, |u| <= 1 on [0, 1], maximize x(1) with x(0) - 1 <= 0; optimum x(0) = 1, u = +1, psi = 1."""
    return ProblemSpec(**_integrator(
        name="left_endpoint",
        terminal_cost=TerminalConstraint(name="-x(T)", value=lambda x, T: -x[0],
                                         grad_x=lambda x, T: -np.ones(1)),
        x0=[1.0],
        time_mode=TimeMode.FIXED,
        T_fixed=1.0,
        left_endpoint=LeftEndpoint(ineq_constraints=[
            TerminalConstraint(name="x(0) - 1", value=lambda x, t: x[0] - 1.0, grad_x=lambda x, t: np.ones(1))
        ]),
    ))


def conflicting_targets_problem() -> ProblemSpec:
    """x1(T) = 1 and x1(T) = -1 at once: at x1 = 0 both constraints are active with the same sign."""
    return ProblemSpec(
        name="conflicting_targets",
        state_dim=2,
        control_dim=1,
        dynamics=lambda x, u, t: np.array([u[0], 0.0]),
        dynamics_jac_x=lambda x, u, t: np.zeros((2, 2)),
        dynamics_jac_u=lambda x, u, t: np.array([[1.0], [0.0]]),
        terminal_cost=TerminalConstraint(name="T", value=lambda x, T: T, grad_x=lambda x, T: np.zeros(2),
                                         partial_t=lambda x, T: 1.0),
        eq_constraints=[
            TerminalConstraint(name="x1 - 1", value=lambda x, T: x[0] - 1.0,
                               grad_x=lambda x, T: np.array([1.0, 0.0])),
            TerminalConstraint(name="-x1 - 1", value=lambda x, T: -x[0] - 1.0,
                               grad_x=lambda x, T: np.array([-1.0, 0.0])),
        ],
        control_lower=[-1.0],
        control_upper=[1.0],
        x0=[0.0, 0.0],
        reference_endpoints=[(np.array([0.0, 0.0]), 1.0)],
    )


register_problem("conflicting_targets", conflicting_targets_problem, overwrite=True)
register_problem("left_endpoint", left_endpoint_problem, overwrite=True)


@pytest.fixture
def oscillator():
    return builtin_problem("oscillator")


@pytest.fixture
def nonsmooth_abs():
    return builtin_problem("nonsmooth_abs")


@pytest.fixture
def exact():
    return analytic_oscillator()


@pytest.fixture
def moving_target():
    return moving_target_problem()


@pytest.fixture
def left_endpoint():
    return left_endpoint_problem()


@pytest.fixture
def conflicting_targets():
    return conflicting_targets_problem()
