"""Exact penalty phi = phi_diff + phi_term, its subdifferential data and the penalized objective F_lambda"""

__all__ = ['logger', 'TOL_ACTIVE', 'EPS_DIV', 'UnsupportedPointError', 'NearFeasibleError', 'Hull',
           'PenaltyValue', 'FreeTrajectoryPair', 'PhiDiffGradient', 'terminal_values', 'phi_term',
           'phi_term_subdifferential', 'reconstruct_states', 'phi_diff_value', 'phi_diff_gradient',
           'penalized_objective']

from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.integrate import cumulative_trapezoid

from .model import ProblemSpec, TerminalConstraint
from .discretize import ControlGrid, integrate_rk4, l2_norm_on_grid
from .utils import setup_logger, PenalightError, as_vector

logger = setup_logger(__name__)

TOL_ACTIVE = 1e-8
EPS_DIV = 1e-12


class UnsupportedPointError(PenalightError):
    """Raised at a kink of a nonsmooth constraint with no piece gradients"""
    pass


class NearFeasibleError(PenalightError):
    """Raised when phi_diff is too small for the normalized residual to exist"""
    pass


class Hull(BaseModel):
    """Finite generator set of a convex hull (a subdifferential of phi_term)"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    generators: List[np.ndarray] = Field(default_factory=list)

    @field_validator('generators', mode='before')
    @classmethod
    def _vectors(cls, v) -> List[np.ndarray]:
        return [as_vector(g) for g in v]

    def __len__(self) -> int:
        return len(self.generators)

    def matrix(self) -> np.ndarray:
        """Generators stacked as rows."""
        return np.vstack(self.generators)


class PenaltyValue(BaseModel):
    """Penalty decomposition at a control grid"""
    phi_diff: float = Field(..., ge=0.0)
    phi_term: float
    active_eq: List[int] = Field(default_factory=list)
    active_ineq: List[int] = Field(default_factory=list)
    cost: float
    lam: float
    F_lambda: float


class FreeTrajectoryPair(BaseModel):
    """Derivative samples z = x' at the nodes, decoupled from the dynamics, with a control grid"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    z: np.ndarray
    grid: ControlGrid

    @field_validator('z', mode='before')
    @classmethod
    def _matrix(cls, v) -> np.ndarray:
        arr = np.asarray(v, dtype=float)
        return arr.reshape(-1, 1) if arr.ndim == 1 else arr

    @model_validator(mode='after')
    def _aligned(self) -> 'FreeTrajectoryPair':
        if self.z.shape[0] != self.grid.n_intervals + 1:
            raise ValueError(f"z has {self.z.shape[0]} rows, grid has {self.grid.n_intervals + 1} nodes")
        return self


class PhiDiffGradient(BaseModel):
    """Normalized residual w and the L2 gradient of phi_diff on the grid"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    phi_diff: float
    w: np.ndarray
    gradient: np.ndarray
    weights: np.ndarray  # trapezoidal quadrature weights of the nodes


def terminal_values(spec: ProblemSpec, x_T: np.ndarray, T: float) -> Tuple[np.ndarray, np.ndarray]:
    """Values of the equality and inequality constraints at (x_T, T)."""
    x_T = as_vector(x_T, spec.state_dim)
    eq = np.array([c.evaluate(x_T, T) for c in spec.eq_constraints], dtype=float)
    ineq = np.array([c.evaluate(x_T, T) for c in spec.ineq_constraints], dtype=float)
    return eq, ineq


def phi_term(spec: ProblemSpec, x_T: np.ndarray, T: float,
             tol_active: float = TOL_ACTIVE) -> Tuple[float, List[int], List[int]]:
    """
    Terminal part of the penalty, max(|Phi^k| for k in E, Phi^j for j in I).

    Returns:
        tuple: (value, active_eq, active_ineq); value is 0 with no constraints
    """
    if tol_active < 0:
        raise ValueError("tol_active must be nonnegative")
    eq, ineq = terminal_values(spec, x_T, T)
    if eq.size == 0 and ineq.size == 0:
        return 0.0, [], []
    abs_eq = np.abs(eq)
    value = float(max(abs_eq.max(initial=-np.inf), ineq.max(initial=-np.inf)))
    active_eq = [k for k, v in enumerate(abs_eq) if v >= value - tol_active]
    active_ineq = [j for j, v in enumerate(ineq) if v >= value - tol_active]
    return value, active_eq, active_ineq


def _gradients_at(c: TerminalConstraint, x_T: np.ndarray, T: float) -> List[np.ndarray]:
    if not c.smooth and c.kink_gradients is not None:
        return c.piece_gradients(x_T, T)
    g = c.gradient(x_T, T)
    if not np.all(np.isfinite(g)):
        raise UnsupportedPointError(
            f"constraint '{c.name}' has no gradient at x_T = {x_T} and supplies no piece gradients")
    return [g]


def phi_term_subdifferential(spec: ProblemSpec, x_T: np.ndarray, T: float,
                             tol_active: float = TOL_ACTIVE) -> Hull:
    """
    Generators of the subdifferential of phi_term at (x_T, T).

    Infeasible points (phi_term > tol_active) give the signed gradients of the
    active constraints; feasible points give +/- every equality gradient plus the
    active inequality gradients.

    Raises:
        UnsupportedPointError: At a kink of a nonsmooth constraint without piece gradients
    """
    x_T = as_vector(x_T, spec.state_dim)
    value, active_eq, active_ineq = phi_term(spec, x_T, T, tol_active)
    generators: List[np.ndarray] = []
    if value > tol_active:
        for k in active_eq:
            c = spec.eq_constraints[k]
            sign = np.sign(c.evaluate(x_T, T))
            generators += [sign * g for g in _gradients_at(c, x_T, T)]
    else:
        for c in spec.eq_constraints:
            for g in _gradients_at(c, x_T, T):
                generators += [g, -g]
    for j in active_ineq:
        generators += _gradients_at(spec.ineq_constraints[j], x_T, T)
    return Hull(generators=generators)


def reconstruct_states(spec: ProblemSpec, pair: FreeTrajectoryPair) -> np.ndarray:
    """x(t) = x0 + integral of z, by cumulative trapezoidal quadrature at the nodes."""
    z = pair.z
    if z.shape[1] != spec.state_dim:
        raise ValueError(f"z has {z.shape[1]} columns, problem has state_dim {spec.state_dim}")
    return spec.x0 + cumulative_trapezoid(z, dx=pair.grid.h, axis=0, initial=0)


def _residual(spec: ProblemSpec, pair: FreeTrajectoryPair) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    xs = reconstruct_states(spec, pair)
    us = pair.grid.node_controls()
    ts = pair.grid.times
    fs = np.array([spec.f(x, u, t) for x, u, t in zip(xs, us, ts)])
    return xs, us, pair.z - fs


def phi_diff_value(spec: ProblemSpec, pair: FreeTrajectoryPair) -> float:
    """Differential part of the penalty, the L2 norm of z - f(x, u, t)."""
    _, _, r = _residual(spec, pair)
    return l2_norm_on_grid(r, pair.grid.h)


def phi_diff_gradient(spec: ProblemSpec, pair: FreeTrajectoryPair, eps_div: float = EPS_DIV) -> PhiDiffGradient:
    """
    Gradient of phi_diff with respect to z at a pair that violates the dynamics.

    With w = r / phi_diff the continuous gradient is w(t) - int_t^T f_x^T w. The
    returned grid function is the exact gradient of the discretized phi_diff
    divided by the node quadrature weights, which converges to that formula.

    Raises:
        NearFeasibleError: If phi_diff <= eps_div
    """
    xs, us, r = _residual(spec, pair)
    grid = pair.grid
    h, N = grid.h, grid.n_intervals
    phi = l2_norm_on_grid(r, h)
    if phi <= eps_div:
        raise NearFeasibleError(f"phi_diff = {phi:.3e} is below the division guard {eps_div:.1e}")
    w = r / phi

    weights = np.full(N + 1, h)
    weights[0] = weights[-1] = 0.5 * h
    ts = grid.times
    v = np.array([wk * spec.f_x(x, u, t).T @ wv for wk, x, u, t, wv in zip(weights, xs, us, ts, w)])
    # tails[i] = sum_{k >= i} v_k, with tails[N+1] = 0
    tails = np.zeros((N + 2, spec.state_dim))
    tails[:N + 1] = np.cumsum(v[::-1], axis=0)[::-1]
    # x_k depends on z_j with weight (h/2)[j <= k-1] + (h/2)[1 <= j <= k]
    sens = 0.5 * h * tails[1:N + 2]
    sens[1:] += 0.5 * h * tails[1:N + 1]
    gradient = w - sens / weights[:, None]
    return PhiDiffGradient(phi_diff=phi, w=w, gradient=gradient, weights=weights)


def penalized_objective(spec: ProblemSpec, grid: ControlGrid, lam: float, T: Optional[float] = None,
                        tol_active: float = TOL_ACTIVE) -> PenaltyValue:
    """
    F_lambda = Phi0(x_T, T) + lambda * max(phi_term, 0) along the RK4 response.

    The dynamics hold by construction, so phi_diff is 0.

    Raises:
        IntegrationDivergenceError: If the state integration diverges
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if T is not None and T != grid.T:
        grid = grid.with_horizon(T)
    traj = integrate_rk4(spec, grid)
    x_T = traj.final_state
    cost = spec.terminal_cost.evaluate(x_T, grid.T)
    value, active_eq, active_ineq = phi_term(spec, x_T, grid.T, tol_active)
    return PenaltyValue(
        phi_diff=0.0,
        phi_term=value,
        active_eq=active_eq,
        active_ineq=active_ineq,
        cost=cost,
        lam=lam,
        F_lambda=cost + lam * max(value, 0.0),
    )
