"""Piecewise-constant controls, fixed-step RK4 state and adjoint integration, L2 quadrature"""

__all__ = ['logger', 'IntegrationDivergenceError', 'ControlGrid', 'Trajectory', 'AdjointTrajectory',
           'integrate_rk4', 'integrate_adjoint', 'l2_norm_on_grid']

from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy.integrate import trapezoid

from .model import ProblemSpec
from .utils import setup_logger, PenalightError, as_vector

logger = setup_logger(__name__)


class IntegrationDivergenceError(PenalightError):
    """Raised when a state or adjoint becomes non-finite"""

    def __init__(self, message: str, node: int):
        super().__init__(message)
        self.node = node


def _as_matrix(v) -> np.ndarray:
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {arr.shape}")
    return arr


class ControlGrid(BaseModel):
    """Control u_k held constant on each of N uniform intervals of [t0, T]"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    n_intervals: int
    t0: float
    T: float
    values: np.ndarray

    @field_validator('values', mode='before')
    @classmethod
    def _matrix(cls, v) -> np.ndarray:
        return _as_matrix(v)

    @model_validator(mode='after')
    def _check_grid(self) -> 'ControlGrid':
        if self.n_intervals < 1:
            raise ValueError("n_intervals must be at least 1")
        if not self.T > self.t0:
            raise ValueError(f"T = {self.T} must exceed t0 = {self.t0}")
        if self.values.shape[0] != self.n_intervals:
            raise ValueError(f"values has {self.values.shape[0]} rows for {self.n_intervals} intervals")
        return self

    @property
    def h(self) -> float:
        return (self.T - self.t0) / self.n_intervals

    @property
    def times(self) -> np.ndarray:
        return np.linspace(self.t0, self.T, self.n_intervals + 1)

    def node_controls(self) -> np.ndarray:
        """Control at each of the N+1 nodes; the last node repeats the final interval."""
        return np.vstack([self.values, self.values[-1:]])

    def with_horizon(self, T: float) -> 'ControlGrid':
        return ControlGrid(n_intervals=self.n_intervals, t0=self.t0, T=T, values=self.values)


class Trajectory(BaseModel):
    """State response at the grid nodes"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    times: np.ndarray
    states: np.ndarray

    @field_validator('states', mode='before')
    @classmethod
    def _matrix(cls, v) -> np.ndarray:
        return _as_matrix(v)

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]


class AdjointTrajectory(BaseModel):
    """Adjoint psi at the grid nodes, integrated backward from psi[N]"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    times: np.ndarray
    psi: np.ndarray

    @field_validator('psi', mode='before')
    @classmethod
    def _matrix(cls, v) -> np.ndarray:
        return _as_matrix(v)


def _first_bad_node(values: np.ndarray) -> Optional[int]:
    bad = ~np.all(np.isfinite(values), axis=1)
    return int(np.argmax(bad)) if bad.any() else None


def integrate_rk4(spec: ProblemSpec, grid: ControlGrid) -> Trajectory:
    """
    Integrate the dynamics with one classical RK4 step per grid interval.

    The control is frozen at the interval value for all four stages.

    Raises:
        IntegrationDivergenceError: If a node state is non-finite
    """
    if grid.values.shape[1] != spec.control_dim:
        raise ValueError(f"control grid has {grid.values.shape[1]} columns, problem expects {spec.control_dim}")
    f = spec.dynamics
    h = grid.h
    times = grid.times
    states = np.empty((grid.n_intervals + 1, spec.state_dim))
    x = np.array(spec.x0, dtype=float)
    states[0] = x
    with np.errstate(over='ignore', invalid='ignore'):
        for k in range(grid.n_intervals):
            t = times[k]
            u = grid.values[k]
            k1 = np.asarray(f(x, u, t), dtype=float)
            k2 = np.asarray(f(x + 0.5 * h * k1, u, t + 0.5 * h), dtype=float)
            k3 = np.asarray(f(x + 0.5 * h * k2, u, t + 0.5 * h), dtype=float)
            k4 = np.asarray(f(x + h * k3, u, t + h), dtype=float)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            states[k + 1] = x
    bad = _first_bad_node(states)
    if bad is not None:
        raise IntegrationDivergenceError(f"state integration diverged at node {bad} (t = {times[bad]:.6g})", bad)
    return Trajectory(times=times, states=states)


def integrate_adjoint(spec: ProblemSpec, traj: Trajectory, grid: ControlGrid,
                      psi_T: np.ndarray) -> AdjointTrajectory:
    """
    Integrate psi' = -f_x(x*(t), u*(t), t)^T psi backward from psi(T) = psi_T.

    Same step as the forward pass; the state at half steps is the mean of the
    two node values.

    Raises:
        IntegrationDivergenceError: If psi becomes non-finite
    """
    psi_T = as_vector(psi_T, spec.state_dim)
    if not np.all(np.isfinite(psi_T)):
        raise ValueError("psi_T must be finite")
    if traj.states.shape[0] != grid.n_intervals + 1:
        raise ValueError("trajectory and control grid are not aligned")
    h = grid.h
    times = grid.times
    xs = traj.states
    psi = np.empty_like(xs)
    psi[-1] = psi_T

    def rhs(x, u, t, p):
        return -spec.f_x(x, u, t).T @ p

    with np.errstate(over='ignore', invalid='ignore'):
        for k in range(grid.n_intervals - 1, -1, -1):
            u = grid.values[k]
            t1, t_mid = times[k + 1], times[k] + 0.5 * h
            x1, x_mid, x0 = xs[k + 1], 0.5 * (xs[k] + xs[k + 1]), xs[k]
            p = psi[k + 1]
            k1 = rhs(x1, u, t1, p)
            k2 = rhs(x_mid, u, t_mid, p - 0.5 * h * k1)
            k3 = rhs(x_mid, u, t_mid, p - 0.5 * h * k2)
            k4 = rhs(x0, u, times[k], p - h * k3)
            psi[k] = p - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    # backward pass: the first failure is the highest bad index
    bad = _first_bad_node(psi[::-1])
    if bad is not None:
        bad = grid.n_intervals - bad
        raise IntegrationDivergenceError(f"adjoint integration diverged at node {bad} (t = {times[bad]:.6g})", bad)
    return AdjointTrajectory(times=times, psi=psi)


def l2_norm_on_grid(values: np.ndarray, h: float) -> float:
    """L2 norm of a node-sampled (vector) function by the trapezoidal rule."""
    if not h > 0:
        raise ValueError("h must be positive")
    vals = _as_matrix(values)
    integral = trapezoid(np.sum(vals ** 2, axis=1), dx=h)
    return float(np.sqrt(max(integral, 0.0)))
