"""Maximum-principle checks: Hamiltonian, endpoint multipliers and transversality residuals"""

__all__ = ['logger', 'MU_TOL', 'TransversalityMisuseError', 'UnsupportedDynamicsError', 'MultiplierFit',
           'TransversalityReport', 'hamiltonian', 'hamiltonian_along', 'recover_multipliers',
           'check_transversality_fixed', 'check_free_time', 'check_moving_manifold', 'check_left_endpoint',
           'check_transversality', 'estimate_terminal_adjoint', 'switching_function', 'bang_bang_control',
           'control_optimality_residual', 'maximum_principle_gap']

from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy.optimize import nnls

from .model import ProblemSpec, TerminalConstraint, TimeMode
from .discretize import ControlGrid, Trajectory, AdjointTrajectory, l2_norm_on_grid
from .penalty import UnsupportedPointError
from .utils import setup_logger, PenalightError, as_vector

logger = setup_logger(__name__)

MU_TOL = 1e-8


class TransversalityMisuseError(PenalightError):
    """Raised when a transversality check does not apply to the problem"""
    pass


class UnsupportedDynamicsError(PenalightError):
    """Raised when bang-bang synthesis meets dynamics that are not affine in u"""
    pass


class MultiplierFit(BaseModel):
    """
    Sign-constrained least-squares multipliers.

    At the right endpoint `nu` multiplies equalities and `mu >= 0` inequalities;
    at the left endpoint they hold gamma and delta.
    """
    nu: List[float] = Field(default_factory=list)
    mu: List[float] = Field(default_factory=list)
    residual: float = Field(..., ge=0.0)
    rank_deficient: bool = False


class TransversalityReport(BaseModel):
    """Transversality residuals and recovered multipliers for one candidate solution"""
    nu: List[float] = Field(default_factory=list)
    mu: List[float] = Field(default_factory=list)
    endpoint_residual: float = Field(..., ge=0.0)
    hamiltonian_residual: Optional[float] = Field(default=None, ge=0.0)
    left_residual: Optional[float] = Field(default=None, ge=0.0)
    left_gamma: List[float] = Field(default_factory=list)
    left_delta: List[float] = Field(default_factory=list)
    complementarity_flags: List[bool] = Field(default_factory=list)
    rank_deficient: bool = False
    lambda_lower_bound: float = 0.0
    notes: List[str] = Field(default_factory=list)


def hamiltonian(spec: ProblemSpec, x: np.ndarray, u: np.ndarray, psi: np.ndarray, t: float) -> float:
    """H(x, u, psi, t) = <psi, f(x, u, t)>."""
    return float(as_vector(psi, spec.state_dim) @ spec.f(x, as_vector(u, spec.control_dim), t))


def hamiltonian_along(spec: ProblemSpec, traj: Trajectory, adjoint: AdjointTrajectory,
                      grid: ControlGrid) -> np.ndarray:
    """H at every grid node, with the node controls of `grid`."""
    us = grid.node_controls()
    return np.array([hamiltonian(spec, x, u, p, t)
                     for x, u, p, t in zip(traj.states, us, adjoint.psi, grid.times)])


def _gradient_matrix(constraints: Sequence[TerminalConstraint], x: np.ndarray, T: float, n: int) -> np.ndarray:
    if len(constraints) == 0:
        return np.zeros((n, 0))
    A = np.column_stack([c.gradient(x, T) for c in constraints])
    if not np.all(np.isfinite(A)):
        raise UnsupportedPointError("a constraint gradient is undefined at the endpoint")
    return A


def _sign_constrained_lsq(b: np.ndarray, A_eq: np.ndarray, A_in: np.ndarray) -> MultiplierFit:
    """
    min ||A_eq nu + A_in mu + b|| over nu free and mu >= 0.

    The free block is eliminated by projecting onto the orthogonal complement of
    range(A_eq); NNLS solves the projected mu problem and nu is the min-norm
    least-squares completion.
    """
    n = b.size
    if A_eq.shape[1]:
        pinv = np.linalg.pinv(A_eq)
        P = np.eye(n) - A_eq @ pinv
    else:
        pinv = np.zeros((0, n))
        P = np.eye(n)
    if A_in.shape[1]:
        mu, _ = nnls(P @ A_in, -P @ b)
    else:
        mu = np.zeros(0)
    nu = pinv @ (-b - A_in @ mu)
    residual = float(np.linalg.norm(A_eq @ nu + A_in @ mu + b))

    stacked = np.hstack([A_eq, A_in])
    rank_deficient = bool(stacked.shape[1] and np.linalg.matrix_rank(stacked) < stacked.shape[1])
    if rank_deficient:
        logger.warning("Stacked constraint gradients are rank deficient; multipliers are not unique")
    return MultiplierFit(nu=nu.tolist(), mu=mu.tolist(), residual=residual, rank_deficient=rank_deficient)


def recover_multipliers(spec: ProblemSpec, psi_T: np.ndarray, x_T: np.ndarray, T: float) -> MultiplierFit:
    """
    Multipliers of psi(T) = -dPhi0/dx - sum nu_k dPhi^k/dx - sum mu_j dPhi^j/dx.

    Solves the sign-constrained least-squares problem and reports its residual;
    rank-deficient gradients set `rank_deficient` and still return a minimizer.
    """
    n = spec.state_dim
    x_T = as_vector(x_T, n)
    b = as_vector(psi_T, n) + spec.terminal_cost.gradient(x_T, T)
    A_eq = _gradient_matrix(spec.eq_constraints, x_T, T, n)
    A_in = _gradient_matrix(spec.ineq_constraints, x_T, T, n)
    return _sign_constrained_lsq(b, A_eq, A_in)


def _lambda_bound(fit: MultiplierFit) -> float:
    values = [abs(v) for v in fit.nu] + list(fit.mu)
    return float(max(values, default=0.0))


def check_transversality_fixed(spec: ProblemSpec, adjoint: AdjointTrajectory, traj: Trajectory,
                               grid: ControlGrid, mu_tol: float = MU_TOL,
                               active_tol: float = 1e-6) -> TransversalityReport:
    """
    Right-endpoint transversality at T.

    `complementarity_flags[j]` is set when mu_j > mu_tol although Phi^j < -active_tol.
    """
    if adjoint.psi.shape[0] != traj.states.shape[0]:
        raise ValueError("adjoint and trajectory are not aligned")
    x_T, T = traj.final_state, grid.T
    fit = recover_multipliers(spec, adjoint.psi[-1], x_T, T)
    flags = [bool(m > mu_tol and c.evaluate(x_T, T) < -active_tol)
             for m, c in zip(fit.mu, spec.ineq_constraints)]
    report = TransversalityReport(
        nu=fit.nu,
        mu=fit.mu,
        endpoint_residual=fit.residual,
        complementarity_flags=flags,
        rank_deficient=fit.rank_deficient,
        lambda_lower_bound=_lambda_bound(fit),
    )
    if any(flags):
        report.notes.append("positive multiplier on an inactive inequality")
    return report


def check_free_time(spec: ProblemSpec, x_T: np.ndarray, u_T: np.ndarray, psi_T: np.ndarray, T: float) -> float:
    """
    |H(x(T), u(T), psi(T), T)|, which vanishes at an optimal free terminal time.

    Raises:
        TransversalityMisuseError: On a fixed-time problem
    """
    if spec.time_mode == TimeMode.FIXED:
        raise TransversalityMisuseError("the free-time condition does not apply to a fixed-time problem")
    if not np.any(as_vector(psi_T)):
        logger.warning("psi(T) = 0: the free-time condition holds trivially")
    return abs(hamiltonian(spec, x_T, u_T, psi_T, T))


def check_moving_manifold(spec: ProblemSpec, x_T: np.ndarray, u_T: np.ndarray, psi_T: np.ndarray, T: float,
                          nu: Sequence[float], mu: Sequence[float]) -> float:
    """
    |H - (dPhi0/dt + sum nu_k dPhi^k/dt + sum mu_j dPhi^j/dt)| at T.

    The sign follows psi(T) = -dG/dx for G = Phi0 + sum nu Phi^k + sum mu Phi^j.
    With every time partial zero this is exactly `check_free_time`.
    """
    x_T = as_vector(x_T, spec.state_dim)
    if len(nu) != len(spec.eq_constraints) or len(mu) != len(spec.ineq_constraints):
        raise ValueError("multiplier counts do not match the constraints")
    drift = spec.terminal_cost.time_partial(x_T, T)
    drift += sum(v * c.time_partial(x_T, T) for v, c in zip(nu, spec.eq_constraints))
    drift += sum(m * c.time_partial(x_T, T) for m, c in zip(mu, spec.ineq_constraints))
    return abs(hamiltonian(spec, x_T, u_T, psi_T, T) - drift)


def check_left_endpoint(spec: ProblemSpec, psi_t0: np.ndarray, x0_actual: np.ndarray, t0: float) -> MultiplierFit:
    """
    psi(t0) = sum gamma_l dchi^l/dx + sum delta_l dchi^l/dx with delta >= 0.

    Returns gamma in `nu` and delta in `mu`.

    Raises:
        TransversalityMisuseError: If the problem has no left-endpoint constraints
    """
    left = spec.left_endpoint
    if left is None or not (left.eq_constraints or left.ineq_constraints):
        raise TransversalityMisuseError(f"problem '{spec.name}' has a fixed initial state")
    n = spec.state_dim
    x0_actual = as_vector(x0_actual, n)
    A_eq = _gradient_matrix(left.eq_constraints, x0_actual, t0, n)
    A_in = _gradient_matrix(left.ineq_constraints, x0_actual, t0, n)
    return _sign_constrained_lsq(-as_vector(psi_t0, n), A_eq, A_in)


def _has_time_partials(spec: ProblemSpec, x_T: np.ndarray, T: float) -> bool:
    functions = [spec.terminal_cost] + spec.constraints
    return any(c.time_partial(x_T, T) != 0.0 for c in functions)


def check_transversality(spec: ProblemSpec, adjoint: AdjointTrajectory, traj: Trajectory, grid: ControlGrid,
                         mu_tol: float = MU_TOL) -> TransversalityReport:
    """
    All transversality conditions that apply to the problem.

    Runs the right-endpoint identity, then the free-time or moving-manifold
    Hamiltonian condition for free terminal time, then the left-endpoint
    condition when the initial state is constrained.
    """
    report = check_transversality_fixed(spec, adjoint, traj, grid, mu_tol)
    x_T, u_T, psi_T, T = traj.final_state, grid.values[-1], adjoint.psi[-1], grid.T
    if spec.time_mode == TimeMode.FREE:
        if _has_time_partials(spec, x_T, T):
            report.hamiltonian_residual = check_moving_manifold(spec, x_T, u_T, psi_T, T, report.nu, report.mu)
        else:
            report.hamiltonian_residual = check_free_time(spec, x_T, u_T, psi_T, T)

    left = spec.left_endpoint
    if left is not None and (left.eq_constraints or left.ineq_constraints):
        fit = check_left_endpoint(spec, adjoint.psi[0], traj.states[0], grid.t0)
        report.left_residual = fit.residual
        report.left_gamma, report.left_delta = fit.nu, fit.mu
        if left.free_t0:
            report.notes.append("free t0: the Hamiltonian condition at the initial time is not checked")
    else:
        report.notes.append("left endpoint fixed: left transversality not applicable")
    logger.info(f"Transversality on '{spec.name}': endpoint residual {report.endpoint_residual:.3e}")
    return report


def estimate_terminal_adjoint(spec: ProblemSpec, x_T: np.ndarray, u_T: np.ndarray, T: float,
                              active_tol: float = 1e-3) -> Tuple[np.ndarray, MultiplierFit]:
    """
    Terminal adjoint of a numerical free-time solution.

    Picks the min-norm multipliers (nu free, mu >= 0 on inequalities within
    `active_tol` of activity) satisfying the free-time identity
    <psi(T), f> = dG/dt with psi(T) = -dG/dx, and returns psi(T) with them.
    `residual` is the defect of the identity (0 unless it cannot be met).

    Raises:
        TransversalityMisuseError: On a fixed-time problem
    """
    if spec.time_mode == TimeMode.FIXED:
        raise TransversalityMisuseError("fixed terminal time leaves the multipliers undetermined")
    n = spec.state_dim
    x_T = as_vector(x_T, n)
    f = spec.f(x_T, as_vector(u_T, spec.control_dim), T)
    g0 = spec.terminal_cost.gradient(x_T, T)
    A_eq = _gradient_matrix(spec.eq_constraints, x_T, T, n)
    A_in = _gradient_matrix(spec.ineq_constraints, x_T, T, n)
    active = np.array([c.evaluate(x_T, T) >= -active_tol for c in spec.ineq_constraints], dtype=bool)

    # a.nu + c.mu = r
    a = A_eq.T @ f + np.array([c.time_partial(x_T, T) for c in spec.eq_constraints])
    c = A_in.T @ f + np.array([c.time_partial(x_T, T) for c in spec.ineq_constraints])
    c = np.where(active, c, 0.0)
    r = -(g0 @ f + spec.terminal_cost.time_partial(x_T, T))

    nu, mu = np.zeros(a.size), np.zeros(c.size)
    residual = abs(float(r))
    if r != 0.0:
        s = np.sign(r)
        scale = float(a @ a + np.sum(c[c * s > 0] ** 2))
        if scale > 0.0:
            t = r / scale
            nu, mu = t * a, np.maximum(t * c, 0.0)
            residual = abs(float(a @ nu + c @ mu - r))
        else:
            logger.warning("No multipliers satisfy the free-time identity at this endpoint")
    psi_T = -(g0 + A_eq @ nu + A_in @ mu)
    return psi_T, MultiplierFit(nu=nu.tolist(), mu=mu.tolist(), residual=residual)


def _check_control_affine(spec: ProblemSpec, x: np.ndarray, t: float, seed: int, tol: float) -> None:
    rng = np.random.default_rng(seed)
    lo = np.where(np.isfinite(spec.control_lower), spec.control_lower, -1.0)
    hi = np.where(np.isfinite(spec.control_upper), spec.control_upper, 1.0)
    samples = [spec.f_u(x, rng.uniform(lo, hi), t) for _ in range(3)]
    if any(np.max(np.abs(s - samples[0])) > tol for s in samples[1:]):
        raise UnsupportedDynamicsError(f"dynamics of '{spec.name}' are not affine in the control")


def switching_function(spec: ProblemSpec, adjoint: AdjointTrajectory,
                       traj: Optional[Trajectory] = None) -> np.ndarray:
    """sigma = f_u^T psi at every node; f_u is taken at x0 when no trajectory is given."""
    u_ref = 0.5 * (np.where(np.isfinite(spec.control_lower), spec.control_lower, 0.0)
                   + np.where(np.isfinite(spec.control_upper), spec.control_upper, 0.0))
    states = traj.states if traj is not None else np.tile(spec.x0, (adjoint.psi.shape[0], 1))
    return np.array([spec.f_u(x, u_ref, t).T @ p for x, p, t in zip(states, adjoint.psi, adjoint.times)])


def bang_bang_control(spec: ProblemSpec, adjoint: AdjointTrajectory, traj: Optional[Trajectory] = None,
                      tol: float = 1e-10, seed: int = 0) -> Tuple[ControlGrid, np.ndarray]:
    """
    Control maximizing H over the box for dynamics affine in u.

    Interval k takes the upper bound where the switching function averaged over
    its two nodes is positive and the lower bound where it is negative. Intervals
    where sigma changes sign or stays within `tol` of zero are flagged singular;
    the control there is the box midpoint only when sigma vanishes.

    Returns:
        tuple: (ControlGrid, singular mask over intervals)

    Raises:
        UnsupportedDynamicsError: If f_u depends on u
    """
    x_probe = traj.states[0] if traj is not None else spec.x0
    _check_control_affine(spec, x_probe, float(adjoint.times[0]), seed, tol)
    sigma = switching_function(spec, adjoint, traj)
    mean = 0.5 * (sigma[:-1] + sigma[1:])
    mid = 0.5 * (spec.control_lower + spec.control_upper)
    values = np.where(mean > tol, spec.control_upper, np.where(mean < -tol, spec.control_lower, mid))
    crossing = sigma[:-1] * sigma[1:] < 0.0
    flat = (np.abs(sigma[:-1]) <= tol) & (np.abs(sigma[1:]) <= tol)
    singular = np.any(crossing | flat, axis=1)
    times = adjoint.times
    grid = ControlGrid(n_intervals=len(times) - 1, t0=float(times[0]), T=float(times[-1]), values=values)
    if singular.all():
        logger.warning("Switching function vanishes on every interval; control is singular")
    return grid, singular


def control_optimality_residual(spec: ProblemSpec, adjoint: AdjointTrajectory, traj: Trajectory,
                                grid: ControlGrid) -> float:
    """L2 norm of f_u^T psi; zero at an interior optimum of an unconstrained control."""
    sigma = np.array([spec.f_u(x, u, t).T @ p
                      for x, u, p, t in zip(traj.states, grid.node_controls(), adjoint.psi, grid.times)])
    return l2_norm_on_grid(sigma, grid.h)


def maximum_principle_gap(spec: ProblemSpec, adjoint: AdjointTrajectory, traj: Trajectory,
                          grid: ControlGrid) -> float:
    """max over nodes of max_{v in box} H(v) - H(u_k), for dynamics affine in u."""
    gaps = []
    for x, u, p, t in zip(traj.states, grid.node_controls(), adjoint.psi, grid.times):
        sigma = spec.f_u(x, u, t).T @ p
        best = np.where(sigma > 0.0, spec.control_upper, spec.control_lower)
        gaps.append(hamiltonian(spec, x, best, p, t) - hamiltonian(spec, x, u, p, t))
    return float(max(gaps))
