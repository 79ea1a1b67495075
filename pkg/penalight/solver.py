"""Direct transcription: tanh-parameterized controls, Nelder-Mead with restarts, the exactness sweep"""

__all__ = ['logger', 'SENTINEL', 'FEAS_TOL', 'MIN_HORIZON', 'HORIZON_TOL', 'InitPattern', 'SolveOptions', 'NelderMeadResult',
           'SolveResult', 'SweepRow', 'SweepTable', 'nelder_mead', 'parameterize_control', 'initial_theta',
           'switch_structure', 'bang_bang_values', 'solve_time_optimal', 'exactness_sweep']

from typing import Callable, List, Optional, Sequence, Tuple
from enum import Enum

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.optimize import minimize, minimize_scalar

from .model import ProblemSpec, TimeMode
from .discretize import ControlGrid, Trajectory, IntegrationDivergenceError, integrate_rk4
from .penalty import TOL_ACTIVE, penalized_objective
from .utils import setup_logger, as_vector, env_seed

logger = setup_logger(__name__)

SENTINEL = 1e30
FEAS_TOL = 1e-3
MIN_HORIZON = 1e-6
HORIZON_TOL = 1e-12


class InitPattern(str, Enum):
    """Initial control guess"""
    BANG_BANG = "bang_bang"
    CONSTANT = "constant"
    CUSTOM = "custom"


class SolveOptions(BaseModel):
    """Transcription and Nelder-Mead settings"""
    n_intervals: int = Field(default=200, ge=1)
    rho: float = Field(default=100.0, ge=0.0)
    tanh_slope: float = Field(default=10.0, gt=0.0)
    T_init: float = 3.5
    init_pattern: InitPattern = InitPattern.BANG_BANG
    init_value: float = 0.0
    init_values: Optional[List[float]] = None
    max_iters: int = Field(default=20000, ge=1)
    f_tol: float = Field(default=1e-8, gt=0.0)
    x_tol: float = Field(default=1e-8, gt=0.0)
    max_restarts: int = Field(default=10, ge=0)
    seed: Optional[int] = None
    tol_active: float = Field(default=TOL_ACTIVE, ge=0.0)
    polish_switches: bool = True
    saturation_tol: float = Field(default=0.05, gt=0.0, lt=0.5)
    polish_max_iters: int = Field(default=2000, ge=1)
    polish_window: float = Field(default=10.0, gt=0.0)
    polish_restarts: int = Field(default=10, ge=0)

    @field_validator('T_init')
    @classmethod
    def _finite(cls, v: float) -> float:
        if not np.isfinite(v):
            raise ValueError("T_init must be finite")
        return v


class NelderMeadResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    x: np.ndarray
    fun: float
    iterations: int
    n_evaluations: int
    converged: bool


class SolveResult(BaseModel):
    """Best transcription found for a free-time problem"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    T_opt: float
    theta: np.ndarray
    control: ControlGrid
    trajectory: Trajectory
    objective: float
    cost: float
    terminal_violation: float = Field(..., ge=0.0)
    iterations: int
    restarts: int
    converged: bool
    polished: bool = False
    history: List[float] = Field(default_factory=list)
    n_evaluations: int = 0


def _axis_simplex(x0: np.ndarray, steps: np.ndarray) -> np.ndarray:
    return np.vstack([x0, x0 + np.diag(steps)])


def nelder_mead(objective: Callable[[np.ndarray], float], x0: Sequence[float], max_iters: int = 20000,
                f_tol: float = 1e-8, x_tol: float = 1e-8,
                initial_simplex: Optional[np.ndarray] = None) -> NelderMeadResult:
    """
    Minimize with the Nelder-Mead simplex method.

    Coefficients are reflection 1, expansion 2, contraction 0.5 and shrink 0.5.
    The default initial simplex is x0 plus x0 + 0.05 (1 + |x0_i|) e_i. Stops when
    the simplex f-spread is below `f_tol` and its vertex spread below `x_tol`, or
    after `max_iters` iterations. Non-finite objective values become SENTINEL.

    Returns:
        NelderMeadResult: Best vertex; `converged` is False at the iteration cap
    """
    x0 = as_vector(x0)
    if x0.size < 1:
        raise ValueError("nelder_mead needs at least one variable")
    if initial_simplex is None:
        initial_simplex = _axis_simplex(x0, 0.05 * (1.0 + np.abs(x0)))

    def total(x: np.ndarray) -> float:
        with np.errstate(all='ignore'):
            value = float(objective(x))
        return value if np.isfinite(value) else SENTINEL

    res = minimize(total, x0, method='Nelder-Mead',
                   options={'initial_simplex': initial_simplex, 'maxiter': max_iters,
                            'maxfev': np.inf, 'xatol': x_tol, 'fatol': f_tol, 'adaptive': False})
    return NelderMeadResult(x=np.asarray(res.x, dtype=float), fun=float(res.fun), iterations=int(res.nit),
                            n_evaluations=int(res.nfev), converged=bool(res.success))


def _box(spec: ProblemSpec):
    lo, hi = spec.control_lower, spec.control_upper
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("the tanh parameterization needs a bounded control box")
    return 0.5 * (lo + hi), 0.5 * (hi - lo)


def parameterize_control(theta: np.ndarray, spec: ProblemSpec, T: float, tanh_slope: float = 10.0) -> ControlGrid:
    """
    u_k = mid + half * tanh(slope * theta_k) per component.

    On the box [-1, 1] this is tanh(slope * theta) exactly.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.ndim == 1:
        theta = theta.reshape(-1, spec.control_dim)
    mid, half = _box(spec)
    values = mid + half * np.tanh(tanh_slope * theta)
    return ControlGrid(n_intervals=theta.shape[0], t0=spec.t0, T=T, values=values)


def _theta_for(u: np.ndarray, spec: ProblemSpec, tanh_slope: float) -> np.ndarray:
    mid, half = _box(spec)
    with np.errstate(divide='ignore', invalid='ignore'):
        s = np.where(half > 0, (u - mid) / np.where(half > 0, half, 1.0), 0.0)
    return np.arctanh(np.clip(s, -1.0 + 1e-12, 1.0 - 1e-12)) / tanh_slope


def initial_theta(spec: ProblemSpec, opts: SolveOptions) -> np.ndarray:
    """Starting theta (N x m) for the chosen init pattern."""
    N, m = opts.n_intervals, spec.control_dim
    if opts.init_pattern == InitPattern.BANG_BANG:
        # lower bound on the first third, upper bound after
        theta = np.full((N, m), 0.5)
        theta[:N // 3] = -0.5
        return theta
    if opts.init_pattern == InitPattern.CONSTANT:
        return np.tile(_theta_for(np.full(m, opts.init_value), spec, opts.tanh_slope), (N, 1))
    if opts.init_values is None:
        raise ValueError("init_pattern 'custom' needs init_values")
    u = np.asarray(opts.init_values, dtype=float).reshape(-1, m)
    if u.shape[0] != N:
        raise ValueError(f"init_values has {u.shape[0]} rows for {N} intervals")
    return np.vstack([_theta_for(row, spec, opts.tanh_slope) for row in u])


def _search_with_restarts(objective: Callable[[np.ndarray], float], x0: np.ndarray, first_steps: np.ndarray,
                          restart_steps: Callable[[np.ndarray], np.ndarray], opts: SolveOptions,
                          rng: np.random.Generator, max_iters: int,
                          max_restarts: int, stage: str) -> Tuple[NelderMeadResult, List[float], int]:
    """
    Nelder-Mead from an axis simplex, then fresh jittered simplices around the
    incumbent while the last run did not converge or still improved by more
    than f_tol, up to `max_restarts`.

    Returns:
        tuple: (best point with totals, incumbent after each run, restarts used)
    """
    run = nelder_mead(objective, x0, max_iters, opts.f_tol, opts.x_tol,
                      initial_simplex=_axis_simplex(x0, first_steps))
    best_x, best_f = run.x, run.fun
    history = [best_f]
    iterations, evaluations, restarts = run.iterations, run.n_evaluations, 0
    improvement = np.inf
    logger.info(f"{stage}: F = {best_f:.8f}, converged={run.converged}")
    while restarts < max_restarts and not (run.converged and improvement <= opts.f_tol):
        steps = restart_steps(best_x) * (1.0 + 0.5 * rng.uniform(-1.0, 1.0, best_x.size))
        run = nelder_mead(objective, best_x, max_iters, opts.f_tol, opts.x_tol,
                          initial_simplex=_axis_simplex(best_x, steps))
        restarts += 1
        iterations += run.iterations
        evaluations += run.n_evaluations
        improvement = best_f - run.fun
        if run.fun < best_f:
            best_x, best_f = run.x, run.fun
        history.append(best_f)
        logger.info(f"{stage} restart {restarts}: F = {best_f:.8f}, improvement {improvement:.3e}")
    converged = bool(run.converged and improvement <= opts.f_tol)
    return (NelderMeadResult(x=best_x, fun=best_f, iterations=iterations, n_evaluations=evaluations,
                             converged=converged), history, restarts)


def switch_structure(control: ControlGrid, spec: ProblemSpec,
                     saturation_tol: float = 0.05) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """
    Arc levels and switch times of a saturated scalar control.

    An interval is saturated when u lies within `saturation_tol * (hi - lo)` of a
    bound. A switch sits at the midpoint of the gap between consecutive saturated
    intervals at opposite bounds.

    Returns:
        tuple or None: (level of each arc, switch times); None when the control is
        not scalar, has no switch, or starts or ends unsaturated
    """
    if spec.control_dim != 1 or control.values.shape[1] != 1:
        return None
    lo, hi = float(spec.control_lower[0]), float(spec.control_upper[0])
    if not (np.isfinite(lo) and np.isfinite(hi)) or hi <= lo:
        return None
    u, times = control.values[:, 0], control.times
    band = saturation_tol * (hi - lo)
    label = np.where(u <= lo + band, -1, np.where(u >= hi - band, 1, 0))
    if label[0] == 0 or label[-1] == 0:
        return None
    arcs, switches, previous = [label[0]], [], 0
    for k in np.flatnonzero(label):
        if label[k] != arcs[-1]:
            arcs.append(label[k])
            switches.append(0.5 * (times[previous + 1] + times[k]))
        previous = k
    if not switches:
        return None
    return np.where(np.array(arcs) > 0, hi, lo), np.array(switches)


def bang_bang_values(levels: np.ndarray, switches: np.ndarray, t0: float, T: float, n_intervals: int) -> np.ndarray:
    """Interval averages of the piecewise-constant control with the given arcs."""
    edges = np.concatenate([[t0], switches, [T]])
    mass = np.concatenate([[0.0], np.cumsum(levels * np.diff(edges))])
    times = np.linspace(t0, T, n_intervals + 1)
    return np.diff(np.interp(times, edges, mass)) / np.diff(times)


def solve_time_optimal(spec: ProblemSpec, opts: Optional[SolveOptions] = None) -> SolveResult:
    """
    Minimize F = Phi0(x_T, T) + rho * max(phi_term, 0) over (T, theta).

    After the first Nelder-Mead run the search restarts from a fresh simplex
    (scale 0.01 (1 + |x_i|), seeded jitter) around the incumbent while the run
    did not converge or still improved by more than f_tol, up to max_restarts.

    Saturated theta cannot move a switch of a scalar control by part of an
    interval. With `polish_switches` the search then continues over the switch
    times: each candidate set gets its best horizon within `polish_window`
    intervals of the simplex T (bounded scalar search), the interval holding a
    switch takes the average control, and the result is kept when it lowers F.

    Raises:
        ValueError: If the problem is not free-time with terminal constraints, or T_init <= t0
    """
    opts = opts or SolveOptions()
    if spec.time_mode != TimeMode.FREE:
        raise ValueError(f"problem '{spec.name}' does not have a free terminal time")
    if not spec.constraints:
        raise ValueError(f"problem '{spec.name}' has no terminal constraints")
    if not opts.T_init > spec.t0 + MIN_HORIZON:
        raise ValueError(f"T_init = {opts.T_init} must exceed t0 = {spec.t0}")
    if opts.rho == 0.0:
        logger.warning("rho = 0: terminal constraints are not penalized")

    N, m = opts.n_intervals, spec.control_dim

    def grid_objective(grid: ControlGrid) -> float:
        try:
            return penalized_objective(spec, grid, opts.rho, tol_active=opts.tol_active).F_lambda
        except IntegrationDivergenceError:
            return SENTINEL

    def objective(z: np.ndarray) -> float:
        T = z[0]
        if not np.isfinite(T) or T < spec.t0 + MIN_HORIZON:
            return SENTINEL
        return grid_objective(parameterize_control(z[1:].reshape(N, m), spec, T, opts.tanh_slope))

    seed = opts.seed if opts.seed is not None else env_seed()
    rng = np.random.default_rng(seed)
    x0 = np.concatenate([[opts.T_init], initial_theta(spec, opts).ravel()])

    run, history, restarts = _search_with_restarts(
        objective, x0, 0.05 * (1.0 + np.abs(x0)), lambda x: 0.01 * (1.0 + np.abs(x)), opts, rng,
        opts.max_iters, opts.max_restarts, "Initial run")
    best_x, best_f = run.x, run.fun
    iterations, evaluations, converged = run.iterations, run.n_evaluations, run.converged
    if not converged:
        logger.warning(f"Solver stopped after {restarts} restarts without meeting tolerances")

    polished = False
    structure = switch_structure(parameterize_control(best_x[1:].reshape(N, m), spec, best_x[0], opts.tanh_slope),
                                 spec, opts.saturation_tol) if opts.polish_switches else None
    if structure is not None:
        levels, switches = structure
        T_ref = float(best_x[0])
        h = (T_ref - spec.t0) / N
        window = opts.polish_window * h

        def best_horizon(s: np.ndarray) -> Tuple[float, float]:
            # offsets from T_ref keep the bounded search tolerance absolute
            def offset_objective(d: float) -> float:
                T = T_ref + d
                values = bang_bang_values(levels, s, spec.t0, T, N)
                return grid_objective(ControlGrid(n_intervals=N, t0=spec.t0, T=T, values=values))

            lo = max(-window, s[-1] - T_ref, spec.t0 + MIN_HORIZON - T_ref)
            if lo >= window:
                return T_ref, SENTINEL
            res = minimize_scalar(offset_objective, bounds=(lo, window), method='bounded',
                                  options={'xatol': HORIZON_TOL})
            return T_ref + float(res.x), float(res.fun)

        def switch_objective(s: np.ndarray) -> float:
            if not np.all(np.diff(np.concatenate([[spec.t0], s])) > 0.0) or s[-1] >= T_ref + window:
                return SENTINEL
            return best_horizon(s)[1]

        polish, polish_history, _ = _search_with_restarts(
            switch_objective, switches, np.full(switches.size, h), lambda s: np.full(s.size, 0.25 * h), opts, rng,
            opts.polish_max_iters, opts.polish_restarts, "Switch polish")
        iterations += polish.iterations
        evaluations += polish.n_evaluations
        if polish.fun < best_f:
            T, _ = best_horizon(polish.x)
            values = bang_bang_values(levels, polish.x, spec.t0, T, N)
            theta = _theta_for(values[:, None], spec, opts.tanh_slope)
            best_x, best_f = np.concatenate([[T], theta.ravel()]), polish.fun
            ceiling = history[-1]
            history.extend(min(v, ceiling) for v in polish_history)
            converged, polished = polish.converged, True
            logger.info(f"Switch polish: F = {best_f:.8f}, T = {T:.6f}, switches {np.round(polish.x, 6)}")
        else:
            logger.info("Switch polish did not lower F; keeping the simplex result")

    T_opt = float(best_x[0])
    theta = best_x[1:].reshape(N, m)
    control = parameterize_control(theta, spec, T_opt, opts.tanh_slope)
    trajectory = integrate_rk4(spec, control)
    value = penalized_objective(spec, control, opts.rho, tol_active=opts.tol_active)
    return SolveResult(
        T_opt=T_opt,
        theta=theta,
        control=control,
        trajectory=trajectory,
        objective=value.F_lambda,
        cost=value.cost,
        terminal_violation=max(value.phi_term, 0.0),
        iterations=iterations,
        restarts=restarts,
        converged=converged,
        polished=polished,
        history=history,
        n_evaluations=evaluations,
    )


class SweepRow(BaseModel):
    lam: float
    objective: float
    cost: float
    terminal_violation: float
    T_opt: float
    converged: bool


class SweepTable(BaseModel):
    """Solved objective and terminal violation against the penalty weight"""
    rows: List[SweepRow] = Field(default_factory=list)
    feas_tol: float = FEAS_TOL

    @property
    def threshold(self) -> Optional[float]:
        """Smallest lambda whose violation is within feas_tol."""
        feasible = [r.lam for r in self.rows if r.terminal_violation <= self.feas_tol]
        return min(feasible) if feasible else None

    @property
    def violation_non_increasing(self) -> bool:
        v = [r.terminal_violation for r in self.rows]
        return all(b <= a + self.feas_tol for a, b in zip(v, v[1:]))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.model_dump() for r in self.rows],
                            columns=list(SweepRow.model_fields))


def exactness_sweep(spec: ProblemSpec, opts: Optional[SolveOptions], lambdas: Sequence[float],
                    feas_tol: float = FEAS_TOL) -> SweepTable:
    """
    Solve once per penalty weight (ascending) and tabulate the terminal violation.

    Raises:
        ValueError: If a lambda is negative or the list is empty
    """
    opts = opts or SolveOptions()
    if len(lambdas) == 0:
        raise ValueError("lambdas must not be empty")
    if any(lam < 0 for lam in lambdas):
        raise ValueError("lambdas must be nonnegative")
    table = SweepTable(feas_tol=feas_tol)
    for lam in sorted(float(v) for v in lambdas):
        result = solve_time_optimal(spec, opts.model_copy(update={'rho': lam}))
        table.rows.append(SweepRow(lam=lam, objective=result.objective, cost=result.cost,
                                   terminal_violation=result.terminal_violation, T_opt=result.T_opt,
                                   converged=result.converged))
        logger.info(f"lambda = {lam:g}: F = {result.objective:.6f}, violation {result.terminal_violation:.3e}")
    return table
