"""Analytic harmonic-oscillator solution and the numerical-vs-analytic benchmark"""

__all__ = ['logger', 'AnalyticOscillatorSolution', 'BenchThresholds', 'BenchReport', 'analytic_oscillator',
           'detect_switch', 'run_bench']

from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .model import ProblemSpec, SQRT5, OSCILLATOR_TAU, OSCILLATOR_T_STAR, builtin_problem
from .discretize import ControlGrid, Trajectory, AdjointTrajectory, integrate_rk4, integrate_adjoint
from .pmp import TransversalityReport, check_transversality, hamiltonian
from .regularity import UscReport, UscVerdict, sample_probes, usc_verdict
from .solver import SolveOptions, solve_time_optimal
from .utils import setup_logger

logger = setup_logger(__name__)


class AnalyticOscillatorSolution(BaseModel):
    """
    Time-optimal transfer of x'' + x = u, |u| <= 1, from (2, 0) to x2 = 0.

    u = -1 on [0, tau] (circle of radius 3 about (-1, 0)), then u = +1 on
    [tau, T*] (radius sqrt5 about (1, 0)) with T* - tau = pi/2.
    """
    model_config = ConfigDict(frozen=True)

    T_star: float = OSCILLATOR_T_STAR
    tau: float = OSCILLATOR_TAU
    switch_point: Tuple[float, float] = (1.0, -SQRT5)
    final_point: Tuple[float, float] = (1.0 - SQRT5, 0.0)
    psi1_T: float = 0.0
    psi2_T: float = 1.0 / SQRT5
    psi3: float = -1.0

    @property
    def psi_T(self) -> np.ndarray:
        return np.array([self.psi1_T, self.psi2_T, self.psi3])

    def control_at(self, t: float) -> float:
        return -1.0 if t < self.tau else 1.0

    def state_at(self, t: float) -> np.ndarray:
        if t <= self.tau:
            return np.array([3.0 * np.cos(t) - 1.0, -3.0 * np.sin(t), t])
        s = t - self.tau
        return np.array([1.0 - SQRT5 * np.sin(s), -SQRT5 * np.cos(s), t])

    def adjoint_at(self, t: float) -> np.ndarray:
        s = t - self.T_star
        return np.array([np.sin(s) / SQRT5, np.cos(s) / SQRT5, self.psi3])

    def control_grid(self, n_intervals: int) -> ControlGrid:
        """Analytic control sampled at interval midpoints of [0, T*]."""
        h = self.T_star / n_intervals
        mids = (np.arange(n_intervals) + 0.5) * h
        return ControlGrid(n_intervals=n_intervals, t0=0.0, T=self.T_star,
                           values=[self.control_at(t) for t in mids])

    def trajectory(self, n_intervals: int) -> Trajectory:
        times = np.linspace(0.0, self.T_star, n_intervals + 1)
        return Trajectory(times=times, states=np.array([self.state_at(t) for t in times]))

    def adjoint(self, n_intervals: int) -> AdjointTrajectory:
        times = np.linspace(0.0, self.T_star, n_intervals + 1)
        return AdjointTrajectory(times=times, psi=np.array([self.adjoint_at(t) for t in times]))

    def integrate_arcs(self, spec: ProblemSpec, n_intervals: int) -> np.ndarray:
        """
        RK4 response to the analytic control with the switch placed on a node.

        The intervals are split between the two arcs in proportion to their lengths.
        """
        n1 = max(1, int(round(n_intervals * self.tau / self.T_star)))
        n2 = max(1, n_intervals - n1)
        first = integrate_rk4(spec, ControlGrid(n_intervals=n1, t0=0.0, T=self.tau, values=np.full(n1, -1.0)))
        second_spec = spec.model_copy(update={'x0': first.final_state.copy(), 't0': self.tau})
        second = integrate_rk4(second_spec, ControlGrid(n_intervals=n2, t0=self.tau, T=self.T_star,
                                                        values=np.full(n2, 1.0)))
        return second.final_state


def analytic_oscillator() -> AnalyticOscillatorSolution:
    return AnalyticOscillatorSolution()


def detect_switch(control: ControlGrid, threshold: float = 0.5) -> List[float]:
    """
    Switch times of a scalar bang-bang control.

    Intervals with |u| >= threshold are saturated. A switch is reported between
    consecutive saturated intervals of opposite sign, at the midpoint of the gap
    between them (the shared node when they are adjacent).
    """
    if control.values.shape[1] != 1:
        raise ValueError("detect_switch needs a scalar control")
    u = control.values[:, 0]
    times = control.times
    switches: List[float] = []
    previous: Optional[int] = None
    for k, value in enumerate(u):
        if abs(value) < threshold:
            continue
        if previous is not None and np.sign(u[previous]) != np.sign(value):
            switches.append(0.5 * (times[previous + 1] + times[k]))
        previous = k
    return switches


class BenchThresholds(BaseModel):
    T_error: float = 1e-3
    terminal_violation: float = 1e-3
    switch_time_intervals: float = 2.0
    endpoint_error: float = 1e-2
    endpoint_residual: float = 1e-8
    hamiltonian_max: float = 1e-8


class BenchReport(BaseModel):
    """Numerical oscillator solution against the analytic one"""
    T_opt: float
    T_error: float
    switch_times: List[float] = Field(default_factory=list)
    switch_time_error: Optional[float] = None
    terminal_violation: float
    endpoint_error: float
    hamiltonian_max: float
    converged: bool
    transversality_report: TransversalityReport
    usc_report: UscReport
    thresholds: BenchThresholds = Field(default_factory=BenchThresholds)
    failures: List[str] = Field(default_factory=list)
    passed: bool


def run_bench(opts: Optional[SolveOptions] = None,
              thresholds: Optional[BenchThresholds] = None) -> BenchReport:
    """
    Solve the oscillator and compare with the analytic solution.

    The adjoint is integrated backward along the numerical trajectory from the
    analytic psi(T). Failures are recorded in the report, never raised.
    """
    opts = opts or SolveOptions()
    limits = thresholds or BenchThresholds()
    spec = builtin_problem("oscillator")
    exact = analytic_oscillator()

    result = solve_time_optimal(spec, opts)
    control, traj = result.control, result.trajectory
    T_error = abs(result.T_opt - exact.T_star)
    switches = detect_switch(control)
    switch_error = abs(switches[0] - exact.tau) if len(switches) == 1 else None
    endpoint_error = float(np.linalg.norm(traj.final_state[:2] - np.array(exact.final_point)))

    adjoint = integrate_adjoint(spec, traj, control, exact.psi_T)
    transversality = check_transversality(spec, adjoint, traj, control)
    usc = usc_verdict(spec, sample_probes(spec))

    nodes = exact.trajectory(opts.n_intervals)
    h_max = max(abs(hamiltonian(spec, x, [exact.control_at(t)], exact.adjoint_at(t), t))
                for x, t in zip(nodes.states, nodes.times))

    failures = []
    if T_error > limits.T_error:
        failures.append(f"T_error {T_error:.3e} > {limits.T_error:.1e}")
    if result.terminal_violation > limits.terminal_violation:
        failures.append(f"terminal violation {result.terminal_violation:.3e} > {limits.terminal_violation:.1e}")
    if switch_error is None:
        failures.append(f"expected one switch, found {len(switches)}")
    elif switch_error > limits.switch_time_intervals * control.h:
        failures.append(f"switch time error {switch_error:.3e} > {limits.switch_time_intervals:g} h")
    if endpoint_error > limits.endpoint_error:
        failures.append(f"endpoint error {endpoint_error:.3e} > {limits.endpoint_error:.1e}")
    if transversality.endpoint_residual > limits.endpoint_residual:
        failures.append(f"endpoint residual {transversality.endpoint_residual:.3e}")
    if h_max > limits.hamiltonian_max:
        failures.append(f"analytic Hamiltonian {h_max:.3e} is not zero")
    if usc.verdict != UscVerdict.HOLDS:
        failures.append("USC fails")

    report = BenchReport(
        T_opt=result.T_opt,
        T_error=T_error,
        switch_times=switches,
        switch_time_error=switch_error,
        terminal_violation=result.terminal_violation,
        endpoint_error=endpoint_error,
        hamiltonian_max=h_max,
        converged=result.converged,
        transversality_report=transversality,
        usc_report=usc,
        thresholds=limits,
        failures=failures,
        passed=not failures,
    )
    if report.passed:
        logger.info(f"Bench passed: T_opt = {result.T_opt:.6f}, error {T_error:.2e}")
    else:
        logger.warning(f"Bench failed: {'; '.join(failures)}")
    return report
