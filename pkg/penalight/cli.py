"""Command-line entry point: solve, verify, sweep and benchmark"""

__all__ = ['logger', 'app', 'EXIT_OK', 'EXIT_CONFIG', 'EXIT_NOT_CONVERGED', 'EXIT_USC_FAILS', 'Emit', 'RunConfig',
           'SolveReport', 'load_run_config', 'write_trajectory_csv', 'write_adjoint_csv', 'write_phase_svg',
           'solve', 'check_usc', 'check_transversality_cmd', 'bench', 'sweep_lambda', 'validate', 'run_app']

from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Set

import numpy as np
import pandas as pd
import typer
from pydantic import BaseModel, Field, ValidationError, field_validator

from .model import available_problems, builtin_problem, validate_problem, TimeMode
from .discretize import Trajectory, AdjointTrajectory, ControlGrid, integrate_adjoint
from .penalty import UnsupportedPointError
from .regularity import UscVerdict, InsufficientProbesError, sample_probes, usc_verdict
from .pmp import TransversalityReport, check_transversality, estimate_terminal_adjoint
from .solver import InitPattern, SolveOptions, solve_time_optimal, exactness_sweep
from .bench import analytic_oscillator, run_bench
from .utils import setup_logger, load_json_safely, save_json_safely

logger = setup_logger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NOT_CONVERGED = 2
EXIT_USC_FAILS = 3

app = typer.Typer(help="Exact-penalty optimal control: solve, verify regularity and transversality.")


class Emit(str, Enum):
    TRAJECTORY_CSV = "trajectory_csv"
    ADJOINT_CSV = "adjoint_csv"
    REPORT_TXT = "report_txt"
    REPORT_JSON = "report_json"
    PHASE_SVG = "phase_svg"


class RunConfig(BaseModel):
    """Run settings; JSON config files use these field names"""
    problem: str = "oscillator"
    n_intervals: int = Field(default=200, ge=1)
    rho: float = Field(default=100.0, ge=0.0)
    lambda_sweep: Optional[List[float]] = None
    T_init: float = 3.5
    init_pattern: InitPattern = InitPattern.BANG_BANG
    init_value: float = 0.0
    max_iters: int = Field(default=20000, ge=1)
    max_restarts: int = Field(default=10, ge=0)
    seed: Optional[int] = None
    output_dir: Path = Path("penalight_out")
    emit: Set[Emit] = Field(default_factory=lambda: {Emit.TRAJECTORY_CSV, Emit.ADJOINT_CSV,
                                                      Emit.REPORT_TXT, Emit.REPORT_JSON})

    @field_validator('problem')
    @classmethod
    def _registered(cls, v: str) -> str:
        if v not in available_problems():
            raise ValueError(f"unknown problem '{v}'; available problems: {', '.join(available_problems())}")
        return v

    @field_validator('T_init')
    @classmethod
    def _finite(cls, v: float) -> float:
        if not np.isfinite(v):
            raise ValueError("T_init must be finite")
        return v

    def solve_options(self) -> SolveOptions:
        return SolveOptions(n_intervals=self.n_intervals, rho=self.rho, T_init=self.T_init,
                            init_pattern=self.init_pattern, init_value=self.init_value,
                            max_iters=self.max_iters, max_restarts=self.max_restarts, seed=self.seed)


class SolveReport(BaseModel):
    """Summary of a solver run"""
    problem: str
    n_intervals: int
    rho: float
    T_opt: float
    objective: float
    cost: float
    terminal_violation: float
    iterations: int
    restarts: int
    n_evaluations: int
    converged: bool
    polished: bool = False
    history: List[float] = Field(default_factory=list)


def load_run_config(config_path: Optional[Path] = None, **overrides) -> RunConfig:
    """
    Merge a JSON config file with command-line overrides (flags win).

    Raises:
        ValueError: If the file cannot be read or the merged settings are invalid
    """
    data: Dict = load_json_safely(config_path) if config_path is not None else {}
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ValueError(str(e))


def _config_or_exit(config_path: Optional[Path], **overrides) -> RunConfig:
    try:
        return load_run_config(config_path, **overrides)
    except ValueError as e:
        logger.error(f"Invalid configuration: {str(e)}")
        typer.echo(f"Configuration error: {str(e)}", err=True)
        raise typer.Exit(EXIT_CONFIG)


def write_trajectory_csv(path: Path, traj: Trajectory, grid: ControlGrid) -> None:
    """Header `t,x1..xn,u1..um`, one row per node; node N repeats the last control."""
    n, m = traj.states.shape[1], grid.values.shape[1]
    frame = pd.DataFrame(np.column_stack([traj.times, traj.states, grid.node_controls()]),
                         columns=['t'] + [f'x{i + 1}' for i in range(n)] + [f'u{j + 1}' for j in range(m)])
    frame.to_csv(path, index=False)


def write_adjoint_csv(path: Path, adjoint: AdjointTrajectory) -> None:
    n = adjoint.psi.shape[1]
    frame = pd.DataFrame(np.column_stack([adjoint.times, adjoint.psi]),
                         columns=['t'] + [f'psi{i + 1}' for i in range(n)])
    frame.to_csv(path, index=False)


def write_phase_svg(path: Path, states: np.ndarray, size: int = 400) -> None:
    """(x1, x2) phase portrait as a single SVG polyline."""
    xy = states[:, :2] if states.shape[1] >= 2 else np.column_stack([states[:, 0], np.zeros(len(states))])
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    px = 10 + (size - 20) * (xy[:, 0] - lo[0]) / span[0]
    py = size - 10 - (size - 20) * (xy[:, 1] - lo[1]) / span[1]
    points = " ".join(f"{a:.3f},{b:.3f}" for a, b in zip(px, py))
    with open(path, 'w') as f:
        f.write(f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">\n'
                f'<polyline fill="none" stroke="black" points="{points}"/>\n</svg>\n')


def _emit_report(cfg: RunConfig, report: BaseModel, text: str, as_json: bool) -> None:
    typer.echo(report.model_dump_json(indent=2) if as_json else text)
    if not ({Emit.REPORT_TXT, Emit.REPORT_JSON} & cfg.emit):
        return
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    if Emit.REPORT_TXT in cfg.emit:
        with open(cfg.output_dir / "report.txt", 'w') as f:
            f.write(text + "\n")
    if Emit.REPORT_JSON in cfg.emit:
        save_json_safely(report.model_dump_json(indent=2), cfg.output_dir / "report.json")


def _transversality_text(report: TransversalityReport) -> str:
    lines = [f"nu = {report.nu}", f"mu = {report.mu}",
             f"endpoint_residual = {report.endpoint_residual:.3e}"]
    if report.hamiltonian_residual is not None:
        lines.append(f"hamiltonian_residual = {report.hamiltonian_residual:.3e}")
    if report.left_residual is not None:
        lines.append(f"left_residual = {report.left_residual:.3e}")
    lines.append(f"lambda_lower_bound = {report.lambda_lower_bound:.6f}")
    lines += [f"note: {n}" for n in report.notes]
    return "\n".join(lines)


# Shared options
ProblemOpt = typer.Option(None, "--problem", help="Registered problem name")
ConfigOpt = typer.Option(None, "--config", help="JSON run configuration", dir_okay=False)
IntervalsOpt = typer.Option(None, "--n-intervals", help="Number of control intervals N")
RhoOpt = typer.Option(None, "--rho", help="Penalty weight")
TInitOpt = typer.Option(None, "--t-init", help="Initial terminal time guess")
OutOpt = typer.Option(None, "--out", help="Output directory")
JsonOpt = typer.Option(False, "--json", help="Print the report as JSON")


@app.command()
def solve(
    problem: Optional[str] = ProblemOpt,
    config: Optional[Path] = ConfigOpt,
    n_intervals: Optional[int] = IntervalsOpt,
    rho: Optional[float] = RhoOpt,
    t_init: Optional[float] = TInitOpt,
    out: Optional[Path] = OutOpt,
    init: Optional[InitPattern] = typer.Option(None, "--init", help="Initial control pattern"),
    phase_svg: bool = typer.Option(False, "--phase-svg", help="Also write phase.svg"),
    as_json: bool = JsonOpt,
) -> None:
    """Solve a free-time problem by exact penalty and Nelder-Mead."""
    cfg = _config_or_exit(config, problem=problem, n_intervals=n_intervals, rho=rho, T_init=t_init,
                          output_dir=out, init_pattern=init)
    if phase_svg:
        cfg.emit.add(Emit.PHASE_SVG)
    spec = builtin_problem(cfg.problem)
    try:
        result = solve_time_optimal(spec, cfg.solve_options())
    except ValueError as e:
        logger.error(f"Cannot solve '{cfg.problem}': {str(e)}")
        raise typer.Exit(EXIT_CONFIG)

    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    if Emit.TRAJECTORY_CSV in cfg.emit:
        write_trajectory_csv(cfg.output_dir / "trajectory.csv", result.trajectory, result.control)
    if Emit.ADJOINT_CSV in cfg.emit and spec.time_mode == TimeMode.FREE:
        try:
            psi_T, _ = estimate_terminal_adjoint(spec, result.trajectory.final_state,
                                                 result.control.values[-1], result.T_opt)
            adjoint = integrate_adjoint(spec, result.trajectory, result.control, psi_T)
            write_adjoint_csv(cfg.output_dir / "adjoint.csv", adjoint)
        except (UnsupportedPointError, ValueError) as e:
            logger.warning(f"Adjoint not written: {str(e)}")
    if Emit.PHASE_SVG in cfg.emit:
        write_phase_svg(cfg.output_dir / "phase.svg", result.trajectory.states)

    report = SolveReport(problem=cfg.problem, n_intervals=cfg.n_intervals, rho=cfg.rho, T_opt=result.T_opt,
                         objective=result.objective, cost=result.cost,
                         terminal_violation=result.terminal_violation, iterations=result.iterations,
                         restarts=result.restarts, n_evaluations=result.n_evaluations,
                         converged=result.converged, polished=result.polished,
                         history=result.history)
    text = (f"problem = {cfg.problem}\nT_opt = {result.T_opt:.6f}\nobjective = {result.objective:.8f}\n"
            f"terminal_violation = {result.terminal_violation:.3e}\nrestarts = {result.restarts}\n"
            f"converged = {result.converged}\npolished = {result.polished}")
    _emit_report(cfg, report, text, as_json)
    if not result.converged:
        raise typer.Exit(EXIT_NOT_CONVERGED)


@app.command("check-usc")
def check_usc(
    problem: Optional[str] = ProblemOpt,
    config: Optional[Path] = ConfigOpt,
    out: Optional[Path] = OutOpt,
    seed: int = typer.Option(0, "--seed", help="Probe sampling seed"),
    as_json: bool = JsonOpt,
) -> None:
    """Verify the unified separation condition on sampled endpoints."""
    cfg = _config_or_exit(config, problem=problem, output_dir=out)
    spec = builtin_problem(cfg.problem)
    try:
        report = usc_verdict(spec, sample_probes(spec, seed=seed))
    except (InsufficientProbesError, ValueError) as e:
        logger.error(f"USC check not possible: {str(e)}")
        raise typer.Exit(EXIT_CONFIG)

    lines = [f"a = {report.distance:.6f} {report.verdict.value}"]
    if report.classical_flag is not None:
        lines.append(f"classical: {report.classical_flag.value}")
    if report.licq is not None:
        lines.append(f"LICQ: {report.licq.holds} (rank {report.licq.rank})")
    if report.mfcq is not None:
        lines.append(f"MFCQ: {report.mfcq.holds}")
    lines += [f"note: {n}" for n in report.notes]
    _emit_report(cfg, report, "\n".join(lines), as_json)
    if report.verdict == UscVerdict.FAILS:
        raise typer.Exit(EXIT_USC_FAILS)


class TransversalitySource(str, Enum):
    ANALYTIC = "analytic"
    SOLVE = "solve"


@app.command("check-transversality")
def check_transversality_cmd(
    problem: Optional[str] = ProblemOpt,
    config: Optional[Path] = ConfigOpt,
    n_intervals: Optional[int] = IntervalsOpt,
    rho: Optional[float] = RhoOpt,
    t_init: Optional[float] = TInitOpt,
    out: Optional[Path] = OutOpt,
    source: TransversalitySource = typer.Option(TransversalitySource.ANALYTIC, "--source",
                                                help="Analytic oscillator data or a numerical solution"),
    tol: Optional[float] = typer.Option(None, "--tol", help="Residual tolerance for exit 0"),
    as_json: bool = JsonOpt,
) -> None:
    """Check the transversality conditions on analytic or solved data."""
    cfg = _config_or_exit(config, problem=problem, n_intervals=n_intervals, rho=rho, T_init=t_init,
                          output_dir=out)
    spec = builtin_problem(cfg.problem)
    if source == TransversalitySource.ANALYTIC:
        if cfg.problem != "oscillator":
            logger.error("Analytic data is only available for the oscillator")
            raise typer.Exit(EXIT_CONFIG)
        exact = analytic_oscillator()
        grid = exact.control_grid(cfg.n_intervals)
        traj, adjoint = exact.trajectory(cfg.n_intervals), exact.adjoint(cfg.n_intervals)
        limit = tol if tol is not None else 1e-10
    else:
        try:
            result = solve_time_optimal(spec, cfg.solve_options())
            grid, traj = result.control, result.trajectory
            psi_T, _ = estimate_terminal_adjoint(spec, traj.final_state, grid.values[-1], grid.T)
            adjoint = integrate_adjoint(spec, traj, grid, psi_T)
        except (ValueError, UnsupportedPointError) as e:
            logger.error(f"Cannot build a numerical adjoint: {str(e)}")
            raise typer.Exit(EXIT_CONFIG)
        limit = tol if tol is not None else 1e-3

    report = check_transversality(spec, adjoint, traj, grid)
    if Emit.ADJOINT_CSV in cfg.emit:
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        write_adjoint_csv(cfg.output_dir / "adjoint.csv", adjoint)
    _emit_report(cfg, report, _transversality_text(report), as_json)
    residuals = [report.endpoint_residual, report.hamiltonian_residual, report.left_residual]
    if any(r is not None and r > limit for r in residuals):
        raise typer.Exit(EXIT_NOT_CONVERGED)


@app.command()
def bench(
    config: Optional[Path] = ConfigOpt,
    n_intervals: Optional[int] = IntervalsOpt,
    rho: Optional[float] = RhoOpt,
    t_init: Optional[float] = TInitOpt,
    out: Optional[Path] = OutOpt,
    as_json: bool = JsonOpt,
) -> None:
    """Solve the oscillator and compare with its analytic solution."""
    cfg = _config_or_exit(config, problem="oscillator", n_intervals=n_intervals, rho=rho, T_init=t_init,
                          output_dir=out)
    report = run_bench(cfg.solve_options())
    lines = [f"T_opt = {report.T_opt:.6f} (error {report.T_error:.2e})",
             f"switches = {[round(t, 6) for t in report.switch_times]}",
             f"terminal_violation = {report.terminal_violation:.3e}",
             f"endpoint_error = {report.endpoint_error:.3e}",
             f"USC a = {report.usc_report.distance:.6f} {report.usc_report.verdict.value}",
             f"pass = {report.passed}"]
    lines += [f"failure: {f}" for f in report.failures]
    _emit_report(cfg, report, "\n".join(lines), as_json)
    if not report.passed:
        raise typer.Exit(EXIT_NOT_CONVERGED)


@app.command("sweep-lambda")
def sweep_lambda(
    problem: Optional[str] = ProblemOpt,
    config: Optional[Path] = ConfigOpt,
    n_intervals: Optional[int] = IntervalsOpt,
    t_init: Optional[float] = TInitOpt,
    out: Optional[Path] = OutOpt,
    lambdas: Optional[List[float]] = typer.Option(None, "--lambda", help="Penalty weight (repeatable)"),
    as_json: bool = JsonOpt,
) -> None:
    """Solve for several penalty weights and report the terminal violation."""
    cfg = _config_or_exit(config, problem=problem, n_intervals=n_intervals, T_init=t_init, output_dir=out,
                          lambda_sweep=lambdas or None)
    values = cfg.lambda_sweep or [0.1, 1.0, 10.0, 100.0]
    try:
        table = exactness_sweep(builtin_problem(cfg.problem), cfg.solve_options(), values)
    except ValueError as e:
        logger.error(f"Sweep not possible: {str(e)}")
        raise typer.Exit(EXIT_CONFIG)

    frame = table.to_frame()
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    frame.to_csv(cfg.output_dir / "sweep.csv", index=False)
    trend = "non-increasing" if table.violation_non_increasing else "not monotone"
    text = (frame.to_string(index=False) + f"\nviolation trend: {trend}"
            + f"\nthreshold: {table.threshold if table.threshold is not None else 'none'}")
    _emit_report(cfg, table, text, as_json)
    if table.threshold is None:
        raise typer.Exit(EXIT_NOT_CONVERGED)


@app.command()
def validate(
    problem: Optional[str] = ProblemOpt,
    config: Optional[Path] = ConfigOpt,
) -> None:
    """Check a problem's callbacks and derivatives."""
    cfg = _config_or_exit(config, problem=problem)
    report = validate_problem(builtin_problem(cfg.problem))
    for check in report.checks:
        typer.echo(f"{'PASS' if check.passed else 'FAIL'} {check.name} {check.detail}".rstrip())
    if not report.passed:
        raise typer.Exit(EXIT_CONFIG)


def run_app():
    """Entry point for command line."""
    app()
