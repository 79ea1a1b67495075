"""Mayer-form problem data, validation and the registry of built-in problems"""

__all__ = ['logger', 'TimeMode', 'TerminalConstraint', 'LeftEndpoint', 'ProblemSpec', 'ValidationCheck',
           'ValidationReport', 'ProblemNotFoundError', 'SQRT5', 'OSCILLATOR_TAU', 'OSCILLATOR_T_STAR',
           'finite_difference_jacobian', 'validate_problem', 'register_problem', 'available_problems',
           'builtin_problem']

from typing import Callable, Dict, List, Optional, Tuple
from enum import Enum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .utils import setup_logger, PenalightError, as_vector

logger = setup_logger(__name__)

SQRT5 = float(np.sqrt(5.0))
OSCILLATOR_TAU = float(np.arccos(2.0 / 3.0))
OSCILLATOR_T_STAR = OSCILLATOR_TAU + float(np.pi / 2)


class ProblemNotFoundError(PenalightError):
    """Raised when a registry name is unknown"""
    pass


class TimeMode(str, Enum):
    """Terminal time regime"""
    FIXED = "fixed"
    FREE = "free"


def _zero_partial(x_T: np.ndarray, T: float) -> float:
    return 0.0


class TerminalConstraint(BaseModel):
    """
    Terminal function Phi(x_T, T) with its spatial gradient and time partial.

    Used for the terminal cost as well as for equality/inequality constraints.
    Nonsmooth functions set `smooth=False`; `kink_gradients` then returns the
    gradients of the smooth pieces active at a point.
    """
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    value: Callable
    grad_x: Callable
    partial_t: Callable = Field(default=_zero_partial)
    smooth: bool = True
    kink_gradients: Optional[Callable] = None
    name: str = ""

    def evaluate(self, x_T: np.ndarray, T: float) -> float:
        return float(self.value(x_T, T))

    def gradient(self, x_T: np.ndarray, T: float) -> np.ndarray:
        return as_vector(self.grad_x(x_T, T))

    def time_partial(self, x_T: np.ndarray, T: float) -> float:
        return float(self.partial_t(x_T, T))

    def piece_gradients(self, x_T: np.ndarray, T: float) -> List[np.ndarray]:
        """Gradients of the smooth pieces active at (x_T, T)."""
        if self.kink_gradients is not None:
            return [as_vector(g) for g in self.kink_gradients(x_T, T)]
        return [self.gradient(x_T, T)]


class LeftEndpoint(BaseModel):
    """Constraints chi^l(x(t0), t0) on the initial state"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    eq_constraints: List[TerminalConstraint] = Field(default_factory=list)
    ineq_constraints: List[TerminalConstraint] = Field(default_factory=list)
    free_t0: bool = False


class ProblemSpec(BaseModel):
    """
    Optimal control problem in Mayer form.

    Minimize Phi0(x(T), T) subject to x' = f(x, u, t), x(t0) = x0, u(t) in the
    box [control_lower, control_upper], terminal equalities Phi^k = 0 (k in E)
    and inequalities Phi^j <= 0 (j in I). All callbacks must be pure.
    """
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    name: str = "custom"
    state_dim: int = Field(..., gt=0)
    control_dim: int = Field(..., gt=0)
    dynamics: Callable
    dynamics_jac_x: Callable
    dynamics_jac_u: Callable
    terminal_cost: TerminalConstraint
    eq_constraints: List[TerminalConstraint] = Field(default_factory=list)
    ineq_constraints: List[TerminalConstraint] = Field(default_factory=list)
    control_lower: np.ndarray
    control_upper: np.ndarray
    t0: float = 0.0
    x0: np.ndarray
    time_mode: TimeMode = TimeMode.FREE
    T_fixed: Optional[float] = None
    left_endpoint: Optional[LeftEndpoint] = None
    reference_endpoints: List[Tuple[np.ndarray, float]] = Field(default_factory=list)

    @field_validator('control_lower', 'control_upper', 'x0', mode='before')
    @classmethod
    def _frozen_vector(cls, v) -> np.ndarray:
        arr = as_vector(v).copy()
        arr.flags.writeable = False
        return arr

    @field_validator('reference_endpoints', mode='before')
    @classmethod
    def _endpoint_pairs(cls, v) -> List[Tuple[np.ndarray, float]]:
        return [(as_vector(x_T).copy(), float(T)) for x_T, T in v]

    @model_validator(mode='after')
    def _check_invariants(self) -> 'ProblemSpec':
        n, m = self.state_dim, self.control_dim
        if self.x0.shape != (n,):
            raise ValueError(f"x0 has shape {self.x0.shape}, expected ({n},)")
        if self.control_lower.shape != (m,) or self.control_upper.shape != (m,):
            raise ValueError(f"control bounds must have shape ({m},)")
        if np.any(self.control_lower > self.control_upper):
            raise ValueError("control_lower must not exceed control_upper")
        p = len(self.eq_constraints) + len(self.ineq_constraints)
        if p > n + 1:
            raise ValueError(f"{p} terminal constraints exceed state_dim + 1 = {n + 1}")
        if self.time_mode == TimeMode.FIXED:
            if self.T_fixed is None or not self.T_fixed > self.t0:
                raise ValueError("fixed-time problems need T_fixed > t0")
        return self

    @property
    def constraints(self) -> List[TerminalConstraint]:
        return list(self.eq_constraints) + list(self.ineq_constraints)

    def f(self, x: np.ndarray, u: np.ndarray, t: float) -> np.ndarray:
        return as_vector(self.dynamics(x, u, t))

    def f_x(self, x: np.ndarray, u: np.ndarray, t: float) -> np.ndarray:
        return np.asarray(self.dynamics_jac_x(x, u, t), dtype=float)

    def f_u(self, x: np.ndarray, u: np.ndarray, t: float) -> np.ndarray:
        return np.asarray(self.dynamics_jac_u(x, u, t), dtype=float)


class ValidationCheck(BaseModel):
    """Outcome of a single invariant check"""
    name: str
    passed: bool
    detail: str = ""


class ValidationReport(BaseModel):
    """All invariant checks run on a problem"""
    problem: str
    checks: List[ValidationCheck] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> List[ValidationCheck]:
        return [c for c in self.checks if not c.passed]


def finite_difference_jacobian(fun: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                               rel_step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of `fun` at `x`; columns index the components of x."""
    x = as_vector(x)
    f0 = np.atleast_1d(np.asarray(fun(x), dtype=float))
    jac = np.zeros((f0.size, x.size))
    for i in range(x.size):
        step = rel_step * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        fp = np.atleast_1d(np.asarray(fun(xp), dtype=float))
        fm = np.atleast_1d(np.asarray(fun(xm), dtype=float))
        jac[:, i] = (fp - fm) / (2.0 * step)
    return jac


def _agrees(analytic: np.ndarray, numeric: np.ndarray, rtol: float) -> Tuple[bool, float]:
    err = float(np.max(np.abs(analytic - numeric))) if analytic.size else 0.0
    scale = max(1.0, float(np.max(np.abs(numeric)))) if numeric.size else 1.0
    return err <= rtol * scale, err


def validate_problem(spec: ProblemSpec, n_probes: int = 10, rtol: float = 1e-5,
                     seed: int = 0) -> ValidationReport:
    """
    Run the problem invariant checks and collect pass/fail entries.

    Checks callback output shapes, the control box, the constraint count and the
    agreement of every supplied derivative with central finite differences at
    `n_probes` random points. Never raises: failures become report entries.
    """
    report = ValidationReport(problem=spec.name)
    checks = report.checks
    n, m = spec.state_dim, spec.control_dim
    rng = np.random.default_rng(seed)

    p = len(spec.eq_constraints) + len(spec.ineq_constraints)
    checks.append(ValidationCheck(name="constraint_count", passed=p <= n + 1,
                                  detail=f"|E|+|I| = {p}, limit {n + 1}"))
    checks.append(ValidationCheck(name="control_box",
                                  passed=bool(np.all(spec.control_lower <= spec.control_upper))))

    xs = [spec.x0 + rng.normal(size=n) for _ in range(n_probes)]
    us = [rng.uniform(spec.control_lower, spec.control_upper) for _ in range(n_probes)]
    ts = [spec.t0 + rng.uniform(0.0, 1.0) for _ in range(n_probes)]
    Ts = [spec.t0 + 1.0 + rng.uniform(0.0, 1.0) for _ in range(n_probes)]

    expected = {"dynamics": (n,), "dynamics_jac_x": (n, n), "dynamics_jac_u": (n, m)}
    shapes_ok = True
    for attr, shape in expected.items():
        try:
            got = np.shape(getattr(spec, attr)(xs[0], us[0], ts[0]))
            ok = tuple(got) == shape
            detail = f"shape {tuple(got)}, expected {shape}"
        except Exception as e:
            ok, detail = False, f"callback raised: {str(e)}"
        shapes_ok = shapes_ok and ok
        checks.append(ValidationCheck(name=f"{attr}_shape", passed=ok, detail=detail))

    if shapes_ok:
        worst_x, worst_u, ok_x, ok_u = 0.0, 0.0, True, True
        try:
            for x, u, t in zip(xs, us, ts):
                fd_x = finite_difference_jacobian(lambda xx: spec.dynamics(xx, u, t), x)
                fd_u = finite_difference_jacobian(lambda uu: spec.dynamics(x, uu, t), u)
                good, err = _agrees(spec.f_x(x, u, t), fd_x, rtol)
                ok_x, worst_x = ok_x and good, max(worst_x, err)
                good, err = _agrees(spec.f_u(x, u, t), fd_u, rtol)
                ok_u, worst_u = ok_u and good, max(worst_u, err)
            checks.append(ValidationCheck(name="jac_x_finite_difference", passed=ok_x,
                                          detail=f"max abs error {worst_x:.3e}"))
            checks.append(ValidationCheck(name="jac_u_finite_difference", passed=ok_u,
                                          detail=f"max abs error {worst_u:.3e}"))
        except Exception as e:
            checks.append(ValidationCheck(name="jacobian_finite_difference", passed=False,
                                          detail=f"callback raised: {str(e)}"))

    terminal = [("terminal_cost", spec.terminal_cost)]
    terminal += [(f"eq[{k}]", c) for k, c in enumerate(spec.eq_constraints)]
    terminal += [(f"ineq[{j}]", c) for j, c in enumerate(spec.ineq_constraints)]
    for label, fn in terminal:
        if not fn.smooth:
            checks.append(ValidationCheck(name=f"{label}_gradient", passed=True,
                                          detail="skipped: nonsmooth"))
            continue
        try:
            ok, worst = True, 0.0
            for x, T in zip(xs, Ts):
                grad = fn.gradient(x, T)
                if grad.shape != (n,):
                    ok, worst = False, float("inf")
                    break
                fd = finite_difference_jacobian(lambda xx: fn.evaluate(xx, T), x)[0]
                good, err = _agrees(grad, fd, rtol)
                fd_t = finite_difference_jacobian(lambda tt: fn.evaluate(x, float(tt[0])), np.array([T]))[0]
                good_t, err_t = _agrees(np.array([fn.time_partial(x, T)]), fd_t, rtol)
                ok, worst = ok and good and good_t, max(worst, err, err_t)
            checks.append(ValidationCheck(name=f"{label}_gradient", passed=ok,
                                          detail=f"max abs error {worst:.3e}"))
        except Exception as e:
            checks.append(ValidationCheck(name=f"{label}_gradient", passed=False,
                                          detail=f"callback raised: {str(e)}"))

    if not report.passed:
        logger.warning(f"Problem '{spec.name}' failed {len(report.failures())} validation check(s)")
    return report


# Built-in problems

def _oscillator_dynamics(x: np.ndarray, u: np.ndarray, t: float) -> np.ndarray:
    return np.array([x[1], -x[0] + u[0], 1.0])


def _oscillator_jac_x(x: np.ndarray, u: np.ndarray, t: float) -> np.ndarray:
    return np.array([[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])


def _oscillator_jac_u(x: np.ndarray, u: np.ndarray, t: float) -> np.ndarray:
    return np.array([[0.0], [1.0], [0.0]])


def _oscillator() -> ProblemSpec:
    # x3 = t turns minimum time into the Mayer cost x3(T)
    return ProblemSpec(
        name="oscillator",
        state_dim=3,
        control_dim=1,
        dynamics=_oscillator_dynamics,
        dynamics_jac_x=_oscillator_jac_x,
        dynamics_jac_u=_oscillator_jac_u,
        terminal_cost=TerminalConstraint(
            name="x3(T)",
            value=lambda x, T: x[2],
            grad_x=lambda x, T: np.array([0.0, 0.0, 1.0]),
        ),
        eq_constraints=[TerminalConstraint(
            name="x2(T) = 0",
            value=lambda x, T: x[1],
            grad_x=lambda x, T: np.array([0.0, 1.0, 0.0]),
        )],
        control_lower=[-1.0],
        control_upper=[1.0],
        t0=0.0,
        x0=[2.0, 0.0, 0.0],
        time_mode=TimeMode.FREE,
        reference_endpoints=[(np.array([1.0 - SQRT5, 0.0, OSCILLATOR_T_STAR]), OSCILLATOR_T_STAR)],
    )


def _abs_gradient(x: np.ndarray, T: float) -> np.ndarray:
    # undefined at the kink x = 0
    return np.array([np.sign(x[0])]) if x[0] != 0.0 else np.array([np.nan])


def _abs_pieces(x: np.ndarray, T: float) -> List[np.ndarray]:
    if x[0] > 0.0:
        return [np.array([1.0])]
    if x[0] < 0.0:
        return [np.array([-1.0])]
    return [np.array([-1.0]), np.array([1.0])]


def _nonsmooth_abs() -> ProblemSpec:
    return ProblemSpec(
        name="nonsmooth_abs",
        state_dim=1,
        control_dim=1,
        dynamics=lambda x, u, t: np.array([u[0]]),
        dynamics_jac_x=lambda x, u, t: np.zeros((1, 1)),
        dynamics_jac_u=lambda x, u, t: np.ones((1, 1)),
        terminal_cost=TerminalConstraint(
            name="T",
            value=lambda x, T: T,
            grad_x=lambda x, T: np.zeros(1),
            partial_t=lambda x, T: 1.0,
        ),
        eq_constraints=[TerminalConstraint(
            name="|x(T)| - 2 = 0",
            value=lambda x, T: abs(x[0]) - 2.0,
            grad_x=_abs_gradient,
            smooth=False,
            kink_gradients=_abs_pieces,
        )],
        control_lower=[-1.0],
        control_upper=[1.0],
        t0=0.0,
        x0=[0.0],
        time_mode=TimeMode.FREE,
        reference_endpoints=[(np.array([2.0]), 2.0), (np.array([-2.0]), 2.0)],
    )


_REGISTRY: Dict[str, Callable[[], ProblemSpec]] = {
    "oscillator": _oscillator,
    "nonsmooth_abs": _nonsmooth_abs,
}


def register_problem(name: str, factory: Callable[[], ProblemSpec], overwrite: bool = False) -> None:
    """Add a problem factory to the registry."""
    if name in _REGISTRY and not overwrite:
        raise ValueError(f"Problem '{name}' is already registered")
    _REGISTRY[name] = factory
    logger.info(f"Registered problem '{name}'")


def available_problems() -> List[str]:
    return sorted(_REGISTRY)


def builtin_problem(name: str) -> ProblemSpec:
    """
    Build a registered problem by name.

    Raises:
        ProblemNotFoundError: If `name` is not registered
    """
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise ProblemNotFoundError(
            f"Unknown problem '{name}'. Available problems: {', '.join(available_problems())}")
    return factory()
