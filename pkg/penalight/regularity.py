"""Unified separation condition: min-norm points, Gordan certificates, LICQ/MFCQ and the USC verdict"""

__all__ = ['logger', 'USC_TOL', 'GORDAN_TOL', 'WOLFE_TOL', 'MAX_MAJOR_CYCLES', 'MinNormConvergenceError',
           'BorderlineDistanceError', 'InsufficientProbesError', 'Hull', 'MinNormResult', 'GordanCertificate',
           'UscVerdict', 'LicqResult', 'MfcqResult', 'UscReport', 'min_norm_point', 'gordan_certificate',
           'check_licq', 'check_mfcq', 'check_mixed_cq', 'sample_probes', 'usc_verdict',
           'penalty_subdifferential_distance']

from typing import List, Optional, Sequence, Tuple
from enum import Enum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.linalg import qr, null_space

from .model import ProblemSpec
from .penalty import (Hull, FreeTrajectoryPair, TOL_ACTIVE, terminal_values, phi_term,
                      phi_term_subdifferential, phi_diff_gradient, reconstruct_states)
from .utils import setup_logger, PenalightError, as_vector

logger = setup_logger(__name__)

USC_TOL = 1e-6
GORDAN_TOL = 1e-9
WOLFE_TOL = 1e-12
MAX_MAJOR_CYCLES = 10_000
_ZERO_WEIGHT = 1e-14


class MinNormResult(BaseModel):
    """Minimum-norm point of a convex hull with its convex weights"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    point: np.ndarray
    weights: np.ndarray
    distance: float
    cycles: int = 0


class MinNormConvergenceError(PenalightError):
    """Raised when Wolfe's method exhausts its major cycles"""

    def __init__(self, message: str, best: MinNormResult):
        super().__init__(message)
        self.best = best


class BorderlineDistanceError(PenalightError):
    """Raised when a hull distance is too close to zero to certify either Gordan alternative"""
    pass


class InsufficientProbesError(PenalightError):
    """Raised when no probe point violates the terminal constraints"""
    pass


def _affine_minimizer(P: np.ndarray) -> np.ndarray:
    """Weights (summing to 1) of the min-norm point of the affine hull of the rows of P."""
    k = P.shape[0]
    M = np.zeros((k + 1, k + 1))
    M[0, 1:] = 1.0
    M[1:, 0] = 1.0
    M[1:, 1:] = P @ P.T
    rhs = np.zeros(k + 1)
    rhs[0] = 1.0
    return np.linalg.lstsq(M, rhs, rcond=None)[0][1:]


def _result(P: np.ndarray, corral: List[int], lam: np.ndarray, cycles: int) -> MinNormResult:
    weights = np.zeros(P.shape[0])
    weights[corral] = lam
    point = weights @ P
    return MinNormResult(point=point, weights=weights, distance=float(np.linalg.norm(point)), cycles=cycles)


def min_norm_point(hull: Hull, tol: float = WOLFE_TOL, max_cycles: int = MAX_MAJOR_CYCLES) -> MinNormResult:
    """
    Minimum-norm point of co(generators) by Wolfe's algorithm.

    Stops when <p, p - g_i> <= tol * (1 + |p|^2) for every generator. The entering
    generator is the one with the smallest inner product with p (lowest index on ties).

    Raises:
        ValueError: If the hull is empty
        MinNormConvergenceError: If `max_cycles` major cycles do not converge
    """
    if len(hull) == 0:
        raise ValueError("hull has no generators")
    P = hull.matrix()
    if not np.all(np.isfinite(P)):
        raise ValueError("hull generators must be finite")

    corral = [int(np.argmin(np.einsum('ij,ij->i', P, P)))]
    lam = np.array([1.0])
    x = P[corral[0]].copy()
    for cycle in range(1, max_cycles + 1):
        xx = float(x @ x)
        inner = P @ x
        j = int(np.argmin(inner))
        if xx - inner[j] <= tol * (1.0 + xx) or j in corral:
            return _result(P, corral, lam, cycle)

        previous = list(corral)
        corral.append(j)
        lam = np.append(lam, 0.0)
        while True:
            alpha = _affine_minimizer(P[corral])
            if np.all(alpha > _ZERO_WEIGHT):
                lam = alpha
                break
            neg = alpha <= _ZERO_WEIGHT
            gaps = lam[neg] - alpha[neg]
            ratios = np.where(gaps > 0, lam[neg] / np.where(gaps > 0, gaps, 1.0), 0.0)
            theta = min(1.0, float(np.min(ratios)))
            lam = lam + theta * (alpha - lam)
            keep = lam > _ZERO_WEIGHT
            if keep.all():
                keep[int(np.argmin(lam))] = False
            corral = [c for c, kept in zip(corral, keep) if kept]
            lam = lam[keep] / lam[keep].sum()
        if sorted(corral) == sorted(previous):
            # the entering point was dropped again: no further descent is possible
            return _result(P, corral, lam, cycle)
        x = lam @ P[corral]

    best = _result(P, corral, lam, max_cycles)
    raise MinNormConvergenceError(f"Wolfe's method did not converge in {max_cycles} major cycles", best)


class GordanCertificate(BaseModel):
    """
    Certificate for one of Gordan's alternatives.

    Either a direction d with <a_i, d> < 0 for all i, or nonnegative weights
    (not all zero) with sum_i weights_i a_i = 0.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    direction: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    distance: float

    @property
    def branch(self) -> str:
        return "direction" if self.direction is not None else "weights"

    def verify(self, vectors: Sequence[np.ndarray], tol: float = 1e-10) -> bool:
        """Check the populated alternative numerically."""
        A = np.vstack([as_vector(a) for a in vectors])
        if (self.direction is None) == (self.weights is None):
            return False
        if self.direction is not None:
            return bool(np.all(A @ self.direction < 0.0))
        w = self.weights
        return bool(np.all(w >= 0.0) and w.sum() > 0.0 and np.linalg.norm(w @ A) <= tol)


def gordan_certificate(vectors: Sequence[np.ndarray], gordan_tol: float = GORDAN_TOL) -> GordanCertificate:
    """
    Decide Gordan's alternative from the min-norm point of co(vectors).

    Raises:
        ValueError: If `vectors` is empty
        BorderlineDistanceError: If the distance lies in [gordan_tol / 10, gordan_tol]
    """
    if len(vectors) == 0:
        raise ValueError("Gordan's alternative needs at least one vector")
    res = min_norm_point(Hull(generators=list(vectors)))
    if res.distance > gordan_tol:
        return GordanCertificate(direction=-res.point / res.distance, distance=res.distance)
    if res.distance < gordan_tol / 10:
        return GordanCertificate(weights=res.weights, distance=res.distance)
    logger.warning(f"Hull distance {res.distance:.3e} is inside the borderline band")
    raise BorderlineDistanceError(
        f"distance {res.distance:.3e} is within [{gordan_tol / 10:.1e}, {gordan_tol:.1e}]; refusing to certify")


def check_licq(eq_grads: Sequence[np.ndarray]) -> Tuple[bool, int]:
    """
    Linear independence of equality-constraint gradients.

    Rank by QR with column pivoting, threshold 1e-10 times the largest column norm.

    Returns:
        tuple: (holds, rank)
    """
    if len(eq_grads) == 0:
        return True, 0
    A = np.column_stack([as_vector(g) for g in eq_grads])
    _, R, _ = qr(A, mode='economic', pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0.0:
        return False, 0
    rank = int(np.sum(diag > 1e-10 * diag[0]))
    return rank == len(eq_grads), rank


def check_mfcq(ineq_grads: Sequence[np.ndarray],
               gordan_tol: float = GORDAN_TOL) -> Tuple[bool, Optional[np.ndarray]]:
    """
    Mangasarian-Fromovitz: a direction strictly decreasing every active inequality.

    Returns:
        tuple: (holds, witness direction or None)

    Raises:
        BorderlineDistanceError: As in `gordan_certificate`
    """
    if len(ineq_grads) == 0:
        return True, None
    cert = gordan_certificate(ineq_grads, gordan_tol)
    return (True, cert.direction) if cert.branch == "direction" else (False, None)


def check_mixed_cq(eq_grads: Sequence[np.ndarray], ineq_grads: Sequence[np.ndarray],
                   gordan_tol: float = GORDAN_TOL) -> Tuple[bool, Optional[np.ndarray]]:
    """
    Mixed constraint qualification: independent equality gradients and a direction d
    with <grad Phi^k, d> = 0 on E and <grad Phi^j, d> < 0 on I.

    The direction is searched in the null space of the equality gradients.
    """
    licq_holds, _ = check_licq(eq_grads)
    if len(ineq_grads) == 0:
        return licq_holds, None
    if len(eq_grads) == 0:
        return check_mfcq(ineq_grads, gordan_tol)
    basis = null_space(np.vstack([as_vector(g) for g in eq_grads]))
    if basis.shape[1] == 0:
        return False, None
    holds, d = check_mfcq([basis.T @ as_vector(g) for g in ineq_grads], gordan_tol)
    return licq_holds and holds, (basis @ d if d is not None else None)


class UscVerdict(str, Enum):
    HOLDS = "HOLDS"
    FAILS = "FAILS"
    NONSMOOTH_NOT_APPLICABLE_CLASSICALLY = "NONSMOOTH_NOT_APPLICABLE_CLASSICALLY"


class LicqResult(BaseModel):
    holds: bool
    rank: int


class MfcqResult(BaseModel):
    holds: bool
    witness: Optional[List[float]] = None


class UscReport(BaseModel):
    """Sampled verification of dist(0, d phi_term) >= a > 0 near the admissible set"""
    distance: float
    verdict: UscVerdict
    classical_flag: Optional[UscVerdict] = None
    licq: Optional[LicqResult] = None
    mfcq: Optional[MfcqResult] = None
    mixed_cq: Optional[bool] = None
    active_eq: List[int] = Field(default_factory=list)
    active_ineq: List[int] = Field(default_factory=list)
    worst_probe: List[float] = Field(default_factory=list)
    worst_T: Optional[float] = None
    n_probes: int = 0
    n_infeasible: int = 0
    usc_tol: float = USC_TOL
    notes: List[str] = Field(default_factory=list)


def sample_probes(spec: ProblemSpec, anchors: Optional[List[Tuple[np.ndarray, float]]] = None,
                  radii: Sequence[float] = (1e-3, 1e-2, 1e-1), samples: int = 20,
                  seed: int = 0) -> List[Tuple[np.ndarray, float]]:
    """
    Probe endpoints around admissible anchors: the anchors themselves plus Gaussian
    perturbations of x_T at each radius.
    """
    anchors = list(spec.reference_endpoints) if anchors is None else anchors
    if not anchors:
        raise ValueError(f"problem '{spec.name}' has no admissible anchors to sample around")
    rng = np.random.default_rng(seed)
    probes = [(as_vector(x_T, spec.state_dim), float(T)) for x_T, T in anchors]
    for x_T, T in list(probes):
        for r in radii:
            for _ in range(samples):
                probes.append((x_T + r * rng.normal(size=spec.state_dim), T))
    return probes


def _classical_checks(spec: ProblemSpec, feasible: List[Tuple[np.ndarray, float, List[int]]],
                      report: UscReport, gordan_tol: float) -> None:
    licq, mfcq, mixed = None, None, None
    for x_T, T, active_ineq in feasible:
        eq_grads = [c.gradient(x_T, T) for c in spec.eq_constraints]
        in_grads = [spec.ineq_constraints[j].gradient(x_T, T) for j in active_ineq]
        if eq_grads:
            holds, rank = check_licq(eq_grads)
            if licq is None or rank < licq.rank or not holds:
                licq = LicqResult(holds=holds and (licq is None or licq.holds), rank=rank)
        try:
            if in_grads:
                holds, d = check_mfcq(in_grads, gordan_tol)
                if mfcq is None or (mfcq.holds and not holds):
                    mfcq = MfcqResult(holds=holds, witness=None if d is None else d.tolist())
                note = ("feasible-point hull excludes 0 although the max has an inactive branch "
                        "contributing 0; generators follow the listed formula")
                if not spec.eq_constraints and holds and note not in report.notes:
                    report.notes.append(note)
            if eq_grads and in_grads:
                holds, _ = check_mixed_cq(eq_grads, in_grads, gordan_tol)
                mixed = holds if mixed is None else (mixed and holds)
        except BorderlineDistanceError as e:
            report.notes.append(f"classical check skipped at a feasible probe: {str(e)}")
    report.licq, report.mfcq, report.mixed_cq = licq, mfcq, mixed


def usc_verdict(spec: ProblemSpec, probe_points: List[Tuple[np.ndarray, float]],
                tol_active: float = TOL_ACTIVE, usc_tol: float = USC_TOL,
                gordan_tol: float = GORDAN_TOL) -> UscReport:
    """
    Verify the unified separation condition on sampled endpoints.

    For each probe with phi_term > tol_active the min-norm distance from 0 to
    d phi_term is computed; a is the minimum over those probes and the condition
    holds iff a > usc_tol. Feasible probes get the classical LICQ/MFCQ checks,
    unless a nonsmooth constraint is involved.

    Raises:
        InsufficientProbesError: If no probe violates the terminal constraints
    """
    best: Optional[Tuple[float, np.ndarray, float, List[int], List[int]]] = None
    feasible: List[Tuple[np.ndarray, float, List[int]]] = []
    nonsmooth_active = False
    n_infeasible = 0
    for x_T, T in probe_points:
        x_T = as_vector(x_T, spec.state_dim)
        value, active_eq, active_ineq = phi_term(spec, x_T, T, tol_active)
        involved = [spec.eq_constraints[k] for k in active_eq] + [spec.ineq_constraints[j] for j in active_ineq]
        if any(not c.smooth for c in involved):
            nonsmooth_active = True
        if value <= tol_active:
            # binding inequalities only
            _, ineq = terminal_values(spec, x_T, T)
            feasible.append((x_T, T, [j for j, v in enumerate(ineq) if v >= -tol_active]))
            continue
        n_infeasible += 1
        res = min_norm_point(phi_term_subdifferential(spec, x_T, T, tol_active))
        if best is None or res.distance < best[0]:
            best = (res.distance, x_T, T, active_eq, active_ineq)
    if best is None:
        raise InsufficientProbesError(f"none of the {len(probe_points)} probes has phi_term > {tol_active:.1e}")

    distance, x_worst, T_worst, active_eq, active_ineq = best
    report = UscReport(
        distance=distance,
        verdict=UscVerdict.HOLDS if distance > usc_tol else UscVerdict.FAILS,
        active_eq=active_eq,
        active_ineq=active_ineq,
        worst_probe=x_worst.tolist(),
        worst_T=T_worst,
        n_probes=len(probe_points),
        n_infeasible=n_infeasible,
        usc_tol=usc_tol,
    )
    report.notes.append(f"certified on {n_infeasible} sampled infeasible probes only, not on a neighborhood")
    if nonsmooth_active:
        report.classical_flag = UscVerdict.NONSMOOTH_NOT_APPLICABLE_CLASSICALLY
        report.notes.append("classical regularity conditions are not defined for nonsmooth terminal constraints; "
                            "distance computed from piece gradients")
    elif feasible:
        _classical_checks(spec, feasible, report, gordan_tol)
    else:
        report.notes.append("no feasible probe: classical LICQ/MFCQ not evaluated")
    logger.info(f"USC on '{spec.name}': a = {distance:.6f} {report.verdict.value}")
    return report


def penalty_subdifferential_distance(spec: ProblemSpec, pair: FreeTrajectoryPair,
                                     tol_active: float = TOL_ACTIVE) -> MinNormResult:
    """
    dist(0, grad phi_diff + d phi_term) at a pair that violates the dynamics.

    phi_term depends on z through x(T) = x0 + int z, so its generators enter as
    constant grid functions. Distances use the trapezoidal L2 metric. With
    phi_term <= tol_active only the phi_diff gradient remains.

    Raises:
        NearFeasibleError: If phi_diff is below the division guard
    """
    grad = phi_diff_gradient(spec, pair)
    x_T = reconstruct_states(spec, pair)[-1]
    T = pair.grid.T
    root_w = np.sqrt(grad.weights)[:, None]
    value, _, _ = phi_term(spec, x_T, T, tol_active)
    if value > tol_active:
        terms = phi_term_subdifferential(spec, x_T, T, tol_active).generators
        generators = [(root_w * (grad.gradient + c[None, :])).ravel() for c in terms]
    else:
        generators = [(root_w * grad.gradient).ravel()]
    return min_norm_point(Hull(generators=generators))
