import numpy as np
import pytest

from penalight.model import SQRT5, TerminalConstraint, LeftEndpoint
from penalight.discretize import AdjointTrajectory, ControlGrid, Trajectory, integrate_rk4, integrate_adjoint
from penalight.bench import detect_switch
from penalight.pmp import (TransversalityMisuseError, UnsupportedDynamicsError, TransversalityReport, hamiltonian,
                           hamiltonian_along, recover_multipliers, check_transversality_fixed, check_free_time,
                           check_moving_manifold, check_left_endpoint, check_transversality,
                           estimate_terminal_adjoint, switching_function, bang_bang_control,
                           control_optimality_residual, maximum_principle_gap)


def _linear(g, name="", offset=0.0):
    g = np.asarray(g, dtype=float)
    return TerminalConstraint(name=name, value=lambda x, T: float(g @ x) - offset, grad_x=lambda x, T: g)


def _analytic(exact, n=200):
    return exact.adjoint(n), exact.trajectory(n), exact.control_grid(n)


def test_hamiltonian_examples(oscillator, moving_target):
    assert hamiltonian(oscillator, np.array([2.0, 0.0, 0.0]), [-1.0], np.ones(3), 0.0) == pytest.approx(-2.0)
    assert hamiltonian(moving_target, np.array([0.0]), [-1.0], [-0.5], 0.5) == pytest.approx(0.5)


def test_hamiltonian_vanishes_along_analytic_solution(oscillator, exact):
    adjoint, traj, _ = _analytic(exact)
    controls = [[exact.control_at(t)] for t in traj.times]
    values = [hamiltonian(oscillator, x, u, p, t) for x, u, p, t in zip(traj.states, controls, adjoint.psi, traj.times)]
    assert np.max(np.abs(values)) <= 1e-12


def test_hamiltonian_along_uses_node_controls(oscillator, exact):
    adjoint, traj, grid = _analytic(exact, 50)
    values = hamiltonian_along(oscillator, traj, adjoint, grid)
    assert values.shape == (51,)
    assert abs(values[-1]) <= 1e-12


def test_recover_oscillator_multiplier(oscillator, exact):
    fit = recover_multipliers(oscillator, exact.psi_T, np.array([1.0 - SQRT5, 0.0, exact.T_star]), exact.T_star)
    assert fit.nu == [pytest.approx(-1.0 / SQRT5, abs=1e-12)]
    assert fit.mu == []
    assert fit.residual <= 1e-10
    assert not fit.rank_deficient


def test_recover_inequality_multiplier(oscillator):
    spec = oscillator.model_copy(update={'ineq_constraints': [_linear([1.0, 0.0, 0.0], "x1")]})
    psi_T = -(np.array([0.0, 0.0, 1.0]) + 0.7 * np.array([0.0, 1.0, 0.0]) + 2.0 * np.array([1.0, 0.0, 0.0]))
    fit = recover_multipliers(spec, psi_T, np.zeros(3), 1.0)
    assert fit.nu == [pytest.approx(0.7, abs=1e-12)]
    assert fit.mu == [pytest.approx(2.0, abs=1e-12)]
    assert fit.residual <= 1e-12


def test_recover_random_constructions(oscillator):
    rng = np.random.default_rng(21)
    g0 = np.array([0.0, 0.0, 1.0])
    for _ in range(100):
        p_eq = int(rng.integers(0, 3))
        p_in = int(rng.integers(0, 4 - p_eq))
        grads = rng.normal(size=(p_eq + p_in, 3))
        nu = rng.normal(size=p_eq)
        mu = rng.uniform(0.1, 2.0, size=p_in)
        spec = oscillator.model_copy(update={'eq_constraints': [_linear(g) for g in grads[:p_eq]],
                                             'ineq_constraints': [_linear(g) for g in grads[p_eq:]]})
        psi_T = -(g0 + grads[:p_eq].T @ nu + grads[p_eq:].T @ mu)
        fit = recover_multipliers(spec, psi_T, np.zeros(3), 1.0)
        np.testing.assert_allclose(fit.nu, nu, atol=1e-8)
        np.testing.assert_allclose(fit.mu, mu, atol=1e-8)
        assert all(m >= 0.0 for m in fit.mu)
        assert fit.residual <= 1e-8


def test_recover_reports_orthogonal_defect(oscillator, exact):
    psi_T = exact.psi_T + np.array([0.1, 0.0, 0.0])
    fit = recover_multipliers(oscillator, psi_T, np.zeros(3), exact.T_star)
    assert fit.residual == pytest.approx(0.1, abs=1e-12)


def test_recover_flags_rank_deficiency(oscillator, exact):
    c = oscillator.eq_constraints[0]
    spec = oscillator.model_copy(update={'eq_constraints': [c, c]})
    fit = recover_multipliers(spec, exact.psi_T, np.zeros(3), exact.T_star)
    assert fit.rank_deficient
    assert fit.residual <= 1e-10
    assert sum(fit.nu) == pytest.approx(-1.0 / SQRT5, abs=1e-12)


def test_complementarity_flag_on_inactive_inequality(oscillator, exact):
    spec = oscillator.model_copy(update={'ineq_constraints': [_linear([1.0, 0.0, 0.0], "x1 - 5", offset=5.0)]})
    adjoint, traj, grid = _analytic(exact, 50)
    psi = adjoint.psi.copy()
    psi[-1] = exact.psi_T - np.array([1.0, 0.0, 0.0])
    report = check_transversality_fixed(spec, AdjointTrajectory(times=adjoint.times, psi=psi), traj, grid)
    assert report.mu == [pytest.approx(1.0, abs=1e-12)]
    assert report.complementarity_flags == [True]
    assert report.notes


def test_fixed_check_needs_aligned_inputs(oscillator, exact):
    adjoint, _, _ = _analytic(exact, 50)
    _, traj, grid = _analytic(exact, 40)
    with pytest.raises(ValueError):
        check_transversality_fixed(oscillator, adjoint, traj, grid)


def test_free_time_residual(oscillator, exact):
    x_T = np.array([1.0 - SQRT5, 0.0, exact.T_star])
    assert check_free_time(oscillator, x_T, [1.0], exact.psi_T, exact.T_star) <= 1e-12
    assert check_free_time(oscillator, x_T, [-1.0], exact.psi_T, exact.T_star) == pytest.approx(2.0 / SQRT5, abs=1e-12)


@pytest.mark.parametrize("shift", [0.0, 0.1])
def test_free_time_residual_after_horizon_shift(oscillator, exact, shift):
    T = exact.T_star + shift
    times = np.linspace(0.0, T, 201)
    traj = Trajectory(times=times, states=np.array([exact.state_at(t) for t in times]))
    mids = 0.5 * (times[:-1] + times[1:])
    grid = ControlGrid(n_intervals=200, t0=0.0, T=T, values=[exact.control_at(t) for t in mids])
    adjoint = integrate_adjoint(oscillator, traj, grid, exact.psi_T)
    residual = check_free_time(oscillator, traj.final_state, [1.0], adjoint.psi[-1], T)
    # past T* the second arc gives H = cos(shift) - 1
    assert residual == pytest.approx(1.0 - np.cos(shift), abs=1e-10)
    if shift > 0.0:
        assert residual > 1e-3


def test_free_time_refused_on_fixed_horizon(left_endpoint):
    with pytest.raises(TransversalityMisuseError):
        check_free_time(left_endpoint, np.ones(1), [1.0], np.ones(1), 1.0)


def test_moving_target_closed_form(moving_target):
    assert check_moving_manifold(moving_target, [-0.5], [-1.0], [-0.5], 0.5, [0.5], []) <= 1e-6
    # the plain free-time condition is wrong on a moving target
    assert check_free_time(moving_target, [-0.5], [-1.0], [-0.5], 0.5) == pytest.approx(0.5)


def test_moving_manifold_reduces_to_free_time(oscillator, exact):
    x_T = np.array([0.3, -0.2, 2.0])
    psi = np.array([0.4, -1.1, 0.7])
    moving = check_moving_manifold(oscillator, x_T, [1.0], psi, 2.0, [0.9], [])
    assert moving == check_free_time(oscillator, x_T, [1.0], psi, 2.0)


def test_moving_manifold_counts_checked(moving_target):
    with pytest.raises(ValueError):
        check_moving_manifold(moving_target, [-0.5], [-1.0], [-0.5], 0.5, [], [])


def test_left_endpoint_delta(left_endpoint):
    fit = check_left_endpoint(left_endpoint, [1.0], [1.0], 0.0)
    assert fit.mu == [pytest.approx(1.0, abs=1e-12)]
    assert fit.residual <= 1e-12


def test_left_endpoint_equality(conflicting_targets):
    left = LeftEndpoint(eq_constraints=[_linear([1.0, 0.0], "x1(0) - 0.5", offset=0.5)])
    spec = conflicting_targets.model_copy(update={'left_endpoint': left})
    fit = check_left_endpoint(spec, [3.0, 0.0], [0.5, 0.0], 0.0)
    assert fit.nu == [pytest.approx(3.0, abs=1e-12)]
    assert fit.residual <= 1e-12
    # a component orthogonal to every constraint gradient is the whole defect
    fit = check_left_endpoint(spec, [0.0, 2.0], [0.5, 0.0], 0.0)
    assert fit.residual == pytest.approx(2.0, abs=1e-12)


def test_left_endpoint_misuse(oscillator):
    with pytest.raises(TransversalityMisuseError):
        check_left_endpoint(oscillator, np.zeros(3), oscillator.x0, 0.0)


def test_check_transversality_on_analytic_oscillator(oscillator, exact):
    report = check_transversality(oscillator, *_analytic(exact))
    assert report.endpoint_residual <= 1e-10
    assert report.hamiltonian_residual <= 1e-10
    assert report.nu == [pytest.approx(-1.0 / SQRT5, abs=1e-12)]
    assert report.lambda_lower_bound == pytest.approx(1.0 / SQRT5, abs=1e-12)
    assert report.left_residual is None
    assert any("left endpoint fixed" in note for note in report.notes)
    assert TransversalityReport.model_validate_json(report.model_dump_json()) == report


def test_check_transversality_on_left_endpoint_problem(left_endpoint):
    grid = ControlGrid(n_intervals=10, t0=0.0, T=1.0, values=np.ones(10))
    traj = integrate_rk4(left_endpoint, grid)
    adjoint = integrate_adjoint(left_endpoint, traj, grid, [1.0])
    report = check_transversality(left_endpoint, adjoint, traj, grid)
    assert report.endpoint_residual <= 1e-12
    assert report.hamiltonian_residual is None
    assert report.left_delta == [pytest.approx(1.0, abs=1e-12)]
    assert report.left_residual <= 1e-12


def test_estimate_terminal_adjoint_oscillator(oscillator, exact):
    x_T = np.array([1.0 - SQRT5, 0.0, exact.T_star])
    psi_T, fit = estimate_terminal_adjoint(oscillator, x_T, [1.0], exact.T_star)
    np.testing.assert_allclose(psi_T, [0.0, 1.0 / SQRT5, -1.0], atol=1e-12)
    assert fit.nu == [pytest.approx(-1.0 / SQRT5, abs=1e-12)]
    assert fit.residual <= 1e-12


def test_estimate_terminal_adjoint_moving_target(moving_target):
    psi_T, fit = estimate_terminal_adjoint(moving_target, [-0.5], [-1.0], 0.5)
    np.testing.assert_allclose(psi_T, [-0.5], atol=1e-12)
    assert fit.nu == [pytest.approx(0.5, abs=1e-12)]


def test_estimate_terminal_adjoint_refused_on_fixed_horizon(left_endpoint):
    with pytest.raises(TransversalityMisuseError):
        estimate_terminal_adjoint(left_endpoint, [2.0], [1.0], 1.0)


def test_switching_function_is_psi2(oscillator, exact):
    adjoint, traj, _ = _analytic(exact, 20)
    sigma = switching_function(oscillator, adjoint, traj)
    np.testing.assert_allclose(sigma[:, 0], adjoint.psi[:, 1])


def test_bang_bang_recovers_single_switch(oscillator, exact):
    adjoint, traj, _ = _analytic(exact)
    control, singular = bang_bang_control(oscillator, adjoint, traj)
    switches = detect_switch(control)
    assert len(switches) == 1
    assert abs(switches[0] - exact.tau) <= 2 * control.h
    assert singular.sum() <= 1
    assert control.values[0, 0] == -1.0 and control.values[-1, 0] == 1.0


def test_bang_bang_constant_and_singular(oscillator):
    times = np.linspace(0.0, 1.0, 11)
    up = AdjointTrajectory(times=times, psi=np.tile([0.0, 1.0, 0.0], (11, 1)))
    control, singular = bang_bang_control(oscillator, up)
    np.testing.assert_array_equal(control.values, np.ones((10, 1)))
    assert not singular.any()

    flat = AdjointTrajectory(times=times, psi=np.tile([1.0, 0.0, 0.0], (11, 1)))
    control, singular = bang_bang_control(oscillator, flat)
    assert singular.all()
    np.testing.assert_array_equal(control.values, np.zeros((10, 1)))


def test_bang_bang_rejects_non_affine_dynamics(nonsmooth_abs):
    spec = nonsmooth_abs.model_copy(update={'dynamics': lambda x, u, t: np.array([u[0] ** 2]),
                                            'dynamics_jac_u': lambda x, u, t: np.array([[2.0 * u[0]]])})
    times = np.linspace(0.0, 1.0, 5)
    with pytest.raises(UnsupportedDynamicsError):
        bang_bang_control(spec, AdjointTrajectory(times=times, psi=np.ones((5, 1))))


def test_maximum_principle_gap(oscillator, exact):
    adjoint, traj, grid = _analytic(exact)
    assert 0.0 <= maximum_principle_gap(oscillator, adjoint, traj, grid) <= 2 * grid.h
    flipped = ControlGrid(n_intervals=grid.n_intervals, t0=grid.t0, T=grid.T, values=-grid.values)
    assert maximum_principle_gap(oscillator, adjoint, traj, flipped) == pytest.approx(2.0 / SQRT5, abs=1e-3)


def test_control_optimality_residual(nonsmooth_abs):
    grid = ControlGrid(n_intervals=10, t0=0.0, T=1.0, values=np.zeros(10))
    traj = integrate_rk4(nonsmooth_abs, grid)
    adjoint = AdjointTrajectory(times=grid.times, psi=np.full((11, 1), 0.3))
    assert control_optimality_residual(nonsmooth_abs, adjoint, traj, grid) == pytest.approx(0.3)
