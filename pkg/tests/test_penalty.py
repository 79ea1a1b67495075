import numpy as np
import pytest

from penalight.discretize import ControlGrid, integrate_rk4
from penalight.penalty import (FreeTrajectoryPair, NearFeasibleError, UnsupportedPointError, phi_term,
                               phi_term_subdifferential, phi_diff_value, phi_diff_gradient, penalized_objective,
                               reconstruct_states)


def _pair(spec, z, T=1.0, u=0.0):
    z = np.asarray(z, dtype=float)
    n = z.shape[0] - 1
    return FreeTrajectoryPair(z=z, grid=ControlGrid(n_intervals=n, t0=0.0, T=T, values=np.full(n, u)))


def _free_spec(oscillator):
    """Oscillator with no terminal constraints."""
    return oscillator.model_copy(update={'eq_constraints': []})


def test_phi_term_oscillator(oscillator):
    value, active_eq, active_ineq = phi_term(oscillator, np.array([0.5, 0.1, 2.0]), 2.0)
    assert value == pytest.approx(0.1)
    assert active_eq == [0] and active_ineq == []


def test_phi_term_nonsmooth(nonsmooth_abs):
    assert phi_term(nonsmooth_abs, np.array([2.5]), 2.0)[0] == pytest.approx(0.5)


def test_phi_term_without_constraints(oscillator):
    assert phi_term(_free_spec(oscillator), np.ones(3), 1.0) == (0.0, [], [])


def test_phi_term_rejects_negative_tolerance(oscillator):
    with pytest.raises(ValueError):
        phi_term(oscillator, np.zeros(3), 1.0, tol_active=-1.0)


def test_subdifferential_infeasible_and_feasible(oscillator):
    hull = phi_term_subdifferential(oscillator, np.array([0.0, 0.1, 1.0]), 1.0)
    np.testing.assert_array_equal(hull.matrix(), [[0.0, 1.0, 0.0]])
    hull = phi_term_subdifferential(oscillator, np.array([0.0, -0.1, 1.0]), 1.0)
    np.testing.assert_array_equal(hull.matrix(), [[0.0, -1.0, 0.0]])
    hull = phi_term_subdifferential(oscillator, np.array([0.0, 0.0, 1.0]), 1.0)
    assert len(hull) == 2
    np.testing.assert_array_equal(hull.matrix(), [[0.0, 1.0, 0.0], [0.0, -1.0, 0.0]])


def test_subdifferential_nonsmooth_pieces(nonsmooth_abs):
    np.testing.assert_array_equal(phi_term_subdifferential(nonsmooth_abs, np.array([3.0]), 1.0).matrix(), [[1.0]])
    np.testing.assert_array_equal(phi_term_subdifferential(nonsmooth_abs, np.array([1.5]), 1.0).matrix(), [[-1.0]])
    np.testing.assert_array_equal(phi_term_subdifferential(nonsmooth_abs, np.array([-2.5]), 1.0).matrix(), [[-1.0]])
    # at the kink both pieces enter with the constraint's sign
    np.testing.assert_array_equal(phi_term_subdifferential(nonsmooth_abs, np.array([0.0]), 1.0).matrix(),
                                  [[1.0], [-1.0]])


def test_kink_without_pieces_unsupported(nonsmooth_abs):
    c = nonsmooth_abs.eq_constraints[0].model_copy(update={'kink_gradients': None})
    spec = nonsmooth_abs.model_copy(update={'eq_constraints': [c]})
    with pytest.raises(UnsupportedPointError):
        phi_term_subdifferential(spec, np.array([0.0]), 1.0)


def test_phi_diff_zero_and_constant(nonsmooth_abs):
    assert phi_diff_value(nonsmooth_abs, _pair(nonsmooth_abs, np.zeros(11))) == 0.0
    assert phi_diff_value(nonsmooth_abs, _pair(nonsmooth_abs, np.full(11, 2.0))) == pytest.approx(2.0)


def test_phi_diff_constant_vector_residual(oscillator):
    spec = oscillator.model_copy(update={'dynamics': lambda x, u, t: np.zeros(3),
                                         'dynamics_jac_x': lambda x, u, t: np.zeros((3, 3))})
    c = 0.5
    assert phi_diff_value(spec, _pair(spec, np.full((11, 3), c))) == pytest.approx(abs(c) * np.sqrt(3))


def test_phi_diff_small_on_true_trajectory(oscillator, exact):
    grid = ControlGrid(n_intervals=200, t0=0.0, T=exact.tau, values=np.full(200, -1.0))
    traj = integrate_rk4(oscillator, grid)
    z = np.array([oscillator.f(x, u, t) for x, u, t in zip(traj.states, grid.node_controls(), grid.times)])
    value = phi_diff_value(oscillator, FreeTrajectoryPair(z=z, grid=grid))
    assert value <= 10 * grid.h ** 2


def test_reconstruct_states_starts_at_x0(oscillator):
    pair = _pair(oscillator, np.ones((5, 3)))
    xs = reconstruct_states(oscillator, pair)
    np.testing.assert_array_equal(xs[0], oscillator.x0)
    np.testing.assert_allclose(xs[-1], oscillator.x0 + 1.0)


def test_normalized_residual_has_unit_norm(oscillator):
    rng = np.random.default_rng(3)
    grad = phi_diff_gradient(oscillator, _pair(oscillator, rng.normal(size=(41, 3)), T=2.0, u=0.3))
    h = 2.0 / 40
    assert np.sqrt(np.sum(grad.weights * np.sum(grad.w ** 2, axis=1))) == pytest.approx(1.0, abs=1e-10)
    assert grad.weights.sum() == pytest.approx(2.0)
    assert grad.weights[0] == pytest.approx(h / 2)


def test_gradient_is_w_without_state_coupling(nonsmooth_abs):
    rng = np.random.default_rng(4)
    grad = phi_diff_gradient(nonsmooth_abs, _pair(nonsmooth_abs, rng.normal(size=21)))
    np.testing.assert_array_equal(grad.gradient, grad.w)


def test_gradient_matches_finite_differences(oscillator):
    rng = np.random.default_rng(5)
    pair = _pair(oscillator, rng.normal(size=(21, 3)), T=2.0, u=0.5)
    grad = phi_diff_gradient(oscillator, pair)
    z, step = pair.z, 1e-6
    for j, i in [(0, 0), (3, 1), (10, 0), (20, 2), (14, 1)]:
        zp, zm = z.copy(), z.copy()
        zp[j, i] += step
        zm[j, i] -= step
        fd = (phi_diff_value(oscillator, FreeTrajectoryPair(z=zp, grid=pair.grid))
              - phi_diff_value(oscillator, FreeTrajectoryPair(z=zm, grid=pair.grid))) / (2 * step)
        # the L2 representative times the node weight is the coordinate derivative
        assert grad.gradient[j, i] * grad.weights[j] == pytest.approx(fd, rel=1e-4, abs=1e-9)


def test_gradient_guarded_near_feasibility(nonsmooth_abs):
    with pytest.raises(NearFeasibleError):
        phi_diff_gradient(nonsmooth_abs, _pair(nonsmooth_abs, np.zeros(11)))


def test_penalized_objective_closed_form(oscillator):
    grid = ControlGrid(n_intervals=200, t0=0.0, T=1.0, values=np.zeros(200))
    value = penalized_objective(oscillator, grid, 100.0)
    assert value.phi_diff == 0.0
    assert value.cost == pytest.approx(1.0, abs=1e-12)
    assert value.F_lambda == pytest.approx(1.0 + 100 * 2 * np.sin(1.0), rel=1e-8)
    assert penalized_objective(oscillator, grid, 0.0).F_lambda == pytest.approx(1.0, abs=1e-12)


def test_penalized_objective_on_analytic_control(oscillator, exact):
    value = penalized_objective(oscillator, exact.control_grid(200), 100.0)
    assert value.phi_term <= 1e-3
    assert value.F_lambda == pytest.approx(exact.T_star + 100 * value.phi_term, abs=1e-9)


def test_penalized_objective_horizon_override(oscillator):
    grid = ControlGrid(n_intervals=20, t0=0.0, T=1.0, values=np.zeros(20))
    assert penalized_objective(oscillator, grid, 1.0, T=2.0).cost == pytest.approx(2.0)


def test_penalized_objective_monotone_in_lambda(oscillator):
    grid = ControlGrid(n_intervals=20, t0=0.0, T=1.5, values=np.full(20, 0.3))
    values = [penalized_objective(oscillator, grid, lam).F_lambda for lam in (0.0, 1.0, 10.0, 100.0)]
    assert values == sorted(values)
    with pytest.raises(ValueError):
        penalized_objective(oscillator, grid, -1.0)
