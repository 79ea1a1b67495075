import numpy as np
import pytest
from pydantic import ValidationError

from penalight.model import (ProblemSpec, TerminalConstraint, TimeMode, ProblemNotFoundError, SQRT5,
                             OSCILLATOR_TAU, OSCILLATOR_T_STAR, available_problems, builtin_problem,
                             register_problem, validate_problem, finite_difference_jacobian)


def test_oscillator_data(oscillator):
    np.testing.assert_array_equal(oscillator.x0, [2.0, 0.0, 0.0])
    assert oscillator.time_mode == TimeMode.FREE
    assert len(oscillator.eq_constraints) == 1
    np.testing.assert_array_equal(oscillator.eq_constraints[0].gradient(np.zeros(3), 1.0), [0.0, 1.0, 0.0])
    np.testing.assert_array_equal(oscillator.f(np.array([2.0, 0.0, 0.0]), np.array([-1.0]), 0.7), [0.0, -3.0, 1.0])


def test_oscillator_constants():
    assert OSCILLATOR_T_STAR - OSCILLATOR_TAU == pytest.approx(np.pi / 2, abs=1e-15)
    assert OSCILLATOR_T_STAR == pytest.approx(2.41186, abs=1e-5)
    assert SQRT5 ** 2 == pytest.approx(5.0)


def test_nonsmooth_abs_admissible_points(nonsmooth_abs):
    c = nonsmooth_abs.eq_constraints[0]
    assert not c.smooth
    assert c.evaluate(np.array([2.0]), 2.0) == 0.0
    assert c.evaluate(np.array([-2.0]), 2.0) == 0.0
    assert len(c.piece_gradients(np.array([0.0]), 1.0)) == 2
    assert nonsmooth_abs.terminal_cost.time_partial(np.zeros(1), 2.0) == 1.0


def test_unknown_problem_lists_registry():
    with pytest.raises(ProblemNotFoundError) as err:
        builtin_problem("unknown")
    assert "oscillator" in str(err.value)
    assert "nonsmooth_abs" in str(err.value)


def test_registry_refuses_silent_overwrite():
    assert {"oscillator", "nonsmooth_abs"} <= set(available_problems())
    with pytest.raises(ValueError):
        register_problem("oscillator", lambda: builtin_problem("oscillator"))


@pytest.mark.parametrize("name", ["oscillator", "nonsmooth_abs"])
def test_builtins_validate(name):
    report = validate_problem(builtin_problem(name))
    assert report.passed, report.failures()


def test_wrong_jacobian_shape_reported(oscillator):
    spec = oscillator.model_copy(update={'dynamics_jac_x': lambda x, u, t: np.zeros((2, 2))})
    report = validate_problem(spec)
    assert not report.passed
    assert "dynamics_jac_x_shape" in [c.name for c in report.failures()]


def test_zero_jacobian_mismatch_reported(oscillator):
    spec = oscillator.model_copy(update={'dynamics_jac_x': lambda x, u, t: np.zeros((3, 3))})
    failed = [c.name for c in validate_problem(spec).failures()]
    assert failed == ["jac_x_finite_difference"]


def test_wrong_constraint_gradient_reported(oscillator):
    bad = TerminalConstraint(name="x2", value=lambda x, T: x[1], grad_x=lambda x, T: np.array([1.0, 0.0, 0.0]))
    spec = oscillator.model_copy(update={'eq_constraints': [bad]})
    assert "eq[0]_gradient" in [c.name for c in validate_problem(spec).failures()]


def test_too_many_constraints_rejected(oscillator):
    c = oscillator.eq_constraints[0]
    with pytest.raises(ValidationError):
        ProblemSpec(**{**oscillator.model_dump(), 'eq_constraints': [c] * 5})


def test_inverted_box_rejected(oscillator):
    with pytest.raises(ValidationError):
        ProblemSpec(**{**oscillator.model_dump(), 'control_lower': [1.0], 'control_upper': [-1.0]})


def test_fixed_time_needs_horizon(oscillator):
    with pytest.raises(ValidationError):
        ProblemSpec(**{**oscillator.model_dump(), 'time_mode': TimeMode.FIXED})


def test_spec_arrays_are_read_only(oscillator):
    with pytest.raises(ValueError):
        oscillator.x0[0] = 5.0


def test_finite_difference_jacobian_linear_map():
    A = np.array([[1.0, 2.0], [3.0, -4.0], [0.5, 0.0]])
    np.testing.assert_allclose(finite_difference_jacobian(lambda x: A @ x, np.array([0.3, -1.2])), A, atol=1e-8)
