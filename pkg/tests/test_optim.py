import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import rosen, rosen_der

from jointseg.errors import NumericalError
from jointseg.optim import minimize_cg


def rosenbrock(x):
    return rosen(x), rosen_der(x)


def test_rosenbrock_converges():
    res = minimize_cg(rosenbrock, [-1.2, 1.0], max_iter=200, grad_tol=1e-10)
    assert res.fun < 1e-8
    np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-4)
    assert res.nit <= 60


def test_trace_nonincreasing():
    res = minimize_cg(rosenbrock, [-1.2, 1.0, 0.5, -0.3], max_iter=300)
    assert np.all(np.diff(res.trace) <= 0)


@given(st.integers(0, 10_000))
def test_quadratic_reaches_minimizer(seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((5, 5))
    H = A @ A.T + 0.5 * np.eye(5)
    b = rng.standard_normal(5)

    def f(x):
        return 0.5 * x @ H @ x - b @ x, H @ x - b

    # value-based line searches resolve x only to about sqrt(eps), so ask for 1e-7
    res = minimize_cg(f, np.zeros(5), max_iter=200, grad_tol=1e-7)
    assert res.converged
    xs = np.linalg.solve(H, b)
    np.testing.assert_allclose(res.x, xs, atol=1e-5 * max(1.0, np.max(np.abs(xs))))


def test_bounds_are_respected():
    # minimizer of (x - 3)^2 + (y + 2)^2 in the box [0, 1] x [-1, 5] is (1, -1)
    def f(x):
        return (x[0] - 3) ** 2 + (x[1] + 2) ** 2, np.array([2 * (x[0] - 3), 2 * (x[1] + 2)])

    res = minimize_cg(f, [0.5, 0.0], lower=[0.0, -1.0], upper=[1.0, 5.0])
    np.testing.assert_allclose(res.x, [1.0, -1.0], atol=1e-12)
    assert res.converged


def test_start_outside_bounds_is_projected():
    res = minimize_cg(lambda x: (float(x @ x), 2 * x), [5.0, -5.0], lower=1.0)
    np.testing.assert_allclose(res.x, [1.0, 1.0])


def test_stationary_start_returns_immediately():
    res = minimize_cg(lambda x: (float(x @ x), 2 * x), np.zeros(3))
    assert res.nit == 0 and res.converged and res.fun == 0.0


def test_nonfinite_start_raises():
    with pytest.raises(NumericalError):
        minimize_cg(lambda x: (np.nan, np.zeros_like(x)), [1.0])


def test_deterministic():
    a = minimize_cg(rosenbrock, [-1.2, 1.0])
    b = minimize_cg(rosenbrock, [-1.2, 1.0])
    assert np.array_equal(a.x, b.x) and a.trace == b.trace
