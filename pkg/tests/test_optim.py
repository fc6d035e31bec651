import numpy as np
import pytest

from gpdm_soh.optim import minimize


def quadratic(A, b):
    def fg(x):
        return 0.5 * x @ A @ x - b @ x, A @ x - b
    return fg


def rosenbrock(x):
    f = 100 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2
    g = np.array([-400 * x[0] * (x[1] - x[0] ** 2) - 2 * (1 - x[0]), 200 * (x[1] - x[0] ** 2)])
    return f, g


@pytest.mark.parametrize("method", ["cg", "gd"])
def test_quadratic_solution(method, rng):
    M = rng.normal(size=(5, 5))
    A = M @ M.T + 5 * np.eye(5)
    b = rng.normal(size=5)
    res = minimize(quadratic(A, b), np.zeros(5), method=method, max_iters=5000, rel_tol=1e-8)
    assert res.converged
    np.testing.assert_allclose(res.x, np.linalg.solve(A, b), atol=1e-7)


def test_rosenbrock_cg():
    res = minimize(rosenbrock, np.array([-1.2, 1.0]), max_iters=5000, rel_tol=1e-9)
    np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-5)


@pytest.mark.parametrize("method", ["cg", "gd"])
def test_trace_non_increasing(method):
    res = minimize(rosenbrock, np.array([-1.2, 1.0]), method=method, max_iters=300)
    assert np.all(np.diff(res.trace) <= 0)
    assert len(res.trace) == res.n_iter + 1


def test_converged_flag_matches_tolerance():
    res = minimize(rosenbrock, np.array([0.0, 0.0]), max_iters=5)
    assert not res.converged
    assert res.grad_norm >= 1e-6 * (1 + abs(res.fun))


def test_zero_iterations_keep_start():
    x0 = np.array([0.3, -0.2])
    res = minimize(rosenbrock, x0, max_iters=0)
    np.testing.assert_array_equal(res.x, x0)
    assert res.trace == [rosenbrock(x0)[0]] and not res.converged


def test_failures_are_infinite():
    # the region x < 0 raises; the minimiser must back off rather than crash
    def fg(x):
        if x[0] < 0:
            raise np.linalg.LinAlgError("outside domain")
        return (x[0] - 0.1) ** 2 - np.log(x[0] + 1e-300) * 1e-3, np.array([2 * (x[0] - 0.1) - 1e-3 / x[0]])

    res = minimize(fg, np.array([5.0]), max_iters=200)
    assert res.x[0] > 0 and np.isfinite(res.fun)


def test_bad_start_raises():
    with pytest.raises(FloatingPointError):
        minimize(lambda x: (np.inf, x), np.zeros(2))


def test_deterministic():
    a = minimize(rosenbrock, np.array([-1.2, 1.0]), max_iters=100)
    b = minimize(rosenbrock, np.array([-1.2, 1.0]), max_iters=100)
    assert a.trace == b.trace and np.array_equal(a.x, b.x)


def test_unknown_method():
    with pytest.raises(ValueError):
        minimize(rosenbrock, np.zeros(2), method="lbfgs")
