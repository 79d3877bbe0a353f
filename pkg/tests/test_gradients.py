from types import SimpleNamespace

import numpy as np
import pytest

from src.autodiff import ops
from src.learning import gradients
from src.learning.gradients import GradientProblem, compute_gradient, natural_gradient, richardson_solve
from src.models.results import GradientResult, GradMode, GradModeKind
from src.tools.invariants import (check_gradients, check_ordering, check_speedup, elbo_fd_error,
                                  steps_to_threshold)
from src.utils.exceptions import ConfigError, RichardsonDivergence


class LinearFixedPoint(GradientProblem):
    """omega = A omega + B theta with loss 1/2 |omega|^2 + c'theta"""

    def __init__(self, gen, n=3, m=2, contraction=0.5):
        A = gen.standard_normal((n, n))
        self.A = contraction * A / np.linalg.norm(A, 2)
        self.B = gen.standard_normal((n, m))
        self.c = gen.standard_normal(m)
        self.params = {"theta": gen.standard_normal(m)}

    def exact(self):
        M = np.linalg.inv(np.eye(len(self.A)) - self.A)
        omega = M @ self.B @ self.params["theta"]
        return self.B.T @ M.T @ omega + self.c

    def solve(self, n_sweeps=200):
        omega = np.zeros(len(self.A))
        for _ in range(n_sweeps):
            omega = self.A @ omega + self.B @ self.params["theta"]
        self._omega = omega
        res = float(np.max(np.abs(self.residual(self.params, omega))))
        return SimpleNamespace(iters=n_sweeps, residuals=[res], residual=res)

    def flatten(self, state):
        return self._omega

    def loss(self, params, omega):
        return 0.5 * ops.inner(omega, omega) + ops.inner(self.c, params["theta"])

    def residual(self, params, omega):
        return omega - (ops.matvec(self.A, omega) + ops.matvec(self.B, params["theta"]))

    def unrolled_loss(self, params, n_sweeps):
        omega = np.zeros(len(self.A))
        for _ in range(n_sweeps):
            omega = ops.matvec(self.A, omega) + ops.matvec(self.B, params["theta"])
        return self.loss(params, omega)


@pytest.fixture
def problem(gen):
    return LinearFixedPoint(gen)


def test_richardson_sums_geometric_series():
    v = np.array([1.0, -2.0])
    u, iters = richardson_solve(lambda x: 0.5 * x, v, 40)
    assert iters == 40
    np.testing.assert_allclose(u, 2.0 * v, rtol=1e-10)


def test_richardson_with_zero_budget_returns_rhs():
    v = np.array([3.0, 4.0])
    u, iters = richardson_solve(lambda x: 0.5 * x, v, 0)
    assert iters == 0
    np.testing.assert_array_equal(u, v)


def test_richardson_detects_divergence():
    with pytest.raises(RichardsonDivergence):
        richardson_solve(lambda x: -2.0 * x, np.ones(2), 100)


@pytest.mark.parametrize("kind", ["implicit", "unrolled"])
def test_estimators_match_closed_form(problem, kind):
    result = compute_gradient(problem, GradMode.parse(kind, J=200))
    np.testing.assert_allclose(result.grads["theta"], problem.exact(), rtol=1e-8, atol=1e-10)


def test_no_solve_uses_a_single_neumann_term(problem):
    result = compute_gradient(problem, GradMode.parse("no-solve"))
    omega = problem.flatten(None)
    expected = problem.c + problem.B.T @ omega
    np.testing.assert_allclose(result.grads["theta"], expected, atol=1e-10)
    assert result.richardson_iters == 0


def test_capped_budget_follows_forward_iterations(problem):
    state = problem.solve(n_sweeps=7)
    result = compute_gradient(problem, GradMode.parse("capped", J=500), state=state)
    assert result.richardson_iters == 7


def test_thresholded_falls_back_when_residual_is_large(problem, mocker):
    state = problem.solve(n_sweeps=1)
    spy = mocker.spy(gradients, "richardson_solve")
    result = compute_gradient(problem, GradMode.parse("thresholded", residual_tol=1e-12), state=state)
    assert result.fell_back
    assert result.richardson_iters == 0
    assert spy.call_args.args[2] == 0


def test_thresholded_uses_richardson_after_convergence(problem):
    state = problem.solve(n_sweeps=200)
    result = compute_gradient(problem, GradMode.parse("thresholded", residual_tol=1e-6), state=state)
    assert not result.fell_back
    assert result.richardson_iters == 200


def test_implicit_keeps_a_single_stored_state(problem):
    result = compute_gradient(problem, GradMode.parse("implicit", J=10))
    assert result.stored_states == 1


def test_unrolled_stores_every_sweep(problem):
    state = problem.solve(n_sweeps=12)
    result = compute_gradient(problem, GradMode.parse("unrolled"), state=state)
    assert result.stored_states == 12


def test_grad_mode_parse_rejects_bad_values():
    with pytest.raises(ConfigError):
        GradMode.parse("backprop")
    with pytest.raises(ConfigError):
        GradMode.parse("implicit", J=-1)
    with pytest.raises(ConfigError):
        GradMode.parse("implicit", residual_tol=0.0)


def test_richardson_budget_by_kind():
    assert GradMode(GradModeKind.NO_SOLVE, J=9).richardson_budget(4) == 0
    assert GradMode(GradModeKind.IMPLICIT, J=9).richardson_budget(4) == 9
    assert GradMode(GradModeKind.CAPPED, J=9).richardson_budget(4) == 4


def test_natural_gradient_selects_global_parameters():
    result = GradientResult(loss=0.0, grads={"glob.init": np.array([1.0]), "enc.w": np.array([2.0])},
                            mode=GradMode(GradModeKind.IMPLICIT),
                            partial={"glob.init": np.array([5.0]), "enc.w": np.array([2.0])})
    assert list(natural_gradient(result)) == ["glob.init"]
    np.testing.assert_array_equal(natural_gradient(result)["glob.init"], [-1.0])
    np.testing.assert_array_equal(natural_gradient(result, biased=True)["glob.init"], [-5.0])
    assert list(gradients.network_gradient(result)) == ["enc.w"]


@pytest.mark.slow
def test_gradient_checks_pass_on_a_small_svae():
    results = check_gradients(seed=0)
    failed = [r for r in results if not r.passed]
    assert not failed, failed


def test_global_gradient_keeps_the_loss_sign():
    result = GradientResult(loss=0.0, grads={"glob.init": np.array([1.0, -2.0]), "dec.b": np.array([3.0])},
                            mode=GradMode(GradModeKind.IMPLICIT))
    np.testing.assert_array_equal(gradients.global_gradient(result)["glob.init"], [1.0, -2.0])
    assert list(gradients.global_gradient(result)) == ["glob.init"]


def test_steps_to_threshold_counts_updates_before_crossing():
    assert steps_to_threshold([-5.0, -3.0, -1.0, -0.5], -1.0) == 2
    assert steps_to_threshold([-5.0, -4.0], -1.0) == 2
    assert steps_to_threshold([-5.0, float("nan"), -0.1], -1.0) == 2


@pytest.mark.slow
def test_elbo_gradient_matches_finite_differences():
    assert elbo_fd_error(seed=0) <= 1e-4


@pytest.mark.slow
def test_natural_gradient_reaches_the_threshold_first():
    results = check_ordering(seed=0)
    assert all(r.passed for r in results), results


@pytest.mark.slow
def test_parallel_smoother_speedup_and_stored_states():
    results = check_speedup(seed=0)
    assert all(r.passed for r in results), results
