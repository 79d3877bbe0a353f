"""Gradient estimators for parameters that enter through an inner mean-field solve.

A ``GradientProblem`` exposes the forward solve (numpy), the loss and the fixed-point
residual as functions of (parameters, flat mean-field state), and the loss recorded through
a fixed number of sweeps. Implicit estimators differentiate the loss at the solved state and
correct the partial gradient by solving (dg/domega)' u = dloss/domega with Richardson
iterations built from VJPs of the residual.
"""
from abc import ABC, abstractmethod
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np
import structlog

from ..autodiff.tape import Tape, Tensor
from ..models.meanfield import MeanFieldState
from ..models.results import GradientResult, GradMode, GradModeKind
from ..utils.exceptions import CapacityError, NonFinite, RichardsonDivergence
from ..utils.metrics import metrics

logger = structlog.get_logger(__name__)

# Richardson aborts once an iterate grows past this multiple of the right-hand side
DIVERGENCE_FACTOR = 1e6

GLOBAL_PREFIX = "glob."


class GradientProblem(ABC):
    """Loss with an inner fixed point omega*(params)"""

    params: Dict[str, np.ndarray]

    @abstractmethod
    def solve(self) -> MeanFieldState:
        """Forward solve at the current parameters"""

    @abstractmethod
    def flatten(self, state: MeanFieldState) -> np.ndarray:
        """Flat numpy state of a solve"""

    @abstractmethod
    def loss(self, params: Dict[str, Any], omega: Any) -> Any:
        """Scalar loss as a function of parameters and the flat state"""

    @abstractmethod
    def residual(self, params: Dict[str, Any], omega: Any) -> Any:
        """Fixed-point residual g(omega; params)"""

    @abstractmethod
    def unrolled_loss(self, params: Dict[str, Any], n_sweeps: int) -> Any:
        """Loss after ``n_sweeps`` inner sweeps recorded on the tape"""


def _as_array(x: Any, like: np.ndarray) -> np.ndarray:
    return np.zeros_like(like) if x is None else np.asarray(x, dtype=float)


def richardson_solve(vjp_omega: Callable[[np.ndarray], np.ndarray], rhs: np.ndarray,
                     J: int) -> Tuple[np.ndarray, int]:
    """Neumann sum u = sum_{j=0..J} (I - A')^j rhs with A' v given by ``vjp_omega``.

    Returns the solution and the number of iterations run. ``J = 0`` returns ``rhs``.
    """
    rhs = np.asarray(rhs, dtype=float)
    limit = DIVERGENCE_FACTOR * max(float(np.linalg.norm(rhs)), np.finfo(float).tiny)
    term = rhs.copy()
    total = rhs.copy()
    for j in range(1, J + 1):
        term = term - vjp_omega(term)
        if not np.all(np.isfinite(term)):
            raise NonFinite("Richardson iterate is not finite", iteration=j)
        total = total + term
        if not np.all(np.isfinite(total)):
            raise NonFinite("Richardson sum is not finite", iteration=j)
        if np.linalg.norm(total) > limit:
            raise RichardsonDivergence(
                f"Richardson iterate norm exceeded {DIVERGENCE_FACTOR:g} x rhs", iteration=j)
    metrics.increment("gradients.richardson_iters", J)
    return total, J


def _leaves(tape: Tape, params: Dict[str, np.ndarray]) -> Dict[str, Tensor]:
    return {name: tape.leaf(value) for name, value in params.items()}


def _backward(tape: Tape, out: Any, leaves: Dict[str, Tensor],
              extra: Optional[Tensor] = None) -> Tuple[Dict[str, np.ndarray], Optional[np.ndarray]]:
    names = list(leaves)
    targets = [leaves[n] for n in names] + ([extra] if extra is not None else [])
    if not isinstance(out, Tensor):
        grads = [np.zeros_like(t.value) for t in targets]
    else:
        grads = tape.backward(out, wrt=targets)
    named = dict(zip(names, grads[:len(names)]))
    return named, (grads[-1] if extra is not None else None)


def unrolled_grad(problem: GradientProblem, n_sweeps: int) -> Tuple[float, Dict[str, np.ndarray]]:
    """Differentiate the loss recorded through ``n_sweeps`` sweeps end to end"""
    tape = Tape()
    leaves = _leaves(tape, problem.params)
    try:
        out = problem.unrolled_loss(leaves, n_sweeps)
        grads, _ = _backward(tape, out, leaves)
    except MemoryError:
        raise CapacityError(f"unrolled gradient through {n_sweeps} sweeps exceeded memory") from None
    metrics.record_peak("gradients.stored_states", max(n_sweeps, 1))
    return float(np.asarray(getattr(out, "value", out))), grads


def partial_grads(problem: GradientProblem,
                  omega: np.ndarray) -> Tuple[float, Dict[str, np.ndarray], np.ndarray]:
    """Loss value, dloss/dparams at fixed omega and dloss/domega"""
    tape = Tape()
    leaves = _leaves(tape, problem.params)
    omega_leaf = tape.leaf(omega)
    out = problem.loss(leaves, omega_leaf)
    grads, g_omega = _backward(tape, out, leaves, omega_leaf)
    return float(np.asarray(getattr(out, "value", out))), grads, _as_array(g_omega, omega)


def residual_vjp(problem: GradientProblem, omega: np.ndarray
                 ) -> Tuple[np.ndarray, Callable[[np.ndarray], Tuple[Dict[str, np.ndarray], np.ndarray]]]:
    """Residual at omega and a reusable pullback c -> (c' dg/dparams, c' dg/domega)"""
    tape = Tape()
    leaves = _leaves(tape, problem.params)
    omega_leaf = tape.leaf(omega)
    res = problem.residual(leaves, omega_leaf)
    names = list(leaves)
    if not isinstance(res, Tensor):
        value = np.asarray(res, dtype=float)

        def zero_pullback(c):
            return {n: np.zeros_like(leaves[n].value) for n in names}, np.zeros_like(omega)

        return value, zero_pullback

    def pullback(c):
        grads = tape.backward(res, c, wrt=[leaves[n] for n in names] + [omega_leaf])
        return dict(zip(names, grads[:-1])), grads[-1]

    return np.asarray(res.value), pullback


def implicit_grad(problem: GradientProblem, mode: GradMode,
                  state: Optional[MeanFieldState] = None) -> GradientResult:
    """Implicit gradient at the solved state with the Richardson budget of ``mode``"""
    if state is None:
        state = problem.solve()
    omega = problem.flatten(state)
    loss, partial, g_omega = partial_grads(problem, omega)
    residual, pullback = residual_vjp(problem, omega)
    res_norm = float(np.max(np.abs(residual))) if residual.size else 0.0

    J = mode.richardson_budget(state.iters)
    fell_back = False
    if mode.kind == GradModeKind.THRESHOLDED and res_norm > mode.residual_tol:
        J = 0
        fell_back = True
        logger.debug("implicit_grad_fallback", residual=res_norm, tol=mode.residual_tol)

    if omega.size:
        u, iters = richardson_solve(lambda v: pullback(v)[1], g_omega, J)
        correction, _ = pullback(u)
    else:
        iters, correction = 0, {}
    grads = {name: partial[name] - _as_array(correction.get(name), partial[name]) for name in partial}
    metrics.record_peak("gradients.stored_states", 1)
    return GradientResult(loss=loss, grads=grads, mode=mode, richardson_iters=iters, stored_states=1,
                          residual=res_norm, fell_back=fell_back, partial=partial)


def compute_gradient(problem: GradientProblem, mode: GradMode,
                     state: Optional[MeanFieldState] = None,
                     with_partial: bool = False) -> GradientResult:
    """Gradient of the problem's loss under the selected estimator.

    ``with_partial`` also records dloss/dparams at the fixed solved state for unrolled runs
    (implicit runs always carry it).
    """
    if mode.kind == GradModeKind.UNROLLED:
        if state is None:
            state = problem.solve()
        loss, grads = unrolled_grad(problem, state.iters)
        partial: Dict[str, np.ndarray] = {}
        if with_partial:
            _, partial, _ = partial_grads(problem, problem.flatten(state))
        return GradientResult(loss=loss, grads=grads, mode=mode, stored_states=max(state.iters, 1),
                              residual=state.residual if state.residuals else 0.0, partial=partial)
    return implicit_grad(problem, mode, state)


def global_gradient(result: GradientResult, biased: bool = False) -> Dict[str, np.ndarray]:
    """Loss gradients of the global parameters; ``biased`` drops the correction through the inner solve"""
    source = result.partial if biased and result.partial else result.grads
    return {name: np.asarray(g) for name, g in source.items() if name.startswith(GLOBAL_PREFIX)}


def natural_gradient(result: GradientResult, biased: bool = False) -> Dict[str, np.ndarray]:
    """Ascent directions for the global parameters.

    The loss graph maps unconstrained globals through natgrad maps and their expected
    statistics through straight-through nodes, so the negated loss gradient already is the
    natural-gradient direction. On a graph built without those nodes the same negation is
    the plain ascent direction.
    """
    return {name: -g for name, g in global_gradient(result, biased).items()}


def network_gradient(result: GradientResult) -> Dict[str, np.ndarray]:
    """Loss gradients of every non-global parameter"""
    return {name: g for name, g in result.grads.items() if not name.startswith(GLOBAL_PREFIX)}
