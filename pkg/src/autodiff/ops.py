"""Array-generic operations.

Every function accepts numpy arrays or tape tensors. Without a tensor argument the
primitive's numpy implementation runs directly, so numerical code written against this
module serves both plain evaluation and differentiation.
"""
import math
from typing import Any, Callable, Optional, Sequence, Tuple

import numpy as np

from . import primitives as P
from .tape import Primitive, Tape, Tensor, raw

LOG_2PI = math.log(2.0 * math.pi)


def _find_tape(args: Sequence[Any]) -> Optional[Tape]:
    for a in args:
        if isinstance(a, Tensor):
            return a.tape
        if isinstance(a, (list, tuple)):
            found = _find_tape(a)
            if found is not None:
                return found
    return None


def _apply(prim: Primitive, *args: Any, **kwargs: Any) -> Any:
    tape = _find_tape(args[:1] if prim.variadic else args)
    if tape is None:
        return prim.fwd(*args, **kwargs)
    return tape.apply(prim, args, kwargs)


def is_tensor(x: Any) -> bool:
    return isinstance(x, Tensor)


def value(x: Any) -> Any:
    return raw(x)


def shape(x: Any) -> Tuple[int, ...]:
    return x.shape if isinstance(x, Tensor) else np.shape(x)


# Arithmetic

def add(a, b):
    return _apply(P.add, a, b)


def sub(a, b):
    return _apply(P.sub, a, b)


def mul(a, b):
    return _apply(P.mul, a, b)


def div(a, b):
    return _apply(P.div, a, b)


def neg(a):
    return _apply(P.neg, a)


def power(a, p: float):
    return _apply(P.power, a, p)


def matmul(a, b):
    return _apply(P.matmul, a, b)


def mT(a):
    return _apply(P.transpose, a)


# Elementwise

def exp(a):
    return _apply(P.exp, a)


def log(a):
    return _apply(P.log, a)


def tanh(a):
    return _apply(P.tanh, a)


def sqrt(a):
    return _apply(P.sqrt, a)


def expm1(a):
    return _apply(P.expm1, a)


def log1p(a):
    return _apply(P.log1p, a)


def softplus(a):
    return _apply(P.softplus, a)


def softplus_inverse(y):
    return y + log(-expm1(-y))


def sigmoid(a):
    return _apply(P.sigmoid, a)


def digamma(a):
    return _apply(P.digamma, a)


def gammaln(a):
    return _apply(P.gammaln, a)


def logsumexp(a, axis: Optional[int] = -1, keepdims: bool = False):
    return _apply(P.logsumexp, a, axis=axis, keepdims=keepdims)


def multigammaln(x, n: int):
    """log of the multivariate gamma function of dimension n"""
    offsets = -0.5 * np.arange(n)
    return sum_(gammaln(x + offsets)) + 0.25 * n * (n - 1) * math.log(math.pi)


# Reductions and structure

def sum_(a, axis=None, keepdims: bool = False):
    return _apply(P.sum_, a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims: bool = False):
    count = np.size(raw(a)) if axis is None else np.prod(
        [shape(a)[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return sum_(a, axis=axis, keepdims=keepdims) / float(count)


def reshape(a, new_shape: Sequence[int]):
    return _apply(P.reshape, a, tuple(new_shape))


def getitem(a, idx):
    return _apply(P.getitem, a, idx)


def concat(arrays: Sequence[Any], axis: int = 0):
    return _apply(P.concat, list(arrays), axis=axis)


def stack(arrays: Sequence[Any], axis: int = 0):
    return _apply(P.stack, list(arrays), axis=axis)


def diagonal(a):
    return _apply(P.diagonal, a)


def diag_embed(v):
    return _apply(P.diag_embed, v)


def trace(a):
    return sum_(diagonal(a), axis=-1)


def sym(a):
    return 0.5 * (a + mT(a))


def unsqueeze(a, axis: int = -1):
    s = list(shape(a))
    pos = axis if axis >= 0 else len(s) + axis + 1
    s.insert(pos, 1)
    return reshape(a, s)


def matvec(a, v):
    out = matmul(a, unsqueeze(v, -1))
    return reshape(out, shape(out)[:-1])


def outer(a, b):
    return unsqueeze(a, -1) * unsqueeze(b, -2)


def inner(a, b, axis=None):
    """Sum of elementwise products over ``axis`` (all axes by default)"""
    return sum_(a * b, axis=axis)


# Linear algebra

def cholesky(a, where: str = "cholesky", index: Optional[int] = None):
    return _apply(P.cholesky, a, where=where, index=index)


def solve_triangular(chol, b, trans: bool = False):
    return _apply(P.solve_triangular, chol, b, trans=trans)


def cho_solve(a, b, where: str = "solve", index: Optional[int] = None):
    """Solve ``a x = b`` for symmetric positive definite ``a``; ``b`` is (..., n, k)"""
    return _apply(P.cho_solve, a, b, where=where, index=index)


def solve_vec(a, b, where: str = "solve", index: Optional[int] = None):
    """Solve ``a x = b`` for a vector (or batch of vectors) ``b``"""
    x = cho_solve(a, unsqueeze(b, -1), where=where, index=index)
    return reshape(x, shape(x)[:-1])


def inv_spd(a, where: str = "inverse", index: Optional[int] = None):
    n = shape(a)[-1]
    eye = np.broadcast_to(np.eye(n), shape(a))
    return cho_solve(a, eye, where=where, index=index)


def logdet(a, where: str = "logdet", index: Optional[int] = None):
    """log-determinant of a symmetric positive definite matrix"""
    return _apply(P.logdet, a, where=where, index=index)


# Custom gradients

def stop_gradient(a):
    return _apply(P.stop_gradient, a)


def straight_through(fn: Callable) -> Callable:
    """Wrap ``fn`` so its value is used forward and the cotangent passes through unchanged"""
    def wrapped(a):
        return _apply(P.straight_through, a, fn)
    return wrapped


def natgrad_map(bijector) -> Callable:
    """Apply ``bijector.forward``; backward pulls cotangents through ``jvp_inverse``"""
    def wrapped(a):
        return _apply(P.natgrad_map, a, bijector)
    return wrapped
