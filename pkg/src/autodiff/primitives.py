"""Primitive operations with analytic derivative rules"""
from typing import Any, List, Optional, Sequence

import numpy as np
from scipy import special

from ..utils.exceptions import NotSPD
from .tape import Primitive, jvp as _functional_jvp


def _mT(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + _mT(a))


def _unbroadcast(g: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting"""
    shape = tuple(shape)
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _tangent_sum(terms: List[Optional[np.ndarray]], shape: Sequence[int]) -> np.ndarray:
    total = np.zeros(shape)
    for term in terms:
        if term is not None:
            total = total + term
    return total


def _cholesky(a: np.ndarray, where: str, index: Optional[int]) -> np.ndarray:
    try:
        chol = np.linalg.cholesky(_sym(np.asarray(a, dtype=float)))
    except np.linalg.LinAlgError:
        raise NotSPD(where, index) from None
    if not np.all(np.isfinite(chol)):
        raise NotSPD(where, index)
    return chol


def _cho_apply(chol: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.linalg.solve(_mT(chol), np.linalg.solve(chol, b))


def _phi(m: np.ndarray) -> np.ndarray:
    """Lower triangle with halved diagonal"""
    out = np.tril(m)
    n = m.shape[-1]
    idx = np.arange(n)
    out[..., idx, idx] *= 0.5
    return out


def _is_basic_index(idx: Any) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
               for i in items)


# Arithmetic

add = Primitive(
    "add",
    lambda a, b: np.add(a, b),
    lambda g, out, a, b: (_unbroadcast(g, np.shape(a)), _unbroadcast(g, np.shape(b))),
    lambda t, out, a, b: _tangent_sum(t, np.shape(out)),
)

sub = Primitive(
    "sub",
    lambda a, b: np.subtract(a, b),
    lambda g, out, a, b: (_unbroadcast(g, np.shape(a)), _unbroadcast(-g, np.shape(b))),
    lambda t, out, a, b: _tangent_sum([t[0], None if t[1] is None else -t[1]], np.shape(out)),
)

mul = Primitive(
    "mul",
    lambda a, b: np.multiply(a, b),
    lambda g, out, a, b: (_unbroadcast(g * b, np.shape(a)), _unbroadcast(g * a, np.shape(b))),
    lambda t, out, a, b: _tangent_sum(
        [None if t[0] is None else t[0] * b, None if t[1] is None else a * t[1]], np.shape(out)),
)

div = Primitive(
    "div",
    lambda a, b: np.divide(a, b),
    lambda g, out, a, b: (_unbroadcast(g / b, np.shape(a)),
                          _unbroadcast(-g * out / b, np.shape(b))),
    lambda t, out, a, b: _tangent_sum(
        [None if t[0] is None else t[0] / b, None if t[1] is None else -t[1] * out / b],
        np.shape(out)),
)

neg = Primitive(
    "neg",
    lambda a: np.negative(a),
    lambda g, out, a: (-g,),
    lambda t, out, a: -t[0],
)

power = Primitive(
    "power",
    lambda a, p: np.power(a, p),
    lambda g, out, a, p: (g * p * np.power(a, p - 1),),
    lambda t, out, a, p: t[0] * p * np.power(a, p - 1),
)

matmul = Primitive(
    "matmul",
    lambda a, b: np.matmul(a, b),
    lambda g, out, a, b: (_unbroadcast(g @ _mT(b), np.shape(a)),
                          _unbroadcast(_mT(a) @ g, np.shape(b))),
    lambda t, out, a, b: _tangent_sum(
        [None if t[0] is None else t[0] @ b, None if t[1] is None else a @ t[1]], np.shape(out)),
)

transpose = Primitive(
    "transpose",
    lambda a: _mT(np.asarray(a)),
    lambda g, out, a: (_mT(g),),
    lambda t, out, a: _mT(t[0]),
)


# Elementwise

exp = Primitive(
    "exp",
    lambda a: np.exp(a),
    lambda g, out, a: (g * out,),
    lambda t, out, a: t[0] * out,
)

log = Primitive(
    "log",
    lambda a: np.log(a),
    lambda g, out, a: (g / a,),
    lambda t, out, a: t[0] / a,
)

tanh = Primitive(
    "tanh",
    lambda a: np.tanh(a),
    lambda g, out, a: (g * (1.0 - out ** 2),),
    lambda t, out, a: t[0] * (1.0 - out ** 2),
)

sqrt = Primitive(
    "sqrt",
    lambda a: np.sqrt(a),
    lambda g, out, a: (g / (2.0 * out),),
    lambda t, out, a: t[0] / (2.0 * out),
)

expm1 = Primitive(
    "expm1",
    lambda a: np.expm1(a),
    lambda g, out, a: (g * (out + 1.0),),
    lambda t, out, a: t[0] * (out + 1.0),
)

log1p = Primitive(
    "log1p",
    lambda a: np.log1p(a),
    lambda g, out, a: (g / (1.0 + a),),
    lambda t, out, a: t[0] / (1.0 + a),
)

softplus = Primitive(
    "softplus",
    lambda a: np.logaddexp(0.0, a),
    lambda g, out, a: (g * special.expit(a),),
    lambda t, out, a: t[0] * special.expit(a),
)

sigmoid = Primitive(
    "sigmoid",
    lambda a: special.expit(a),
    lambda g, out, a: (g * out * (1.0 - out),),
    lambda t, out, a: t[0] * out * (1.0 - out),
)

digamma = Primitive(
    "digamma",
    lambda a: special.digamma(a),
    lambda g, out, a: (g * special.polygamma(1, a),),
    lambda t, out, a: t[0] * special.polygamma(1, a),
)

gammaln = Primitive(
    "gammaln",
    lambda a: special.gammaln(a),
    lambda g, out, a: (g * special.digamma(a),),
    lambda t, out, a: t[0] * special.digamma(a),
)


def _lse_weights(out: np.ndarray, a: np.ndarray, axis, keepdims: bool) -> np.ndarray:
    out_k = out if (keepdims or axis is None) else np.expand_dims(out, axis)
    with np.errstate(invalid="ignore"):
        w = np.exp(a - out_k)
    return np.where(np.isneginf(out_k), 0.0, w)


def _lse_vjp(g, out, a, axis=-1, keepdims=False):
    g_k = g if (keepdims or axis is None) else np.expand_dims(g, axis)
    return (g_k * _lse_weights(out, a, axis, keepdims),)


def _lse_jvp(t, out, a, axis=-1, keepdims=False):
    w = _lse_weights(out, a, axis, keepdims)
    return np.sum(w * t[0], axis=axis, keepdims=keepdims)


logsumexp = Primitive(
    "logsumexp",
    lambda a, axis=-1, keepdims=False: special.logsumexp(a, axis=axis, keepdims=keepdims),
    _lse_vjp,
    _lse_jvp,
)


# Structural

def _sum_vjp(g, out, a, axis=None, keepdims=False):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, np.shape(a)).copy(),)


sum_ = Primitive(
    "sum",
    lambda a, axis=None, keepdims=False: np.sum(a, axis=axis, keepdims=keepdims),
    _sum_vjp,
    lambda t, out, a, axis=None, keepdims=False: np.sum(t[0], axis=axis, keepdims=keepdims),
)

reshape = Primitive(
    "reshape",
    lambda a, shape: np.reshape(a, shape),
    lambda g, out, a, shape: (np.reshape(g, np.shape(a)),),
    lambda t, out, a, shape: np.reshape(t[0], shape),
)


def _getitem_vjp(g, out, a, idx):
    grad = np.zeros(np.shape(a))
    if _is_basic_index(idx):
        grad[idx] = g
    else:
        np.add.at(grad, idx, g)
    return (grad,)


getitem = Primitive(
    "getitem",
    lambda a, idx: np.asarray(a)[idx],
    _getitem_vjp,
    lambda t, out, a, idx: t[0][idx],
)


def _concat_vjp(g, out, arrays, axis=0):
    sizes = [np.shape(x)[axis] for x in arrays]
    return np.split(g, np.cumsum(sizes)[:-1], axis=axis)


concat = Primitive(
    "concat",
    lambda arrays, axis=0: np.concatenate(arrays, axis=axis),
    _concat_vjp,
    lambda t, out, arrays, axis=0: np.concatenate(
        [np.zeros(np.shape(x)) if tx is None else tx for tx, x in zip(t, arrays)], axis=axis),
    variadic=True,
)

stack = Primitive(
    "stack",
    lambda arrays, axis=0: np.stack(arrays, axis=axis),
    lambda g, out, arrays, axis=0: [np.take(g, i, axis=axis) for i in range(len(arrays))],
    lambda t, out, arrays, axis=0: np.stack(
        [np.zeros(np.shape(x)) if tx is None else tx for tx, x in zip(t, arrays)], axis=axis),
    variadic=True,
)


def _diag_embed(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v)
    n = v.shape[-1]
    out = np.zeros(v.shape + (n,))
    idx = np.arange(n)
    out[..., idx, idx] = v
    return out


def _diagonal(a: np.ndarray) -> np.ndarray:
    return np.diagonal(a, axis1=-2, axis2=-1).copy()


diagonal = Primitive(
    "diagonal",
    _diagonal,
    lambda g, out, a: (_diag_embed(g),),
    lambda t, out, a: _diagonal(t[0]),
)

diag_embed = Primitive(
    "diag_embed",
    _diag_embed,
    lambda g, out, v: (_diagonal(g),),
    lambda t, out, v: _diag_embed(t[0]),
)


# Linear algebra (SPD inputs are symmetrized before factorization)

def _chol_vjp(g, out, a, where="cholesky", index=None):
    inv = np.linalg.inv(out)
    abar = _mT(inv) @ _phi(_mT(out) @ g) @ inv
    return (_sym(abar),)


def _chol_jvp(t, out, a, where="cholesky", index=None):
    inv = np.linalg.inv(out)
    return out @ _phi(inv @ _sym(t[0]) @ _mT(inv))


cholesky = Primitive(
    "cholesky",
    lambda a, where="cholesky", index=None: _cholesky(a, where, index),
    _chol_vjp,
    _chol_jvp,
)


def _trsolve_fwd(chol, b, trans=False):
    lower = np.tril(chol)
    return np.linalg.solve(_mT(lower) if trans else lower, b)


def _trsolve_vjp(g, out, chol, b, trans=False):
    lower = np.tril(chol)
    if trans:
        bbar = np.linalg.solve(lower, g)
        lbar = -np.tril(out @ _mT(bbar))
    else:
        bbar = np.linalg.solve(_mT(lower), g)
        lbar = -np.tril(bbar @ _mT(out))
    return (_unbroadcast(lbar, np.shape(chol)), _unbroadcast(bbar, np.shape(b)))


def _trsolve_jvp(t, out, chol, b, trans=False):
    lower = np.tril(chol)
    rhs = np.zeros(np.shape(out)) if t[1] is None else np.broadcast_to(t[1], np.shape(out))
    if t[0] is not None:
        dl = np.tril(t[0])
        rhs = rhs - ((_mT(dl) if trans else dl) @ out)
    return np.linalg.solve(_mT(lower) if trans else lower, rhs)


solve_triangular = Primitive("solve_triangular", _trsolve_fwd, _trsolve_vjp, _trsolve_jvp)


def _cho_solve_fwd(a, b, where="solve", index=None):
    return _cho_apply(_cholesky(a, where, index), b)


def _cho_solve_vjp(g, out, a, b, where="solve", index=None):
    gb = _cho_apply(_cholesky(a, where, index), g)
    abar = -_sym(gb @ _mT(out))
    return (_unbroadcast(abar, np.shape(a)), _unbroadcast(gb, np.shape(b)))


def _cho_solve_jvp(t, out, a, b, where="solve", index=None):
    rhs = np.zeros(np.shape(out)) if t[1] is None else np.broadcast_to(t[1], np.shape(out))
    if t[0] is not None:
        rhs = rhs - _sym(t[0]) @ out
    return _cho_apply(_cholesky(a, where, index), rhs)


cho_solve = Primitive("cho_solve", _cho_solve_fwd, _cho_solve_vjp, _cho_solve_jvp)


def _logdet_fwd(a, where="logdet", index=None):
    chol = _cholesky(a, where, index)
    return 2.0 * np.sum(np.log(_diagonal(chol)), axis=-1)


def _spd_inverse(a, where, index):
    chol = _cholesky(a, where, index)
    eye = np.broadcast_to(np.eye(chol.shape[-1]), chol.shape)
    return _cho_apply(chol, eye)


logdet = Primitive(
    "logdet",
    _logdet_fwd,
    lambda g, out, a, where="logdet", index=None: (
        np.asarray(g)[..., None, None] * _spd_inverse(a, where, index),),
    lambda t, out, a, where="logdet", index=None: np.sum(
        _spd_inverse(a, where, index) * _sym(t[0]), axis=(-2, -1)),
)


# Custom-gradient nodes

stop_gradient = Primitive(
    "stop_gradient",
    lambda a: np.array(a, dtype=float),
    lambda g, out, a: (None,),
    lambda t, out, a: np.zeros(np.shape(out)),
)

straight_through = Primitive(
    "straight_through",
    lambda a, fn: np.asarray(fn(a), dtype=float),
    lambda g, out, a, fn: (g,),
    lambda t, out, a, fn: t[0],
)

natgrad_map = Primitive(
    "natgrad_map",
    lambda a, bijector: np.asarray(bijector.forward(a), dtype=float),
    lambda g, out, a, bijector: (np.asarray(bijector.jvp_inverse(out, g)),),
    lambda t, out, a, bijector: _functional_jvp(bijector.forward, (a,), (t[0],))[1],
)
