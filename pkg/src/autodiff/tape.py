"""Operation tape with reverse-mode and forward-mode differentiation"""
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..utils.exceptions import ShapeMismatch


class Primitive:
    """An operation with its value, vector-Jacobian and Jacobian-vector rules.

    ``vjp(g, out, *args, **kw)`` returns one cotangent per positional argument
    (``None`` where the argument receives no gradient). ``jvp(tangents, out, *args, **kw)``
    receives one tangent per argument (``None`` for zero) and returns the output tangent.
    """

    def __init__(self, name: str, fwd: Callable, vjp: Callable, jvp: Callable,
                 variadic: bool = False):
        self.name = name
        self.fwd = fwd
        self.vjp = vjp
        self.jvp = jvp
        self.variadic = variadic

    def __repr__(self) -> str:
        return f"Primitive({self.name})"


@dataclass
class _Ref:
    index: int


@dataclass
class Node:
    """One recorded operation; leaves have ``prim`` set to None"""
    prim: Optional[Primitive]
    args: Tuple[Any, ...]
    kwargs: Dict[str, Any]
    value: np.ndarray
    parents: List[int] = field(default_factory=list)


class Tensor:
    """A value recorded on a tape"""

    __array_ufunc__ = None
    __array_priority__ = 1000

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> Tuple[int, ...]:
        return np.shape(self.value)

    @property
    def ndim(self) -> int:
        return np.ndim(self.value)

    @property
    def size(self) -> int:
        return int(np.size(self.value))

    @property
    def dtype(self):
        return np.asarray(self.value).dtype

    @property
    def mT(self) -> "Tensor":
        return _ops().mT(self)

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(index={self.index}, shape={self.shape})"

    def __float__(self) -> float:
        return float(self.value)

    def __add__(self, other):
        return _ops().add(self, other)

    def __radd__(self, other):
        return _ops().add(other, self)

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    def __rmul__(self, other):
        return _ops().mul(other, self)

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __rtruediv__(self, other):
        return _ops().div(other, self)

    def __neg__(self):
        return _ops().neg(self)

    def __pow__(self, power):
        return _ops().power(self, power)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def __rmatmul__(self, other):
        return _ops().matmul(other, self)

    def __getitem__(self, idx):
        return _ops().getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)


def _ops():
    from . import ops
    return ops


def raw(x: Any) -> Any:
    """Underlying numpy value of a tensor, or the input itself"""
    return x.value if isinstance(x, Tensor) else x


class Tape:
    """Append-only record of primitive applications.

    A tape is single-threaded; every node's inputs precede it, so a reverse sweep over
    node indices visits each node after all of its consumers.
    """

    def __init__(self):
        self.nodes: List[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value: Any) -> Tensor:
        """Record an input"""
        self.nodes.append(Node(None, (), {}, np.asarray(value, dtype=float)))
        return Tensor(self, len(self.nodes) - 1)

    def _encode(self, arg: Any, parents: List[int]) -> Any:
        if isinstance(arg, Tensor):
            if arg.tape is not self:
                raise ValueError("tensor belongs to a different tape")
            parents.append(arg.index)
            return _Ref(arg.index)
        return arg

    def _decode(self, arg: Any) -> Any:
        if isinstance(arg, _Ref):
            return self.nodes[arg.index].value
        if isinstance(arg, list):
            return [self._decode(a) for a in arg]
        return arg

    def apply(self, prim: Primitive, args: Sequence[Any], kwargs: Dict[str, Any]) -> Tensor:
        parents: List[int] = []
        if prim.variadic:
            encoded = ([self._encode(a, parents) for a in args[0]],) + tuple(args[1:])
        else:
            encoded = tuple(self._encode(a, parents) for a in args)
        value = prim.fwd(*(self._decode(a) for a in encoded), **kwargs)
        self.nodes.append(Node(prim, encoded, kwargs, value, parents))
        return Tensor(self, len(self.nodes) - 1)

    def _raw_args(self, node: Node) -> List[Any]:
        return [self._decode(a) for a in node.args]

    def backward(self, output: Tensor, cotangent: Any = None,
                 wrt: Optional[Sequence[Tensor]] = None) -> List[np.ndarray]:
        """Reverse sweep from ``output``; returns cotangents for ``wrt`` (zeros where unreached)"""
        out_value = output.value
        if cotangent is None:
            if np.size(out_value) != 1:
                raise ShapeMismatch("cotangent required for non-scalar output")
            cotangent = np.ones_like(out_value)
        cotangent = np.asarray(cotangent, dtype=float)
        if cotangent.shape != np.shape(out_value):
            raise ShapeMismatch(
                f"cotangent shape {cotangent.shape} does not match output {np.shape(out_value)}")

        keep = {t.index for t in wrt} if wrt is not None else set()
        grads: Dict[int, np.ndarray] = {output.index: cotangent}
        for i in range(output.index, -1, -1):
            g = grads.get(i)
            node = self.nodes[i]
            if g is None or node.prim is None:
                continue
            in_grads = node.prim.vjp(g, node.value, *self._raw_args(node), **node.kwargs)
            refs = node.args[0] if node.prim.variadic else node.args
            for ref, ig in zip(refs, in_grads):
                if ig is None or not isinstance(ref, _Ref):
                    continue
                prev = grads.get(ref.index)
                grads[ref.index] = ig if prev is None else prev + ig
            if i not in keep:
                del grads[i]

        targets = wrt if wrt is not None else []
        return [np.asarray(grads[t.index]) if t.index in grads else np.zeros_like(t.value)
                for t in targets]

    def forward_tangents(self, tangents: Dict[int, Any], output: Tensor) -> np.ndarray:
        """Forward sweep propagating leaf tangents (keyed by leaf index) to ``output``"""
        tan: Dict[int, np.ndarray] = {}
        for idx, t in tangents.items():
            t = np.asarray(t, dtype=float)
            if t.shape != np.shape(self.nodes[idx].value):
                raise ShapeMismatch(
                    f"tangent shape {t.shape} does not match leaf {np.shape(self.nodes[idx].value)}")
            tan[idx] = t
        for i in range(output.index + 1):
            node = self.nodes[i]
            if node.prim is None:
                continue
            refs = node.args[0] if node.prim.variadic else node.args
            in_tans = [tan.get(r.index) if isinstance(r, _Ref) else None for r in refs]
            if all(t is None for t in in_tans):
                continue
            tan[i] = node.prim.jvp(in_tans, node.value, *self._raw_args(node), **node.kwargs)
        result = tan.get(output.index)
        return np.zeros_like(output.value) if result is None else np.asarray(result)

    def replay(self) -> bool:
        """Recompute every node from the recorded leaves and compare bitwise"""
        values: Dict[int, np.ndarray] = {}

        def decode(arg):
            if isinstance(arg, _Ref):
                return values[arg.index]
            if isinstance(arg, list):
                return [decode(a) for a in arg]
            return arg

        for i, node in enumerate(self.nodes):
            if node.prim is None:
                values[i] = node.value
                continue
            values[i] = node.prim.fwd(*(decode(a) for a in node.args), **node.kwargs)
            if not np.array_equal(values[i], node.value, equal_nan=True):
                return False
        return True


def vjp(fn: Callable, *primals: Any) -> Tuple[np.ndarray, Callable]:
    """Evaluate ``fn`` on fresh leaves; return its value and a reusable pullback"""
    tape = Tape()
    leaves = [tape.leaf(p) for p in primals]
    out = fn(*leaves)
    if not isinstance(out, Tensor):
        value = np.asarray(out, dtype=float)

        def zero_pullback(cotangent):
            return tuple(np.zeros_like(leaf.value) for leaf in leaves)

        return value, zero_pullback

    def pullback(cotangent):
        return tuple(tape.backward(out, cotangent, wrt=leaves))

    return np.asarray(out.value), pullback


def jvp(fn: Callable, primals: Sequence[Any], tangents: Sequence[Any]) -> Tuple[np.ndarray, np.ndarray]:
    """Forward-mode derivative of ``fn`` at ``primals`` along ``tangents``"""
    if len(primals) != len(tangents):
        raise ShapeMismatch("one tangent per primal is required")
    tape = Tape()
    leaves = [tape.leaf(p) for p in primals]
    out = fn(*leaves)
    if not isinstance(out, Tensor):
        value = np.asarray(out, dtype=float)
        return value, np.zeros_like(value)
    tan = tape.forward_tangents({leaf.index: t for leaf, t in zip(leaves, tangents)}, out)
    return np.asarray(out.value), tan


def value_and_grad(fn: Callable[[Dict[str, Any]], Any],
                   params: Dict[str, np.ndarray]) -> Tuple[float, Dict[str, np.ndarray]]:
    """Scalar value of ``fn(params)`` and its gradient for every named array"""
    tape = Tape()
    leaves = {name: tape.leaf(value) for name, value in params.items()}
    out = fn(leaves)
    names = list(leaves)
    if not isinstance(out, Tensor):
        return float(out), {name: np.zeros_like(np.asarray(params[name], dtype=float)) for name in names}
    grads = tape.backward(out, wrt=[leaves[n] for n in names])
    return float(out.value), dict(zip(names, grads))
