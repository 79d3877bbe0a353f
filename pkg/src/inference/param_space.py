"""Invertible maps between unconstrained and constrained parameters"""
from abc import ABC, abstractmethod
from typing import Any, List, Tuple

import numpy as np

from ..autodiff import ops
from ..autodiff.tape import jvp as forward_jvp
from ..models.family import FamilyDescriptor, FamilyKind
from ..utils.exceptions import BoundaryError, DimMismatch
from . import expfam

SIMPLEX_FLOOR = 1e-300
SPD_EIG_FLOOR = 1e-12


class Bijector(ABC):
    """Differentiable bijection from an unconstrained vector to a constrained one.

    ``forward`` and ``inverse`` are written against the array-generic op layer;
    ``jvp_inverse`` defaults to forward-mode differentiation of ``inverse``.
    """

    name = "bijector"

    @abstractmethod
    def forward(self, x: Any) -> Any:
        """Unconstrained -> constrained"""

    @abstractmethod
    def inverse(self, y: Any) -> Any:
        """Constrained -> unconstrained"""

    def check_interior(self, y: np.ndarray):
        """Raise BoundaryError if ``y`` is on or outside the constraint boundary"""

    def jvp_inverse(self, y: Any, tangent: Any) -> np.ndarray:
        """Directional derivative of the inverse at ``y`` along ``tangent``"""
        y = np.asarray(ops.value(y), dtype=float)
        self.check_interior(y)
        _, tan = forward_jvp(self.inverse, (y,), (np.asarray(tangent, dtype=float),))
        return tan

    def __repr__(self) -> str:
        return f"{type(self).__name__}()"


class IdentityBijector(Bijector):
    name = "identity"

    def forward(self, x):
        return x

    def inverse(self, y):
        return y

    def jvp_inverse(self, y, tangent):
        return np.asarray(tangent, dtype=float)


class SoftplusBijector(Bijector):
    """Positive reals via log(1 + exp(x))"""

    name = "softplus"

    def forward(self, x):
        return ops.softplus(x)

    def check_interior(self, y):
        if np.any(np.asarray(y) <= 0):
            raise BoundaryError("softplus inverse requires strictly positive input")

    def inverse(self, y):
        if not ops.is_tensor(y):
            self.check_interior(y)
        return ops.softplus_inverse(y)

    def jvp_inverse(self, y, tangent):
        y = np.asarray(ops.value(y), dtype=float)
        self.check_interior(y)
        return np.asarray(tangent, dtype=float) / -np.expm1(-y)


class ShiftedSoftplusBijector(Bijector):
    """Values greater than ``shift``"""

    name = "shifted_softplus"

    def __init__(self, shift: float):
        self.shift = float(shift)

    def forward(self, x):
        return ops.softplus(x) + self.shift

    def check_interior(self, y):
        if np.any(np.asarray(y) <= self.shift):
            raise BoundaryError(f"value must exceed {self.shift}")

    def inverse(self, y):
        if not ops.is_tensor(y):
            self.check_interior(y)
        return ops.softplus_inverse(y - self.shift)

    def jvp_inverse(self, y, tangent):
        y = np.asarray(ops.value(y), dtype=float)
        self.check_interior(y)
        return np.asarray(tangent, dtype=float) / -np.expm1(-(y - self.shift))

    def __repr__(self) -> str:
        return f"ShiftedSoftplusBijector(shift={self.shift})"


class SimplexSoftmaxBijector(Bijector):
    """K-simplex from K-1 logits, made invertible by appending a zero logit"""

    name = "simplex_softmax"

    def __init__(self, k: int):
        if k < 1:
            raise DimMismatch("simplex needs at least one category")
        self.k = k

    def forward(self, x):
        logits = ops.concat([x, np.zeros(1)])
        return ops.exp(logits - ops.logsumexp(logits))

    def check_interior(self, y):
        y = np.asarray(y)
        if y.shape != (self.k,):
            raise DimMismatch(f"expected a length-{self.k} simplex point")
        if np.any(y < SIMPLEX_FLOOR):
            raise BoundaryError("simplex entries must be strictly positive")

    def inverse(self, y):
        if not ops.is_tensor(y):
            self.check_interior(y)
        log_y = ops.log(y)
        return log_y[: self.k - 1] - log_y[self.k - 1]

    def jvp_inverse(self, y, tangent):
        y = np.asarray(ops.value(y), dtype=float)
        self.check_interior(y)
        v = np.asarray(tangent, dtype=float)
        return v[: self.k - 1] / y[: self.k - 1] - v[self.k - 1] / y[self.k - 1]


class SPDCorrelationCholeskyBijector(Bijector):
    """SPD matrices (flattened row-major) as diag(sigma) R diag(sigma).

    The unconstrained vector is [u (n), w (n(n-1)/2)]: sigma = softplus(u), and w fills the
    strictly lower triangle (row-major) of a unit-diagonal matrix W whose rows are
    normalized to unit length to give the Cholesky factor of the correlation R.
    """

    name = "spd_correlation_cholesky"

    def __init__(self, n: int):
        if n < 1:
            raise DimMismatch("SPD dimension must be >= 1")
        self.n = n
        rows, cols = np.tril_indices(n, -1)
        order = np.lexsort((cols, rows))
        self._rows, self._cols = rows[order], cols[order]
        n_off = len(self._rows)
        index = np.full((n, n), n_off + 1, dtype=int)
        index[self._rows, self._cols] = np.arange(n_off)
        index[np.arange(n), np.arange(n)] = n_off
        self._index = index

    @property
    def unconstrained_size(self) -> int:
        return self.n + self.n * (self.n - 1) // 2

    def matrix(self, x):
        """SPD matrix (n x n) from an unconstrained vector"""
        n = self.n
        sigma = ops.softplus(x[:n])
        ext = ops.concat([x[n:], np.array([1.0, 0.0])])
        W = ext[self._index]
        L = W / ops.sqrt(ops.sum_(W * W, axis=1, keepdims=True))
        scaled = ops.reshape(sigma, (n, 1)) * L
        return ops.sym(ops.matmul(scaled, ops.mT(scaled)))

    def unconstrained(self, S):
        """Unconstrained vector from an SPD matrix (n x n)"""
        n = self.n
        sigma = ops.sqrt(ops.diagonal(S))
        R = S / ops.outer(sigma, sigma)
        L = ops.cholesky(R, where="correlation")
        diag_L = ops.diagonal(L)
        w = L[self._rows, self._cols] / diag_L[self._rows]
        return ops.concat([ops.softplus_inverse(sigma), w])

    def forward(self, x):
        return ops.reshape(self.matrix(x), (self.n * self.n,))

    def check_interior(self, y):
        S = np.asarray(y, dtype=float).reshape(self.n, self.n)
        if np.min(np.linalg.eigvalsh(0.5 * (S + S.T))) < SPD_EIG_FLOOR:
            raise BoundaryError("matrix is not strictly positive definite")

    def inverse(self, y):
        if not ops.is_tensor(y):
            self.check_interior(y)
        return self.unconstrained(ops.sym(ops.reshape(y, (self.n, self.n))))

    def __repr__(self) -> str:
        return f"SPDCorrelationCholeskyBijector(n={self.n})"


class FamilyBijector(Bijector):
    """Unconstrained vector -> natural parameters of a NIW, MNIW or Dirichlet family.

    NIW: [S_u, m, lam_u, nu_u]; MNIW: [S_u, M (row-major), V_u, nu_u]; Dirichlet: alpha_u.
    S and V use the SPD bijector, lam softplus and nu softplus shifted by n - 1.
    """

    name = "family"

    def __init__(self, family: FamilyDescriptor):
        if family.kind not in (FamilyKind.NIW, FamilyKind.MNIW, FamilyKind.DIRICHLET):
            raise DimMismatch(f"no unconstrained map for {family.kind.value}")
        self.family = family
        n, m = family.n, family.m
        self.spd_S = SPDCorrelationCholeskyBijector(n)
        self.spd_V = SPDCorrelationCholeskyBijector(m) if family.kind == FamilyKind.MNIW else None
        self.positive = SoftplusBijector()
        self.dof = ShiftedSoftplusBijector(n - 1)

    @property
    def unconstrained_size(self) -> int:
        n, m = self.family.n, self.family.m
        if self.family.kind == FamilyKind.NIW:
            return self.spd_S.unconstrained_size + n + 2
        if self.family.kind == FamilyKind.MNIW:
            return self.spd_S.unconstrained_size + n * m + self.spd_V.unconstrained_size + 1
        return n

    def _split(self, x) -> List[Any]:
        n, m = self.family.n, self.family.m
        if self.family.kind == FamilyKind.NIW:
            sizes = [self.spd_S.unconstrained_size, n, 1, 1]
        else:
            sizes = [self.spd_S.unconstrained_size, n * m, self.spd_V.unconstrained_size, 1]
        parts, offset = [], 0
        for size in sizes:
            parts.append(x[offset:offset + size])
            offset += size
        return parts

    def forward(self, x):
        if self.family.kind == FamilyKind.DIRICHLET:
            return self.positive.forward(x)
        n, m = self.family.n, self.family.m
        if self.family.kind == FamilyKind.NIW:
            s_u, mean, lam_u, nu_u = self._split(x)
            canonical: Tuple[Any, ...] = (self.spd_S.matrix(s_u), mean,
                                          self.positive.forward(lam_u[0]), self.dof.forward(nu_u[0]))
        else:
            s_u, m_flat, v_u, nu_u = self._split(x)
            canonical = (self.spd_S.matrix(s_u), ops.reshape(m_flat, (n, m)),
                         self.spd_V.matrix(v_u), self.dof.forward(nu_u[0]))
        return expfam.to_natural(self.family, canonical)

    def check_interior(self, y):
        y = np.asarray(y, dtype=float)
        if self.family.kind == FamilyKind.DIRICHLET:
            self.positive.check_interior(y)
            return
        expfam.validate_canonical(self.family, expfam.from_natural(self.family, y))

    def inverse(self, y):
        if not ops.is_tensor(y):
            self.check_interior(y)
        if self.family.kind == FamilyKind.DIRICHLET:
            return ops.softplus_inverse(y)
        if self.family.kind == FamilyKind.NIW:
            S, mean, lam, nu = expfam.from_natural(self.family, y)
            return ops.concat([self.spd_S.unconstrained(S), mean,
                               ops.reshape(ops.softplus_inverse(lam), (1,)),
                               ops.reshape(ops.softplus_inverse(nu - self.dof.shift), (1,))])
        S, M, V, nu = expfam.from_natural(self.family, y)
        return ops.concat([self.spd_S.unconstrained(S), ops.reshape(M, (self.family.n * self.family.m,)),
                           self.spd_V.unconstrained(V),
                           ops.reshape(ops.softplus_inverse(nu - self.dof.shift), (1,))])

    def __repr__(self) -> str:
        return f"FamilyBijector({self.family.kind.value}, n={self.family.n}, m={self.family.m})"


class IdentityFamilyBijector(IdentityBijector):
    """Natural parameters used directly as the unconstrained vector"""

    def __init__(self, family: FamilyDescriptor):
        self.family = family

    @property
    def unconstrained_size(self) -> int:
        return self.family.size


def forward(b: Bijector, unconstrained: Any) -> Any:
    return b.forward(unconstrained)


def inverse(b: Bijector, constrained: Any) -> Any:
    return b.inverse(constrained)


def jvp_inverse(b: Bijector, at_constrained: Any, tangent: Any) -> np.ndarray:
    return b.jvp_inverse(at_constrained, tangent)
