"""Exponential families: natural parameters, expected statistics, log partitions and KL.

Packing (row-major, symmetric matrices stored in full):

- MVN(n): [h = inv(Sigma) mu, -1/2 inv(Sigma)]; statistics [x, x x'].
- NIW(n): [S + lam m m', lam m, lam, nu + n + 2]; statistics
  [-1/2 inv(Sigma), inv(Sigma) mu, -1/2 mu' inv(Sigma) mu, -1/2 log|Sigma|].
- MNIW(n, m): [S + M V M', M V, V, nu + n + m + 1]; statistics
  [-1/2 inv(Sigma), inv(Sigma) X, -1/2 X' inv(Sigma) X, -1/2 log|Sigma|] with X n x m.
- Dirichlet(K): alpha; statistics log pi.
- Categorical(K): logits; statistics one-hot.

Every log partition includes its Gaussian constants and symmetrizes matrix blocks, so
entrywise derivatives of a fully stored symmetric block equal the expected statistic.
"""
import math
from typing import Any, List, Optional, Tuple

import numpy as np
import structlog
from scipy import special

from ..autodiff import ops
from ..models.family import FamilyDescriptor, FamilyKind, MeanParams, NaturalParams
from ..utils.exceptions import DimMismatch, DomainError, FamilyMismatch, NotSPD

logger = structlog.get_logger(__name__)

LOG_2 = math.log(2.0)


# Special functions

def digamma(x: Any) -> Any:
    """Digamma on x > 0"""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise DomainError("digamma requires x > 0")
    return special.digamma(x)


def log_multivariate_gamma(n: int, x: float) -> float:
    """log Gamma_n(x) on x > (n - 1)/2"""
    if x <= 0.5 * (n - 1):
        raise DomainError(f"log multivariate gamma of dimension {n} requires x > {0.5 * (n - 1)}")
    return float(special.multigammaln(x, n))


def logsumexp(v: Any) -> float:
    """Stable log of the sum of exponentials of a vector"""
    return float(special.logsumexp(np.asarray(v, dtype=float)))


# Packing

def unpack(family: FamilyDescriptor, data: Any) -> List[Any]:
    """Split a flat parameter vector into its blocks"""
    if ops.shape(data)[0] != family.size:
        raise DimMismatch(f"{family.kind.value} expects length {family.size}, got {ops.shape(data)[0]}")
    blocks = []
    offset = 0
    for _, shape in family.layout:
        count = int(np.prod(shape)) if shape else 1
        if shape:
            blocks.append(ops.reshape(data[offset:offset + count], shape))
        else:
            blocks.append(data[offset])
        offset += count
    return blocks


def pack(family: FamilyDescriptor, blocks: List[Any]) -> Any:
    """Concatenate blocks into the family's flat layout"""
    flat = []
    for block, (_, shape) in zip(blocks, family.layout):
        count = int(np.prod(shape)) if shape else 1
        if ops.is_tensor(block):
            flat.append(ops.reshape(block, (count,)))
        else:
            flat.append(np.reshape(np.asarray(block, dtype=float), (count,)))
    return ops.concat(flat)


# Canonical <-> natural maps

def to_natural(family: FamilyDescriptor, canonical: Tuple[Any, ...]) -> Any:
    """Natural parameters from canonical ones"""
    kind = family.kind
    if kind == FamilyKind.MVN:
        mu, sigma = canonical
        J = ops.inv_spd(sigma, where="mvn covariance")
        return pack(family, [ops.matvec(J, mu), -0.5 * J])
    if kind == FamilyKind.NIW:
        S, m, lam, nu = canonical
        n = family.n
        return pack(family, [S + lam * ops.outer(m, m), lam * m, lam, nu + n + 2.0])
    if kind == FamilyKind.MNIW:
        S, M, V, nu = canonical
        MV = ops.matmul(M, V)
        return pack(family, [S + ops.matmul(MV, ops.mT(M)), MV, V,
                             nu + family.n + family.m + 1.0])
    (params,) = canonical
    return pack(family, [params])


def from_natural(family: FamilyDescriptor, eta: Any) -> Tuple[Any, ...]:
    """Canonical parameters from natural ones"""
    kind = family.kind
    blocks = unpack(family, eta)
    if kind == FamilyKind.MVN:
        h, neg_half_J = blocks
        sigma = ops.inv_spd(-2.0 * ops.sym(neg_half_J), where="mvn precision")
        return ops.matvec(sigma, h), sigma
    if kind == FamilyKind.NIW:
        S_plus, lam_m, lam, dof = blocks
        m = lam_m / lam
        S = ops.sym(S_plus) - lam * ops.outer(m, m)
        return S, m, lam, dof - family.n - 2.0
    if kind == FamilyKind.MNIW:
        S_plus, MV, V, dof = blocks
        V = ops.sym(V)
        M = ops.mT(ops.cho_solve(V, ops.mT(MV), where="mniw V"))
        S = ops.sym(S_plus) - ops.matmul(ops.matmul(M, V), ops.mT(M))
        return S, M, V, dof - family.n - family.m - 1.0
    return (blocks[0],)


# Log partition and expected statistics

def _psi_sum(nu: Any, n: int) -> Any:
    return ops.sum_(ops.digamma(0.5 * (nu - np.arange(n))))


def log_partition(family: FamilyDescriptor, eta: Any) -> Any:
    """Log partition function at natural parameters ``eta``"""
    kind = family.kind
    n = family.n
    if kind == FamilyKind.MVN:
        h, neg_half_J = unpack(family, eta)
        J = -2.0 * ops.sym(neg_half_J)
        quad = ops.inner(h, ops.solve_vec(J, h, where="mvn logZ"))
        return 0.5 * quad - 0.5 * ops.logdet(J, where="mvn logZ") + 0.5 * n * ops.LOG_2PI
    if kind == FamilyKind.NIW:
        S, m, lam, nu = from_natural(family, eta)
        return (0.5 * nu * (n * LOG_2 - ops.logdet(S, where="niw S"))
                + ops.multigammaln(0.5 * nu, n)
                + 0.5 * n * (ops.LOG_2PI - ops.log(lam)))
    if kind == FamilyKind.MNIW:
        S, M, V, nu = from_natural(family, eta)
        return (0.5 * nu * (n * LOG_2 - ops.logdet(S, where="mniw S"))
                + ops.multigammaln(0.5 * nu, n)
                - 0.5 * n * ops.logdet(V, where="mniw V")
                + 0.5 * n * family.m * ops.LOG_2PI)
    if kind == FamilyKind.DIRICHLET:
        (alpha,) = unpack(family, eta)
        return ops.sum_(ops.gammaln(alpha)) - ops.gammaln(ops.sum_(alpha))
    (logits,) = unpack(family, eta)
    return ops.logsumexp(logits)


def expected_stats(family: FamilyDescriptor, eta: Any) -> Any:
    """Expected sufficient statistics (the gradient of the log partition) at ``eta``"""
    kind = family.kind
    n = family.n
    if kind == FamilyKind.MVN:
        mu, sigma = from_natural(family, eta)
        return pack(family, [mu, sigma + ops.outer(mu, mu)])
    if kind == FamilyKind.NIW:
        S, m, lam, nu = from_natural(family, eta)
        S_inv = ops.inv_spd(S, where="niw S")
        S_inv_m = ops.matvec(S_inv, m)
        return pack(family, [
            -0.5 * nu * S_inv,
            nu * S_inv_m,
            -0.5 * (n / lam + nu * ops.inner(m, S_inv_m)),
            0.5 * (_psi_sum(nu, n) + n * LOG_2 - ops.logdet(S, where="niw S")),
        ])
    if kind == FamilyKind.MNIW:
        S, M, V, nu = from_natural(family, eta)
        S_inv = ops.inv_spd(S, where="mniw S")
        S_inv_M = ops.matmul(S_inv, M)
        V_inv = ops.inv_spd(V, where="mniw V")
        return pack(family, [
            -0.5 * nu * S_inv,
            nu * S_inv_M,
            -0.5 * (n * V_inv + nu * ops.matmul(ops.mT(M), S_inv_M)),
            0.5 * (_psi_sum(nu, n) + n * LOG_2 - ops.logdet(S, where="mniw S")),
        ])
    if kind == FamilyKind.DIRICHLET:
        (alpha,) = unpack(family, eta)
        return ops.digamma(alpha) - ops.digamma(ops.sum_(alpha))
    (logits,) = unpack(family, eta)
    return ops.exp(logits - ops.logsumexp(logits))


# Validation

def _check_spd(matrix: np.ndarray, where: str):
    try:
        np.linalg.cholesky(0.5 * (matrix + matrix.T))
    except np.linalg.LinAlgError:
        raise NotSPD(where) from None


def validate_canonical(family: FamilyDescriptor, canonical: Tuple[Any, ...]):
    """Raise DomainError / NotSPD unless ``canonical`` lies in the family's domain"""
    kind = family.kind
    n = family.n
    values = [np.asarray(ops.value(c), dtype=float) for c in canonical]
    if kind == FamilyKind.MVN:
        mu, sigma = values
        if mu.shape != (n,) or sigma.shape != (n, n):
            raise DimMismatch("mvn mean/covariance shapes do not match n")
        _check_spd(sigma, "mvn covariance")
    elif kind == FamilyKind.NIW:
        S, m, lam, nu = values
        if S.shape != (n, n) or m.shape != (n,):
            raise DimMismatch("niw S/m shapes do not match n")
        if lam <= 0:
            raise DomainError(f"niw lambda must be > 0, got {float(lam)}")
        if nu <= n - 1:
            raise DomainError(f"niw nu must be > {n - 1}, got {float(nu)}")
        _check_spd(S, "niw S")
    elif kind == FamilyKind.MNIW:
        S, M, V, nu = values
        if S.shape != (n, n) or M.shape != (n, family.m) or V.shape != (family.m, family.m):
            raise DimMismatch("mniw S/M/V shapes do not match (n, m)")
        if nu <= n - 1:
            raise DomainError(f"mniw nu must be > {n - 1}, got {float(nu)}")
        _check_spd(S, "mniw S")
        _check_spd(V, "mniw V")
    elif kind == FamilyKind.DIRICHLET:
        (alpha,) = values
        if alpha.shape != (n,):
            raise DimMismatch("dirichlet concentration length does not match K")
        if np.any(alpha <= 0):
            raise DomainError("dirichlet concentrations must be > 0")
    else:
        (logits,) = values
        if logits.shape != (n,):
            raise DimMismatch("categorical logits length does not match K")


def _evaluate(family: FamilyDescriptor, canonical: Tuple[Any, ...]) -> Tuple[NaturalParams, MeanParams, float]:
    validate_canonical(family, canonical)
    canonical = tuple(np.asarray(c, dtype=float) for c in canonical)
    eta = to_natural(family, canonical)
    return (NaturalParams(family, eta),
            MeanParams(family, expected_stats(family, eta)),
            float(log_partition(family, eta)))


def mvn_eval(mean: Any, cov: Any) -> Tuple[NaturalParams, MeanParams, float]:
    family = FamilyDescriptor.mvn(np.shape(mean)[0])
    return _evaluate(family, (mean, cov))


def niw_eval(S: Any, m: Any, lam: float, nu: float) -> Tuple[NaturalParams, MeanParams, float]:
    family = FamilyDescriptor.niw(np.shape(m)[0])
    return _evaluate(family, (S, m, lam, nu))


def mniw_eval(S: Any, M: Any, V: Any, nu: float) -> Tuple[NaturalParams, MeanParams, float]:
    n, m = np.shape(M)
    return _evaluate(FamilyDescriptor.mniw(n, m), (S, M, V, nu))


def dirichlet_eval(alpha: Any) -> Tuple[NaturalParams, MeanParams, float]:
    return _evaluate(FamilyDescriptor.dirichlet(np.shape(alpha)[0]), (alpha,))


def categorical_eval(logits: Any) -> Tuple[NaturalParams, MeanParams, float]:
    return _evaluate(FamilyDescriptor.categorical(np.shape(logits)[0]), (logits,))


# Divergence

def kl_divergence(p1: NaturalParams, p2: NaturalParams, mu1: Optional[Any] = None) -> Any:
    """KL(p1 || p2) = <eta1 - eta2, E_1[t]> - A(eta1) + A(eta2).

    ``mu1`` overrides the expected statistics of ``p1``; passing a straight-through value
    keeps the natural-gradient graph intact.
    """
    if p1.family != p2.family:
        raise FamilyMismatch(f"cannot compare {p1.family.kind.value}{(p1.family.n, p1.family.m)} "
                             f"with {p2.family.kind.value}{(p2.family.n, p2.family.m)}")
    family = p1.family
    if mu1 is None:
        mu1 = expected_stats(family, p1.data)
    return (ops.inner(p1.data - p2.data, mu1)
            - log_partition(family, p1.data) + log_partition(family, p2.data))
