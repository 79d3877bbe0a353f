"""Temporally parallel filtering and smoothing via associative scans.

Filter elements combine with the operator below (``combine_filter``); the inclusive prefix
scan of elements 1..t carries the filtered messages (F_t, f_t) in its (Phi22, phi2) blocks.
Smoother elements combine with ``combine_smoother`` in a suffix scan whose marginals
(E11, -eps1) are the smoothed (F_s, f_s). Scans use a recursive pairwise tree with a
fixed combine order, so results do not depend on how many workers evaluate a level.
"""
from concurrent.futures import Executor, ThreadPoolExecutor
from typing import Any, Callable, List, Optional, Sequence, Tuple

import numpy as np
import structlog

from ..autodiff import ops
from ..models.chain import ChainPotentials, FilterElement, FilterResult, SmootherElement, SmoothResult
from ..utils.metrics import metrics

logger = structlog.get_logger(__name__)

Elements = Tuple[Any, ...]

# Below this many pairs a level is evaluated in one batched call
MIN_CHUNK = 64


# Filter elements

def make_filter_elements(p: ChainPotentials) -> FilterElement:
    """Elements for t = 1..T stacked on a leading axis"""
    D = p.D
    first = (np.zeros((1, D, D)), np.zeros((1, D)), np.zeros((1, D, D)),
             ops.reshape(p.h0 + p.r[0], (1, D)), ops.reshape(p.J0 + p.R[0], (1, D, D)),
             np.zeros((1, D, D)), np.zeros((1, D)))
    if p.T == 1:
        return FilterElement(first[0], first[1], first[2], first[3], first[4], first[5], first[6])

    A = p.J22 + p.R[1:]
    b = p.h2 + p.r[1:]
    A_inv_J12T = ops.cho_solve(A, ops.mT(p.J12), where="filter element")
    A_inv_b = ops.solve_vec(A, b, where="filter element")
    Gamma = p.J11 - ops.matmul(p.J12, A_inv_J12T)
    gamma = -p.h1 + ops.matvec(p.J12, A_inv_b)
    rest = (p.J11 - Gamma, p.h1 + gamma, p.J12, b, A, Gamma, gamma)
    stacked = [ops.concat([head, tail]) for head, tail in zip(first, rest)]
    return FilterElement(*stacked)


def combine_filter(a: Elements, b: Elements) -> Elements:
    """a (earlier) combined with b (later), batched over the leading axis"""
    Phi11_i, phi1_i, Phi12_i, phi2_i, Phi22_i, Gamma_i, gamma_i = a
    Phi11_j, phi1_j, Phi12_j, phi2_j, Phi22_j, Gamma_j, gamma_j = b

    C = Gamma_j + Phi22_i
    C_inv_Phi12T = ops.cho_solve(C, ops.mT(Phi12_i), where="combine filter C")
    Gamma_ij = Phi11_i - ops.matmul(Phi12_i, C_inv_Phi12T)
    gamma_ij = -phi1_i + ops.matvec(Phi12_i, ops.solve_vec(C, gamma_j + phi2_i,
                                                          where="combine filter C"))

    P = Gamma_j + Phi22_i + Phi11_j
    v = phi2_i - phi1_j + gamma_j
    P_inv_v = ops.solve_vec(P, v, where="combine filter P")
    P_inv_Phi12T_i = ops.cho_solve(P, ops.mT(Phi12_i), where="combine filter P")
    P_inv_Phi12_j = ops.cho_solve(P, Phi12_j, where="combine filter P")

    Phi11 = Phi11_i - ops.matmul(Phi12_i, P_inv_Phi12T_i) - Gamma_ij
    phi1 = phi1_i - ops.matvec(Phi12_i, P_inv_v) + gamma_ij
    Phi12 = ops.matmul(Phi12_i, P_inv_Phi12_j)
    phi2 = phi2_j + ops.matvec(ops.mT(Phi12_j), P_inv_v)
    Phi22 = Phi22_j - ops.matmul(ops.mT(Phi12_j), P_inv_Phi12_j)
    return (Phi11, phi1, Phi12, phi2, ops.sym(Phi22), Gamma_i + Gamma_ij, gamma_i + gamma_ij)


# Smoother elements

def make_smoother_elements(p: ChainPotentials, fr: FilterResult) -> SmootherElement:
    """Elements e_t(z_t, z_{t+1}) for t = 1..T-1 plus the boundary e_T = q(z_T)"""
    D = p.D
    last = (ops.reshape(fr.F[p.T - 1], (1, D, D)), ops.reshape(-fr.f[p.T - 1], (1, D)),
            np.zeros((1, D, D)), np.zeros((1, D)), np.zeros((1, D, D)))
    if p.T == 1:
        return SmootherElement(*last)
    F, f = fr.F[:-1], fr.f[:-1]
    body = (F + p.J11, p.h1 - f, p.J12, p.h2 + p.r[1:] - fr.f[1:], p.J22 + p.R[1:] - fr.F[1:])
    return SmootherElement(*[ops.concat([head, tail]) for head, tail in zip(body, last)])


def combine_smoother(a: Elements, b: Elements) -> Elements:
    """a (earlier) combined with b (later), batched over the leading axis"""
    E11_i, eps1_i, E12_i, eps2_i, E22_i = a
    E11_j, eps1_j, E12_j, eps2_j, E22_j = b

    Dm = E22_i + E11_j
    d = eps2_i - eps1_j
    D_inv_d = ops.solve_vec(Dm, d, where="combine smoother")
    D_inv_E12T_i = ops.cho_solve(Dm, ops.mT(E12_i), where="combine smoother")
    D_inv_E12_j = ops.cho_solve(Dm, E12_j, where="combine smoother")

    E11 = ops.sym(E11_i - ops.matmul(E12_i, D_inv_E12T_i))
    eps1 = eps1_i - ops.matvec(E12_i, D_inv_d)
    E12 = ops.matmul(E12_i, D_inv_E12_j)
    E22 = E22_j - ops.matmul(ops.mT(E12_j), D_inv_E12_j)
    eps2 = eps2_j + ops.matvec(ops.mT(E12_j), D_inv_d)
    return (E11, eps1, E12, eps2, E22)


# Scan

def _take(elems: Elements, s: slice) -> Elements:
    return tuple(e[s] for e in elems)


def _length(elems: Elements) -> int:
    return ops.shape(elems[0])[0]


def _concat(parts: Sequence[Elements]) -> Elements:
    return tuple(ops.concat([p[i] for p in parts]) for i in range(len(parts[0])))


def _interleave(even: Elements, odd: Elements) -> Elements:
    n_even, n_odd = _length(even), _length(odd)
    out = []
    for e, o in zip(even, odd):
        pairs = ops.stack([e[:n_odd], o], axis=1)
        merged = ops.reshape(pairs, (2 * n_odd,) + tuple(ops.shape(o)[1:]))
        out.append(ops.concat([merged, e[n_odd:]]) if n_even > n_odd else merged)
    return tuple(out)


class _Combiner:
    """Evaluates one batched combine, optionally split across a worker pool"""

    def __init__(self, fn: Callable[[Elements, Elements], Elements], pool: Optional[Executor],
                 workers: int):
        self.fn = fn
        self.pool = pool
        self.workers = workers
        self.calls = 0

    def __call__(self, a: Elements, b: Elements) -> Elements:
        self.calls += 1
        n = _length(a)
        is_graph = any(ops.is_tensor(x) for x in a + b)
        if self.pool is None or is_graph or n < 2 * MIN_CHUNK:
            return self.fn(a, b)
        bounds = np.linspace(0, n, min(self.workers, n // MIN_CHUNK) + 1).astype(int)
        futures = [self.pool.submit(self.fn, _take(a, slice(lo, hi)), _take(b, slice(lo, hi)))
                   for lo, hi in zip(bounds[:-1], bounds[1:])]
        parts = [f.result() for f in futures]
        return tuple(np.concatenate([p[i] for p in parts]) for i in range(len(parts[0])))


def _scan(elems: Elements, combine: _Combiner) -> Tuple[Elements, int]:
    n = _length(elems)
    if n < 2:
        return elems, 0
    reduced = combine(_take(elems, slice(0, n - 1, 2)), _take(elems, slice(1, None, 2)))
    odd, depth = _scan(reduced, combine)
    depth += 1
    rest = _take(elems, slice(2, None, 2))
    if _length(rest) > 0:
        head = _take(odd, slice(0, _length(rest)))
        even = _concat([_take(elems, slice(0, 1)), combine(head, rest)])
        depth += 1
    else:
        even = _take(elems, slice(0, 1))
    return _interleave(even, odd), depth


def associative_scan(elems: Elements, combine: Callable[[Elements, Elements], Elements],
                     parallelism: int = 1, reverse: bool = False) -> Tuple[Elements, int]:
    """Inclusive scan of ``elems`` (stacked on axis 0) with ``combine(earlier, later)``.

    ``reverse`` computes suffixes e_t . e_{t+1} . ... . e_T instead. Returns the scanned
    elements and the number of combine levels on the critical path.
    """
    fn = combine
    if reverse:
        elems = tuple(e[::-1] for e in elems)

        def fn(a, b):
            return combine(b, a)

    pool = ThreadPoolExecutor(max_workers=parallelism) if parallelism > 1 else None
    try:
        result, depth = _scan(elems, _Combiner(fn, pool, parallelism))
    finally:
        if pool is not None:
            pool.shutdown(wait=True)
    if reverse:
        result = tuple(e[::-1] for e in result)
    return result, depth


# Filter / smoother drivers

def parallel_filter(p: ChainPotentials, parallelism: int = 1) -> FilterResult:
    """Filtered messages by prefix scan; logZ from a batched post-pass"""
    T, D = p.T, p.D
    elements = make_filter_elements(p)
    scanned, depth = associative_scan(elements.astuple(), combine_filter, parallelism)
    metrics.record_peak("scan.filter.depth", depth)
    metrics.increment("scan.combine.elements", T)

    F = scanned[4]
    f = scanned[3]

    # Every predict normalizer depends only on (F_t, f_t) and the transition into t+1
    half_log_2pi = 0.5 * D * ops.LOG_2PI
    if T > 1:
        P = F[:-1] + p.J11
        v = f[:-1] - p.h1
        P_inv_v = ops.solve_vec(P, v, where="predict")
        terms = 0.5 * ops.sum_(v * P_inv_v, axis=-1) - 0.5 * ops.logdet(P, where="predict")
        logZ = ops.sum_(terms) + (T - 1) * half_log_2pi
        Fp = F[1:] - p.R[1:]
        fp = f[1:] - p.r[1:]
    else:
        P = np.zeros((0, D, D))
        logZ = 0.0
        Fp, fp = np.zeros((0, D, D)), np.zeros((0, D))
    F_T, f_T = F[T - 1], f[T - 1]
    logZ = logZ + 0.5 * ops.inner(f_T, ops.solve_vec(F_T, f_T, where="finalize", index=T - 1)) \
        - 0.5 * ops.logdet(F_T, where="finalize", index=T - 1) + half_log_2pi
    logger.debug("parallel_filter", T=T, D=D, depth=depth, parallelism=parallelism)
    return FilterResult(f=f, F=F, fp=fp, Fp=Fp, P=P, logZ=logZ)


def parallel_smooth(p: ChainPotentials, fr: FilterResult, parallelism: int = 1) -> SmoothResult:
    """Smoothed marginals by suffix scan; cross-covariances from the sequential identity"""
    T, D = p.T, p.D
    elements = make_smoother_elements(p, fr)
    scanned, depth = associative_scan(elements.astuple(), combine_smoother, parallelism,
                                      reverse=True)
    metrics.record_peak("scan.smoother.depth", depth)

    Fs = scanned[0]
    fs = -scanned[1]
    cov = ops.inv_spd(Fs, where="smooth")
    Ez = ops.matvec(cov, fs)
    Ezz = cov + ops.outer(Ez, Ez)
    if T > 1:
        C = Fs[1:] - (fr.F[1:] - p.R[1:]) + p.J22
        C_inv_J12T = ops.cho_solve(C, ops.mT(p.J12), where="smooth")
        cross = ops.matmul(cov[:-1], ops.mT(C_inv_J12T)) + ops.outer(Ez[:-1], Ez[1:])
    else:
        C = np.zeros((0, D, D))
        cross = np.zeros((0, D, D))
    return SmoothResult(fs=fs, Fs=Fs, C=C, Ez=Ez, Ezz=Ezz, Ezz_next=cross)


def infer(p: ChainPotentials, parallelism: int = 1) -> Tuple[FilterResult, SmoothResult]:
    fr = parallel_filter(p, parallelism)
    return fr, parallel_smooth(p, fr, parallelism)


def sequential_fold(elems: Elements, combine: Callable[[Elements, Elements], Elements]) -> List[Elements]:
    """Left fold a_1 . a_2 . ... . a_t for every t (reference for the scan)"""
    acc = _take(elems, slice(0, 1))
    out = [acc]
    for t in range(1, _length(elems)):
        acc = combine(acc, _take(elems, slice(t, t + 1)))
        out.append(acc)
    return out
