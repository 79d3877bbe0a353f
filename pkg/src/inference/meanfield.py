"""Structured mean field between the Gaussian chain and the discrete chain.

The continuous block's transition at step t is the q(k_t)-weighted combination of the K
expected transition factors; the discrete block's potential obs[t, k] scores state k against
the chain's expected pairwise statistics. ``block_update`` alternates the two (continuous
first); ``g_residual`` evaluates both maps at once for implicit differentiation.

Flat state order used by ``g_residual``: for each transition t the blocks
(h1, J11, J12, J22, h2) row-major, followed by obs (Tk x K) row-major.
"""
from dataclasses import replace
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np
import structlog

from ..autodiff import ops
from ..models.chain import BPMethod, ChainPotentials, FilterResult, SmoothResult
from ..models.family import FamilyDescriptor
from ..models.hmm import HmmMarginals, HmmPotentials
from ..models.meanfield import GlobalExpectedStats, MeanFieldState
from ..utils.exceptions import ConfigError, DimMismatch
from ..utils.metrics import metrics
from . import chain_bp, expfam, hmm_bp, objective, parallel_bp

logger = structlog.get_logger(__name__)


# Global expected statistics in chain form

def niw_to_initial(family: FamilyDescriptor, mu: Any) -> Tuple[Any, Any, Any]:
    """(h0, J0, expected log normalizer) of the initial factor"""
    E1, E2, E3, E4 = expfam.unpack(family, mu)
    D = family.n
    return E2, -(E1 + ops.mT(E1)), -E3 - E4 + 0.5 * D * ops.LOG_2PI


def mniw_to_transition(family: FamilyDescriptor, mu: Any) -> Tuple[Any, ...]:
    """(h1, J11, J12, J22, h2, expected log normalizer) of one state's transition.

    X = [A | b], so the (D+1) x (D+1) block E[-1/2 X' inv(Q) X] splits into the z-z part,
    the z-1 cross terms and the constant.
    """
    D = family.n
    if family.m != D + 1:
        raise DimMismatch(f"transition MNIW must be {D}x{D + 1}, got {D}x{family.m}")
    F1, F2, F3, F4 = expfam.unpack(family, mu)
    J11 = -(F3[:D, :D] + ops.mT(F3[:D, :D]))
    h1 = -(F3[:D, D] + F3[D, :D])
    J12 = ops.mT(F2[:, :D])
    J22 = -(F1 + ops.mT(F1))
    h2 = F2[:, D]
    logZ = -F3[D, D] - F4 + 0.5 * D * ops.LOG_2PI
    return h1, J11, J12, J22, h2, logZ


def global_expected_stats(init_mu: Any, dyn_mus: Sequence[Any], D: int,
                          pi0_mu: Optional[Any] = None,
                          pi_mus: Optional[Sequence[Any]] = None) -> GlobalExpectedStats:
    """Assemble chain-form expected parameters from NIW/MNIW/Dirichlet expected statistics.

    Without discrete factors (the LDS) the discrete terms are zero for a single state.
    """
    h0, J0, logZ_init = niw_to_initial(FamilyDescriptor.niw(D), init_mu)
    blocks = [mniw_to_transition(FamilyDescriptor.mniw(D, D + 1), mu) for mu in dyn_mus]
    h1, J11, J12, J22, h2, logZ_trans = (ops.stack([b[i] for b in blocks]) for i in range(6))
    K = len(blocks)
    if pi0_mu is None:
        if K != 1:
            raise DimMismatch("discrete factors are required for more than one state")
        log_pi0, log_pi = np.zeros(1), np.zeros((1, 1))
    else:
        if pi_mus is None or len(pi_mus) != K or ops.shape(pi0_mu) != (K,):
            raise DimMismatch(f"discrete factors inconsistent with K={K}")
        log_pi0, log_pi = pi0_mu, ops.stack(list(pi_mus))
    return GlobalExpectedStats(h0=h0, J0=J0, logZ_init=logZ_init, h1=h1, J11=J11, J12=J12,
                               J22=J22, h2=h2, logZ_trans=logZ_trans, log_pi0=log_pi0,
                               log_pi=log_pi)


def has_discrete_block(g: GlobalExpectedStats, T: int) -> bool:
    return g.K > 1 and T > 1


def uniform_marginals(g: GlobalExpectedStats, T: int) -> np.ndarray:
    return np.full((max(T - 1, 0), g.K), 1.0 / g.K)


# Mean-field messages

def mf_to_continuous(g: GlobalExpectedStats, q_k: Any, recognition: Tuple[Any, Any]) -> ChainPotentials:
    """Chain parameters whose transitions are q(k_t)-weighted sums of the state factors.

    ``q_k`` is (T-1, K) marginals, an ``HmmMarginals`` or None for a single state.
    """
    r, R = recognition
    T, D, K = ops.shape(r)[0], g.D, g.K
    if isinstance(q_k, HmmMarginals):
        q_k = q_k.marginal
    if q_k is None:
        q_k = np.ones((T - 1, K)) if K == 1 else uniform_marginals(g, T)
    if ops.shape(q_k) != (T - 1, K):
        raise DimMismatch(f"discrete marginals must be ({T - 1}, {K}), got {ops.shape(q_k)}")

    def mix(stacked, tail):
        flat = ops.reshape(stacked, (K, int(np.prod(tail))))
        return ops.reshape(ops.matmul(q_k, flat), (T - 1,) + tail)

    return ChainPotentials(
        h0=g.h0, J0=g.J0,
        h1=mix(g.h1, (D,)), J11=mix(g.J11, (D, D)), J12=mix(g.J12, (D, D)),
        J22=mix(g.J22, (D, D)), h2=mix(g.h2, (D,)),
        r=r, R=R,
    )


def expected_prior_log_normalizer(g: GlobalExpectedStats, q_k: Any, T: int) -> Any:
    """E_q[log Z] of the prior chain: initial normalizer plus q-weighted transition normalizers"""
    if T == 1:
        return g.logZ_init
    if q_k is None:
        q_k = np.ones((T - 1, 1)) if g.K == 1 else uniform_marginals(g, T)
    return g.logZ_init + ops.sum_(ops.matvec(q_k, g.logZ_trans))


def mf_to_discrete(g: GlobalExpectedStats, mu_z: SmoothResult) -> HmmPotentials:
    """State potentials obs[t, k] = <theta_k, E t(z_t, z_{t+1})> - E[log Z_k]"""
    T, D, K = mu_z.T, g.D, g.K
    if T < 2:
        raise DimMismatch("discrete potentials need at least two steps")
    if ops.shape(mu_z.Ez)[1] != D:
        raise DimMismatch(f"chain dimension {ops.shape(mu_z.Ez)[1]} does not match {D}")

    def score(stats, blocks, width):
        return ops.matmul(ops.reshape(stats, (T - 1, width)), ops.mT(ops.reshape(blocks, (K, width))))

    DD = D * D
    obs = (-0.5 * score(mu_z.Ezz[:-1], g.J11, DD)
           + score(mu_z.Ezz_next, g.J12, DD)
           - 0.5 * score(mu_z.Ezz[1:], g.J22, DD)
           - score(mu_z.Ez[:-1], g.h1, D)
           + score(mu_z.Ez[1:], g.h2, D)
           - ops.reshape(g.logZ_trans, (1, K)))
    return HmmPotentials(log_pi0=g.log_pi0, log_pi=g.log_pi, obs=obs)


def run_bp(p: ChainPotentials, bp: BPMethod = BPMethod.SEQUENTIAL,
           parallelism: int = 1) -> Tuple[FilterResult, SmoothResult]:
    if BPMethod.parse(bp) == BPMethod.PARALLEL:
        return parallel_bp.infer(p, parallelism)
    return chain_bp.infer(p)


# Local KLs of a mean-field state

def local_kls(g: GlobalExpectedStats, omega_z: ChainPotentials, fr: FilterResult, mu_z: SmoothResult,
              omega_k: Optional[HmmPotentials], mu_k: Optional[HmmMarginals]) -> Tuple[Any, Any]:
    """(continuous, discrete) local KLs in their general form"""
    T = omega_z.T
    q = None if mu_k is None else mu_k.marginal
    prior_omega = mf_to_continuous(g, q, (np.zeros(ops.shape(omega_z.r)), np.zeros(ops.shape(omega_z.R))))
    kl_z = objective.local_kl_structured(
        (omega_z.r, omega_z.R), mu_z, fr.logZ, expected_prior_log_normalizer(g, q, T),
        omega=omega_z, prior_omega=prior_omega)
    kl_k = 0.0 if mu_k is None else objective.local_kl_discrete(mu_k, omega_k)
    return kl_z, kl_k


def surrogate_value(g: GlobalExpectedStats, state: MeanFieldState, prior_kl: float = 0.0) -> Any:
    """Surrogate objective <lambda, E t(z)> - local KLs - prior KL for a state"""
    kl_z, kl_k = local_kls(g, state.omega_z, state.filtered, state.mu_z, state.omega_k, state.mu_k)
    lam = objective.recognition_inner(state.omega_z.r, state.omega_z.R, state.mu_z)
    return objective.surrogate_loss(lam, prior_kl, kl_z + kl_k)


# Block coordinate ascent

def _transition_residual(a: ChainPotentials, b: ChainPotentials) -> float:
    if a.T == 1:
        return 0.0
    return float(max(np.max(np.abs(np.asarray(ops.value(getattr(a, name)))
                                   - np.asarray(ops.value(getattr(b, name)))))
                     for name in ("h1", "J11", "J12", "J22", "h2")))


def block_update(g: GlobalExpectedStats, recognition: Tuple[Any, Any], max_iters: int = 100,
                 tol: float = 1e-8, bp: BPMethod = BPMethod.SEQUENTIAL, parallelism: int = 1,
                 init_q: Optional[Any] = None, loss_tol: Optional[float] = None,
                 prior_kl: float = 0.0) -> MeanFieldState:
    """Alternate continuous then discrete updates until the fixed-point residual drops below ``tol``.

    The continuous half of the residual is computed before every sweep after the first;
    the discrete half is zero after each completed sweep, so that value is the full
    infinity norm of ``g_residual``. The loop stops without applying the pending update.
    """
    if max_iters < 1:
        raise ConfigError("max_iters must be >= 1")
    if tol <= 0:
        raise ConfigError("tol must be > 0")
    T = ops.shape(recognition[0])[0]
    discrete = has_discrete_block(g, T)
    q = init_q if init_q is not None else (uniform_marginals(g, T) if discrete else None)

    omega_z = mf_to_continuous(g, q, recognition)
    fr, sr = run_bp(omega_z, bp, parallelism)
    state = MeanFieldState(omega_z=omega_z, omega_k=None, mu_z=sr, mu_k=None, filtered=fr)

    for it in range(max_iters):
        if it > 0:
            pending = mf_to_continuous(g, q, recognition)
            residual = _transition_residual(pending, state.omega_z)
            state.residuals.append(residual)
            if residual < tol:
                state.converged = True
                break
            state.omega_z = pending
            state.filtered, state.mu_z = run_bp(pending, bp, parallelism)

        if discrete:
            state.omega_k = mf_to_discrete(g, state.mu_z)
            state.mu_k = hmm_bp.forward_backward(state.omega_k)
            q = state.mu_k.marginal

        state.trace.append(float(surrogate_value(g, state, prior_kl)))
        state.iters += 1
        metrics.increment("meanfield.sweeps")

        if not discrete:
            # Exact after one pass
            state.residuals.append(0.0)
            state.converged = True
            break
        if loss_tol is not None and len(state.trace) > 1 \
                and abs(state.trace[-1] - state.trace[-2]) < loss_tol:
            state.converged = True
            break

    logger.debug("block_update", iters=state.iters, converged=state.converged,
                 residual=state.residual, surrogate=state.surrogate)
    return state


def unrolled_sweeps(g: GlobalExpectedStats, recognition: Tuple[Any, Any], n_sweeps: int,
                    bp: BPMethod = BPMethod.SEQUENTIAL, parallelism: int = 1) -> MeanFieldState:
    """Fixed number of sweeps from the uniform initializer, written for differentiation.

    ``n_sweeps = 0`` returns the initializer: the chain built from uniform discrete marginals,
    zero state potentials and no discrete marginals. Otherwise the result equals ``block_update`` after the same number of sweeps.
    """
    T = ops.shape(recognition[0])[0]
    discrete = has_discrete_block(g, T)
    q = uniform_marginals(g, T) if discrete else None
    omega_k = HmmPotentials(g.log_pi0, g.log_pi, np.zeros((T - 1, g.K))) if discrete else None
    mu_k = None

    omega_z = mf_to_continuous(g, q, recognition)
    fr, sr = run_bp(omega_z, bp, parallelism)
    for sweep in range(n_sweeps):
        if sweep > 0:
            omega_z = mf_to_continuous(g, q, recognition)
            fr, sr = run_bp(omega_z, bp, parallelism)
        if discrete:
            omega_k = mf_to_discrete(g, sr)
            mu_k = hmm_bp.forward_backward(omega_k)
            q = mu_k.marginal
    return MeanFieldState(omega_z=omega_z, omega_k=omega_k, mu_z=sr, mu_k=mu_k, filtered=fr,
                          iters=n_sweeps)


# Fixed-point residual

TRANSITION_FIELDS = ("h1", "J11", "J12", "J22", "h2")


def flatten_omega(omega_z: ChainPotentials, omega_k: Optional[HmmPotentials]) -> Any:
    """Flat mean-field parameters: per-transition blocks, then state potentials"""
    T, D = omega_z.T, omega_z.D
    parts: List[Any] = []
    if T > 1:
        width = [D, D * D, D * D, D * D, D]
        cols = [ops.reshape(getattr(omega_z, name), (T - 1, w))
                for name, w in zip(TRANSITION_FIELDS, width)]
        parts.append(ops.reshape(ops.concat(cols, axis=1), ((T - 1) * (3 * D * D + 2 * D),)))
    if omega_k is not None:
        Tk, K = ops.shape(omega_k.obs)
        parts.append(ops.reshape(omega_k.obs, (Tk * K,)))
    if not parts:
        return np.zeros(0)
    return ops.concat(parts) if len(parts) > 1 else parts[0]


def unflatten_omega(flat: Any, g: GlobalExpectedStats,
                    recognition: Tuple[Any, Any]) -> Tuple[ChainPotentials, Optional[HmmPotentials]]:
    """Inverse of ``flatten_omega``; initial and recognition blocks come from ``g`` and ``recognition``"""
    r, R = recognition
    T, D, K = ops.shape(r)[0], g.D, g.K
    width = 3 * D * D + 2 * D
    n_trans = (T - 1) * width
    n_obs = (T - 1) * K if has_discrete_block(g, T) else 0
    if ops.shape(flat) != (n_trans + n_obs,):
        raise DimMismatch(f"flat state must have length {n_trans + n_obs}, got {ops.shape(flat)}")

    if T > 1:
        rows = ops.reshape(flat[:n_trans], (T - 1, width))
        offsets = np.cumsum([0, D, D * D, D * D, D * D, D])
        shapes = [(D,), (D, D), (D, D), (D, D), (D,)]
        blocks = {name: ops.reshape(rows[:, offsets[i]:offsets[i + 1]], (T - 1,) + shapes[i])
                  for i, name in enumerate(TRANSITION_FIELDS)}
    else:
        empty_vec, empty_mat = np.zeros((0, D)), np.zeros((0, D, D))
        blocks = dict(h1=empty_vec, J11=empty_mat, J12=empty_mat, J22=empty_mat, h2=empty_vec)
    omega_z = ChainPotentials(h0=g.h0, J0=g.J0, r=r, R=R, **blocks)
    omega_k = None
    if n_obs:
        omega_k = HmmPotentials(g.log_pi0, g.log_pi, ops.reshape(flat[n_trans:], (T - 1, K)))
    return omega_z, omega_k


def g_residual(flat: Any, g: GlobalExpectedStats, recognition: Tuple[Any, Any],
               bp: BPMethod = BPMethod.SEQUENTIAL, parallelism: int = 1) -> Any:
    """omega - [MF_z(HMM(omega_k)), MF_k(BP(omega_z))], both maps from the same omega"""
    omega_z, omega_k = unflatten_omega(flat, g, recognition)
    q = hmm_bp.forward_backward(omega_k).marginal if omega_k is not None else None
    mapped_z = mf_to_continuous(g, q, recognition)
    _, sr = run_bp(omega_z, bp, parallelism)
    mapped_k = mf_to_discrete(g, sr) if omega_k is not None else None
    return flat - flatten_omega(mapped_z, mapped_k)


def state_flat(state: MeanFieldState) -> np.ndarray:
    """Numpy flat parameters of a mean-field state"""
    omega_k = state.omega_k
    if omega_k is not None:
        omega_k = replace(omega_k, obs=np.asarray(ops.value(omega_k.obs)))
    return np.asarray(ops.value(flatten_omega(state.omega_z.numpy(), omega_k)), dtype=float)


def residual_norm(state: MeanFieldState, g: GlobalExpectedStats,
                  bp: BPMethod = BPMethod.SEQUENTIAL, parallelism: int = 1) -> float:
    """Infinity norm of the fixed-point residual at ``state``"""
    flat = state_flat(state)
    if flat.size == 0:
        return 0.0
    res = g_residual(flat, g, (state.omega_z.r, state.omega_z.R), bp, parallelism)
    return float(np.max(np.abs(ops.value(res))))
