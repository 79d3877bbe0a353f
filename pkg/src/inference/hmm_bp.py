"""Log-space forward-backward for the discrete chain"""
from typing import Any, Optional

import numpy as np
import structlog

from ..autodiff import ops
from ..models.hmm import HmmMarginals, HmmPotentials
from ..utils.exceptions import DegenerateDistribution

logger = structlog.get_logger(__name__)


def _check_support(alpha: Any, t: int):
    if np.all(np.isneginf(np.asarray(ops.value(alpha)))):
        raise DegenerateDistribution(f"no state has support at step {t}")


def forward(p: HmmPotentials) -> Any:
    """Log forward messages alpha, shape (Tk, K)"""
    alpha = p.log_pi0 + p.obs[0]
    _check_support(alpha, 0)
    alphas = [alpha]
    for t in range(1, p.Tk):
        alpha = p.obs[t] + ops.logsumexp(p.log_pi + ops.unsqueeze(alpha, -1), axis=0)
        _check_support(alpha, t)
        alphas.append(alpha)
    return ops.stack(alphas)


def backward(p: HmmPotentials) -> Any:
    """Log backward messages beta, shape (Tk, K); beta at the last step is zero"""
    beta = np.zeros(p.K)
    betas = [beta]
    for t in range(p.Tk - 2, -1, -1):
        beta = ops.logsumexp(p.log_pi + ops.unsqueeze(p.obs[t + 1] + beta, 0), axis=1)
        betas.append(beta)
    return ops.stack(betas[::-1])


def forward_backward(p: HmmPotentials) -> HmmMarginals:
    """Normalized per-step marginals and the chain log partition.

    Pairwise transition statistics are not computed.
    """
    alpha = forward(p)
    beta = backward(p)
    ab = alpha + beta
    log_marginal = ab - ops.logsumexp(ab, axis=1, keepdims=True)
    logZ = ops.logsumexp(alpha[p.Tk - 1])
    logger.debug("forward_backward", K=p.K, Tk=p.Tk)
    return HmmMarginals(log_marginal=log_marginal, marginal=ops.exp(log_marginal), logZ=logZ)


def log_partition(p: HmmPotentials) -> Any:
    return ops.logsumexp(forward(p)[p.Tk - 1])


def bridge_sample(log_pi0: np.ndarray, log_pi: np.ndarray, length: int, rng: np.random.Generator,
                  start: Optional[int] = None, end: Optional[int] = None) -> np.ndarray:
    """Sample ``length`` states of the bare chain between optional fixed endpoint states.

    ``start`` is the state just before the run (the initial row is used when it is None) and
    ``end`` the state just after it. Forward-filters p(k_t | start) then samples backwards from
    ``end``; rows of ``log_pi`` are renormalized.
    """
    if length < 1:
        return np.zeros(0, dtype=int)
    log_pi = np.asarray(log_pi, dtype=float)
    log_pi = log_pi - ops.logsumexp(log_pi, axis=1, keepdims=True)
    if start is None:
        first = np.asarray(log_pi0, dtype=float)
        first = first - ops.logsumexp(first)
    else:
        first = log_pi[start]
    alphas = [first]
    for _ in range(1, length):
        alphas.append(ops.logsumexp(log_pi + alphas[-1][:, None], axis=0))
    states = np.zeros(length, dtype=int)
    nxt = end
    for t in range(length - 1, -1, -1):
        logits = alphas[t] + (log_pi[:, nxt] if nxt is not None else 0.0)
        _check_support(logits, t)
        probs = np.exp(logits - ops.logsumexp(logits))
        states[t] = rng.choice(len(probs), p=probs / probs.sum())
        nxt = states[t]
    return states
