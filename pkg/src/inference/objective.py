"""ELBO decomposition and the surrogate objective.

The ELBO of one sequence is ``reconstruction - prior_kl - local_kl``; the surrogate replaces
the reconstruction term with the recognition potentials' inner product with the chain's
expected statistics. Local KLs use expected log normalizers E_q(theta)[log Z(theta)], which
are components of the global expected statistics.
"""
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np
import structlog
from scipy import special

from ..autodiff import ops
from ..models.chain import ChainPotentials, SmoothResult
from ..models.family import NaturalParams
from ..models.hmm import HmmMarginals, HmmPotentials
from ..models.results import LikelihoodKind, LossBreakdown
from ..utils.exceptions import DimMismatch, FamilyMismatch
from . import expfam, hmm_bp

logger = structlog.get_logger(__name__)

GAMMA_CONCENTRATION = 2.0


# Inner products with chain statistics

def _pairwise(a: Any, b: Any) -> Any:
    """Sum of <a_t, b_t> over a stacked leading axis"""
    return ops.sum_(a * b)


def recognition_inner(r: Any, R: Any, mu: SmoothResult) -> Any:
    """<lambda, E t(z)> = sum_t r_t'E[z_t] - 1/2 <R_t, E[z_t z_t']>"""
    if ops.shape(r) != ops.shape(mu.Ez):
        raise DimMismatch(f"recognition shape {ops.shape(r)} does not match chain {ops.shape(mu.Ez)}")
    return _pairwise(r, mu.Ez) - 0.5 * _pairwise(R, mu.Ezz)


def chain_inner(p: ChainPotentials, mu: SmoothResult) -> Any:
    """Expected unnormalized log density of chain ``p`` under statistics ``mu``"""
    total = ops.inner(p.h0, mu.Ez[0]) - 0.5 * ops.inner(p.J0, mu.Ezz[0])
    if p.T > 1:
        total = total \
            - 0.5 * _pairwise(p.J11, mu.Ezz[:-1]) - _pairwise(p.h1, mu.Ez[:-1]) \
            + _pairwise(p.J12, mu.Ezz_next) \
            - 0.5 * _pairwise(p.J22, mu.Ezz[1:]) + _pairwise(p.h2, mu.Ez[1:])
    return total + recognition_inner(p.r, p.R, mu)


# KL terms

def prior_kl(etas: Dict[str, NaturalParams], etas0: Dict[str, NaturalParams],
             mus: Optional[Dict[str, Any]] = None) -> Any:
    """Sum of KL(q(theta_i) || p(theta_i)) over the global factors.

    ``mus`` optionally supplies the expected statistics used in each inner product.
    """
    if set(etas) != set(etas0):
        raise FamilyMismatch(f"factor names differ: {sorted(etas)} vs {sorted(etas0)}")
    total = 0.0
    for name in sorted(etas):
        mu = None if mus is None else mus.get(name)
        total = total + expfam.kl_divergence(etas[name], etas0[name], mu1=mu)
    return total


def local_kl_structured(recognition: Tuple[Any, Any], mu: SmoothResult, logZ_omega: Any,
                        expected_prior_logZ: Any, omega: Optional[ChainPotentials] = None,
                        prior_omega: Optional[ChainPotentials] = None) -> Any:
    """E_q(theta) KL(q(z) || p(z | theta)) for a Gaussian chain posterior.

    With ``omega`` and ``prior_omega`` the general form <omega - omega_prior, E t(z)> is used,
    which is exact for any chain parameters. Without them ``omega`` is taken to be
    the surrogate optimum, where the difference reduces to the recognition potentials.
    """
    if omega is not None and prior_omega is not None:
        inner = chain_inner(omega, mu) - chain_inner(prior_omega, mu)
    else:
        r, R = recognition
        inner = recognition_inner(r, R, mu)
    return inner - logZ_omega + expected_prior_logZ


def hmm_prior_log_partition(omega_k: HmmPotentials) -> Any:
    """Log partition of the discrete chain with the state potentials removed"""
    bare = HmmPotentials(log_pi0=omega_k.log_pi0, log_pi=omega_k.log_pi,
                         obs=np.zeros(ops.shape(omega_k.obs)))
    return hmm_bp.log_partition(bare)


def local_kl_discrete(q_k: HmmMarginals, omega_k: HmmPotentials, prior_logZ: Any = 0.0) -> Any:
    """<obs, q(k)> - log Z(omega_k) + log Z(prior chain).

    ``prior_logZ`` is zero when the expected log transition rows enter the ELBO unnormalized;
    passing ``hmm_prior_log_partition(omega_k)`` gives the KL against the normalized chain.
    """
    if ops.shape(q_k.marginal) != ops.shape(omega_k.obs):
        raise DimMismatch("discrete marginals do not match the state potentials")
    return _pairwise(omega_k.obs, q_k.marginal) - q_k.logZ + prior_logZ


# Likelihoods

def gaussian_log_likelihood(x: Any, mean: Any, log_var: Any, mask: Optional[Any] = None) -> Any:
    """Diagonal Gaussian log density summed over steps and features"""
    per_entry = -0.5 * ((x - mean) ** 2 * ops.exp(-log_var) + log_var + ops.LOG_2PI)
    if mask is not None:
        per_entry = per_entry * np.reshape(np.asarray(mask, dtype=float), (-1, 1))
    return ops.sum_(per_entry)


def gamma_log_likelihood(x: Any, log_rate: Any, concentration: float = GAMMA_CONCENTRATION,
                         mask: Optional[Any] = None) -> Any:
    """Gamma(concentration, rate) log density summed over steps and features; x > 0"""
    a = concentration
    log_x = np.log(np.asarray(ops.value(x), dtype=float))
    per_entry = a * log_rate - float(special.gammaln(a)) + (a - 1.0) * log_x \
        - ops.exp(log_rate) * x
    if mask is not None:
        per_entry = per_entry * np.reshape(np.asarray(mask, dtype=float), (-1, 1))
    return ops.sum_(per_entry)


def log_likelihood(kind: LikelihoodKind, x: Any, params: Tuple[Any, ...],
                   mask: Optional[Any] = None) -> Any:
    if kind == LikelihoodKind.GAMMA:
        (log_rate,) = params
        return gamma_log_likelihood(x, log_rate, mask=mask)
    mean, log_var = params
    return gaussian_log_likelihood(x, mean, log_var, mask=mask)


def reconstruction(decoder: Callable[[Any], Tuple[Any, ...]], z_samples: Any, x: Any,
                   kind: LikelihoodKind = LikelihoodKind.GAUSSIAN,
                   mask: Optional[Any] = None) -> Any:
    """Monte-Carlo estimate of E_q[log p(x | z)] from samples of shape (S, T, D)"""
    n_samples = ops.shape(z_samples)[0]
    if n_samples < 1:
        raise DimMismatch("reconstruction needs at least one sample")
    total = 0.0
    for s in range(n_samples):
        total = total + log_likelihood(kind, x, decoder(z_samples[s]), mask=mask)
    return total / float(n_samples)


# Assembly

def surrogate_loss(recognition_term: Any, prior_kl_value: Any, local_kl_value: Any) -> Any:
    """-(prior KL + local KL - <lambda, E t(z)>)"""
    return -(prior_kl_value + local_kl_value - recognition_term)


def elbo(recon: Any, prior_kl_value: Any, local_kl_value: Any) -> Any:
    return -(prior_kl_value + local_kl_value - recon)


def loss_breakdown(prior_kl_value: Any, local_kl_continuous: Any, local_kl_discrete_value: Any,
                   recon: Any, recognition_term: Any) -> LossBreakdown:
    """Float-valued ELBO parts from (possibly taped) components"""
    parts = [float(ops.value(v)) for v in (prior_kl_value, local_kl_continuous,
                                           local_kl_discrete_value, recon, recognition_term)]
    pk, kl_z, kl_k, rec, lam = parts
    return LossBreakdown(
        prior_kl=pk,
        local_kl_continuous=kl_z,
        local_kl_discrete=kl_k,
        reconstruction=rec,
        elbo=elbo(rec, pk, kl_z + kl_k),
        surrogate=surrogate_loss(lam, pk, kl_z + kl_k),
    )
