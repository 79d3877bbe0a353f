import dataclasses

import numpy as np
import pytest
from scipy import stats

from src.inference import chain_bp, expfam, hmm_bp, objective, oracles
from src.models.family import FamilyDescriptor, NaturalParams
from src.utils.exceptions import DimMismatch, FamilyMismatch


def _dense_gaussian(p):
    J, h = oracles.dense_joint(p)
    cov = np.linalg.inv(J)
    return cov @ h, cov


def test_structured_local_kl_matches_dense_gaussian_kl(gen):
    q_chain = oracles.random_chain(gen, 4, 2)
    p_chain = oracles.random_chain(gen, 4, 2)
    _, sr = chain_bp.infer(q_chain)
    logZ_q = oracles.dense_chain_oracle(q_chain)["logZ"]
    logZ_p = oracles.dense_chain_oracle(p_chain)["logZ"]
    kl = objective.local_kl_structured((q_chain.r, q_chain.R), sr, logZ_q, logZ_p,
                                       omega=q_chain, prior_omega=p_chain)

    m1, S1 = _dense_gaussian(q_chain)
    m2, S2 = _dense_gaussian(p_chain)
    S2_inv = np.linalg.inv(S2)
    diff = m2 - m1
    expected = 0.5 * (np.trace(S2_inv @ S1) + diff @ S2_inv @ diff - len(m1)
                      + np.linalg.slogdet(S2)[1] - np.linalg.slogdet(S1)[1])
    assert float(kl) == pytest.approx(expected, rel=1e-8, abs=1e-8)


@pytest.mark.parametrize("K,Tk", [(2, 1), (2, 4), (3, 5)])
def test_discrete_local_kl_matches_enumeration(K, Tk, gen):
    p = oracles.random_hmm(gen, K, Tk, normalized=False)
    marg = hmm_bp.forward_backward(p)
    kl = objective.local_kl_discrete(marg, p, objective.hmm_prior_log_partition(p))
    assert float(kl) == pytest.approx(oracles.hmm_kl_enumerate(p), abs=1e-10)


def test_discrete_local_kl_checks_shapes(gen):
    p = oracles.random_hmm(gen, 2, 3)
    other = hmm_bp.forward_backward(oracles.random_hmm(gen, 2, 4))
    with pytest.raises(DimMismatch):
        objective.local_kl_discrete(other, p)


def test_gaussian_log_likelihood_matches_scipy(gen):
    x = gen.standard_normal((5, 3))
    mean = gen.standard_normal((5, 3))
    log_var = gen.uniform(-1, 1, 3)
    expected = stats.norm.logpdf(x, mean, np.exp(0.5 * log_var)).sum()
    assert float(objective.gaussian_log_likelihood(x, mean, log_var)) == pytest.approx(expected)


def test_masked_steps_drop_out_of_the_likelihood(gen):
    x = gen.standard_normal((4, 2))
    mean = np.zeros((4, 2))
    log_var = np.zeros(2)
    weights = np.array([1.0, 0.0, 1.0, 1.0])
    full = float(objective.gaussian_log_likelihood(np.delete(x, 1, axis=0), mean[:3], log_var))
    masked = float(objective.gaussian_log_likelihood(x, mean, log_var, mask=weights))
    assert masked == pytest.approx(full)


def test_gamma_log_likelihood_matches_scipy(gen):
    x = gen.uniform(0.1, 3.0, (4, 2))
    log_rate = gen.standard_normal((4, 2))
    expected = stats.gamma.logpdf(x, a=objective.GAMMA_CONCENTRATION, scale=np.exp(-log_rate)).sum()
    assert float(objective.gamma_log_likelihood(x, log_rate)) == pytest.approx(expected)


def test_loss_breakdown_is_consistent():
    parts = objective.loss_breakdown(1.5, 2.0, 0.5, -10.0, -3.0)
    assert parts.elbo == pytest.approx(-10.0 - 1.5 - 2.5)
    assert parts.surrogate == pytest.approx(-3.0 - 1.5 - 2.5)
    assert parts.local_kl == pytest.approx(2.5)
    assert parts.to_dict()["recon"] == -10.0


def test_prior_kl_requires_matching_factor_names():
    family = FamilyDescriptor.dirichlet(2)
    q = {"a": NaturalParams(family, np.ones(2))}
    p = {"b": NaturalParams(family, np.ones(2))}
    with pytest.raises(FamilyMismatch):
        objective.prior_kl(q, p)


def test_prior_kl_sums_factor_kls():
    family = FamilyDescriptor.dirichlet(2)
    q = {"a": NaturalParams(family, np.array([2.0, 3.0])), "b": NaturalParams(family, np.ones(2))}
    p = {"a": NaturalParams(family, np.ones(2)), "b": NaturalParams(family, np.ones(2))}
    assert float(objective.prior_kl(q, p)) == pytest.approx(
        float(expfam.kl_divergence(q["a"], p["a"])))


def test_reconstruction_needs_samples():
    with pytest.raises(DimMismatch):
        objective.reconstruction(lambda z: (z, np.zeros(1)), np.zeros((0, 2, 1)), np.zeros((2, 1)))


def _elbo_and_evidence(p0, x, sigma2, r, R):
    """ELBO of q proportional to p0 exp(<(r, R), t(z)>) against x_t ~ N(z_t, sigma2 I), and log p(x)"""
    T, D = x.shape
    q = p0.with_recognition(r, R)
    fr, sr = chain_bp.infer(q)
    kl = objective.local_kl_structured((r, R), sr, fr.logZ, chain_bp.log_partition(p0))
    Ez, Ezz = np.asarray(sr.Ez), np.asarray(sr.Ezz)
    cov = Ezz - np.einsum("ti,tj->tij", Ez, Ez)
    recon = -0.5 * T * D * np.log(2 * np.pi * sigma2) \
        - (np.sum((x - Ez) ** 2) + np.trace(cov, axis1=1, axis2=2).sum()) / (2 * sigma2)
    mean, prior_cov = _dense_gaussian(p0)
    evidence = stats.multivariate_normal.logpdf(x.ravel(), mean, prior_cov + sigma2 * np.eye(T * D))
    return float(recon - kl), float(evidence)


def test_elbo_is_bounded_by_the_dense_log_evidence(gen):
    base = oracles.random_chain(gen, 3, 1)
    p0 = dataclasses.replace(base, r=np.zeros_like(base.r), R=np.zeros_like(base.R))
    x = gen.standard_normal((3, 1))
    sigma2 = 0.5
    exact_r, exact_R = x / sigma2, np.tile(np.eye(1) / sigma2, (3, 1, 1))
    elbo, evidence = _elbo_and_evidence(p0, x, sigma2, exact_r, exact_R)
    assert elbo == pytest.approx(evidence, abs=1e-8)

    for _ in range(5):
        other = oracles.random_chain(gen, 3, 1)
        elbo, evidence = _elbo_and_evidence(p0, x, sigma2, other.r, other.R)
        assert elbo <= evidence + 1e-8
