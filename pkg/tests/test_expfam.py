import numpy as np
import pytest
from scipy import special

from src.autodiff import ops
from src.inference import expfam, oracles
from src.models.family import FamilyDescriptor, NaturalParams
from src.tools.invariants import fd_gradient
from src.utils.exceptions import DimMismatch, DomainError, FamilyMismatch, NotSPD

FAMILIES = [
    FamilyDescriptor.mvn(2),
    FamilyDescriptor.niw(2),
    FamilyDescriptor.mniw(2, 3),
    FamilyDescriptor.dirichlet(3),
]


@pytest.mark.parametrize("family", FAMILIES, ids=lambda f: f.kind.value)
def test_expected_stats_are_gradient_of_log_partition(family, gen):
    for _ in range(5):
        eta = oracles.random_natural(gen, family)
        mu = np.asarray(expfam.expected_stats(family, eta))
        fd = fd_gradient(lambda e: float(expfam.log_partition(family, e)), eta)
        np.testing.assert_allclose(mu, fd, rtol=1e-5, atol=1e-6)


@pytest.mark.parametrize("family", FAMILIES, ids=lambda f: f.kind.value)
def test_kl_is_zero_to_itself_and_positive_otherwise(family, gen):
    p = NaturalParams(family, oracles.random_natural(gen, family))
    q = NaturalParams(family, oracles.random_natural(gen, family))
    assert float(expfam.kl_divergence(p, p)) == pytest.approx(0.0, abs=1e-10)
    assert float(expfam.kl_divergence(p, q)) > 0.0


def test_mvn_statistics_match_moments():
    mean = np.array([1.0, -2.0])
    cov = np.array([[2.0, 0.3], [0.3, 1.0]])
    _, mu, _ = expfam.mvn_eval(mean, cov)
    Ex, Exx = expfam.unpack(mu.family, mu.data)
    np.testing.assert_allclose(Ex, mean, atol=1e-12)
    np.testing.assert_allclose(Exx, cov + np.outer(mean, mean), atol=1e-12)


def test_dirichlet_statistics_are_expected_log_probabilities():
    alpha = np.array([1.5, 2.0, 4.0])
    _, mu, _ = expfam.dirichlet_eval(alpha)
    np.testing.assert_allclose(mu.data, special.digamma(alpha) - special.digamma(alpha.sum()))


@pytest.mark.parametrize("family", FAMILIES[1:3], ids=lambda f: f.kind.value)
def test_canonical_natural_round_trip(family, gen):
    canonical = oracles.random_canonical(gen, family)
    back = expfam.from_natural(family, expfam.to_natural(family, canonical))
    for a, b in zip(canonical, back):
        np.testing.assert_allclose(np.asarray(b, dtype=float), np.asarray(a, dtype=float), atol=1e-10)


def test_niw_rejects_out_of_domain_parameters():
    S = np.eye(2)
    with pytest.raises(DomainError):
        expfam.niw_eval(S, np.zeros(2), 0.0, 5.0)
    with pytest.raises(DomainError):
        expfam.niw_eval(S, np.zeros(2), 1.0, 1.0)
    with pytest.raises(NotSPD):
        expfam.niw_eval(np.array([[1.0, 2.0], [2.0, 1.0]]), np.zeros(2), 1.0, 5.0)


def test_dirichlet_rejects_non_positive_concentration():
    with pytest.raises(DomainError):
        expfam.dirichlet_eval(np.array([1.0, 0.0]))


def test_kl_between_families_raises(gen):
    p = NaturalParams(FamilyDescriptor.dirichlet(3), np.ones(3))
    q = NaturalParams(FamilyDescriptor.mvn(1), np.array([0.0, -0.5]))
    with pytest.raises(FamilyMismatch):
        expfam.kl_divergence(p, q)


def test_natural_params_length_is_checked():
    with pytest.raises(DimMismatch):
        NaturalParams(FamilyDescriptor.niw(2), np.zeros(3))


def test_special_function_reference_values():
    assert float(ops.logsumexp(np.array([0.0, 0.0]))) == pytest.approx(np.log(2.0), abs=1e-15)
    assert float(ops.digamma(np.array(1.0))) == pytest.approx(-0.5772156649015329, abs=1e-12)


def test_mvn_log_partition_at_identity():
    _, _, logZ = expfam.mvn_eval(np.zeros(2), np.eye(2))
    assert float(logZ) == pytest.approx(np.log(2 * np.pi))


def test_niw_natural_parameters_at_reference_point():
    eta, _, _ = expfam.niw_eval(np.eye(2), np.zeros(2), 1.0, 3.0)
    S, m, lam, nu = expfam.unpack(eta.family, eta.data)
    np.testing.assert_allclose(S, np.eye(2))
    np.testing.assert_allclose(m, 0.0)
    assert float(lam) == 1.0
    assert float(nu) == 7.0


def test_mniw_natural_parameters_at_reference_point():
    eta, _, _ = expfam.mniw_eval(np.eye(1), np.zeros((1, 2)), np.eye(2), 2.0)
    S, MV, V, nu = expfam.unpack(eta.family, eta.data)
    np.testing.assert_allclose(S, np.eye(1))
    np.testing.assert_allclose(MV, np.zeros((1, 2)))
    np.testing.assert_allclose(V, np.eye(2))
    assert float(nu) == 6.0


def test_dirichlet_with_unit_concentrations():
    _, mu, _ = expfam.dirichlet_eval(np.ones(2))
    np.testing.assert_allclose(mu.data, [-1.0, -1.0], atol=1e-12)


def test_gaussian_kl_matches_closed_form():
    p, _, _ = expfam.mvn_eval(np.array([1.0]), np.eye(1))
    q, _, _ = expfam.mvn_eval(np.array([0.0]), np.eye(1))
    assert float(expfam.kl_divergence(p, q)) == pytest.approx(0.5, abs=1e-12)


def test_categorical_log_partition_is_logsumexp():
    logits = np.array([0.3, -1.2, 2.0])
    _, mu, logZ = expfam.categorical_eval(logits)
    assert float(logZ) == pytest.approx(special.logsumexp(logits))
    np.testing.assert_allclose(mu.data, special.softmax(logits))


def test_log_multivariate_gamma_reduces_and_checks_domain():
    assert expfam.log_multivariate_gamma(1, 2.5) == pytest.approx(special.gammaln(2.5))
    with pytest.raises(DomainError):
        expfam.log_multivariate_gamma(3, 0.9)
