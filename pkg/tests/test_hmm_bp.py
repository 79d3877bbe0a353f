import numpy as np
import pytest

from src.inference import hmm_bp, oracles
from src.models.hmm import HmmPotentials
from src.utils.exceptions import DegenerateDistribution


@pytest.mark.parametrize("K,Tk", [(1, 1), (1, 4), (2, 1), (3, 5), (4, 6)])
@pytest.mark.parametrize("normalized", [True, False])
def test_forward_backward_matches_enumeration(K, Tk, normalized, gen):
    p = oracles.random_hmm(gen, K, Tk, normalized=normalized)
    marg = hmm_bp.forward_backward(p)
    ref = oracles.hmm_enumerate(p)
    np.testing.assert_allclose(marg.marginal, ref["marginal"], atol=1e-10)
    assert float(marg.logZ) == pytest.approx(float(ref["logZ"]), abs=1e-10)
    np.testing.assert_allclose(marg.marginal.sum(axis=1), 1.0, atol=1e-12)


def test_large_potentials_do_not_overflow(gen):
    p = oracles.random_hmm(gen, 3, 50)
    p = HmmPotentials(p.log_pi0, p.log_pi, 800.0 * p.obs)
    marg = hmm_bp.forward_backward(p)
    assert np.all(np.isfinite(marg.marginal))
    assert np.isfinite(float(marg.logZ))


def test_no_supported_state_raises():
    p = HmmPotentials(np.log(np.array([1.0, 0.0])), np.log(np.eye(2)),
                      np.array([[0.0, 0.0], [-np.inf, 0.0]]))
    with pytest.raises(DegenerateDistribution):
        hmm_bp.forward_backward(p)


def test_bridge_sample_respects_forbidden_transitions(gen):
    # Upper-bidiagonal chain: a state can only stay or move up by one
    log_pi = np.log(np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.0, 0.0, 1.0]]))
    for _ in range(20):
        states = hmm_bp.bridge_sample(np.zeros(3), log_pi, 4, gen, start=0, end=2)
        path = np.concatenate([[0], states, [2]])
        assert np.all(np.diff(path) >= 0)
        assert np.all(np.diff(path) <= 1)


def test_bridge_sample_without_endpoints_uses_initial_row(gen):
    states = hmm_bp.bridge_sample(np.log(np.array([0.0, 1.0])), np.zeros((2, 2)), 1, gen)
    assert states.tolist() == [1]
    assert hmm_bp.bridge_sample(np.zeros(2), np.zeros((2, 2)), 0, gen).size == 0
