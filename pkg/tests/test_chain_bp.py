import numpy as np
import pytest

from src.autodiff.tape import value_and_grad
from src.inference import chain_bp, oracles
from src.models.chain import ChainPotentials
from src.utils.exceptions import NotSPD


@pytest.mark.parametrize("T,D", [(1, 1), (1, 3), (2, 2), (5, 1), (6, 3)])
def test_smoother_matches_dense_inversion(T, D, gen):
    p = oracles.random_chain(gen, T, D)
    fr, sr = chain_bp.infer(p)
    ref = oracles.dense_chain_oracle(p)
    np.testing.assert_allclose(sr.Ez, ref["mean"], atol=1e-8)
    np.testing.assert_allclose(sr.cov, ref["cov"], atol=1e-8)
    np.testing.assert_allclose(sr.Ezz_next, ref["cross"], atol=1e-8)
    assert float(fr.logZ) == pytest.approx(float(ref["logZ"]), abs=1e-8)


def test_log_partition_gradient_is_mean(gen):
    p = oracles.random_chain(gen, 4, 2)
    _, sr = chain_bp.infer(p)

    def logZ(params):
        return chain_bp.log_partition(p.with_recognition(params["r"], p.R))

    _, grads = value_and_grad(logZ, {"r": p.r})
    np.testing.assert_allclose(grads["r"], sr.Ez, atol=1e-8)


def test_posterior_samples_have_smoothed_moments(gen):
    p = oracles.random_chain(gen, 3, 2)
    fr, sr = chain_bp.infer(p)
    z = chain_bp.sample_posterior(p, fr, gen, n_samples=20000)
    assert z.shape == (20000, 3, 2)
    np.testing.assert_allclose(z.mean(axis=0), sr.Ez, atol=0.05)
    centered = z - z.mean(axis=0)
    cov = np.einsum("sti,stj->tij", centered, centered) / z.shape[0]
    np.testing.assert_allclose(cov, sr.cov, atol=0.06)


def test_sampling_with_fixed_noise_is_deterministic(gen):
    p = oracles.random_chain(gen, 4, 2)
    fr, _ = chain_bp.infer(p)
    eps = gen.standard_normal((2, 4, 2))
    np.testing.assert_array_equal(chain_bp.sample_with_noise(p, fr, eps),
                                  chain_bp.sample_with_noise(p, fr, eps))


def test_indefinite_initial_precision_raises():
    D = 2
    p = ChainPotentials(
        h0=np.zeros(D), J0=-np.eye(D),
        h1=np.zeros((0, D)), J11=np.zeros((0, D, D)), J12=np.zeros((0, D, D)),
        J22=np.zeros((0, D, D)), h2=np.zeros((0, D)),
        r=np.zeros((1, D)), R=np.zeros((1, D, D)),
    )
    with pytest.raises(NotSPD):
        chain_bp.infer(p)
