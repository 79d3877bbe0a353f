import numpy as np
import pytest

from src.inference import chain_bp, hmm_bp, meanfield, oracles
from src.models.chain import BPMethod
from src.tools.invariants import check_meanfield, random_recognition
from src.utils.exceptions import ConfigError, DimMismatch
from src.utils.metrics import metrics


@pytest.fixture
def slds(gen):
    g, etas = oracles.random_global_stats(gen, D=2, K=3)
    return g, random_recognition(gen, 12, 2)


def test_block_update_never_decreases_surrogate(slds):
    g, recognition = slds
    state = meanfield.block_update(g, recognition, max_iters=500, tol=1e-10)
    trace = np.asarray(state.trace)
    assert np.all(np.diff(trace) >= -1e-9)
    assert state.converged


def test_converged_state_is_a_fixed_point(slds):
    g, recognition = slds
    state = meanfield.block_update(g, recognition, max_iters=500, tol=1e-10)
    assert meanfield.residual_norm(state, g) <= 1e-8


def test_parallel_and_sequential_schedules_agree(slds):
    g, recognition = slds
    seq = meanfield.block_update(g, recognition, max_iters=500, tol=1e-10)
    par = meanfield.block_update(g, recognition, max_iters=500, tol=1e-10, bp=BPMethod.PARALLEL,
                                 parallelism=2)
    np.testing.assert_allclose(par.mu_z.Ez, seq.mu_z.Ez, atol=1e-7)
    np.testing.assert_allclose(par.q_k, seq.q_k, atol=1e-7)


def test_single_state_converges_in_one_sweep(gen):
    g, _ = oracles.random_global_stats(gen, D=2, K=1)
    state = meanfield.block_update(g, random_recognition(gen, 6, 2))
    assert state.iters == 1
    assert state.converged
    assert state.omega_k is None
    assert metrics.get_counter("meanfield.sweeps") == 1


def test_continuous_block_is_exact_given_discrete_marginals(slds):
    g, recognition = slds
    state = meanfield.block_update(g, recognition, max_iters=500, tol=1e-10)
    chain = meanfield.mf_to_continuous(g, state.q_k, recognition)
    _, sr = chain_bp.infer(chain)
    ref = oracles.dense_chain_oracle(chain)
    np.testing.assert_allclose(sr.Ez, ref["mean"], atol=1e-8)


def test_discrete_marginals_follow_forward_backward(slds):
    g, recognition = slds
    state = meanfield.block_update(g, recognition, max_iters=500, tol=1e-10)
    marg = hmm_bp.forward_backward(meanfield.mf_to_discrete(g, state.mu_z))
    np.testing.assert_allclose(marg.marginal, state.q_k, atol=1e-6)


def test_unrolled_sweeps_match_block_update(slds):
    g, recognition = slds
    state = meanfield.block_update(g, recognition, max_iters=3, tol=1e-300)
    unrolled = meanfield.unrolled_sweeps(g, recognition, 3)
    np.testing.assert_allclose(meanfield.state_flat(unrolled), meanfield.state_flat(state), atol=1e-12)


def test_flatten_round_trip(slds):
    g, recognition = slds
    state = meanfield.block_update(g, recognition, max_iters=2)
    flat = meanfield.state_flat(state)
    omega_z, omega_k = meanfield.unflatten_omega(flat, g, recognition)
    np.testing.assert_array_equal(meanfield.flatten_omega(omega_z, omega_k), flat)
    with pytest.raises(DimMismatch):
        meanfield.unflatten_omega(flat[:-1], g, recognition)


def test_invalid_iteration_settings(slds):
    g, recognition = slds
    with pytest.raises(ConfigError):
        meanfield.block_update(g, recognition, max_iters=0)
    with pytest.raises(ConfigError):
        meanfield.block_update(g, recognition, tol=0.0)


def test_single_step_sequence_has_no_discrete_block(gen):
    g, _ = oracles.random_global_stats(gen, D=2, K=3)
    state = meanfield.block_update(g, random_recognition(gen, 1, 2))
    assert state.omega_k is None
    assert state.mu_z.Ez.shape == (1, 2)


@pytest.mark.slow
def test_meanfield_suite_over_fifty_instances():
    for result in check_meanfield():
        assert result.passed, result
