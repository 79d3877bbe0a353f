import numpy as np
import pytest

from src.inference import chain_bp, oracles, parallel_bp
from src.tools.invariants import check_parallel
from src.utils.metrics import metrics


@pytest.mark.parametrize("T", [1, 2, 3, 8, 17, 130])
@pytest.mark.parametrize("D", [1, 2, 4])
@pytest.mark.parametrize("parallelism", [1, 2, 8])
def test_parallel_matches_sequential(T, D, parallelism, gen):
    p = oracles.random_chain(gen, T, D)
    fr_s, sr_s = chain_bp.infer(p)
    fr_p, sr_p = parallel_bp.infer(p, parallelism=parallelism)
    np.testing.assert_allclose(fr_p.f, fr_s.f, atol=1e-8)
    np.testing.assert_allclose(fr_p.F, fr_s.F, atol=1e-8)
    assert float(fr_p.logZ) == pytest.approx(float(fr_s.logZ), abs=1e-8)
    np.testing.assert_allclose(sr_p.Ez, sr_s.Ez, atol=1e-8)
    np.testing.assert_allclose(sr_p.Ezz, sr_s.Ezz, atol=1e-8)
    np.testing.assert_allclose(sr_p.Ezz_next, sr_s.Ezz_next, atol=1e-8)


def test_scan_matches_left_fold(gen):
    p = oracles.random_chain(gen, 9, 2)
    elems = parallel_bp.make_filter_elements(p).astuple()
    scanned, _ = parallel_bp.associative_scan(elems, parallel_bp.combine_filter)
    folds = parallel_bp.sequential_fold(elems, parallel_bp.combine_filter)
    for t, fold in enumerate(folds):
        for a, b in zip(fold, scanned):
            np.testing.assert_allclose(a[0], b[t], atol=1e-9)


def test_scan_depth_is_logarithmic(gen):
    p = oracles.random_chain(gen, 64, 1)
    parallel_bp.parallel_filter(p)
    assert metrics.get_peak("scan.filter.depth") <= 2 * np.ceil(np.log2(64))


def test_combine_operators_are_associative():
    results = check_parallel(seed=3, lengths=(2, 5), dims=(2,), n_seeds=1, n_triples=50)
    for result in results:
        assert result.passed, result


def test_two_step_smoother_matches_sequential(gen):
    p = oracles.random_chain(gen, 2, 2)
    fr = chain_bp.kalman_filter(p)
    _, sr_s = chain_bp.infer(p)
    sr_p = parallel_bp.parallel_smooth(p, fr)
    np.testing.assert_allclose(sr_p.Fs, sr_s.Fs, atol=1e-10)
    np.testing.assert_allclose(sr_p.Ezz_next, sr_s.Ezz_next, atol=1e-10)


def test_smoother_elements_share_the_combine_layout(gen):
    p = oracles.random_chain(gen, 5, 3)
    elems = parallel_bp.make_smoother_elements(p, chain_bp.kalman_filter(p))
    assert elems.E11.shape == (5, 3, 3)
    assert elems.eps1.shape == (5, 3)
    assert elems.E12.shape == (5, 3, 3)
    assert elems.eps2.shape == (5, 3)
    assert elems.E22.shape == (5, 3, 3)


def test_parallelism_degrees_agree_bitwise_close(gen):
    p = oracles.random_chain(gen, 300, 3)
    runs = [parallel_bp.infer(p, parallelism=k) for k in (1, 2, 8)]
    _, base = runs[0]
    for _, sr in runs[1:]:
        np.testing.assert_allclose(sr.Ez, base.Ez, atol=1e-10)
        np.testing.assert_allclose(sr.Ezz_next, base.Ezz_next, atol=1e-10)


@pytest.mark.slow
def test_parallel_suite_at_full_scale():
    for result in check_parallel(seed=0):
        assert result.passed, result
