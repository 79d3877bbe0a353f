import numpy as np
import pytest
from scipy import linalg, stats

from src.config.settings import ModelConfig, SynthConfig
from src.tools import checkpoint, sequence_file, synthetic
from src.tools.sequence_file import SequenceData
from src.utils.exceptions import ConfigError, LengthError, MagicMismatch, NonFinite, NotSPD


def test_sequence_file_round_trip_with_labels(gen, tmp_path):
    data = SequenceData(x=gen.standard_normal((2, 4, 3)), labels=gen.integers(0, 4, (2, 4)))
    path = str(tmp_path / "data.svsq")
    sequence_file.write(path, data)
    back = sequence_file.read(path)
    np.testing.assert_array_equal(back.x, data.x)
    np.testing.assert_array_equal(back.labels, data.labels)


def test_truncated_sequence_file_raises(gen):
    raw = sequence_file.to_bytes(SequenceData(x=gen.standard_normal((1, 3, 2))))
    with pytest.raises(LengthError):
        sequence_file.from_bytes(raw[:-5])
    with pytest.raises(LengthError):
        sequence_file.from_bytes(raw[:10])
    with pytest.raises(LengthError):
        sequence_file.from_bytes(raw + b"\x00\x00")


def test_bad_magic_is_rejected():
    with pytest.raises(MagicMismatch):
        sequence_file.from_bytes(b"XXXX" + bytes(16))


def test_non_finite_values_are_not_written():
    with pytest.raises(NonFinite):
        sequence_file.to_bytes(SequenceData(x=np.full((1, 1, 1), np.nan)))


def test_csv_export_has_a_row_per_step(gen, tmp_path):
    path = tmp_path / "data.csv"
    sequence_file.export_csv(str(path), SequenceData(x=gen.standard_normal((2, 3, 1))))
    lines = path.read_text().splitlines()
    assert lines[0] == "seq,t,x0"
    assert len(lines) == 1 + 6
    assert lines[4].startswith("1,0,")


def test_laplace_frame_sums_to_grid_size():
    frame = synthetic.laplace_frame(50, 0.5, 0.1)
    assert frame.sum() == pytest.approx(50.0)
    assert np.argmax(frame) == 25


def test_laplace_sequences_stay_in_range():
    cfg = SynthConfig(grid_size=20, T=40, n_sequences=3, switch_period=5, noise=0.0,
                      drift_step=0.05, scale_step=0.05)
    data = synthetic.gen_laplace_sequences(cfg)
    assert data.x.shape == (3, 40, 20)
    assert set(np.unique(data.labels)) <= {0, 1, 2, 3}
    np.testing.assert_allclose(data.x.sum(axis=2), 20.0)
    for n in range(3):
        changes = np.flatnonzero(np.diff(data.labels[n].astype(int))) + 1
        assert all(t % 5 == 0 for t in changes)


def test_laplace_sequences_do_not_depend_on_workers():
    cfg = SynthConfig(grid_size=10, T=8, n_sequences=4)
    a = synthetic.gen_laplace_sequences(cfg, workers=1)
    b = synthetic.gen_laplace_sequences(cfg, workers=3)
    np.testing.assert_array_equal(a.x, b.x)


def test_lds_without_noise_follows_the_dynamics():
    A = np.array([[0.9, 0.1], [-0.1, 0.9]])
    b = np.array([0.1, 0.0])
    tiny = 1e-20 * np.eye(2)
    truth = synthetic.gen_lds_ground_truth(A, b, tiny, np.ones(2), tiny, T=10, seed=0)
    for t in range(1, 10):
        np.testing.assert_allclose(truth.z[t], A @ truth.z[t - 1] + b, atol=1e-8)
    np.testing.assert_allclose(truth.x, truth.z)
    assert truth.spectral_radius < 1.0


def test_lds_rejects_indefinite_covariance():
    with pytest.raises(NotSPD):
        synthetic.gen_lds_ground_truth(np.eye(1), np.zeros(1), -np.eye(1), np.zeros(1), np.eye(1),
                                       T=3, seed=0)


def test_slds_paths_use_valid_states():
    As = [0.5 * np.eye(2), -0.5 * np.eye(2)]
    bs = [np.zeros(2), np.ones(2)]
    Qs = [0.1 * np.eye(2)] * 2
    truth = synthetic.gen_slds_ground_truth(As, bs, Qs, np.zeros(2), np.eye(2), np.array([0.5, 0.5]),
                                            np.array([[0.9, 0.1], [0.2, 0.8]]), T=20, seed=3)
    assert truth.k.shape == (19,)
    assert set(truth.k) <= {0, 1}
    with pytest.raises(ConfigError):
        synthetic.gen_slds_ground_truth(As, bs, Qs, np.zeros(2), np.eye(2), np.ones(3), np.eye(2),
                                        T=5, seed=0)


def test_checkpoint_round_trip_with_config(gen, tmp_path):
    params = {"enc.0.W": gen.standard_normal((3, 4)), "glob.pi0": gen.uniform(size=2),
              "dec.log_var": np.zeros(3)}
    config = ModelConfig(obs_dim=3, latent_dim=2, states=2, hidden=[4])
    path = str(tmp_path / "model.svae")
    checkpoint.save(path, params, config)
    loaded, loaded_config = checkpoint.load(path)
    assert loaded_config == config
    assert set(loaded) == set(params)
    for name in params:
        np.testing.assert_array_equal(loaded[name], params[name])


def test_corrupt_checkpoints_raise(gen):
    raw = checkpoint.to_bytes({"w": gen.standard_normal(4)})
    with pytest.raises(LengthError):
        checkpoint.from_bytes(raw[:-1])
    with pytest.raises(MagicMismatch):
        checkpoint.from_bytes(b"SVSQ" + raw[4:])


def test_stable_lds_has_the_lyapunov_autocovariance():
    A = np.array([[0.5, 0.2], [-0.1, 0.7]])
    Q = np.array([[0.3, 0.05], [0.05, 0.2]])
    Sigma = linalg.solve_discrete_lyapunov(A, Q)
    truth = synthetic.gen_lds_ground_truth(A, np.zeros(2), Q, np.zeros(2), Sigma, T=100_000, seed=4)
    z = truth.z
    lag_one = z[1:].T @ z[:-1] / (len(z) - 1)
    expected = A @ Sigma
    assert np.max(np.abs(lag_one - expected)) / np.max(np.abs(expected)) <= 0.05
    stationary = z.T @ z / len(z)
    assert np.max(np.abs(stationary - Sigma)) / np.max(np.abs(Sigma)) <= 0.05


def test_widening_regime_never_lowers_frame_entropy():
    cfg = SynthConfig(grid_size=50, T=40, n_sequences=3, regimes=["var+"], noise=0.0, scale_step=0.005)
    data = synthetic.gen_laplace_sequences(cfg)
    for frames in data.x:
        entropy = stats.entropy(frames / cfg.grid_size, axis=1)
        assert np.all(np.diff(entropy) >= -1e-12)
        assert entropy[-1] > entropy[0]
