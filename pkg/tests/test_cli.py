import numpy as np
import pytest

from src import main as cli
from src.tools import checkpoint, sequence_file


@pytest.fixture(autouse=True)
def _no_thread_env(monkeypatch):
    monkeypatch.delenv("SVAE_THREADS", raising=False)


def test_unknown_flag_exits_with_config_error(capsys):
    assert cli.main(["fit", "--no-such-flag"]) == cli.EXIT_CONFIG
    assert "error:" in capsys.readouterr().err


def test_missing_command_exits_with_config_error():
    assert cli.main([]) == cli.EXIT_CONFIG


def test_bad_mask_exits_with_config_error():
    assert cli.main(["impute", "--mask", "0.8:0.2"]) == cli.EXIT_CONFIG


def test_missing_data_file_exits_with_config_error(tmp_path):
    assert cli.main(["fit", "--data", str(tmp_path / "absent.svsq")]) == cli.EXIT_CONFIG


def test_corrupt_data_file_exits_with_numerical_error(tmp_path):
    path = tmp_path / "bad.svsq"
    path.write_bytes(b"nope")
    assert cli.main(["fit", "--data", str(path)]) == cli.EXIT_NUMERICAL


def test_hmm_checks_pass(tmp_path, capsys):
    out = tmp_path / "checks.csv"
    assert cli.main(["check", "--suite", "hmm", "--output", str(out)]) == cli.EXIT_OK
    assert "checks passed" in capsys.readouterr().out
    assert out.read_text().splitlines()[0].startswith("suite,name,passed")


def test_unknown_suite_is_rejected():
    assert cli.main(["check", "--suite", "everything"]) == cli.EXIT_CONFIG


def test_thread_environment_wins_over_flag(monkeypatch):
    monkeypatch.setenv("SVAE_THREADS", "3")
    loaded = cli.load_run_config(["check", "--threads", "1"])
    assert loaded["config"].threads == 3


def test_bad_thread_environment_exits_with_config_error(monkeypatch):
    monkeypatch.setenv("SVAE_THREADS", "0")
    assert cli.main(["check", "--suite", "hmm"]) == cli.EXIT_CONFIG


def test_config_file_and_flags_merge(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 5\n[train]\nsteps = 30\nbp = parallel\n")
    loaded = cli.load_run_config(["fit", "--config", str(path), "--steps", "12", "--hidden", "8,4"])
    config = loaded["config"]
    assert (config.seed, config.train.steps, config.train.bp) == (5, 12, "parallel")
    assert config.model.hidden == [8, 4]


def test_command_specific_flags_are_split_out():
    loaded = cli.load_run_config(["bench", "--inference-only", "--repeats", "2"])
    assert loaded["cli"] == {"inference_only": True, "repeats": 2}


def test_generate_writes_sequences(tmp_path):
    out = tmp_path / "data.svsq"
    argv = ["generate", "--output", str(out), "--T", "6", "--n-sequences", "2", "--grid-size", "5"]
    assert cli.main(argv) == cli.EXIT_OK
    data = sequence_file.read(str(out))
    assert data.x.shape == (2, 6, 5)
    assert data.labels is not None


def test_generate_csv(tmp_path):
    out = tmp_path / "data.csv"
    argv = ["generate", "--output", str(out), "--T", "3", "--n-sequences", "2", "--grid-size", "4"]
    assert cli.main(argv) == cli.EXIT_OK
    assert len(out.read_text().splitlines()) == 1 + 6


@pytest.mark.slow
def test_generate_fit_infer_impute(tmp_path):
    data = tmp_path / "data.svsq"
    model = tmp_path / "model.svae"
    small = ["--latent-dim", "2", "--states", "2", "--hidden", "4", "--no-layer-norm"]
    assert cli.main(["generate", "--output", str(data), "--T", "8", "--n-sequences", "2",
                     "--grid-size", "6"]) == cli.EXIT_OK
    assert cli.main(["fit", "--data", str(data), "--checkpoint", str(model), "--steps", "5",
                     "--batch-size", "2", "--max-sweeps", "10", "--metrics", str(tmp_path / "m.csv"),
                     *small]) == cli.EXIT_OK
    params, config = checkpoint.load(str(model))
    assert config.obs_dim == 6
    assert "glob.pi0" in params

    latents = tmp_path / "latents.svsq"
    assert cli.main(["infer", "--data", str(data), "--checkpoint", str(model),
                     "--output", str(latents)]) == cli.EXIT_OK
    inferred = sequence_file.read(str(latents))
    assert inferred.x.shape == (2, 8, 2)
    assert set(np.unique(inferred.labels)) <= {0, 1}

    recon = tmp_path / "recon.svsq"
    assert cli.main(["impute", "--data", str(data), "--checkpoint", str(model), "--mask", "0.5:0.75",
                     "--output", str(recon)]) == cli.EXIT_OK
    assert sequence_file.read(str(recon)).x.shape == (2, 8, 6)


@pytest.mark.slow
def test_bench_appends_rows(tmp_path, capsys):
    out = tmp_path / "bench.csv"
    argv = ["bench", "--inference-only", "--repeats", "1", "--T", "10", "--obs-dim", "3",
            "--hidden", "4", "--output", str(out)]
    assert cli.main(argv) == cli.EXIT_OK
    assert cli.main(argv) == cli.EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[0] == "T,D,K,bp,threads,grad_mode,ms_per_step,peak_states"
    assert len(lines) == 3
    assert lines[1].startswith("10,2,4,sequential,1,none,")
