import pytest
from pydantic import ValidationError

from src.config.settings import ModelConfig, Settings, SynthConfig, TrainConfig, parse_mask
from src.tools import config_file
from src.utils.exceptions import ConfigError, ParseError

CONFIG_TEXT = """
seed = 4   # top-level keys come first
threads = 2

[model]
kind = lds
hidden = 8, 8
layer_norm = false

[train]
grad_mode = implicit
adam_lr = 0.01
"""


def test_parse_reads_sections_lists_and_scalars():
    values = config_file.parse(CONFIG_TEXT)
    assert values["seed"] == 4
    assert values["model"] == {"kind": "lds", "hidden": [8, 8], "layer_norm": False}
    assert values["train"]["adam_lr"] == 0.01


def test_quoted_values_keep_commas():
    assert config_file.parse('name = "a, b"')["name"] == "a, b"


@pytest.mark.parametrize("text,line", [
    ("[model\nkind = lds", 1),
    ("seed = 1\nnot a pair", 2),
    ("seed = 1\nseed = 2", 2),
    ("[train]\nsteps =", 2),
    ("[train]\n[train]", 2),
])
def test_parse_errors_carry_the_line(text, line):
    with pytest.raises(ParseError) as info:
        config_file.parse(text)
    assert info.value.line == line


def test_overrides_win_over_file_values():
    config = config_file.build_run_config("fit", config_file.parse(CONFIG_TEXT),
                                          {"seed": 9, "train.adam_lr": 0.5, "model.obs_dim": 7})
    assert config.seed == 9
    assert config.train.adam_lr == 0.5
    assert config.train.grad_mode == "implicit"
    assert config.model.obs_dim == 7
    assert config.model.hidden == [8, 8]
    assert config.model.states == 1


def test_invalid_values_become_config_errors():
    with pytest.raises(ConfigError, match="train.grad_mode"):
        config_file.build_run_config("fit", {}, {"train.grad_mode": "backprop"})
    with pytest.raises(ConfigError):
        config_file.build_run_config("fit", {"model": {"colour": "red"}})


def test_lds_forces_a_single_state():
    assert ModelConfig(kind="lds").states == 1
    with pytest.raises(ValidationError):
        ModelConfig(kind="lds", states=3)


def test_hidden_sizes_must_be_positive():
    with pytest.raises(ValidationError):
        ModelConfig(hidden=[4, 0])


def test_stage_fractions_must_sum_to_one():
    with pytest.raises(ValidationError):
        TrainConfig(stage_fractions=(0.5, 0.5, 0.5))


def test_synth_scale_range_is_checked():
    with pytest.raises(ValidationError):
        SynthConfig(scale_init=0.5)
    assert SynthConfig(T=50).period == 10


@pytest.mark.parametrize("text", ["0.5", "0.6:0.4", "a:b", "0:1.5"])
def test_bad_masks_are_rejected(text):
    with pytest.raises(ValueError):
        parse_mask(text)
    with pytest.raises(ConfigError):
        config_file.build_run_config("impute", {}, {"mask": text})


def test_mask_range_parses():
    config = config_file.build_run_config("impute", {}, {"mask": "0.25:0.5"})
    assert config.mask_range() == (0.25, 0.5)


def test_thread_environment_overrides_the_flag(monkeypatch):
    monkeypatch.setenv("SVAE_THREADS", "3")
    env = Settings()
    env.validate()
    assert env.resolve_threads(1) == 3


def test_invalid_thread_environment_is_rejected(monkeypatch):
    monkeypatch.setenv("SVAE_THREADS", "zero")
    with pytest.raises(ConfigError):
        Settings().validate()


def test_missing_thread_environment_keeps_the_flag(monkeypatch):
    monkeypatch.delenv("SVAE_THREADS", raising=False)
    assert Settings().resolve_threads(4) == 4


def test_unknown_global_optimizer_is_rejected():
    assert TrainConfig().global_optimizer == "natural"
    with pytest.raises(ValidationError):
        TrainConfig(global_optimizer="sgd")
    with pytest.raises(ValidationError):
        TrainConfig(global_adam_lr=-1.0)
