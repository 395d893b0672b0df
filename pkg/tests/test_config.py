import numpy as np
import pytest

from pournet import seeding
from pournet.config import Settings
from pournet.exceptions import ConfigError
from pournet.models.config import (
    CascadeConfig,
    OurNetConfig,
    RunConfig,
    TrainingConfig,
    schema_keys,
)


def test_defaults_round_trip_through_text():
    text = RunConfig().to_text()
    assert RunConfig.from_text(text) == RunConfig()
    assert "cascade.demons.iterations_per_level = 60, 40, 20" in text.splitlines()
    assert "phantom.seed" not in text


def test_single_element_tuple_survives_round_trip():
    text = "cascade.demons.pyramid_levels = 1\ncascade.demons.iterations_per_level = 5,\n"
    config = RunConfig.from_text(text)
    assert config.cascade.demons.iterations_per_level == (5,)
    assert RunConfig.from_text(config.to_text()) == config


def test_comments_and_none_values():
    config = RunConfig.from_text(
        "# desk run\n"
        "cascade.infer_patch_size = 16  # sliding patches\n"
        "metrics.mask_threshold = none\n"
        "cascade.ournet.enable_ovnet = false\n"
    )
    assert config.cascade.infer_patch_size == 16
    assert config.metrics.mask_threshold is None
    assert config.cascade.ournet.variant() == "funet+u"


def test_unknown_key_is_a_usage_error():
    with pytest.raises(ConfigError, match="unknown key 'cascade.trianing.steps'") as info:
        RunConfig.from_text("cascade.trianing.steps = 3\n")
    assert info.value.exit_code == 2


def test_derived_seed_keys_are_not_settable():
    with pytest.raises(ConfigError, match="unknown key"):
        RunConfig.from_text("phantom.seed = 4\n")


@pytest.mark.parametrize(
    "line",
    [
        "cascade.training.patch_size = 10",
        "phantom.size = 30",
        "cascade.training.lr = -1",
        "metrics.ssim_window = 4",
        "cascade.demons.pyramid_levels = 2",
        "phantom.count_fractions = 0.1, 1.5",
        "no equals sign",
    ],
)
def test_invalid_values(line):
    with pytest.raises(ConfigError) as info:
        RunConfig.from_text(line + "\n")
    assert info.value.exit_code == 2


def test_seed_feeds_every_section():
    config = RunConfig.from_text("seed = 7\n")
    assert config.phantom.seed == 7
    assert config.cascade.seed == 7
    assert config.cascade.training.seed == 7


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        RunConfig.from_file(tmp_path / "absent.cfg")


def test_schema_keys_are_unique():
    keys = schema_keys()
    assert len(keys) == len(set(keys))
    assert "cascade.ournet.base_channels" in keys
    assert "seed" in keys


def test_channel_schedules_default_from_base_width():
    config = OurNetConfig(base_channels=3)
    assert config.unnet_channel_schedule == (3, 6, 12)
    assert config.ovnet_channel_schedule == (3, 3, 3)


def test_stage_config_switches_input_channels():
    cfg = CascadeConfig()
    assert cfg.stage_config(1).in_channels == 2
    assert cfg.stage_config(3).in_channels == 3
    assert cfg.ournet.in_channels == 2
    with pytest.raises(ValueError):
        cfg.stage_config(0)


def test_training_config_rejects_bad_betas():
    with pytest.raises(ValueError):
        TrainingConfig(betas=(0.9, 1.0))


def test_settings_from_environment(monkeypatch):
    monkeypatch.setenv("POUR_WORKERS", "3")
    monkeypatch.setenv("LOG_LEVEL", "DEBUG")
    settings = Settings(_env_file=None)
    assert settings.POUR_WORKERS == 3
    assert settings.LOG_LEVEL == "DEBUG"


def test_substreams_are_reproducible_and_distinct():
    a = seeding.substream(0, seeding.PHANTOM, 1).random(4)
    b = seeding.substream(0, seeding.PHANTOM, 1).random(4)
    c = seeding.substream(0, seeding.PHANTOM, 2).random(4)
    d = seeding.substream(0, seeding.ATLAS, 1).random(4)
    e = seeding.substream(1, seeding.PHANTOM, 1).random(4)
    np.testing.assert_array_equal(a, b)
    for other in (c, d, e):
        assert not np.array_equal(a, other)
    assert seeding.stream_key("phantom") == seeding.stream_key(seeding.PHANTOM)
