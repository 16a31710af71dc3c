import pytest

from pdisconet.config import ExperimentConfig
from pdisconet.errors import ConfigError


def test_text_round_trip():
    cfg = ExperimentConfig(widths=(8, 12), downsample=(True, False), no_orth=True, lambda_conc=250.0)
    back = ExperimentConfig.from_text(cfg.to_text())
    assert back == cfg


def test_resolved_text_lists_every_field():
    text = ExperimentConfig().to_text()
    keys = [line.split("=")[0].strip() for line in text.splitlines()]
    assert "lr_modulation" in keys and "include_background" in keys
    assert len(keys) == len(set(keys))


def test_comments_and_blank_lines():
    cfg = ExperimentConfig.from_text("# header\n\nepochs = 3  # short run\nno_pres = true\n")
    assert cfg.epochs == 3 and cfg.no_pres


def test_unknown_key_names_key_and_line():
    with pytest.raises(ConfigError, match=r"run\.cfg:2: unknown key 'lrr'"):
        ExperimentConfig.from_text("epochs = 1\nlrr = 0.1\n", "run.cfg")


def test_duplicate_key():
    with pytest.raises(ConfigError, match="duplicate"):
        ExperimentConfig.from_text("epochs = 1\nepochs = 2\n")


def test_bad_value():
    with pytest.raises(ConfigError, match=":1: bad value for 'epochs'"):
        ExperimentConfig.from_text("epochs = many\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text("no_orth = maybe\n")


def test_missing_equals():
    with pytest.raises(ConfigError, match="expected"):
        ExperimentConfig.from_text("epochs 3\n")


def test_component_validation_surfaces():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text("lr_head = -1\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text("num_parts = 0\n")


def test_mapping_to_component_configs():
    cfg = ExperimentConfig(no_modulation=True, lambda_orth=0.5, train_seed=9, batch_size=4)
    tc = cfg.train_config()
    assert tc.weights.orth == 0.5 and tc.seed == 9 and tc.batch_size == 4
    mc = cfg.model_config(num_classes=16)
    assert not mc.use_modulation and mc.num_parts == cfg.num_parts


def test_defaults_are_consistent():
    cfg = ExperimentConfig()
    tc = cfg.train_config()
    assert (tc.lr_backbone, tc.lr_head, tc.lr_modulation) == (1e-4, 1e-3, 1e-2)
    assert tc.weights.conc == 1000.0
    assert tc.epochs <= 30
    assert cfg.glyph_spec().num_classes == 16


def test_save_and_load(tmp_path):
    cfg = ExperimentConfig(epochs=2)
    cfg.save(tmp_path / "c.txt")
    assert ExperimentConfig.load(tmp_path / "c.txt") == cfg
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "missing.txt")
