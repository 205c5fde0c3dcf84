import pytest

from uacseg.config import ConfigError, ExperimentConfig, apply_overrides, dump_config, from_dict, load_config


def test_defaults_validate():
    cfg = ExperimentConfig().validate()
    assert cfg.method_label == "full"
    assert cfg.model_spec().num_classes == 5
    m = cfg.method_config()
    assert m.uncertainty.num_passes == 8 and m.threshold.thresh_alpha == 0.75 and m.threshold.thresh_beta == -5.0
    assert m.t_max == 2000


def test_overrides_and_presets():
    cfg = apply_overrides(ExperimentConfig(), ["train.seed=7", "uncertainty.num_passes=6", "method=mean_teacher"])
    assert cfg.train.seed == 7 and cfg.uncertainty.num_passes == 6
    assert cfg.method_label == "mean-teacher"
    assert apply_overrides(cfg, {"method": "source_only"}).method_label == "source-only"


@pytest.mark.parametrize("bad", ["nope=1", "train.nope=1", "train", "method=magic"])
def test_bad_overrides(bad):
    with pytest.raises(ConfigError):
        apply_overrides(ExperimentConfig(), [bad])


@pytest.mark.parametrize("bad", [{"uncertainty": {"thresh_beta": 1.0}}, {"classdrop": {"min_ratio": 0.9, "max_ratio": 0.1}},
                                 {"train": {"t_max": 0}}, {"train": {"ema_decay": 2}}, {"bogus": 1}])
def test_validation(bad):
    with pytest.raises(ConfigError):
        from_dict(bad)


def test_yaml_roundtrip_and_digest(tmp_path):
    cfg = apply_overrides(ExperimentConfig(), ["loss.lambda0=3.5", "data.root=/x"])
    dump_config(cfg, tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert back.to_dict() == cfg.to_dict()
    assert back.digest() == cfg.digest()
    other = apply_overrides(cfg, ["data.root=/y"])
    assert other.digest() != cfg.digest() and other.training_digest() == cfg.training_digest()
    assert apply_overrides(cfg, ["train.seed=9"]).training_digest() != cfg.training_digest()


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")
