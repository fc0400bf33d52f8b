import pytest

from vbmtl.backbone import BackboneConfig
from vbmtl.config import (ConfigError, RunConfig, UnknownKeyError, build_config, dump_config, load_config,
                          parse_config_text)


def test_defaults():
    cfg = RunConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.lr_backbone, cfg.lr_heads) == (30, 8, 1e-5, 1e-3)
    assert (cfg.plateau_patience, cfg.plateau_factor, cfg.temperature, cfg.phi, cfg.hidden) == (5, 0.5, 2.0, 1.0, 256)
    assert cfg.backbone == BackboneConfig() and cfg.backbone.mask_prob == 0.05


def test_sections_and_overrides():
    text = """
[experiment]
architecture = branch
seeds = [1, 2]

[backbone]
n_layers = 2
"""
    cfg = parse_config_text(text, ["schedule.epochs=3", "lr_heads=5e-4", "backbone.d_model=32"])
    assert cfg.architecture == "branch" and cfg.seeds == [1, 2] and cfg.epochs == 3
    assert cfg.lr_heads == 5e-4 and cfg.backbone.n_layers == 2 and cfg.backbone.d_model == 32


def test_type_coercion():
    cfg = build_config(overrides=["epochs=4.0", "phi=2", "seeds=7"])
    assert cfg.epochs == 4 and isinstance(cfg.phi, float) and cfg.seeds == [7]


@pytest.mark.parametrize("override,key", [("foo=1", "foo"), ("schedule.foo=1", "schedule.foo"),
                                          ("nosection.epochs=1", "nosection.epochs")])
def test_unknown_override_key(override, key):
    with pytest.raises(UnknownKeyError) as exc:
        build_config(overrides=[override])
    assert exc.value.key == key


def test_unknown_file_key():
    with pytest.raises(UnknownKeyError, match="schedule.nope"):
        parse_config_text("[schedule]\nnope = 1\n")
    with pytest.raises(UnknownKeyError):
        parse_config_text("[misc]\nepochs = 1\n")


@pytest.mark.parametrize("override", ["architecture=resnet", "strategy=gradnorm", "lr_heads=0", "plateau_factor=1.0",
                                      "epochs=0", "tasks=['type','pose']", "seeds=[]", "pooling=max",
                                      "backbone.n_heads=3", "mask_prob=1.0"])
def test_invalid_values(override):
    with pytest.raises(ConfigError):
        build_config(overrides=[override])


def test_malformed_override():
    with pytest.raises(ConfigError):
        build_config(overrides=["epochs"])


def test_dump_round_trip(tmp_path):
    cfg = build_config(overrides=["architecture=branch", "strategy=druw", "seeds=[3, 4]", "data_dir=/tmp/x y",
                                  "backbone.conv_kernels=(6, 4)", "backbone.conv_strides=(4, 2)", "tasks=['type']"])
    path = tmp_path / "c.ini"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg


def test_dict_round_trip():
    cfg = build_config(overrides=["strategy=rruw", "backbone.n_layers=3"])
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
