import pytest

from odecut import config as cfgmod
from odecut.models import Bottleneck
from odecut.odeint import Method


def test_every_key_is_namespaced_and_documented():
    sections = {k.split(".")[0] for k in cfgmod.KEYS}
    assert sections == {"train", "data", "model", "solver", "loss", "bench"}
    text = cfgmod.help_text()
    assert all(name in text for name in cfgmod.KEYS)


def test_parsing_of_typed_values():
    s = cfgmod.Settings.build({
        "train.steps_per_epoch": "none", "data.flip": "off", "model.taps": "0,2,4",
        "model.bottleneck_kind": "ResNet", "solver.method": "rk4", "solver.initial_step": "0.01",
    })
    assert s.values["train.steps_per_epoch"] is None
    assert s.values["data.flip"] is False
    assert s.values["model.taps"] == (0, 2, 4)
    assert s.values["model.bottleneck_kind"] is Bottleneck.RESNET
    assert s.solver().method is Method.RK4 and s.solver().initial_step == 0.01
    with pytest.raises(cfgmod.ConfigValueError):
        cfgmod.Settings.build({"data.flip": "maybe"})
    with pytest.raises(cfgmod.ConfigKeyError):
        cfgmod.Settings.build({"loss.unknown": "1"})


def test_invalid_combination_reported_as_config_error():
    s = cfgmod.Settings.build({"data.image_size": "30"})
    with pytest.raises(cfgmod.ConfigValueError):
        s.train_config()


def test_echo_roundtrips_through_file(tmp_path):
    s = cfgmod.Settings.build(cfgmod.PRESETS["smoke"], {"solver.rtol": "1e-05", "train.steps_per_epoch": "none"})
    s.write_echo(tmp_path / "config.echo")
    back = cfgmod.Settings.build(cfgmod.read_file(tmp_path / "config.echo"))
    assert back.values == s.values
    assert back.train_config() == s.train_config()


def test_smoke_preset():
    cfg = cfgmod.Settings.build(cfgmod.PRESETS["smoke"]).train_config()
    assert (cfg.image_size, cfg.batch_size, cfg.epochs * cfg.steps_per_epoch) == (32, 4, 200)


def test_fixture_and_bench_sections():
    s = cfgmod.Settings.build({"data.fixture_n": "6", "bench.runs": "50"})
    assert s.fixtures().fixture_n == 6 and s.bench().runs == 50
