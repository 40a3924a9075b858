import numpy as np
import pytest

from config import ABLATION_MODES, SEED_ENV, load_config
from conftest import ROOT
from errors import ConfigError


def _write(tmp_path, text):
    path = tmp_path / "config.yaml"
    path.write_text(text)
    return path


def test_shipped_configs_load():
    desk = load_config(ROOT / "desk_config.yaml", environ={})
    full = load_config(ROOT / "full_config.yaml", environ={})
    assert desk.train.ablation_mode in ABLATION_MODES
    assert desk.sensor.fov_half_angle == pytest.approx(np.deg2rad(65.0))
    assert desk.sensor.mount_offset == (0.15, 0.0, -0.03)
    assert desk.simulation.scale_range == (0.95, 1.05)
    assert full.train.iterations == 20000
    assert (full.train.batch_mocap, full.train.batch_real) == (128, 32)
    assert desk.source.endswith("desk_config.yaml")


def test_defaults_without_a_file():
    config = load_config(environ={})
    assert config.train.weights.w_rot == 1.0
    assert config.train.weights.w_ce == pytest.approx(0.1)
    assert config.source is None


def test_overrides_are_parsed_as_yaml(tmp_path):
    path = _write(tmp_path, "train:\n  iterations: 10\n")
    config = load_config(path, ["train.iterations=50", "train.weights.w_spc=0.5", "spc.encoder_widths=[8, 16]",
                                "synthesis.lower_mode=lagged"], environ={})
    assert config.train.iterations == 50
    assert config.train.weights.w_spc == 0.5
    assert config.spc.encoder_widths == (8, 16)
    assert config.synthesis.lower_mode == "lagged"


def test_seed_environment_variable():
    config = load_config(environ={SEED_ENV: "42"})
    assert config.data.seed == 42
    assert config.train.seed == 42
    with pytest.raises(ConfigError):
        load_config(environ={SEED_ENV: "forty-two"})


@pytest.mark.parametrize("text", [
    "bogus:\n  a: 1\n",
    "train:\n  iterationz: 5\n",
    "train:\n  ablation_mode: everything\n",
    "train:\n  batch_mocap: 0\n",
    "data:\n  protocols: [walk, moonwalk]\n",
    "sensor:\n  fov_half_angle_deg: 120\n",
    "train:\n  weights:\n    w_pc: -1\n",
    "synthesis:\n  lower_mode: frozen\n",
    "- just\n- a list\n",
    "train: [1, 2\n",
])
def test_invalid_configs(tmp_path, text):
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, text), environ={})


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml", environ={})


def test_malformed_override():
    with pytest.raises(ConfigError):
        load_config(overrides=["train.iterations"], environ={})


def test_synthesizer_uses_radians(skeleton):
    config = load_config(overrides=["synthesis.upper_sigma_deg=6"], environ={})
    synth = config.synthesis.synthesizer(skeleton, 30)
    assert synth.keywords["upper_sigma"] == pytest.approx(np.deg2rad(6.0))
    assert synth.keywords["fps"] == 30
