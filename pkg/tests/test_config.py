import pytest

from src.utils.config import (
    RESOLVED_NAME, RunConfig, apply_overrides, config_items, env_workers, load_config, preset, save_config,
)
from src.utils.errors import ConfigError


def test_defaults():
    config = load_config()
    assert config == RunConfig()
    assert (config.mesh.rows, config.mesh.cols, config.mesh.side_length) == (9, 9, 0.3)
    assert config.obs.resolution == 96
    assert config.gnn.encoder_channels == (16, 32, 64, 128)
    assert config.mesh.build().n_vertices == 81


def test_full_preset():
    config = preset("full")
    assert config.mesh.build().n_vertices == 441
    assert config.obs.resolution == 224 and config.gnn.iterations == 15
    with pytest.raises(ConfigError):
        preset("lab")


def test_overrides_are_typed():
    config = apply_overrides(RunConfig(), {
        "sim.substeps": "10", "obs.depth_scale": "0.2", "train.noise": "off",
        "gnn.encoder_channels": "4,8", "policy.target": "triangle", "seed": "3",
    })
    assert config.sim.substeps == 10
    assert config.obs.depth_scale == 0.2
    assert config.train.noise is False
    assert config.gnn.encoder_channels == (4, 8)
    assert config.policy.target == "triangle"
    assert config.seed == 3


@pytest.mark.parametrize("values", [
    {"sim.nonsense": "1"},
    {"render.resolution": "64"},
    {"sim": "1"},
    {"sim.substeps": "many"},
    {"train.noise": "maybe"},
    {"obs.resolution": "8"},
    {"train.val_fraction": "0.5"},
    {"sim.timestep": None},
])
def test_bad_overrides(values):
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), values)


def test_resolved_file_reproduces_the_config(tmp_path):
    config = load_config(preset_name="full", overrides={"loss.chamfer": "0.25", "flip.hang_height": "0.45",
                                                         "obs.noise_sigma": "0.0015"})
    path = save_config(str(tmp_path / "run" / RESOLVED_NAME), config)
    assert load_config(path) == config
    keys = [key for key, _ in config_items(config)]
    assert "sim.timestep" in keys and keys[-1] == "seed"
    with open(path) as fh:
        assert "# [gnn]" in fh.read()


def test_file_then_overrides(tmp_path):
    path = tmp_path / "run.env"
    path.write_text("mesh.rows=5\nmesh.cols=5\n")
    config = load_config(str(path), overrides={"mesh.cols": "7"})
    assert (config.mesh.rows, config.mesh.cols) == (5, 7)
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.env"))


def test_env_workers(monkeypatch):
    monkeypatch.delenv("CLOTH_WORKERS", raising=False)
    assert env_workers(2) == 2
    monkeypatch.setenv("CLOTH_WORKERS", "4")
    assert env_workers() == 4
    monkeypatch.setenv("CLOTH_WORKERS", "0")
    with pytest.raises(ConfigError):
        env_workers()
    monkeypatch.setenv("CLOTH_WORKERS", "four")
    with pytest.raises(ConfigError):
        env_workers()
