"""
Unit tests for experiment configuration, presets and experiment files
"""

from pathlib import Path
from typing import Optional, Tuple

import pytest

from config import (
    ConfigError,
    ConfigManager,
    ExperimentConfig,
    from_ini,
    num_workers,
    parse_value,
    to_ini,
)
from datasets import DatasetKind
from models import Likelihood
from trainer import TrainConfig, WarmStartObjective


class TestExperimentFiles:
    """INI experiment files"""

    def test_round_trip(self):
        config = ConfigManager().get_preset("full")
        config.train.grad_clip = 10.0
        assert from_ini(to_ini(config)) == config

    def test_partial_file_uses_defaults(self):
        config = from_ini("[train]\nsteps = 12\nobjective = forward\n\n[model]\nhidden = 32, 32\n")
        assert config.train.steps == 12
        assert config.train.objective == WarmStartObjective.FORWARD
        assert config.model.hidden == (32, 32)
        assert config.train.learning_rate == TrainConfig().learning_rate

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as info:
            from_ini("[train]\nstep_sise = 0.1\n")
        assert "step_sise" in str(info.value)

    def test_unknown_section(self):
        with pytest.raises(ConfigError):
            from_ini("[sampler]\nsteps = 3\n")

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            from_ini("[train]\nsteps = many\n")
        with pytest.raises(ConfigError):
            from_ini("[train]\nprecond_decay = 1.5\n")

    def test_experiment_section(self):
        config = from_ini("[experiment]\nname = demo\neval_every = 2\nmetrics = mmd, coverage\n")
        assert config.name == "demo"
        assert config.eval_every == 2
        assert config.metrics == ("mmd", "coverage")

    def test_parse_value(self):
        assert parse_value("none", Optional[float]) is None
        assert parse_value("2.5", Optional[float]) == 2.5
        assert parse_value("yes", bool) is True
        assert parse_value("3, 4", Tuple[int, ...]) == (3, 4)
        assert parse_value("", Tuple[int, ...]) == ()
        assert parse_value("discretized-gaussian", Likelihood) == Likelihood.DISCRETIZED_GAUSSIAN


class TestConfigManager:
    """Presets and config files on disk"""

    def test_presets(self):
        manager = ConfigManager()
        assert set(manager.list_presets()) >= {"full", "mixture", "linear_gaussian", "images"}
        full = manager.get_preset("full")
        assert full.model.latent_dim == 40
        assert full.model.likelihood == Likelihood.DISCRETIZED_GAUSSIAN
        assert full.train.steps == 300
        assert full.train.step_size == 0.1
        assert full.train.precond_decay == 0.99
        assert full.train.prior_init_batches == 50
        assert full.dataset.kind == DatasetKind.IDX_IMAGES

    def test_presets_are_copies(self):
        manager = ConfigManager()
        manager.get_preset("mixture").train.steps = 1
        assert manager.get_preset("mixture").train.steps != 1

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            ConfigManager().get_preset("nope")

    def test_save_and_load(self, tmp_path):
        manager = ConfigManager(config_dir=tmp_path)
        config = manager.get_preset("linear_gaussian")
        path = manager.save_config(config)
        assert path == tmp_path / "linear_gaussian.ini"
        assert manager.load_config(path) == config

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            ConfigManager().load_config(tmp_path / "absent.ini")

    def test_dict_round_trip(self):
        config = ConfigManager().get_preset("mixture")
        assert ExperimentConfig.from_dict(config.to_dict()) == config

    @pytest.mark.parametrize("name", ["mixture", "linear_gaussian", "full"])
    def test_shipped_files_match_presets(self, name):
        path = Path(__file__).resolve().parents[2] / "configs" / f"{name}.ini"
        assert ConfigManager().load_config(path) == ConfigManager().get_preset(name)

    def test_validation(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(metrics=("mmd", "fid"))
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"train": {"steps": 0}})


class TestWorkers:
    """Worker cap from the environment"""

    def test_default(self, monkeypatch):
        monkeypatch.delenv("LPC_NUM_THREADS", raising=False)
        assert num_workers() == 1

    def test_from_environment(self, monkeypatch):
        monkeypatch.setenv("LPC_NUM_THREADS", "4")
        assert num_workers() == 4

    @pytest.mark.parametrize("value", ["zero", "0", "-2"])
    def test_invalid(self, monkeypatch, value):
        monkeypatch.setenv("LPC_NUM_THREADS", value)
        with pytest.raises(ConfigError):
            num_workers()
