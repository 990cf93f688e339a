"""
End-to-end training runs: artifacts, resume, divergence handling and learning trends
"""

from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
from scipy.stats import multivariate_normal

from config import ConfigManager, ExperimentConfig
from datasets import DatasetKind, DatasetSpec, load_dataset
from models import ModelConfig
from trainer import METRIC_COLUMNS, TrainConfig, TrainingMethod, fit, load_training_state


def tiny_config(**train_overrides) -> ExperimentConfig:
    train = TrainConfig(batch_size=32, epochs=2, steps=4, step_size=0.05, learning_rate=3e-3,
                        prior_init_batches=1, seed=11)
    return ExperimentConfig(
        name="tiny",
        output_dir="",
        eval_samples=48,
        train=replace(train, **train_overrides),
        model=ModelConfig(latent_dim=2, hidden=(8,)),
        dataset=DatasetSpec(kind=DatasetKind.GAUSSIAN_MIXTURE, n_samples=64, seed=2),
    )


@pytest.fixture
def tiny_data():
    return load_dataset(DatasetSpec(kind=DatasetKind.GAUSSIAN_MIXTURE, n_samples=64, seed=2))


def same_params(a, b):
    return all(np.array_equal(a[k].data, b[k].data) for k in a) and list(a) == list(b)


class TestFitArtifacts:
    """Files written by a training run"""

    def test_output_files(self, tmp_path, tiny_data):
        config = replace(tiny_config(), eval_every=1)
        artifacts = fit(tiny_data, config, output_dir=tmp_path)

        names = {p.name for p in tmp_path.iterdir()}
        assert {"epoch_0000.ckpt", "epoch_0001.ckpt", "epoch_0002.ckpt", "metrics.csv",
                "traces.csv", "eval.csv"} <= names
        metrics = pd.read_csv(tmp_path / "metrics.csv")
        assert list(metrics.columns) == METRIC_COLUMNS
        assert list(metrics["step"]) == [0, 1, 2, 3]
        assert list(metrics["epoch"]) == [1, 1, 2, 2]
        assert metrics["prior_init"].tolist() == [True, False, False, False]

        traces = pd.read_csv(tmp_path / "traces.csv")
        assert sorted(traces["epoch"].unique()) == [1, 2]
        assert len(traces) == 2 * 4 * 32

        evaluations = pd.read_csv(tmp_path / "eval.csv")
        assert list(evaluations["epoch"]) == [1, 2]
        assert (evaluations["mmd"] >= 0).all()
        assert evaluations["coverage"].between(0, 1).all()
        assert artifacts.final_checkpoint == tmp_path / "epoch_0002.ckpt"

    def test_zero_epochs(self, tmp_path, tiny_data):
        artifacts = fit(tiny_data, tiny_config(epochs=0), output_dir=tmp_path)
        assert [p.name for p in artifacts.checkpoints] == ["epoch_0000.ckpt"]
        metrics = pd.read_csv(tmp_path / "metrics.csv")
        assert list(metrics.columns) == METRIC_COLUMNS
        assert len(metrics) == 0

    def test_nothing_written_without_output_dir(self, tmp_path, tiny_data, monkeypatch):
        monkeypatch.chdir(tmp_path)
        artifacts = fit(tiny_data, tiny_config(epochs=1))
        assert artifacts.output_dir is None
        assert artifacts.checkpoints == []
        assert list(tmp_path.iterdir()) == []
        assert len(artifacts.metrics) == 2

    def test_runs_are_reproducible(self, tiny_data):
        first = fit(tiny_data, tiny_config())
        second = fit(tiny_data, tiny_config())
        assert same_params(first.state.gen.params, second.state.gen.params)
        assert same_params(first.state.warm.params, second.state.warm.params)

    def test_checkpoint_records_configs(self, tmp_path, tiny_data):
        config = tiny_config()
        fit(tiny_data, config, output_dir=tmp_path)
        state, meta = load_training_state(tmp_path / "epoch_0002.ckpt")
        assert meta["epoch"] == 2
        assert TrainConfig.from_dict(meta["train"]) == config.train
        assert state.batch_index == 4


class TestResume:
    """Interrupted runs continue bit for bit"""

    def test_resume_matches_uninterrupted_run(self, tmp_path, tiny_data):
        full = fit(tiny_data, tiny_config(epochs=3), output_dir=tmp_path / "full")

        fit(tiny_data, tiny_config(epochs=1), output_dir=tmp_path / "split")
        resumed = fit(tiny_data, tiny_config(epochs=3), output_dir=tmp_path / "split",
                      resume_from=tmp_path / "split" / "epoch_0001.ckpt")

        assert same_params(full.state.gen.params, resumed.state.gen.params)
        assert same_params(full.state.warm.params, resumed.state.warm.params)
        assert same_params(full.state.adam_theta.v, resumed.state.adam_theta.v)

        for name in ("metrics.csv", "traces.csv"):
            full_log = pd.read_csv(tmp_path / "full" / name, float_precision="round_trip")
            split_log = pd.read_csv(tmp_path / "split" / name, float_precision="round_trip")
            assert len(split_log) == len(full_log) > 0
            pd.testing.assert_frame_equal(split_log.drop(columns="wall_ms", errors="ignore"),
                                          full_log.drop(columns="wall_ms", errors="ignore"), check_exact=True)

    def test_resume_vae(self, tmp_path, tiny_data):
        full = fit(tiny_data, tiny_config(method=TrainingMethod.VAE, epochs=2))
        fit(tiny_data, tiny_config(method=TrainingMethod.VAE, epochs=1), output_dir=tmp_path)
        resumed = fit(tiny_data, tiny_config(method=TrainingMethod.VAE, epochs=2), output_dir=tmp_path,
                      resume_from=tmp_path / "epoch_0001.ckpt")
        assert same_params(full.state.gen.params, resumed.state.gen.params)


class TestDivergence:
    """Diverging chains skip the batch instead of stopping the run"""

    def test_run_continues(self, tiny_data):
        with np.errstate(all="ignore"):
            artifacts = fit(tiny_data, tiny_config(epochs=1, step_size=1e200, precond_enabled=False))
        assert artifacts.metrics["diverged"].all()
        assert artifacts.state.batch_index == 2
        assert artifacts.state.adam_theta.step == 0


@pytest.mark.slow
class TestLearning:
    """Longer runs: the model actually fits the data"""

    def test_lpc_elbo_improves_on_mixture(self, mixture_data):
        config = replace(ConfigManager().get_preset("mixture"), output_dir="")
        config = replace(config, train=replace(config.train, epochs=6, steps=20))
        metrics = fit(mixture_data, config).metrics
        first = metrics[metrics["epoch"] == 1]["elbo"].mean()
        last = metrics[metrics["epoch"] == 6]["elbo"].mean()
        assert last > first

    def test_linear_gaussian_marginal_likelihood(self):
        """The learned linear decoder moves most of the way to the true marginal likelihood"""
        config = replace(ConfigManager().get_preset("linear_gaussian"), output_dir="")
        config = replace(config, train=replace(config.train, epochs=5, steps=30))
        dataset = load_dataset(config.dataset)
        x = dataset.data
        weight, bias, sigma = dataset.truth["weight"], dataset.truth["bias"], float(dataset.truth["sigma"])

        def marginal_ll(w, b, s):
            cov = w @ w.T + s ** 2 * np.eye(len(b))
            return multivariate_normal(b, cov).logpdf(x).mean()

        def model_ll(state):
            gen = state.gen
            w = gen.params["decoder.0.weight"].data.T
            b = gen.params["decoder.0.bias"].data
            s = float(gen.decode(np.zeros((1, gen.latent_dim))).scale.data[0, 0])
            return marginal_ll(w, b, s)

        initial = fit(x, replace(config, train=replace(config.train, epochs=0)))
        trained = fit(x, config)
        truth = marginal_ll(weight, bias, sigma)
        gap_before = truth - model_ll(initial.state)
        gap_after = truth - model_ll(trained.state)
        assert gap_after < 0.5 * gap_before
