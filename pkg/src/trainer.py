"""
Langevin Predictive Coding Trainer

Training loop per batch:
1. Warm-start draw z(0) ~ q(z | x, phi), or z(0) ~ p(z) during the first
   `prior_init_batches` batches (and always for objective "none")
2. Reverse-KL phi-gradient from the reparameterized warm-start draw
   (objectives "reverse" and "jeffreys")
3. T (preconditioned) Langevin steps; each post-step state contributes a
   theta-gradient of log p(x, z(t) | theta) and a forward-KL phi-gradient
4. One Adam update each for theta and phi

All updates are descent on a loss: theta minimizes -(1/(T*B)) sum log p(x, z),
phi minimizes the chosen divergence averaged over the batch. The ascent form
theta += alpha * g_theta is the same update with the sign folded in.

Also provides the reparameterized-ELBO VAE baseline and `fit`, which owns
epochs, shuffling, checkpoints, metric logs, traces and evaluation hooks.
"""

import logging
import math
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from autodiff import NumericFaultError, ParamSet, Tensor, value_and_grad
from checkpoint import load_checkpoint, save_checkpoint
from datasets import Dataset, iterate_batches
from models import FLOOR_STATS, GenerativeModel, ModelConfig, WarmStartModel
from objectives import (
    GradAccumulator,
    accumulate_theta_grad,
    forward_kl_grad,
    jeffreys_grad,
    negative_elbo,
    reverse_kl_grad,
)
from random_streams import (
    ANCESTRAL,
    CHAIN_NOISE,
    INIT,
    REVERSE_EPS,
    WARM_START,
    ChainNoise,
    stream_generator,
)
from sampler import ChainDivergenceError, NoiseCovariance, SamplerConfig, StepTrace, run_chain

if TYPE_CHECKING:
    from config import ExperimentConfig

logger = logging.getLogger(__name__)


# ============================================================================
# CONFIGURATION
# ============================================================================

class WarmStartObjective(Enum):
    FORWARD = "forward"      # cross-entropy against chain samples
    REVERSE = "reverse"      # reparameterized negative ELBO
    JEFFREYS = "jeffreys"    # 0.5 * forward + 0.5 * reverse
    NONE = "none"            # no warm-start model, chains start at the prior


class TrainingMethod(Enum):
    LPC = "lpc"
    VAE = "vae"


@dataclass
class TrainConfig:
    """Optimizer, sampler and schedule settings for one training run"""

    # Optimization
    method: TrainingMethod = TrainingMethod.LPC
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: Optional[float] = None      # global-norm clip, off by default
    batch_size: int = 64
    epochs: int = 1
    seed: int = 0

    # Langevin sampler
    step_size: float = 0.1
    steps: int = 300
    precond_decay: float = 0.99
    precond_enabled: bool = True
    noise_scale: float = 1.0
    noise_cov: NoiseCovariance = NoiseCovariance.INVERSE_MHAT
    burn_in: float = 0.0                   # fraction of chain states skipped in the accumulations

    # Warm start
    objective: WarmStartObjective = WarmStartObjective.JEFFREYS
    prior_init_batches: int = 50
    reverse_samples: int = 1

    def __post_init__(self):
        if isinstance(self.method, str):
            self.method = TrainingMethod(self.method)
        if isinstance(self.objective, str):
            self.objective = WarmStartObjective(self.objective)
        if isinstance(self.noise_cov, str):
            self.noise_cov = NoiseCovariance(self.noise_cov)
        for name in ("learning_rate", "step_size", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("adam_beta1", "adam_beta2", "precond_decay"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {getattr(self, name)}")
        if self.batch_size < 1 or self.steps < 1 or self.reverse_samples < 1:
            raise ValueError("batch_size, steps and reverse_samples must be >= 1")
        if self.epochs < 0 or self.prior_init_batches < 0:
            raise ValueError("epochs and prior_init_batches must be >= 0")
        if self.noise_scale < 0:
            raise ValueError(f"noise_scale must be >= 0, got {self.noise_scale}")
        if not 0.0 <= self.burn_in < 1.0:
            raise ValueError(f"burn_in must be in [0, 1), got {self.burn_in}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError(f"grad_clip must be positive or None, got {self.grad_clip}")

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(
            step_size=self.step_size,
            precond_decay=self.precond_decay,
            steps=self.steps,
            precond_enabled=self.precond_enabled,
            noise_scale=self.noise_scale,
            noise_cov=self.noise_cov,
        )

    def to_dict(self) -> dict:
        return {
            "method": self.method.value,
            "learning_rate": self.learning_rate,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps,
            "grad_clip": self.grad_clip,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "step_size": self.step_size,
            "steps": self.steps,
            "precond_decay": self.precond_decay,
            "precond_enabled": self.precond_enabled,
            "noise_scale": self.noise_scale,
            "noise_cov": self.noise_cov.value,
            "burn_in": self.burn_in,
            "objective": self.objective.value,
            "prior_init_batches": self.prior_init_batches,
            "reverse_samples": self.reverse_samples,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)


class TrainingStepError(RuntimeError):
    """A training step was aborted; the parameters it was given are untouched"""

    def __init__(self, batch_index: int, reason: str):
        self.batch_index = batch_index
        super().__init__(f"training step aborted at batch {batch_index}: {reason}")


# ============================================================================
# ADAM
# ============================================================================

@dataclass
class AdamState:
    """Bias-corrected Adam moments mirroring a ParamSet"""
    m: ParamSet
    v: ParamSet
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: ParamSet, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(m=params.zeros_like(), v=params.zeros_like(), step=0, beta1=beta1, beta2=beta2, eps=eps)


def adam_update(params: ParamSet, grads: ParamSet, state: AdamState, lr: float) -> Tuple[ParamSet, AdamState]:
    """
    One Adam descent step on `grads` (gradients of a loss)

    Pure: returns new parameters and a new state, inputs are not modified.
    """
    params.check_compatible(grads)
    params.check_compatible(state.m)
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m_new = state.m.combine(grads, b1, 1.0 - b1)
    v_new = ParamSet((name, Tensor(b2 * v.data + (1.0 - b2) * grads[name].data ** 2))
                     for name, v in state.v.items())
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step

    updated = ParamSet()
    for name, p in params.items():
        m_hat = m_new[name].data / c1
        v_hat = v_new[name].data / c2
        updated.add(name, p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return updated, replace(state, m=m_new, v=v_new, step=step)


def clip_by_global_norm(grads: ParamSet, max_norm: Optional[float]) -> Tuple[ParamSet, float]:
    """Rescale `grads` so their global norm is at most `max_norm`; returns (grads, norm before clipping)"""
    norm = grads.global_norm()
    if max_norm is None or norm <= max_norm:
        return grads, norm
    return grads.scaled(max_norm / norm), norm


# ============================================================================
# TRAINING STATE & METRICS
# ============================================================================

@dataclass
class TrainState:
    """Models, optimizer moments and the global batch counter"""
    gen: GenerativeModel
    warm: WarmStartModel
    adam_theta: AdamState
    adam_phi: AdamState
    batch_index: int = 0

    @classmethod
    def initialize(cls, gen: GenerativeModel, warm: WarmStartModel, config: TrainConfig) -> "TrainState":
        kw = dict(beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps)
        return cls(gen=gen, warm=warm,
                   adam_theta=AdamState.zeros(gen.params, **kw),
                   adam_phi=AdamState.zeros(warm.params, **kw))

    def with_params(self, theta: ParamSet, phi: ParamSet, adam_theta: AdamState, adam_phi: AdamState) -> "TrainState":
        return TrainState(gen=replace(self.gen, params=theta), warm=replace(self.warm, params=phi),
                          adam_theta=adam_theta, adam_phi=adam_phi, batch_index=self.batch_index + 1)


@dataclass
class StepMetrics:
    """Diagnostics of one training step"""
    batch_index: int
    elbo: float
    logp_mean: float
    grad_norm_theta: float
    grad_norm_phi: float
    wall_ms: float = 0.0
    logp_init: float = float("nan")
    grad_norm_init: float = float("nan")
    warm_loss: float = float("nan")
    prior_init: bool = False
    diverged: bool = False
    floor_hits: int = 0
    trace: Optional[StepTrace] = field(default=None, repr=False)

    def row(self) -> dict:
        return {
            "elbo": self.elbo,
            "logp_mean": self.logp_mean,
            "grad_norm_theta": self.grad_norm_theta,
            "grad_norm_phi": self.grad_norm_phi,
            "wall_ms": self.wall_ms,
            "logp_init": self.logp_init,
            "grad_norm_init": self.grad_norm_init,
            "warm_loss": self.warm_loss,
            "prior_init": self.prior_init,
            "diverged": self.diverged,
            "floor_hits": self.floor_hits,
        }


# ============================================================================
# TRAINING STEPS
# ============================================================================

def warm_start_draw(state: TrainState, x_batch: np.ndarray, config: TrainConfig) -> Tuple[np.ndarray, np.ndarray, bool]:
    """(z0, eps, from_prior) for the current batch"""
    n, d = x_batch.shape[0], state.gen.latent_dim
    eps = stream_generator(config.seed, WARM_START, state.batch_index).standard_normal((n, d))
    from_prior = (state.batch_index < config.prior_init_batches
                  or config.objective == WarmStartObjective.NONE)
    if from_prior:
        return math.sqrt(state.gen.prior_variance) * eps, eps, True
    return state.warm.reparam_sample(x_batch, eps).data, eps, False


def _reverse_eps(eps0: np.ndarray, samples: int, seed: int, batch_index: int) -> np.ndarray:
    if samples == 1:
        return eps0
    extra = stream_generator(seed, REVERSE_EPS, batch_index).standard_normal((samples - 1, *eps0.shape))
    return np.concatenate([eps0[None], extra])


def lpc_train_step(state: TrainState, x_batch: np.ndarray, config: TrainConfig) -> Tuple[TrainState, StepMetrics]:
    """
    One Langevin predictive coding update on a batch

    Randomness is keyed by (config.seed, state.batch_index), so a step is
    reproducible on its own. Raises TrainingStepError if the chain diverges
    or a non-finite gradient appears; `state` is never modified.
    """
    start = time.perf_counter()
    x_batch = np.atleast_2d(np.asarray(x_batch, dtype=np.float64))
    if x_batch.shape[0] == 0:
        raise ValueError("lpc_train_step: empty batch")
    n = x_batch.shape[0]
    gen, warm, b = state.gen, state.warm, state.batch_index
    objective = config.objective
    floor_mark = FLOOR_STATS.logpmf_floor_hits

    try:
        z0, eps0, from_prior = warm_start_draw(state, x_batch, config)

        reverse = None
        if objective in (WarmStartObjective.REVERSE, WarmStartObjective.JEFFREYS):
            eps_r = _reverse_eps(eps0, config.reverse_samples, config.seed, b)
            reverse = reverse_kl_grad(gen, warm, x_batch, eps_r)

        noise = ChainNoise(config.seed, (CHAIN_NOISE, b), np.arange(n))
        samples, trace = run_chain(gen, x_batch, z0, config.sampler_config(), noise)
        logp_final = gen.log_joint_terms(x_batch, samples[-1]).data
        kept = samples[int(config.burn_in * len(samples)):]

        acc = GradAccumulator.zeros(gen.params)
        for z in kept:
            accumulate_theta_grad(acc, gen, x_batch, z)
        grad_theta = acc.grads.scaled(-1.0 / (acc.count * n))

        forward = None
        if objective in (WarmStartObjective.FORWARD, WarmStartObjective.JEFFREYS):
            forward = forward_kl_grad(warm, x_batch, kept)
    except ChainDivergenceError as exc:
        raise TrainingStepError(b, str(exc)) from exc
    except NumericFaultError as exc:
        raise TrainingStepError(b, str(exc)) from exc

    if objective == WarmStartObjective.FORWARD:
        warm_loss, grad_phi = forward[0] / n, forward[1].scaled(1.0 / n)
    elif objective == WarmStartObjective.REVERSE:
        warm_loss, grad_phi = reverse[0] / n, reverse[1].scaled(1.0 / n)
    elif objective == WarmStartObjective.JEFFREYS:
        warm_loss = 0.5 * (forward[0] + reverse[0]) / n
        grad_phi = jeffreys_grad(forward[1], reverse[1]).scaled(1.0 / n)
    else:
        warm_loss, grad_phi = float("nan"), None

    grad_theta, norm_theta = clip_by_global_norm(grad_theta, config.grad_clip)
    if grad_phi is not None:
        grad_phi, norm_phi = clip_by_global_norm(grad_phi, config.grad_clip)
    else:
        norm_phi = 0.0
    if not grad_theta.is_finite() or (grad_phi is not None and not grad_phi.is_finite()):
        raise TrainingStepError(b, "non-finite parameter gradient")

    theta, adam_theta = adam_update(gen.params, grad_theta, state.adam_theta, config.learning_rate)
    if grad_phi is not None:
        phi, adam_phi = adam_update(warm.params, grad_phi, state.adam_phi, config.learning_rate)
    else:
        phi, adam_phi = warm.params, state.adam_phi

    metrics = StepMetrics(
        batch_index=b,
        elbo=acc.value_total / (acc.count * n),
        logp_mean=float(np.mean(logp_final)),
        grad_norm_theta=norm_theta,
        grad_norm_phi=norm_phi,
        logp_init=float(np.mean(trace.logp[0])),
        grad_norm_init=float(np.mean(trace.grad_norm[0])),
        warm_loss=float(warm_loss),
        prior_init=from_prior,
        floor_hits=FLOOR_STATS.since(floor_mark),
        trace=trace,
        wall_ms=1000.0 * (time.perf_counter() - start),
    )
    return state.with_params(theta, phi, adam_theta, adam_phi), metrics


def vae_train_step(state: TrainState, x_batch: np.ndarray, config: TrainConfig) -> Tuple[TrainState, StepMetrics]:
    """Reparameterized-ELBO step with a joint Adam update of theta and phi"""
    start = time.perf_counter()
    x_batch = np.atleast_2d(np.asarray(x_batch, dtype=np.float64))
    if x_batch.shape[0] == 0:
        raise ValueError("vae_train_step: empty batch")
    n = x_batch.shape[0]
    gen, warm, b = state.gen, state.warm, state.batch_index
    floor_mark = FLOOR_STATS.logpmf_floor_hits

    eps0 = stream_generator(config.seed, WARM_START, b).standard_normal((n, gen.latent_dim))
    eps = _reverse_eps(eps0, config.reverse_samples, config.seed, b)

    def loss(joint: ParamSet):
        return negative_elbo(gen, warm, x_batch, eps,
                             theta=joint.subset("decoder."), phi=joint.subset("encoder.")) / n

    try:
        value, grads = value_and_grad(loss, gen.params.merged(warm.params))
    except NumericFaultError as exc:
        raise TrainingStepError(b, str(exc)) from exc
    if not grads.is_finite():
        raise TrainingStepError(b, "non-finite parameter gradient")

    grad_theta, norm_theta = clip_by_global_norm(grads.subset("decoder."), config.grad_clip)
    grad_phi, norm_phi = clip_by_global_norm(grads.subset("encoder."), config.grad_clip)
    theta, adam_theta = adam_update(gen.params, grad_theta, state.adam_theta, config.learning_rate)
    phi, adam_phi = adam_update(warm.params, grad_phi, state.adam_phi, config.learning_rate)

    metrics = StepMetrics(
        batch_index=b,
        elbo=-value,
        logp_mean=float("nan"),
        grad_norm_theta=norm_theta,
        grad_norm_phi=norm_phi,
        warm_loss=value,
        floor_hits=FLOOR_STATS.since(floor_mark),
        wall_ms=1000.0 * (time.perf_counter() - start),
    )
    return state.with_params(theta, phi, adam_theta, adam_phi), metrics


def train_step(state: TrainState, x_batch: np.ndarray, config: TrainConfig) -> Tuple[TrainState, StepMetrics]:
    if config.method == TrainingMethod.VAE:
        return vae_train_step(state, x_batch, config)
    return lpc_train_step(state, x_batch, config)


# ============================================================================
# CHECKPOINTS
# ============================================================================

def save_training_state(path: Union[str, Path], state: TrainState, meta: Optional[dict] = None) -> Path:
    """Parameters, Adam moments and counters in one checkpoint file"""
    arrays: Dict[str, np.ndarray] = {}
    arrays.update(state.gen.params.arrays())
    arrays.update(state.warm.params.arrays())
    for tag, adam in (("adam_theta", state.adam_theta), ("adam_phi", state.adam_phi)):
        arrays.update({f"{tag}.m.{k}": v for k, v in adam.m.arrays().items()})
        arrays.update({f"{tag}.v.{k}": v for k, v in adam.v.arrays().items()})
    meta = dict(meta or {})
    meta.update({
        "batch_index": state.batch_index,
        "obs_dim": state.gen.obs_dim,
        "adam_theta_step": state.adam_theta.step,
        "adam_phi_step": state.adam_phi.step,
    })
    return save_checkpoint(path, arrays, meta)


def _restore_params(template: ParamSet, arrays: Dict[str, np.ndarray], prefix: str = "") -> ParamSet:
    missing = [name for name in template if prefix + name not in arrays]
    if missing:
        raise KeyError(f"checkpoint lacks parameters: {', '.join(missing[:5])}")
    return ParamSet.from_arrays({name: arrays[prefix + name] for name in template})


def load_training_state(path: Union[str, Path],
                        model_config: Optional[ModelConfig] = None,
                        train_config: Optional[TrainConfig] = None) -> Tuple[TrainState, dict]:
    """
    Rebuild a TrainState from a checkpoint written by `save_training_state`

    Model and train configs default to the ones recorded in the checkpoint.
    """
    arrays, meta = load_checkpoint(path)
    model_config = model_config or ModelConfig.from_dict(meta["model"])
    train_config = train_config or TrainConfig.from_dict(meta["train"])
    gen, warm = model_config.build(int(meta["obs_dim"]), np.random.default_rng(0))
    gen = replace(gen, params=_restore_params(gen.params, arrays))
    warm = replace(warm, params=_restore_params(warm.params, arrays))

    state = TrainState.initialize(gen, warm, train_config)
    state.adam_theta.m = _restore_params(gen.params, arrays, "adam_theta.m.")
    state.adam_theta.v = _restore_params(gen.params, arrays, "adam_theta.v.")
    state.adam_phi.m = _restore_params(warm.params, arrays, "adam_phi.m.")
    state.adam_phi.v = _restore_params(warm.params, arrays, "adam_phi.v.")
    state.adam_theta.step = int(meta["adam_theta_step"])
    state.adam_phi.step = int(meta["adam_phi_step"])
    state.batch_index = int(meta["batch_index"])
    return state, meta


# ============================================================================
# FIT
# ============================================================================

METRIC_COLUMNS = ["step", "epoch", "elbo", "logp_mean", "grad_norm_theta", "grad_norm_phi", "wall_ms",
                  "logp_init", "grad_norm_init", "warm_loss", "prior_init", "diverged", "floor_hits"]


@dataclass
class RunArtifacts:
    """Everything `fit` leaves behind"""
    output_dir: Optional[Path]
    state: TrainState
    metrics: pd.DataFrame
    evaluations: pd.DataFrame
    checkpoints: List[Path] = field(default_factory=list)
    traces: List[StepTrace] = field(default_factory=list)

    @property
    def final_checkpoint(self) -> Optional[Path]:
        return self.checkpoints[-1] if self.checkpoints else None


def evaluate_state(state: TrainState, data: np.ndarray, config: "ExperimentConfig", epoch: int) -> dict:
    """MMD and density/coverage between ancestral samples and a fixed data subset"""
    from evaluation import density_coverage, median_bandwidth, mmd_rbf

    count = min(config.eval_samples, data.shape[0])
    real = data[:count]
    fake = state.gen.ancestral_sample(count, stream_generator(config.train.seed, ANCESTRAL, epoch))
    row = {"epoch": epoch, "step": state.batch_index, "n_real": count, "n_fake": count}
    if "mmd" in config.metrics:
        row["mmd"] = mmd_rbf(real, fake, median_bandwidth(real))
    if {"density", "coverage"} & set(config.metrics) and count > config.density_k:
        density, coverage = density_coverage(real, fake, config.density_k)
        row["density"], row["coverage"] = density, coverage
    return row


def _checkpoint_meta(config: "ExperimentConfig", epoch: int) -> dict:
    return {"epoch": epoch, "train": config.train.to_dict(), "model": config.model.to_dict()}


def fit(dataset: Union[Dataset, np.ndarray],
        config: "ExperimentConfig",
        output_dir: Optional[Union[str, Path]] = None,
        resume_from: Optional[Union[str, Path]] = None) -> RunArtifacts:
    """
    Train for `config.train.epochs` epochs

    Writes (under `output_dir`, defaulting to `config.output_dir`; nothing is
    written when both are empty):
    - epoch_XXXX.ckpt after every epoch, epoch_0000.ckpt before the first one
    - metrics.csv, one row per batch
    - traces.csv, the chain trace of each epoch's first batch
    - eval.csv when `config.eval_every` > 0

    Resuming replays the same shuffles and random streams, so the result
    matches an uninterrupted run bit for bit.
    """
    train = config.train
    data = dataset.data if isinstance(dataset, Dataset) else np.atleast_2d(np.asarray(dataset, dtype=np.float64))
    if data.shape[0] == 0:
        raise ValueError("fit: dataset has no rows")
    out = Path(output_dir) if output_dir else (Path(config.output_dir) if config.output_dir else None)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    n_batches = math.ceil(data.shape[0] / train.batch_size)

    checkpoints: List[Path] = []
    if resume_from is not None:
        state, _ = load_training_state(resume_from, config.model, train)
        logger.info("Resumed from %s at batch %d", resume_from, state.batch_index)
    else:
        gen, warm = config.model.build(data.shape[1], stream_generator(train.seed, INIT))
        state = TrainState.initialize(gen, warm, train)
        if out is not None:
            checkpoints.append(save_training_state(out / "epoch_0000.ckpt", state, _checkpoint_meta(config, 0)))

    rows: List[dict] = []
    eval_rows: List[dict] = []
    traces: List[StepTrace] = []
    trace_frames: List[pd.DataFrame] = []
    if out is not None and resume_from is not None:
        rows, eval_rows, trace_frames = _previous_logs(out, state.batch_index)

    start_epoch, offset = divmod(state.batch_index, n_batches)
    for epoch in range(start_epoch, train.epochs):
        epoch_start = time.perf_counter()
        for i, x_batch in enumerate(iterate_batches(data, train.batch_size, train.seed, epoch)):
            if epoch == start_epoch and i < offset:
                continue
            try:
                state, metrics = train_step(state, x_batch, train)
            except TrainingStepError as exc:
                logger.warning("Skipping batch %d (epoch %d): %s", exc.batch_index, epoch + 1, exc)
                metrics = StepMetrics(batch_index=state.batch_index, elbo=float("nan"), logp_mean=float("nan"),
                                      grad_norm_theta=float("nan"), grad_norm_phi=float("nan"), diverged=True)
                state = replace(state, batch_index=state.batch_index + 1)
            rows.append({"step": metrics.batch_index, "epoch": epoch + 1, **metrics.row()})
            if i == 0 and metrics.trace is not None:
                traces.append(metrics.trace)
                trace_frames.append(metrics.trace.to_frame().assign(epoch=epoch + 1))

        epoch_rows = [r for r in rows if r["epoch"] == epoch + 1]
        logger.info("Epoch %d/%d: elbo %.4f, log p %.4f, %d probability floor hits (%.1fs)", epoch + 1, train.epochs,
                    np.nanmean([r["elbo"] for r in epoch_rows]), np.nanmean([r["logp_mean"] for r in epoch_rows]),
                    sum(r["floor_hits"] for r in epoch_rows), time.perf_counter() - epoch_start)

        if config.eval_every and (epoch + 1) % config.eval_every == 0:
            eval_rows.append(evaluate_state(state, data, config, epoch + 1))
        if out is not None:
            path = save_training_state(out / f"epoch_{epoch + 1:04d}.ckpt", state, _checkpoint_meta(config, epoch + 1))
            checkpoints.append(path)
            logger.info("Checkpoint written: %s", path)

    metrics_frame = pd.DataFrame(rows, columns=METRIC_COLUMNS)
    eval_frame = pd.DataFrame(eval_rows)
    if out is not None:
        _write_csv(metrics_frame, out / "metrics.csv")
        if trace_frames:
            _write_csv(pd.concat(trace_frames, ignore_index=True), out / "traces.csv")
        if eval_rows:
            _write_csv(eval_frame, out / "eval.csv")
    return RunArtifacts(output_dir=out, state=state, metrics=metrics_frame, evaluations=eval_frame,
                        checkpoints=checkpoints, traces=traces)


def _write_csv(frame: pd.DataFrame, path: Path):
    try:
        frame.to_csv(path, index=False)
    except OSError as exc:
        raise OSError(f"could not write {path}: {exc}") from exc


def _previous_logs(out: Path, batch_index: int) -> Tuple[List[dict], List[dict], List[pd.DataFrame]]:
    """Log rows of an interrupted run up to `batch_index`"""
    rows, eval_rows, trace_frames = [], [], []
    if (out / "metrics.csv").exists():
        previous = pd.read_csv(out / "metrics.csv", float_precision="round_trip")
        rows = previous[previous["step"] < batch_index].to_dict("records")
    if (out / "eval.csv").exists():
        previous = pd.read_csv(out / "eval.csv", float_precision="round_trip")
        eval_rows = previous[previous["step"] <= batch_index].to_dict("records")
    if (out / "traces.csv").exists() and rows:
        previous = pd.read_csv(out / "traces.csv", float_precision="round_trip")
        last_epoch = max(r["epoch"] for r in rows)
        trace_frames = [previous[previous["epoch"] <= last_epoch]]
    return rows, eval_rows, trace_frames
