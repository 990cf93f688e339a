"""
Unadjusted Langevin Sampling of Latent States

Features:
- Plain ULA: z' = z + gamma * grad log p(x, z) + sqrt(2 gamma) * eta
- Adam-style preconditioned ULA with bias-corrected second moments
- Noise-free mode (noise_scale = 0) recovering classic predictive-coding inference
- Per-chain counter-based (Philox) random streams for reproducible batches
- Step traces: log p, delta log p and gradient norm per chain and step

Each step makes exactly one gradient evaluation of log p(x, z | theta).
The trace entry for step t describes the state the drift was evaluated at,
so step 0 is the chain's initial state.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from autodiff import value_and_grad
from models import GenerativeModel
from random_streams import ChainNoise

logger = logging.getLogger(__name__)


# ============================================================================
# CONFIGURATION & STATE
# ============================================================================

class NoiseCovariance(Enum):
    INVERSE_MHAT = "inverse_mhat"  # diffusion scaled like the drift, 2*gamma/mhat
    MHAT = "mhat"                  # literal reading, 2*gamma*mhat


MHAT_FLOOR = 1e-8


@dataclass
class SamplerConfig:
    """Langevin sampler hyperparameters"""
    step_size: float = 0.1
    precond_decay: float = 0.99
    steps: int = 300
    precond_enabled: bool = True
    noise_scale: float = 1.0
    noise_cov: NoiseCovariance = NoiseCovariance.INVERSE_MHAT

    def __post_init__(self):
        if isinstance(self.noise_cov, str):
            self.noise_cov = NoiseCovariance(self.noise_cov)
        if self.step_size <= 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if not 0.0 <= self.precond_decay < 1.0:
            raise ValueError(f"precond_decay must be in [0, 1), got {self.precond_decay}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.noise_scale < 0:
            raise ValueError(f"noise_scale must be >= 0, got {self.noise_scale}")


@dataclass
class ChainState:
    """
    Mutable state of a batch of Langevin chains

    `logp` and `grad_norm` hold the diagnostics of the most recent drift
    evaluation (at the state before the last step).
    """
    z: np.ndarray
    m: np.ndarray
    t: int = 0
    logp: Optional[np.ndarray] = None
    grad_norm: Optional[np.ndarray] = None

    @classmethod
    def start(cls, z0: np.ndarray) -> "ChainState":
        z0 = np.atleast_2d(np.asarray(z0, dtype=np.float64))
        if not np.isfinite(z0).all():
            raise ValueError("initial chain state must be finite")
        return cls(z=z0.copy(), m=np.zeros_like(z0), t=0)


@dataclass
class StepTrace:
    """Per-step chain diagnostics, arrays of shape (steps, chains)"""
    logp: np.ndarray
    delta_logp: np.ndarray
    grad_norm: np.ndarray
    grad_evaluations: int = 0
    chain_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def steps(self) -> np.ndarray:
        return np.arange(self.logp.shape[0])

    def __len__(self) -> int:
        return self.logp.shape[0]

    @classmethod
    def from_records(cls, logps: Sequence[np.ndarray], grad_norms: Sequence[np.ndarray],
                     chain_ids: Optional[np.ndarray] = None) -> "StepTrace":
        logp = np.array(logps, dtype=np.float64).reshape(len(logps), -1)
        grad_norm = np.array(grad_norms, dtype=np.float64).reshape(len(grad_norms), -1)
        delta = np.zeros_like(logp)
        if len(logp) > 1:
            delta[1:] = logp[1:] - logp[:-1]
        if chain_ids is None:
            chain_ids = np.arange(logp.shape[1] if logp.ndim == 2 else 0)
        return cls(logp=logp, delta_logp=delta, grad_norm=grad_norm,
                   grad_evaluations=len(logps), chain_ids=np.asarray(chain_ids))

    def to_frame(self) -> pd.DataFrame:
        """Long format: one row per (step, chain)"""
        n_steps, n_chains = self.logp.shape
        return pd.DataFrame({
            "step": np.repeat(self.steps, n_chains),
            "logp": self.logp.reshape(-1),
            "delta_logp": self.delta_logp.reshape(-1),
            "grad_norm": self.grad_norm.reshape(-1),
            "chain_id": np.tile(self.chain_ids, n_steps),
        })

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        return path


class ChainDivergenceError(ArithmeticError):
    """A Langevin step produced a non-finite latent state"""

    def __init__(self, step: int, trace: Optional[StepTrace] = None):
        self.step = step
        self.trace = trace
        super().__init__(f"Langevin chain diverged at step {step}")


RandomSource = Union[np.random.Generator, ChainNoise]


# ============================================================================
# STEPS
# ============================================================================

def log_joint_gradient(model: GenerativeModel, x: np.ndarray, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(grad_z log p(x, z | theta), per-example log p); one gradient evaluation"""
    per_example = {}

    def objective(z_leaf):
        terms = model.log_joint_terms(x, z_leaf)
        per_example["logp"] = terms.data
        return terms.sum()

    _, (grad,) = value_and_grad(objective, [z])
    return grad.data, per_example["logp"]


def langevin_update(z: np.ndarray,
                    grad: np.ndarray,
                    step_size: float,
                    eta: np.ndarray,
                    mhat: Optional[np.ndarray] = None,
                    noise_scale: float = 1.0,
                    noise_cov: NoiseCovariance = NoiseCovariance.INVERSE_MHAT) -> np.ndarray:
    """z + gamma * g / mhat + noise, with mhat = 1 for the plain chain"""
    if mhat is None:
        mhat = np.ones_like(z)
    drift = step_size * grad / mhat
    if noise_cov == NoiseCovariance.MHAT:
        noise_std = np.sqrt(2.0 * step_size * mhat)
    else:
        noise_std = np.sqrt(2.0 * step_size / mhat)
    return z + drift + noise_scale * noise_std * eta


def _finished(state: ChainState, z_next: np.ndarray, m_next: np.ndarray,
              logp: np.ndarray, grad: np.ndarray) -> ChainState:
    step = state.t + 1
    if not np.isfinite(z_next).all():
        raise ChainDivergenceError(step)
    return ChainState(z=z_next, m=m_next, t=step, logp=logp,
                      grad_norm=np.linalg.norm(grad, axis=1))


def ula_step(model: GenerativeModel,
             x: np.ndarray,
             state: ChainState,
             step_size: float,
             rng: RandomSource,
             noise_scale: float = 1.0) -> ChainState:
    """One Euler-Maruyama step of the overdamped Langevin diffusion"""
    if step_size <= 0:
        raise ValueError(f"step_size must be positive, got {step_size}")
    grad, logp = log_joint_gradient(model, x, state.z)
    eta = rng.standard_normal(state.z.shape)
    z_next = langevin_update(state.z, grad, step_size, eta, noise_scale=noise_scale)
    return _finished(state, z_next, state.m, logp, grad)


def preconditioner(m: np.ndarray, decay: float, t: int) -> np.ndarray:
    """Bias-corrected sqrt(m / (1 - decay^t)), floored at MHAT_FLOOR"""
    mhat = np.sqrt(m / (1.0 - decay ** t))
    floored = mhat < MHAT_FLOOR
    if floored.any():
        logger.debug("Preconditioner: %d coordinates floored at %g (step %d)", int(floored.sum()), MHAT_FLOOR, t)
        mhat = np.where(floored, MHAT_FLOOR, mhat)
    return mhat


def precond_ula_step(model: GenerativeModel,
                     x: np.ndarray,
                     state: ChainState,
                     step_size: float,
                     decay: float,
                     rng: RandomSource,
                     noise_scale: float = 1.0,
                     noise_cov: NoiseCovariance = NoiseCovariance.INVERSE_MHAT) -> ChainState:
    """
    One preconditioned Langevin step

    m' = decay * m + (1 - decay) * g^2, mhat = sqrt(m' / (1 - decay^(t+1))).
    Drift is gamma * g / mhat and the noise std per coordinate sqrt(2 gamma / mhat)
    (or sqrt(2 gamma * mhat) under NoiseCovariance.MHAT).
    """
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"decay must be in [0, 1), got {decay}")
    grad, logp = log_joint_gradient(model, x, state.z)
    t_next = state.t + 1
    m_next = decay * state.m + (1.0 - decay) * grad * grad
    mhat = preconditioner(m_next, decay, t_next)
    eta = rng.standard_normal(state.z.shape)
    z_next = langevin_update(state.z, grad, step_size, eta, mhat=mhat,
                             noise_scale=noise_scale, noise_cov=noise_cov)
    return _finished(state, z_next, m_next, logp, grad)


# ============================================================================
# CHAINS
# ============================================================================

def run_chain(model: GenerativeModel,
              x: np.ndarray,
              z0: np.ndarray,
              config: SamplerConfig,
              rng: RandomSource,
              chain_ids: Optional[Sequence[int]] = None) -> Tuple[List[np.ndarray], StepTrace]:
    """
    Run `config.steps` Langevin steps from z0

    Returns the post-initialization states z(1)..z(T) in order and the step
    trace. The preconditioner accumulator starts at zero for every call.
    """
    state = ChainState.start(z0)
    if chain_ids is None:
        chain_ids = getattr(rng, "chain_ids", np.arange(state.z.shape[0]))
    samples: List[np.ndarray] = []
    logps: List[np.ndarray] = []
    grad_norms: List[np.ndarray] = []

    for _ in range(config.steps):
        try:
            if config.precond_enabled:
                state = precond_ula_step(model, x, state, config.step_size, config.precond_decay, rng,
                                         noise_scale=config.noise_scale, noise_cov=config.noise_cov)
            else:
                state = ula_step(model, x, state, config.step_size, rng, noise_scale=config.noise_scale)
        except ChainDivergenceError as exc:
            partial = StepTrace.from_records(logps, grad_norms, chain_ids) if logps else None
            raise ChainDivergenceError(exc.step, partial) from exc
        samples.append(state.z)
        logps.append(state.logp)
        grad_norms.append(state.grad_norm)

    return samples, StepTrace.from_records(logps, grad_norms, chain_ids)
