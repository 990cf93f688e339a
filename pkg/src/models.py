"""
Latent-Gaussian Generative and Warm-Start Models
p(x, z | theta) = p(z) p(x | z, theta) and q(z | x, phi)

Features:
- MLP decoder/encoder stacks with SiLU activations
- Isotropic Gaussian prior with configurable variance
- Diagonal-Gaussian and discretized-Gaussian (256-level) output likelihoods
- Decoder scale learned globally per channel, per output dimension, or fixed
- Encoder heads producing mean and softplus(beta=0.3) scale
- Reparameterized sampling, analytic KL to the prior, ancestral sampling

Shape convention: observations are (batch, obs_dim), latents (batch, latent_dim).
Single examples given as 1-D arrays are promoted to a batch of one.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

from autodiff import (
    ParamSet,
    ShapeMismatchError,
    Tensor,
    TensorLike,
    as_tensor,
    broadcast_to,
    discretized_gaussian_log_mass,
    gaussian_log_density,
    log,
    matmul,
    silu,
    softplus,
    square,
)

logger = logging.getLogger(__name__)


# ============================================================================
# ENUMS & CONSTANTS
# ============================================================================

class Likelihood(Enum):
    DIAGONAL_GAUSSIAN = "diagonal-gaussian"
    DISCRETIZED_GAUSSIAN = "discretized-gaussian"


class DecoderScale(Enum):
    GLOBAL = "global"      # one learned scalar per channel
    PER_DIM = "per_dim"    # decoder head emits a scale per output dimension
    FIXED = "fixed"        # constant, not learned


SOFTPLUS_BETA = 0.3
SCALE_FLOOR = 1e-4
PIXEL_LEVELS = 256
BIN_HALF_WIDTH = 1.0 / (2 * (PIXEL_LEVELS - 1))
LOGPMF_FLOOR = 1e-12


@dataclass
class FloorStats:
    """Running count of discretized-Gaussian bins clamped at the probability floor"""
    logpmf_floor_hits: int = 0

    def since(self, mark: int) -> int:
        """Hits recorded after an earlier reading `mark`"""
        return self.logpmf_floor_hits - mark


FLOOR_STATS = FloorStats()


# ============================================================================
# MLP HELPERS
# ============================================================================

def init_mlp(rng: np.random.Generator,
             sizes: Sequence[int],
             prefix: str,
             zero_last: bool = False) -> ParamSet:
    """Fan-in scaled uniform init; `zero_last` zeroes the final layer"""
    params = ParamSet()
    n_layers = len(sizes) - 1
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / math.sqrt(fan_in)
        if zero_last and i == n_layers - 1:
            weight = np.zeros((fan_in, fan_out))
            bias = np.zeros(fan_out)
        else:
            weight = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            bias = rng.uniform(-bound, bound, size=fan_out)
        params.add(f"{prefix}.{i}.weight", weight)
        params.add(f"{prefix}.{i}.bias", bias)
    return params


def mlp_forward(params: ParamSet, prefix: str, x: TensorLike, n_layers: int) -> Tensor:
    """Affine layers joined by SiLU; the last layer is left linear"""
    h = as_tensor(x)
    for i in range(n_layers):
        h = matmul(h, params[f"{prefix}.{i}.weight"]) + params[f"{prefix}.{i}.bias"]
        if i < n_layers - 1:
            h = silu(h)
    return h


def inverse_softplus(value: float, beta: float = SOFTPLUS_BETA) -> float:
    return math.log(math.expm1(beta * value)) / beta


def _as_batch(value: TensorLike, dim: int, what: str) -> Tensor:
    t = as_tensor(value)
    if t.ndim == 1:
        t = t.reshape(1, t.shape[0])
    if t.ndim != 2 or t.shape[1] != dim:
        raise ShapeMismatchError(f"{what}: expected (batch, {dim}), got {t.shape}")
    return t


# ============================================================================
# LIKELIHOODS
# ============================================================================

@dataclass
class LikelihoodParams:
    """Per-dimension mean and (strictly positive) scale of p(x | z)"""
    mean: Tensor
    scale: Tensor


def quantize_to_grid(x: np.ndarray) -> np.ndarray:
    """Snap values in [0, 1] to the 256-level pixel grid"""
    levels = PIXEL_LEVELS - 1
    return np.round(np.clip(x, 0.0, 1.0) * levels) / levels


def discretized_gaussian_log_terms(x: np.ndarray, mean: TensorLike, scale: TensorLike) -> Tensor:
    """Per-pixel log mass of the 256-level discretized Gaussian"""
    out, floored = discretized_gaussian_log_mass(
        x, mean, scale, half_width=BIN_HALF_WIDTH, floor=LOGPMF_FLOOR)
    if floored:
        FLOOR_STATS.logpmf_floor_hits += floored
        logger.debug("Discretized Gaussian: %d bins clamped at log(%g)", floored, LOGPMF_FLOOR)
    return out


def discretized_gaussian_logpmf(x: np.ndarray, mean: TensorLike, scale: TensorLike) -> Tensor:
    """
    Summed log-probability of x on the 256-level grid (values k/255)

    Each pixel contributes log(Phi((x + h - mu)/sigma) - Phi((x - h - mu)/sigma))
    with h = 1/510; the lowest bin extends to -inf and the highest to +inf.
    """
    return discretized_gaussian_log_terms(x, mean, scale).sum()


# ============================================================================
# GENERATIVE MODEL
# ============================================================================

@dataclass
class GenerativeModel:
    """
    Decoder p(x | z, theta) with an isotropic Gaussian prior p(z)

    The decoder maps z through an MLP to the likelihood mean. The scale is
    either one learned scalar per channel (GLOBAL), a second decoder head
    (PER_DIM) or a constant (FIXED); learned scales pass through
    softplus(beta=0.3) and are floored at SCALE_FLOOR.
    """
    latent_dim: int
    obs_dim: int
    hidden: Tuple[int, ...] = (256, 256)
    prior_variance: float = 1.0
    likelihood: Likelihood = Likelihood.DIAGONAL_GAUSSIAN
    scale_mode: DecoderScale = DecoderScale.GLOBAL
    fixed_scale: float = 1.0
    obs_channels: int = 1
    params: ParamSet = field(default_factory=ParamSet)

    def __post_init__(self):
        if self.prior_variance <= 0:
            raise ValueError(f"prior_variance must be positive, got {self.prior_variance}")
        if self.latent_dim < 1 or self.obs_dim < 1:
            raise ValueError(f"latent_dim and obs_dim must be >= 1, got {self.latent_dim}, {self.obs_dim}")
        if self.obs_dim % self.obs_channels != 0:
            raise ValueError(f"obs_dim {self.obs_dim} not divisible by obs_channels {self.obs_channels}")
        self.hidden = tuple(self.hidden)
        self._channel_map = np.zeros((self.obs_channels, self.obs_dim))
        self._channel_map[np.arange(self.obs_dim) % self.obs_channels, np.arange(self.obs_dim)] = 1.0

    @classmethod
    def initialize(cls,
                   rng: np.random.Generator,
                   latent_dim: int,
                   obs_dim: int,
                   hidden: Sequence[int] = (256, 256),
                   init_scale: float = 1.0,
                   **kwargs) -> "GenerativeModel":
        model = cls(latent_dim=latent_dim, obs_dim=obs_dim, hidden=tuple(hidden), **kwargs)
        head = 2 * obs_dim if model.scale_mode == DecoderScale.PER_DIM else obs_dim
        params = init_mlp(rng, [latent_dim, *model.hidden, head], "decoder")
        if model.scale_mode == DecoderScale.GLOBAL:
            raw = inverse_softplus(max(init_scale - SCALE_FLOOR, 1e-6))
            params.add("decoder.scale_raw", np.full((1, model.obs_channels), raw))
        model.params = params
        return model

    @classmethod
    def linear_gaussian(cls,
                        weight: np.ndarray,
                        bias: np.ndarray,
                        sigma: float,
                        prior_variance: float = 1.0) -> "GenerativeModel":
        """Decoder mean W z + b with fixed scale sigma; W has shape (obs_dim, latent_dim)"""
        weight = np.asarray(weight, dtype=np.float64)
        obs_dim, latent_dim = weight.shape
        params = ParamSet()
        params.add("decoder.0.weight", weight.T.copy())
        params.add("decoder.0.bias", np.asarray(bias, dtype=np.float64).reshape(obs_dim))
        return cls(latent_dim=latent_dim, obs_dim=obs_dim, hidden=(), prior_variance=prior_variance,
                   likelihood=Likelihood.DIAGONAL_GAUSSIAN, scale_mode=DecoderScale.FIXED,
                   fixed_scale=sigma, params=params)

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    # ------------------------------------------------------------------
    # Densities
    # ------------------------------------------------------------------
    def decode(self, z: TensorLike, params: Optional[ParamSet] = None) -> LikelihoodParams:
        params = self.params if params is None else params
        z = _as_batch(z, self.latent_dim, "decode")
        out = mlp_forward(params, "decoder", z, self.n_layers)

        if self.scale_mode == DecoderScale.PER_DIM:
            mean = out[:, :self.obs_dim]
            scale = softplus(out[:, self.obs_dim:], beta=SOFTPLUS_BETA) + SCALE_FLOOR
        elif self.scale_mode == DecoderScale.GLOBAL:
            mean = out
            per_channel = softplus(params["decoder.scale_raw"], beta=SOFTPLUS_BETA)
            scale = broadcast_to(matmul(per_channel, self._channel_map) + SCALE_FLOOR, mean.shape)
        else:
            mean = out
            scale = broadcast_to(np.full((1, self.obs_dim), self.fixed_scale), mean.shape)
        return LikelihoodParams(mean=mean, scale=scale)

    def log_prior_terms(self, z: TensorLike) -> Tensor:
        z = _as_batch(z, self.latent_dim, "log_prior")
        prior_scale = math.sqrt(self.prior_variance)
        return gaussian_log_density(z, 0.0, prior_scale).sum(axis=1)

    def log_likelihood_terms(self, x: np.ndarray, lik: LikelihoodParams) -> Tensor:
        if self.likelihood == Likelihood.DISCRETIZED_GAUSSIAN:
            return discretized_gaussian_log_terms(x, lik.mean, lik.scale).sum(axis=1)
        return gaussian_log_density(x, lik.mean, lik.scale).sum(axis=1)

    def log_joint_terms(self, x: TensorLike, z: TensorLike, params: Optional[ParamSet] = None) -> Tensor:
        """Per-example log p(x_i, z_i | theta), shape (batch,)"""
        x_data = _as_batch(x, self.obs_dim, "log_joint").data
        z = _as_batch(z, self.latent_dim, "log_joint")
        if z.shape[0] != x_data.shape[0]:
            raise ShapeMismatchError(f"log_joint: {x_data.shape[0]} observations vs {z.shape[0]} latents")
        lik = self.decode(z, params)
        return self.log_prior_terms(z) + self.log_likelihood_terms(x_data, lik)

    def log_joint(self, x: TensorLike, z: TensorLike, params: Optional[ParamSet] = None) -> Tensor:
        """log p(z) + log p(x | z, theta) summed over the batch, normalization included"""
        return self.log_joint_terms(x, z, params).sum()

    # ------------------------------------------------------------------
    # Sampling
    # ------------------------------------------------------------------
    def sample_prior(self, count: int, rng: np.random.Generator) -> np.ndarray:
        return math.sqrt(self.prior_variance) * rng.standard_normal((count, self.latent_dim))

    def ancestral_sample(self, count: int, rng: np.random.Generator, return_mean: bool = False) -> np.ndarray:
        """z ~ p(z), x ~ p(x | z); `return_mean` gives decoder means instead of draws"""
        if count < 0:
            raise ValueError(f"count must be >= 0, got {count}")
        if count == 0:
            return np.zeros((0, self.obs_dim))
        z = self.sample_prior(count, rng)
        lik = self.decode(z)
        mean = np.broadcast_to(lik.mean.data, (count, self.obs_dim))
        if return_mean:
            x = np.array(mean)
        else:
            scale = np.broadcast_to(lik.scale.data, (count, self.obs_dim))
            x = mean + scale * rng.standard_normal((count, self.obs_dim))
        if self.likelihood == Likelihood.DISCRETIZED_GAUSSIAN:
            x = quantize_to_grid(x) if not return_mean else np.clip(x, 0.0, 1.0)
        return x


# ============================================================================
# WARM-START MODEL
# ============================================================================

@dataclass
class WarmStartModel:
    """
    Amortized diagonal-Gaussian q(z | x, phi)

    The encoder head has 2 * latent_dim outputs: the mean and a pre-scale
    mapped through softplus(beta=0.3) plus SCALE_FLOOR, so sigma stays
    positive however negative the pre-scale gets. The final layer starts at zero.
    """
    latent_dim: int
    obs_dim: int
    hidden: Tuple[int, ...] = (256, 256)
    softplus_beta: float = SOFTPLUS_BETA
    params: ParamSet = field(default_factory=ParamSet)

    def __post_init__(self):
        self.hidden = tuple(self.hidden)

    @classmethod
    def initialize(cls,
                   rng: np.random.Generator,
                   latent_dim: int,
                   obs_dim: int,
                   hidden: Sequence[int] = (256, 256),
                   **kwargs) -> "WarmStartModel":
        model = cls(latent_dim=latent_dim, obs_dim=obs_dim, hidden=tuple(hidden), **kwargs)
        model.params = init_mlp(rng, [obs_dim, *model.hidden, 2 * latent_dim], "encoder", zero_last=True)
        return model

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    def encode(self, x: TensorLike, params: Optional[ParamSet] = None) -> Tuple[Tensor, Tensor]:
        params = self.params if params is None else params
        x = _as_batch(x, self.obs_dim, "encode")
        out = mlp_forward(params, "encoder", x, self.n_layers)
        mu = out[:, :self.latent_dim]
        sigma = softplus(out[:, self.latent_dim:], beta=self.softplus_beta) + SCALE_FLOOR
        return mu, sigma

    def log_q_terms(self, x: TensorLike, z: TensorLike, params: Optional[ParamSet] = None) -> Tensor:
        mu, sigma = self.encode(x, params)
        z = _as_batch(z, self.latent_dim, "log_q")
        return gaussian_log_density(z, mu, sigma).sum(axis=1)

    def log_q(self, x: TensorLike, z: TensorLike, params: Optional[ParamSet] = None) -> Tensor:
        """Diagonal-Gaussian log q(z | x, phi) summed over the batch"""
        return self.log_q_terms(x, z, params).sum()

    def reparam_sample(self, x: TensorLike, eps: TensorLike, params: Optional[ParamSet] = None) -> Tensor:
        """z = mu + sigma * eps, differentiable in phi"""
        mu, sigma = self.encode(x, params)
        eps = as_tensor(eps)
        if eps.shape[-1] != self.latent_dim:
            raise ShapeMismatchError(f"reparam_sample: eps has shape {eps.shape}, latent_dim {self.latent_dim}")
        return mu + sigma * eps

    def kl_to_prior(self, x: TensorLike, prior_variance: float, params: Optional[ParamSet] = None) -> Tensor:
        """Analytic KL(q(z | x) || N(0, prior_variance I)) summed over the batch"""
        mu, sigma = self.encode(x, params)
        var_ratio = square(sigma) / prior_variance
        terms = 0.5 * (var_ratio + square(mu) / prior_variance - 1.0) - log(sigma) + 0.5 * math.log(prior_variance)
        return terms.sum()


# ============================================================================
# MODEL CONFIGURATION
# ============================================================================

@dataclass
class ModelConfig:
    """Dimensions and likelihood of the generative / warm-start pair"""
    latent_dim: int = 2
    hidden: Tuple[int, ...] = (64, 64)
    encoder_hidden: Optional[Tuple[int, ...]] = None  # None mirrors `hidden`
    prior_variance: float = 1.0
    likelihood: Likelihood = Likelihood.DIAGONAL_GAUSSIAN
    decoder_scale: DecoderScale = DecoderScale.GLOBAL
    fixed_scale: float = 1.0
    init_scale: float = 1.0
    obs_channels: int = 1

    def __post_init__(self):
        if isinstance(self.likelihood, str):
            self.likelihood = Likelihood(self.likelihood)
        if isinstance(self.decoder_scale, str):
            self.decoder_scale = DecoderScale(self.decoder_scale)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.encoder_hidden is not None:
            self.encoder_hidden = tuple(int(h) for h in self.encoder_hidden)
        if self.latent_dim < 1:
            raise ValueError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if any(h < 1 for h in self.hidden + (self.encoder_hidden or ())):
            raise ValueError(f"hidden widths must be >= 1, got {self.hidden} / {self.encoder_hidden}")
        if self.prior_variance <= 0 or self.fixed_scale <= 0 or self.init_scale <= 0:
            raise ValueError("prior_variance, fixed_scale and init_scale must be positive")
        if self.obs_channels < 1:
            raise ValueError(f"obs_channels must be >= 1, got {self.obs_channels}")

    def to_dict(self) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "hidden": list(self.hidden),
            "encoder_hidden": None if self.encoder_hidden is None else list(self.encoder_hidden),
            "prior_variance": self.prior_variance,
            "likelihood": self.likelihood.value,
            "decoder_scale": self.decoder_scale.value,
            "fixed_scale": self.fixed_scale,
            "init_scale": self.init_scale,
            "obs_channels": self.obs_channels,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)

    def build(self, obs_dim: int, rng: np.random.Generator) -> Tuple[GenerativeModel, WarmStartModel]:
        """Freshly initialized (generative, warm-start) models for `obs_dim` observations"""
        gen = GenerativeModel.initialize(
            rng, self.latent_dim, obs_dim, self.hidden,
            init_scale=self.init_scale,
            prior_variance=self.prior_variance,
            likelihood=self.likelihood,
            scale_mode=self.decoder_scale,
            fixed_scale=self.fixed_scale,
            obs_channels=self.obs_channels,
        )
        encoder_hidden = self.hidden if self.encoder_hidden is None else self.encoder_hidden
        warm = WarmStartModel.initialize(rng, self.latent_dim, obs_dim, encoder_hidden)
        return gen, warm
