"""
Gradient Estimators for Generative and Warm-Start Models

- theta: Monte Carlo ELBO gradient from Langevin chain samples,
  grad_theta (1/T) sum_t log p(x, z(t) | theta) with z(t) held constant
- phi, forward KL: cross-entropy of q against the chain samples
- phi, reverse KL: reparameterized negative ELBO with analytic KL to the prior
- phi, Jeffrey's: 0.5 * (forward + reverse)

All functions return sums over the batch; the trainer owns batch averaging
and the sign convention of the final update.
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from autodiff import ParamSet, Tensor, gaussian_log_density, value_and_grad
from models import GenerativeModel, WarmStartModel


@dataclass
class GradAccumulator:
    """Running sum of parameter gradients and the objective values they came from"""
    grads: ParamSet
    count: int = 0
    value_total: float = 0.0

    @classmethod
    def zeros(cls, params: ParamSet) -> "GradAccumulator":
        return cls(grads=params.zeros_like())

    def add(self, grads: ParamSet, value: float = 0.0) -> "GradAccumulator":
        self.grads = self.grads.combine(grads)
        self.count += 1
        self.value_total += value
        return self

    def mean(self) -> ParamSet:
        if self.count == 0:
            return self.grads.zeros_like()
        return self.grads.scaled(1.0 / self.count)


# ============================================================================
# GENERATIVE MODEL
# ============================================================================

def accumulate_theta_grad(acc: GradAccumulator,
                          model: GenerativeModel,
                          x: np.ndarray,
                          z: np.ndarray) -> GradAccumulator:
    """acc += grad_theta log p(x, z | theta) for one chain state (no path into z)"""
    z = np.asarray(z, dtype=np.float64)
    value, grads = value_and_grad(lambda theta: model.log_joint(x, z, theta), model.params)
    return acc.add(grads, value)


# ============================================================================
# WARM-START MODEL
# ============================================================================

def forward_kl_loss(model_q: WarmStartModel,
                    x: np.ndarray,
                    z_samples: Sequence[np.ndarray],
                    params: Optional[ParamSet] = None) -> Tensor:
    """-(1/T) sum_t log q(z(t) | x, phi), summed over the batch"""
    mu, sigma = model_q.encode(x, params)
    stacked = np.stack([np.atleast_2d(np.asarray(z, dtype=np.float64)) for z in z_samples])
    return -gaussian_log_density(stacked, mu, sigma).sum() / len(z_samples)


def forward_kl_grad(model_q: WarmStartModel,
                    x: np.ndarray,
                    z_samples: Sequence[np.ndarray]) -> Tuple[float, ParamSet]:
    """Gradient of the Gaussian cross-entropy against detached chain samples"""
    return value_and_grad(lambda phi: forward_kl_loss(model_q, x, z_samples, phi), model_q.params)


def negative_elbo(model_p: GenerativeModel,
                  model_q: WarmStartModel,
                  x: np.ndarray,
                  eps: np.ndarray,
                  theta: Optional[ParamSet] = None,
                  phi: Optional[ParamSet] = None) -> Tensor:
    """
    -E_q[log p(x | z)] + KL(q(z | x) || p(z)), summed over the batch

    `eps` is (batch, latent_dim) for a single draw or (samples, batch, latent_dim);
    the reconstruction term is averaged over draws, the KL is analytic.
    """
    eps = np.asarray(eps, dtype=np.float64)
    draws = eps if eps.ndim == 3 else eps[None]
    x_batch = np.atleast_2d(np.asarray(x, dtype=np.float64))

    reconstruction = None
    for eps_s in draws:
        z = model_q.reparam_sample(x_batch, eps_s, phi)
        lik = model_p.decode(z, theta)
        term = model_p.log_likelihood_terms(x_batch, lik).sum()
        reconstruction = term if reconstruction is None else reconstruction + term
    reconstruction = reconstruction / len(draws)

    kl = model_q.kl_to_prior(x_batch, model_p.prior_variance, phi)
    return kl - reconstruction


def reverse_kl_grad(model_p: GenerativeModel,
                    model_q: WarmStartModel,
                    x: np.ndarray,
                    eps: np.ndarray) -> Tuple[float, ParamSet]:
    """grad_phi of the reparameterized negative ELBO; theta held fixed"""
    return value_and_grad(lambda phi: negative_elbo(model_p, model_q, x, eps, phi=phi), model_q.params)


def jeffreys_grad(forward_component: ParamSet, reverse_component: ParamSet) -> ParamSet:
    """Exactly 0.5 * (g_forward + g_reverse) elementwise"""
    return forward_component.combine(reverse_component, 0.5, 0.5)
