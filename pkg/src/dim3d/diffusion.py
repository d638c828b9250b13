"""DDPM schedule, forward corruption, training loss and ancestral sampling
with classifier-free guidance.

Predictors are callables ``predict(x_t, t, y) -> Tensor`` so the sampler and
loss work with the network or with analytic stand-ins.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .rng import Stream
from .tensor import Tensor
from .voxel import PointCloud, denormalize

Predictor = Callable[[np.ndarray, np.ndarray, object], Tensor]

BETA_START, BETA_END = 1e-4, 2e-2


@dataclass
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray


@dataclass
class SamplerConfig:
    guidance: float = 1.5
    p_uncond: float = 0.1
    seed: int = 0
    # clip the implied clean cloud to [-1, 1] before forming the posterior mean
    clip_denoised: bool = False

    def __post_init__(self):
        if self.guidance < 0:
            raise ValueError("guidance scale must be non-negative")
        if not 0 <= self.p_uncond < 1:
            raise ValueError("p_uncond must lie in [0, 1)")


def schedule_from_betas(beta: np.ndarray) -> NoiseSchedule:
    beta = np.asarray(beta, dtype=np.float64)
    if np.any(beta <= 0) or np.any(beta >= 1):
        raise ValueError("betas must lie in (0, 1)")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    var = np.zeros_like(beta)
    var[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    return NoiseSchedule(len(beta), beta, alpha, alpha_bar, np.sqrt(var))


def make_schedule(T: int, beta_start: float = BETA_START, beta_end: float = BETA_END) -> NoiseSchedule:
    """Linear betas from ``beta_start`` to ``beta_end`` inclusive."""
    if T < 1:
        raise ValueError("need at least one diffusion step")
    beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    return schedule_from_betas(beta)


def _check_t(t, sched: NoiseSchedule) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < 0) or np.any(t >= sched.T):
        raise ValueError(f"timestep out of range [0, {sched.T})")
    return t


def _per_item(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape(v.shape + (1,) * (ndim - v.ndim))


def q_sample(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; ``t`` may be per batch item."""
    t = _check_t(t, sched)
    ab = _per_item(sched.alpha_bar[t], np.ndim(x0))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def loss_simple(predict: Predictor, x0: np.ndarray, y, sched: NoiseSchedule, rng: Stream,
                p_uncond: float = 0.1) -> Tensor:
    """Mean squared error between true and predicted noise over all B*N*3 scalars.

    Each item gets its own uniform timestep; its class is replaced by the
    null class with probability ``p_uncond``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim == 2:
        x0 = x0[None]
    B = x0.shape[0]
    t = rng.integers(0, sched.T, size=B)
    eps = rng.normal(x0.shape)
    drop = rng.uniform(size=B) < p_uncond
    if y is None:
        y_in = np.full(B, -1)
    else:
        y_in = np.where(drop, -1, np.broadcast_to(np.asarray(y, dtype=np.int64), (B,)))
    x_t = q_sample(x0, t, eps, sched)
    err = T.sub(predict(x_t, t, y_in), Tensor(eps))
    return T.mean(T.square(err))


def guided_eps(predict: Predictor, x_t: np.ndarray, t, y, w: float) -> np.ndarray:
    """eps_u + w (eps_c - eps_u); one unconditional evaluation when w == 0 or y is null."""
    B = x_t.shape[0]
    null = np.full(B, -1)
    eps_u = predict(x_t, t, null).data
    if w == 0 or y is None:
        return eps_u
    eps_c = predict(x_t, t, np.broadcast_to(np.asarray(y), (B,))).data
    return eps_u + w * (eps_c - eps_u)


def posterior_mean(x_t: np.ndarray, t: int, eps_hat: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """mu = (x_t - beta_t / sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t)."""
    return (x_t - sched.beta[t] / np.sqrt(1.0 - sched.alpha_bar[t]) * eps_hat) / np.sqrt(sched.alpha[t])


def clipped_posterior_mean(x_t: np.ndarray, t: int, eps_hat: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Posterior mean of q(x_{t-1} | x_t, x0) at x0 = clip(predicted x0, -1, 1).

    Without clipping this equals :func:`posterior_mean` algebraically. The
    network only sees clamped positions, so for far-out points its noise
    estimate is too small and the unclipped chain pushes them further out.
    """
    ab = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t - 1] if t > 0 else 1.0
    x0 = np.clip((x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab), -1.0, 1.0)
    c0 = sched.beta[t] * np.sqrt(ab_prev) / (1.0 - ab)
    ct = (1.0 - ab_prev) * np.sqrt(sched.alpha[t]) / (1.0 - ab)
    return c0 * x0 + ct * x_t


def p_sample_step(predict: Predictor, x_t: np.ndarray, t: int, y, sched: NoiseSchedule,
                  w: float, noise: np.ndarray | None, clip_denoised: bool = False) -> np.ndarray:
    """One ancestral step x_t -> x_{t-1}; ``noise`` is ignored at t == 0."""
    _check_t(t, sched)
    x_t = np.asarray(x_t, dtype=np.float64)
    with T.no_grad():
        eps_hat = guided_eps(predict, x_t, np.full(x_t.shape[0], t), y, w)
    mean_fn = clipped_posterior_mean if clip_denoised else posterior_mean
    mu = mean_fn(x_t, t, eps_hat, sched)
    if t == 0:
        return mu
    return mu + sched.sigma[t] * noise


def sample(predict: Predictor, num: int, n_points: int, y, sched: NoiseSchedule, cfg: SamplerConfig,
           mean: np.ndarray | None, scale: float | None) -> list[PointCloud]:
    """Ancestral sampling from x_T ~ N(0, I), de-normalized to data space.

    ``y`` is None, one class for every cloud, or one class per cloud. Each
    cloud owns a random stream keyed by its index, so cloud k is the same
    whatever ``num`` is.
    """
    if num < 1:
        raise ValueError("num must be at least 1")
    if mean is None or scale is None:
        raise ValueError("sampling needs the dataset normalization statistics (mean, scale)")
    streams = [Stream(cfg.seed, "sample", k) for k in range(num)]
    x = np.stack([s.normal((n_points, 3)) for s in streams])
    for t in range(sched.T - 1, -1, -1):
        noise = np.stack([s.normal((n_points, 3)) for s in streams]) if t > 0 else None
        x = p_sample_step(predict, x, t, y, sched, cfg.guidance, noise, cfg.clip_denoised)
    labels = [None] * num if y is None else np.broadcast_to(np.asarray(y), (num,)).tolist()
    return [PointCloud(denormalize(xi, mean, scale), c) for xi, c in zip(x, labels)]


# -- variational-bound diagnostics -----------------------------------------

def q_posterior(x0: np.ndarray, x_t: np.ndarray, t: int, sched: NoiseSchedule) -> tuple[np.ndarray, float]:
    """Mean and variance of q(x_{t-1} | x_t, x0) for t >= 1."""
    ab, ab_prev = sched.alpha_bar[t], sched.alpha_bar[t - 1]
    c0 = np.sqrt(ab_prev) * sched.beta[t] / (1.0 - ab)
    ct = np.sqrt(sched.alpha[t]) * (1.0 - ab_prev) / (1.0 - ab)
    return c0 * x0 + ct * x_t, sched.sigma[t] ** 2


def gaussian_kl(mu1, var1, mu2, var2) -> float:
    """KL(N(mu1, var1 I) || N(mu2, var2 I)) summed over coordinates."""
    mu1, mu2 = np.asarray(mu1, dtype=np.float64), np.asarray(mu2, dtype=np.float64)
    d = mu1.size
    return float(0.5 * (d * (var1 / var2 - 1.0 + np.log(var2 / var1))
                        + np.sum((mu1 - mu2) ** 2) / var2))


def kl_term(x0: np.ndarray, x_t: np.ndarray, t: int, eps_hat: np.ndarray, sched: NoiseSchedule) -> float:
    """KL(q(x_{t-1}|x_t, x0) || p(x_{t-1}|x_t)) with p's mean from ``eps_hat``."""
    mu_q, var = q_posterior(x0, x_t, t, sched)
    return gaussian_kl(mu_q, var, posterior_mean(x_t, t, eps_hat, sched), var)
