"""Closed-form DDPM mathematics: schedule tables, forward corruption, posterior,
reverse steps, the ancestral sampling loop and recurrent uniform time-step sampling.

Schedule tables are float64 and padded so that ``table[t]`` addresses step ``t``
directly for ``t`` in ``1..T``; index 0 holds the ``t = 0`` identity values.
Array arguments may be numpy arrays or torch tensors; a vector of time steps
broadcasts against the leading (batch) axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray = field(init=False, repr=False)
    alpha: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)
    beta_tilde: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        T = self.T
        if T < 1:
            raise ValueError("T must be at least 1")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ValueError(
                f"need 0 < beta_start <= beta_end < 1, got {self.beta_start}, {self.beta_end}")
        beta = np.zeros(T + 1)
        if T == 1:
            beta[1] = self.beta_start
        else:
            t = np.arange(1, T + 1, dtype=np.float64)
            beta[1:] = self.beta_start + (t - 1) * (self.beta_end - self.beta_start) / (T - 1)
        alpha = 1.0 - beta
        alpha_bar = np.empty(T + 1)
        alpha_bar[0] = 1.0
        for t in range(1, T + 1):
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t]
        beta_tilde = np.zeros(T + 1)
        beta_tilde[1:] = beta[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:])
        for name, val in (("beta", beta), ("alpha", alpha), ("alpha_bar", alpha_bar),
                          ("beta_tilde", beta_tilde)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(self.beta_tilde)

    def check_t(self, t, lo: int = 1):
        ts = np.asarray(t)
        if np.any(ts < lo) or np.any(ts > self.T):
            raise ValueError(f"time step {t} outside [{lo}, {self.T}]")


def linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 1e-2) -> NoiseSchedule:
    return NoiseSchedule(T, beta_start, beta_end)


def _coef(table: np.ndarray, t, like):
    """Look up ``table[t]`` shaped to broadcast against ``like``'s trailing (n, 3) axes."""
    vals = table[np.asarray(t)]
    if np.ndim(vals) == 0:
        return float(vals)
    vals = vals.reshape(vals.shape + (1,) * (like.ndim - vals.ndim))
    if not isinstance(like, np.ndarray):
        import torch
        return torch.as_tensor(vals, dtype=like.dtype, device=like.device)
    return vals


def q_sample(x0, t, epsilon, schedule: NoiseSchedule):
    """Draw ``x_t ~ q(x_t | x_0)`` by reparameterization with the supplied noise."""
    schedule.check_t(t)
    if tuple(x0.shape) != tuple(epsilon.shape):
        raise ValueError(f"epsilon shape {tuple(epsilon.shape)} != x0 shape {tuple(x0.shape)}")
    a = _coef(np.sqrt(schedule.alpha_bar), t, x0)
    b = _coef(np.sqrt(1.0 - schedule.alpha_bar), t, x0)
    return a * x0 + b * epsilon


def posterior_stats(x_t, x0, t, schedule: NoiseSchedule):
    """Mean (x0 form) and variance of ``q(x_{t-1} | x_t, x_0)``; valid for ``t >= 2``."""
    schedule.check_t(t, lo=2)
    ab_prev = np.concatenate([[1.0], schedule.alpha_bar[:-1]])
    denom = np.maximum(1.0 - schedule.alpha_bar, 1e-300)
    c0 = _coef(np.sqrt(ab_prev) * schedule.beta / denom, t, x0)
    ct = _coef(np.sqrt(schedule.alpha) * (1.0 - ab_prev) / denom, t, x0)
    return c0 * x0 + ct * x_t, schedule.beta_tilde[np.asarray(t)]


def posterior_mean_eps(x_t, epsilon, t, schedule: NoiseSchedule):
    """Posterior mean written in terms of the noise that produced ``x_t``."""
    k = _coef(schedule.beta / np.sqrt(np.maximum(1.0 - schedule.alpha_bar, 1e-300)), t, x_t)
    inv = _coef(1.0 / np.sqrt(schedule.alpha), t, x_t)
    return inv * (x_t - k * epsilon)


def predicted_mean(x_t, eps_hat, t, schedule: NoiseSchedule):
    schedule.check_t(t)
    return posterior_mean_eps(x_t, eps_hat, t, schedule)


def reverse_step(x_t, eps_hat, t, noise, schedule: NoiseSchedule):
    """One ancestral step ``x_t -> x_{t-1}`` with variance ``beta_tilde_t``; no noise at ``t = 1``."""
    mean = predicted_mean(x_t, eps_hat, t, schedule)
    if noise is None or np.all(np.asarray(t) == 1):
        return mean
    return mean + _coef(schedule.sigma, t, x_t) * noise


def sample_loop(denoiser, c, n_points: int, schedule: NoiseSchedule, rng,
                batch_shape: tuple = ()):
    """Generate clouds by running the reverse chain from ``t = T`` down to 1.

    ``denoiser(x_t, c, t)`` receives float64 arrays of shape ``batch_shape + (n_points, 3)``
    and returns a noise prediction of the same shape.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    shape = tuple(batch_shape) + (n_points, 3)
    x = rng.standard_normal(shape)
    for t in range(schedule.T, 0, -1):
        eps_hat = np.asarray(denoiser(x, c, t), dtype=np.float64)
        noise = rng.standard_normal(shape) if t > 1 else None
        x = reverse_step(x, eps_hat, t, noise, schedule)
    return x


def interval_bounds(T: int, h: int, absorb_remainder: bool = False) -> list[tuple[int, int]]:
    """The ``h`` time-step intervals ``[d*i + 1, d*(i + 1)]`` with ``d = T // h``.

    With ``absorb_remainder`` the last interval is stretched to end at ``T``.
    """
    if not 1 <= h <= T:
        raise ValueError(f"number of intervals h={h} must lie in [1, T={T}]")
    d = T // h
    bounds = [(d * i + 1, d * (i + 1)) for i in range(h)]
    if absorb_remainder:
        bounds[-1] = (bounds[-1][0], T)
    return bounds


def recurrent_uniform_sample(T: int, h: int, rng, absorb_remainder: bool = False) -> np.ndarray:
    """One uniform integer draw from each interval, in interval order."""
    bounds = np.asarray(interval_bounds(T, h, absorb_remainder))
    return rng.integers(bounds[:, 0], bounds[:, 1] + 1)
