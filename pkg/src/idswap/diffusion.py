"""Noise schedules, forward noising, the diffusion MSE loss and deterministic DDIM sampling.

All functions are pure: noise is always an explicit argument and no module-level
RNG exists. Schedules are kept in float64 so downstream tolerance checks are not
limited by schedule precision; tensors are cast to the input dtype at use sites.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step beta/alpha/alpha_bar sequences of a T-step forward process.

    Indexing is 1-based in the math (t in 1..T); array slot i holds step i+1.
    alpha_bar(0) == 1 by convention.
    """

    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    @property
    def total_steps(self) -> int:
        return self.betas.shape[0]

    def alpha_bar(self, t: int) -> float:
        """Cumulative product at step t, with the alpha_bar(0) = 1 boundary."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.total_steps:
            raise ValueError(f"step {t} outside [0, {self.total_steps}]")
        return float(self.alpha_bars[t - 1])


def make_schedule(total_steps: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule over `total_steps` steps."""
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    if total_steps == 1:
        betas = torch.tensor([beta_start], dtype=torch.float64)
    else:
        betas = torch.linspace(beta_start, beta_end, total_steps, dtype=torch.float64)
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def _check_step(t: int, sched: NoiseSchedule) -> None:
    if not 1 <= t <= sched.total_steps:
        raise ValueError(f"step {t} outside [1, {sched.total_steps}]")


def q_sample(x0: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Forward-noise x0 to step t: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps."""
    _check_step(t, sched)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    ab = sched.alpha_bar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def diffusion_loss(eps_hat: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Mean squared error between predicted and true noise."""
    if eps_hat.shape != eps.shape:
        raise ValueError(f"shape mismatch: {tuple(eps_hat.shape)} vs {tuple(eps.shape)}")
    return torch.mean((eps_hat - eps) ** 2)


def ddim_step(
    x_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    t_prev: int,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """One deterministic (eta = 0) DDIM update from step t to t_prev < t."""
    if t_prev >= t:
        raise ValueError(f"t_prev ({t_prev}) must be < t ({t})")
    _check_step(t, sched)
    if t_prev < 0:
        raise ValueError(f"t_prev must be >= 0, got {t_prev}")
    ab_t = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(t_prev)
    x0_pred = (x_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    return math.sqrt(ab_prev) * x0_pred + math.sqrt(1.0 - ab_prev) * eps_hat


def ddim_timesteps(total_steps: int, n_steps: int) -> list[tuple[int, int]]:
    """Uniform-stride decreasing (t, t_prev) pairs from total_steps down to 0."""
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    if n_steps > total_steps:
        raise ValueError(f"n_steps ({n_steps}) exceeds schedule length ({total_steps})")
    grid = [round(total_steps * i / n_steps) for i in range(n_steps, -1, -1)]
    pairs = list(zip(grid[:-1], grid[1:]))
    for t, t_prev in pairs:
        if t_prev >= t:
            raise ValueError(f"degenerate step pair ({t}, {t_prev}) for n_steps={n_steps}")
    return pairs


def ddim_sample(
    predict: Callable[[torch.Tensor, int], torch.Tensor],
    x_start: torch.Tensor,
    mask: torch.Tensor,
    background: torch.Tensor,
    sched: NoiseSchedule,
    n_steps: int,
    grad_steps: Iterable[int] | None = None,
) -> torch.Tensor:
    """Deterministic DDIM sampling with inpainting background replacement.

    `predict(x_t, t)` returns the predicted noise (it is expected to assemble
    the augmented denoiser input internally). At every step the region outside
    `mask` is replaced by the known background noised to the current level,
    using `x_start` as its fixed noise, so the trajectory stays deterministic.
    The final image keeps the clean `background` outside the mask.

    `grad_steps`, if given, is the set of step indices (0-based over the
    sampling subsequence) whose noise predictions carry gradient; at every
    other step the prediction is computed without a graph and enters the
    update as a constant, so only the cheap elementwise chain is stored.
    Forward values do not depend on this argument.
    """
    pairs = ddim_timesteps(sched.total_steps, n_steps)
    grad_set = None if grad_steps is None else set(grad_steps)
    x = x_start
    for idx, (t, t_prev) in enumerate(pairs):
        ab = sched.alpha_bar(t)
        known = math.sqrt(ab) * background + math.sqrt(1.0 - ab) * x_start
        x = mask * x + (1.0 - mask) * known
        if grad_set is None or idx in grad_set:
            eps_hat = predict(x, t)
        else:
            with torch.no_grad():
                eps_hat = predict(x, t)
        x = ddim_step(x, eps_hat, t, t_prev, sched)
    return mask * x + (1.0 - mask) * background


def time_embedding(t: float, dim: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Sinusoidal embedding [sin(t * w_i)] ++ [cos(t * w_i)], w_i = 10000^(-2i/dim)."""
    if dim < 2 or dim % 2 != 0:
        raise ValueError(f"embedding dim must be even and >= 2, got {dim}")
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * 2.0 * torch.arange(half, dtype=torch.float64) / dim
    )
    angles = t * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)]).to(dtype)


def time_embedding_batch(
    ts: Sequence[float], dim: int, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """Stacked time embeddings, shape (len(ts), dim)."""
    return torch.stack([time_embedding(t, dim, dtype) for t in ts])
