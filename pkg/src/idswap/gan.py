"""Spectrally normalized discriminator and hinge GAN losses."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F


def hinge_d_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """mean(relu(1 - d_real)) + mean(relu(1 + d_fake))."""
    return F.relu(1.0 - d_real).mean() + F.relu(1.0 + d_fake).mean()


def hinge_g_loss(d_fake: torch.Tensor) -> torch.Tensor:
    """-mean(d_fake)."""
    return -d_fake.mean()


def spectral_normalize(
    weight: torch.Tensor, u: torch.Tensor, n_power_iterations: int = 1
) -> tuple[torch.Tensor, torch.Tensor]:
    """Divide `weight` (2-D) by its power-iteration top singular value estimate.

    `u` is the persistent left vector; the updated vector is returned so
    callers can carry it across steps. Power iteration runs without gradient;
    the division itself stays differentiable in `weight`.
    """
    if weight.dim() != 2:
        raise ValueError(f"spectral_normalize expects a 2-D matrix, got {tuple(weight.shape)}")
    if n_power_iterations < 1:
        raise ValueError("n_power_iterations must be >= 1")
    if not torch.any(weight != 0):
        warnings.warn("spectral_normalize: zero matrix left unchanged")
        return weight, u
    with torch.no_grad():
        for _ in range(n_power_iterations):
            v = F.normalize(weight.T @ u, dim=0, eps=1e-12)
            u = F.normalize(weight @ v, dim=0, eps=1e-12)
    sigma = u @ weight @ v
    return weight / sigma, u


@dataclass(frozen=True)
class DiscriminatorConfig:
    widths: tuple[int, ...] = (32, 64, 64, 64)
    n_power_iterations: int = 1
    resolution: int = 64

    def __post_init__(self) -> None:
        if any(w < 1 for w in self.widths):
            raise ValueError("widths must be positive")
        if self.n_power_iterations < 1:
            raise ValueError("n_power_iterations must be >= 1")


class SNConv2d(nn.Module):
    """Stride-2 conv whose kernel is spectrally normalized at every forward."""

    def __init__(self, in_ch: int, out_ch: int, n_power_iterations: int) -> None:
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 4, stride=2, padding=1)
        self.n_power_iterations = n_power_iterations
        self.register_buffer("u", F.normalize(torch.randn(out_ch), dim=0))

    def normalized_weight(self) -> torch.Tensor:
        w = self.conv.weight
        w2d = w.view(w.shape[0], -1)
        w_norm, u = spectral_normalize(w2d, self.u, self.n_power_iterations)
        self.u.copy_(u.detach())
        return w_norm.view_as(w)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(x, self.normalized_weight(), self.conv.bias, stride=2, padding=1)


class SNLinear(nn.Module):
    def __init__(self, in_features: int, out_features: int, n_power_iterations: int) -> None:
        super().__init__()
        self.linear = nn.Linear(in_features, out_features)
        self.n_power_iterations = n_power_iterations
        self.register_buffer("u", F.normalize(torch.randn(out_features), dim=0))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        w_norm, u = spectral_normalize(self.linear.weight, self.u, self.n_power_iterations)
        self.u.copy_(u.detach())
        return F.linear(x, w_norm, self.linear.bias)


class Discriminator(nn.Module):
    """SNGAN-style conv discriminator producing one unbounded score per image."""

    def __init__(self, config: DiscriminatorConfig | None = None) -> None:
        super().__init__()
        cfg = config or DiscriminatorConfig()
        self.config = cfg
        layers: list[nn.Module] = []
        in_ch = 3
        for width in cfg.widths:
            layers.append(SNConv2d(in_ch, width, cfg.n_power_iterations))
            layers.append(nn.LeakyReLU(0.2))
            in_ch = width
        self.features = nn.Sequential(*layers)
        final_res = cfg.resolution // (2 ** len(cfg.widths))
        self.score = SNLinear(in_ch * final_res * final_res, 1, cfg.n_power_iterations)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        h = self.features(image)
        return self.score(h.flatten(1)).squeeze(-1)
