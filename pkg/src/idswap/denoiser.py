"""Noise-prediction UNet with an inpainting-augmented input and gated cross-attention.

The network consumes a 7-channel input (noisy image, binary mask, masked
background), a sinusoidal step embedding, and a condition token sequence
injected through zero-initialized gated cross-attention adapters. With all
gates at zero the output is independent of the condition tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn
from torch.nn import functional as F

from .diffusion import time_embedding_batch


@dataclass(frozen=True)
class DenoiserConfig:
    resolution: int = 64
    in_channels: int = 7
    out_channels: int = 3
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 2)
    num_res_blocks: int = 2
    attention_resolutions: tuple[int, ...] = (32, 16)
    d_cond: int = 64
    n_heads: int = 1
    groups: int = 8

    def __post_init__(self) -> None:
        if min(self.base_channels, self.num_res_blocks, self.d_cond, self.n_heads) < 1:
            raise ValueError("all size fields must be positive")
        for res in self.attention_resolutions:
            if self.resolution % res != 0:
                raise ValueError(f"attention resolution {res} does not divide {self.resolution}")

    @property
    def time_dim(self) -> int:
        return self.base_channels * 4


def augment_input(
    x_t: torch.Tensor, mask: torch.Tensor, x_t_target_noised: torch.Tensor
) -> torch.Tensor:
    """Concatenate (noisy, mask, background) into the 7-channel denoiser input.

    `mask` is single-channel binary (1 = face region to generate); the
    background channel is (1 - mask) * x_t_target_noised, exactly zero inside
    the mask.
    """
    if x_t.shape != x_t_target_noised.shape:
        raise ValueError(
            f"shape mismatch: x_t {tuple(x_t.shape)} vs target {tuple(x_t_target_noised.shape)}"
        )
    if mask.shape[-2:] != x_t.shape[-2:]:
        raise ValueError(f"mask spatial shape {tuple(mask.shape)} does not match image")
    if not torch.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be binary")
    if mask.dim() == x_t.dim() - 1:
        mask = mask.unsqueeze(-3)
    background = (1.0 - mask) * x_t_target_noised
    return torch.cat([x_t, mask.to(x_t.dtype).expand(x_t.shape[:-3] + (1,) + x_t.shape[-2:]), background], dim=-3)


class GatedCrossAttention(nn.Module):
    """hidden + tanh(gate) * Attn(hidden Wq, cond Wk, cond Wv) Wo, gate zero-init."""

    def __init__(self, channels: int, d_cond: int, n_heads: int = 1) -> None:
        super().__init__()
        if channels % n_heads != 0:
            raise ValueError(f"channels {channels} not divisible by n_heads {n_heads}")
        self.channels = channels
        self.n_heads = n_heads
        self.w_q = nn.Linear(channels, channels, bias=False)
        self.w_k = nn.Linear(d_cond, channels, bias=False)
        self.w_v = nn.Linear(d_cond, channels, bias=False)
        self.w_o = nn.Linear(channels, channels, bias=False)
        self.gate = nn.Parameter(torch.zeros(()))

    def attention_weights(self, hidden: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        """Softmax attention weights, shape (B, heads, L_hidden, L_cond)."""
        b, l, _ = hidden.shape
        m = cond.shape[1]
        d_head = self.channels // self.n_heads
        q = self.w_q(hidden).view(b, l, self.n_heads, d_head).transpose(1, 2)
        k = self.w_k(cond).view(b, m, self.n_heads, d_head).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / d_head**0.5
        return torch.softmax(scores, dim=-1)

    def forward(self, hidden: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if hidden.shape[-1] != self.channels or cond.shape[-1] != self.w_k.in_features:
            raise ValueError(
                f"dimension mismatch: hidden {hidden.shape[-1]} vs {self.channels}, "
                f"cond {cond.shape[-1]} vs {self.w_k.in_features}"
            )
        b, l, _ = hidden.shape
        m = cond.shape[1]
        d_head = self.channels // self.n_heads
        weights = self.attention_weights(hidden, cond)
        v = self.w_v(cond).view(b, m, self.n_heads, d_head).transpose(1, 2)
        attended = (weights @ v).transpose(1, 2).reshape(b, l, self.channels)
        return hidden + torch.tanh(self.gate) * self.w_o(attended)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int, groups: int) -> None:
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(min(groups, out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(t_emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class _AdapterWrap(nn.Module):
    """Applies gated cross-attention over the flattened spatial map."""

    def __init__(self, channels: int, d_cond: int, n_heads: int) -> None:
        super().__init__()
        self.attn = GatedCrossAttention(channels, d_cond, n_heads)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = x.view(b, c, h * w).transpose(1, 2)
        tokens = self.attn(tokens, cond)
        return tokens.transpose(1, 2).view(b, c, h, w)


class UNet(nn.Module):
    """Small encoder-decoder noise predictor over the augmented input."""

    def __init__(self, config: DenoiserConfig | None = None) -> None:
        super().__init__()
        cfg = config or DenoiserConfig()
        self.config = cfg
        time_dim = cfg.time_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
        )
        self.conv_in = nn.Conv2d(cfg.in_channels, cfg.base_channels, 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.down_adapters = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        ch = cfg.base_channels
        skip_channels = [ch]
        res = cfg.resolution
        self._level_res: list[int] = []
        for i, mult in enumerate(cfg.channel_mults):
            out_ch = cfg.base_channels * mult
            blocks = nn.ModuleList()
            adapters = nn.ModuleList()
            for _ in range(cfg.num_res_blocks):
                blocks.append(ResBlock(ch, out_ch, time_dim, cfg.groups))
                ch = out_ch
                skip_channels.append(ch)
                if res in cfg.attention_resolutions:
                    adapters.append(_AdapterWrap(ch, cfg.d_cond, cfg.n_heads))
                else:
                    adapters.append(nn.Identity())
            self.down_blocks.append(blocks)
            self.down_adapters.append(adapters)
            self._level_res.append(res)
            if i < len(cfg.channel_mults) - 1:
                self.downsamples.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                skip_channels.append(ch)
                res //= 2
            else:
                self.downsamples.append(nn.Identity())

        self.mid_block1 = ResBlock(ch, ch, time_dim, cfg.groups)
        self.mid_adapter = _AdapterWrap(ch, cfg.d_cond, cfg.n_heads)
        self.mid_block2 = ResBlock(ch, ch, time_dim, cfg.groups)

        self.up_blocks = nn.ModuleList()
        self.up_adapters = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i, mult in reversed(list(enumerate(cfg.channel_mults))):
            out_ch = cfg.base_channels * mult
            blocks = nn.ModuleList()
            adapters = nn.ModuleList()
            for _ in range(cfg.num_res_blocks + 1):
                blocks.append(ResBlock(ch + skip_channels.pop(), out_ch, time_dim, cfg.groups))
                ch = out_ch
                if self._level_res[i] in cfg.attention_resolutions:
                    adapters.append(_AdapterWrap(ch, cfg.d_cond, cfg.n_heads))
                else:
                    adapters.append(nn.Identity())
            self.up_blocks.append(blocks)
            self.up_adapters.append(adapters)
            if i > 0:
                self.upsamples.append(
                    nn.Sequential(
                        nn.Upsample(scale_factor=2, mode="nearest"),
                        nn.Conv2d(ch, ch, 3, padding=1),
                    )
                )
            else:
                self.upsamples.append(nn.Identity())

        self.norm_out = nn.GroupNorm(min(cfg.groups, ch), ch)
        self.conv_out = nn.Conv2d(ch, cfg.out_channels, 3, padding=1)

    def forward(self, aug: torch.Tensor, t_emb: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if aug.shape[1] != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} input channels, got {aug.shape[1]}")
        emb = self.time_mlp(t_emb)
        h = self.conv_in(aug)
        skips = [h]
        for blocks, adapters, down in zip(self.down_blocks, self.down_adapters, self.downsamples):
            for block, adapter in zip(blocks, adapters):
                h = block(h, emb)
                h = adapter(h, cond) if not isinstance(adapter, nn.Identity) else h
                skips.append(h)
            if not isinstance(down, nn.Identity):
                h = down(h)
                skips.append(h)
        h = self.mid_block1(h, emb)
        h = self.mid_adapter(h, cond)
        h = self.mid_block2(h, emb)
        for blocks, adapters, up in zip(self.up_blocks, self.up_adapters, self.upsamples):
            for block, adapter in zip(blocks, adapters):
                h = block(torch.cat([h, skips.pop()], dim=1), emb)
                h = adapter(h, cond) if not isinstance(adapter, nn.Identity) else h
            if not isinstance(up, nn.Identity):
                h = up(h)
        return self.conv_out(F.silu(self.norm_out(h)))


def predict_noise(
    unet: UNet, x_t: torch.Tensor, mask: torch.Tensor, background_source: torch.Tensor,
    t: int, cond: torch.Tensor,
) -> torch.Tensor:
    """Full noise prediction from raw parts: builds the augmented input and
    step embedding, then runs the UNet."""
    aug = augment_input(x_t, mask, background_source)
    t_emb = time_embedding_batch([float(t)] * aug.shape[0], unet.config.time_dim, aug.dtype)
    return unet(aug, t_emb, cond)
