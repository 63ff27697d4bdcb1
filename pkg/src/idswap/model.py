"""Full swap model: frozen encoders, trainable conditioner and UNet.

Parameter arrays carry component tags (`enc.id`, `enc.spatial`, `enc.attr`,
`fusion`, `unet`, `disc`) so checkpoints partition cleanly and encoders can be
loaded/frozen independently of the generator.
"""

from __future__ import annotations

import math
from typing import Iterable

import torch
from torch import nn

from . import diffusion
from .conditioning import (
    AttributeEncoder,
    ConditionBundle,
    Conditioner,
    IdentityEncoder,
    SpatialEncoder,
)
from .denoiser import DenoiserConfig, UNet, augment_input

SPATIAL_ENCODER_SEED = 7130  # frozen random trunk; fixed so all runs share it


class SwapModel(nn.Module):
    def __init__(
        self,
        denoiser_config: DenoiserConfig | None = None,
        d_cond: int = 64,
        n_tokens: int = 4,
        n_identities: int = 200,
        pose_feats_per_angle: int = 20,
    ) -> None:
        super().__init__()
        cfg = denoiser_config or DenoiserConfig(d_cond=d_cond)
        if cfg.d_cond != d_cond:
            raise ValueError("denoiser d_cond must match condition token dim")
        self.unet = UNet(cfg)
        self.conditioner = Conditioner(d=d_cond, n_tokens=n_tokens,
                                       pose_feats_per_angle=pose_feats_per_angle)
        self.enc_id = IdentityEncoder(
            d=d_cond, n_identities=n_identities, resolution=cfg.resolution
        )
        gen = torch.Generator().manual_seed(SPATIAL_ENCODER_SEED)
        self.enc_spatial = SpatialEncoder(d=d_cond)
        with torch.no_grad():
            for p in self.enc_spatial.parameters():
                p.copy_(torch.randn(p.shape, generator=gen) * 0.2)
        self.enc_attr = AttributeEncoder(d=d_cond, resolution=cfg.resolution)
        self.freeze_encoders()

    def freeze_encoders(self) -> None:
        for enc in (self.enc_id, self.enc_spatial, self.enc_attr):
            for p in enc.parameters():
                p.requires_grad_(False)

    # ---- parameter naming -------------------------------------------------

    _TAGS = {
        "unet": "unet",
        "conditioner": "fusion",
        "enc_id": "enc.id",
        "enc_spatial": "enc.spatial",
        "enc_attr": "enc.attr",
    }

    def tagged_arrays(self) -> dict[str, torch.Tensor]:
        """All parameters and buffers under their component tags."""
        out = {}
        for attr, tag in self._TAGS.items():
            module = getattr(self, attr)
            for name, p in module.state_dict().items():
                out[f"{tag}.{name}"] = p
        return out

    def load_tagged_arrays(self, arrays: dict[str, torch.Tensor]) -> None:
        for attr, tag in self._TAGS.items():
            module = getattr(self, attr)
            state = {}
            plen = len(tag) + 1
            for name, val in arrays.items():
                if name.startswith(tag + "."):
                    ref = module.state_dict()[name[plen:]]
                    state[name[plen:]] = val.reshape(ref.shape).to(ref.dtype)
            module.load_state_dict(state)

    def trainable_parameters(self) -> dict[str, nn.Parameter]:
        """UNet + fusion parameters (encoders stay frozen)."""
        out = {}
        for attr in ("unet", "conditioner"):
            tag = self._TAGS[attr]
            for name, p in getattr(self, attr).named_parameters():
                out[f"{tag}.{name}"] = p
        return out

    # ---- condition path ----------------------------------------------------

    def build_bundle(
        self,
        source: torch.Tensor,
        target_pose: torch.Tensor,
        target: torch.Tensor,
        lambda_id: float,
        lambda_fuse: float,
    ) -> ConditionBundle:
        """Encode source identity/spatial features and target attributes."""
        with torch.no_grad():
            embed = self.enc_id.embed(source)
            c_dino = self.enc_spatial(source)
            c_attr = self.enc_attr(target)
        c_face = self.conditioner.identity_tokens(embed)
        return ConditionBundle(
            c_face=c_face, c_dino=c_dino, c_attr=c_attr, pose_vec=target_pose,
            lambda_id=lambda_id, lambda_fuse=lambda_fuse,
        )

    def condition(self, bundle: ConditionBundle) -> torch.Tensor:
        return self.conditioner.assemble(bundle)

    def predict_eps(
        self, x_t: torch.Tensor, mask: torch.Tensor, background_source: torch.Tensor,
        t: int, cond: torch.Tensor,
    ) -> torch.Tensor:
        aug = augment_input(x_t, mask, background_source)
        t_emb = diffusion.time_embedding_batch(
            [float(t)] * aug.shape[0], self.unet.config.time_dim, aug.dtype
        )
        return self.unet(aug, t_emb, cond)

    def sample_swap(
        self,
        x_start: torch.Tensor,
        mask: torch.Tensor,
        target: torch.Tensor,
        cond: torch.Tensor,
        sched: diffusion.NoiseSchedule,
        n_steps: int,
        grad_steps: Iterable[int] | None = None,
    ) -> torch.Tensor:
        """Inpainting DDIM swap: generates the masked face region over the
        target background."""

        def predict(x_t: torch.Tensor, t: int) -> torch.Tensor:
            return self.predict_eps(x_t, mask, x_t, t, cond)

        return diffusion.ddim_sample(
            predict, x_start, mask, target, sched, n_steps, grad_steps=grad_steps
        )


def zero_gates(model: SwapModel) -> None:
    """Reset every cross-attention adapter gate to its inert initialization."""
    with torch.no_grad():
        for name, p in model.unet.named_parameters():
            if name.endswith("attn.gate"):
                p.zero_()
