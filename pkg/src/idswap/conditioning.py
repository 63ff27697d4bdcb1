"""Identity/attribute encoders, attention fusion, pose embedding and condition assembly.

The identity and attribute encoders are small convolutional stand-ins that get
supervised pretraining on the synthetic corpus (see training.pretrain_encoders)
and are frozen afterwards. The spatial encoder is a frozen, purely
convolutional trunk. Fusion implements the two residual attention maps

    c_id   = c_face + lambda_id   * Attn(c_face, c_dino, c_dino)
    c_fuse = c_id   + lambda_fuse * Attn(c_id,   c_attr, c_attr)

with the second map's output projection zero-initialized so a fresh attribute
path is inert (cold start).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F


@dataclass
class ConditionBundle:
    """All conditioning inputs for one batch."""

    c_face: torch.Tensor  # (B, n, d)
    c_dino: torch.Tensor  # (B, m, d)
    c_attr: torch.Tensor  # (B, p, d)
    pose_vec: torch.Tensor  # (B, 3) roll, yaw, pitch in radians
    lambda_id: float = 1.0
    lambda_fuse: float = 1.0

    def __post_init__(self) -> None:
        if self.lambda_id < 0 or self.lambda_fuse < 0:
            raise ValueError("lambda factors must be non-negative")


class IdentityEncoder(nn.Module):
    """Convolutional identity classifier; the embedding is the L2-normalized
    penultimate activation."""

    def __init__(
        self, d: int = 64, n_identities: int = 200, width: int = 32,
        resolution: int = 64,
    ) -> None:
        super().__init__()
        if resolution % 16 != 0:
            raise ValueError("identity encoder input resolution must be divisible by 16")
        self.d = d
        self.trunk = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1),
            nn.GroupNorm(8, width), nn.ReLU(),
            nn.Conv2d(width, width * 2, 3, stride=2, padding=1),
            nn.GroupNorm(8, width * 2), nn.ReLU(),
            nn.Conv2d(width * 2, width * 2, 3, stride=2, padding=1),
            nn.GroupNorm(8, width * 2), nn.ReLU(),
            nn.Conv2d(width * 2, width * 2, 3, stride=2, padding=1),
            nn.GroupNorm(8, width * 2), nn.ReLU(),
        )
        # four stride-2 convs: resolution -> resolution/16 map; flattening the
        # map keeps the spatial layout available to the embedding
        self.fc = nn.Linear(width * 2 * (resolution // 16) ** 2, d)
        self.head = nn.Linear(d, n_identities)

    def embed(self, image: torch.Tensor) -> torch.Tensor:
        """L2-normalized identity embedding, shape (B, d)."""
        h = self.trunk(image).flatten(1)
        e = self.fc(h)
        return F.normalize(e, dim=-1)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.head(self.embed(image))


class SpatialEncoder(nn.Module):
    """Frozen purely convolutional trunk producing an 8x8 token grid at 64x64 input."""

    def __init__(self, d: int = 64, width: int = 32) -> None:
        super().__init__()
        self.d = d
        self.conv1 = nn.Conv2d(3, width, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(width, width * 2, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(width * 2, d, 3, stride=2, padding=1)

    def feature_map(self, image: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.conv1(image))
        h = F.relu(self.conv2(h))
        return self.conv3(h)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """Spatial tokens, shape (B, H*W, d)."""
        fm = self.feature_map(image)
        b, c, h, w = fm.shape
        return fm.view(b, c, h * w).transpose(1, 2)


class AttributeEncoder(nn.Module):
    """3-layer stride-2 downsampling trunk with an attribute-regression head.

    The head (pose angles, mouth curvature, lighting gradient) exists for
    pretraining and doubles as the evaluation probe; the diffusion model only
    consumes the trunk tokens.
    """

    N_ATTRS = 5  # yaw, roll, pitch, mouth_curve, brightness_grad

    def __init__(self, d: int = 64, width: int = 32, resolution: int = 64) -> None:
        super().__init__()
        if resolution % 8 != 0:
            raise ValueError("attribute encoder input resolution must be divisible by 8")
        self.d = d
        self.trunk = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1),
            nn.GroupNorm(8, width), nn.ReLU(),
            nn.Conv2d(width, width * 2, 3, stride=2, padding=1),
            nn.GroupNorm(8, width * 2), nn.ReLU(),
            nn.Conv2d(width * 2, d, 3, stride=2, padding=1),
            nn.GroupNorm(8, d), nn.ReLU(),
        )
        # regression over the flattened feature map: pose needs spatial layout
        self.head = nn.Sequential(
            nn.Linear(d * (resolution // 8) ** 2, 256),
            nn.ReLU(),
            nn.Linear(256, self.N_ATTRS),
        )

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """Attribute tokens from the downsampled feature map, shape (B, (H/8)*(W/8), d)."""
        fm = self.trunk(image)
        b, c, h, w = fm.shape
        return fm.view(b, c, h * w).transpose(1, 2)

    def predict_attributes(self, image: torch.Tensor) -> torch.Tensor:
        """Regression-head output (B, 5): yaw, roll, pitch, mouth_curve, brightness_grad."""
        fm = self.trunk(image)
        return self.head(fm.flatten(1))


class AttentionFusion(nn.Module):
    """Single-head cross attention branch: Attn(q Wq, kv Wk, kv Wv) Wo."""

    def __init__(self, d: int, zero_init_output: bool = False) -> None:
        super().__init__()
        self.d = d
        self.w_q = nn.Linear(d, d, bias=False)
        self.w_k = nn.Linear(d, d, bias=False)
        self.w_v = nn.Linear(d, d, bias=False)
        self.w_o = nn.Linear(d, d, bias=False)
        if zero_init_output:
            self.zero_output()

    def zero_output(self) -> None:
        with torch.no_grad():
            self.w_o.weight.zero_()

    def attention_weights(self, q_tokens: torch.Tensor, kv_tokens: torch.Tensor) -> torch.Tensor:
        q = self.w_q(q_tokens)
        k = self.w_k(kv_tokens)
        return torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.d), dim=-1)

    def forward(self, q_tokens: torch.Tensor, kv_tokens: torch.Tensor) -> torch.Tensor:
        if q_tokens.shape[-1] != self.d or kv_tokens.shape[-1] != self.d:
            raise ValueError(
                f"token dim mismatch: got {q_tokens.shape[-1]}/{kv_tokens.shape[-1]}, want {self.d}"
            )
        weights = self.attention_weights(q_tokens, kv_tokens)
        return self.w_o(weights @ self.w_v(kv_tokens))


def fourier_pose_features(pose_vec: torch.Tensor, feats_per_angle: int = 20) -> torch.Tensor:
    """Per-angle sinusoidal features, concatenated: (B, 3 * feats_per_angle).

    Each angle gets feats_per_angle/2 sine and cosine pairs at geometrically
    spaced frequencies, mirroring the diffusion step embedding.
    """
    if feats_per_angle % 2 != 0:
        raise ValueError("feats_per_angle must be even")
    if not torch.isfinite(pose_vec).all():
        raise ValueError("pose angles must be finite")
    half = feats_per_angle // 2
    freqs = torch.exp(
        -math.log(10000.0) * 2.0 * torch.arange(half, dtype=torch.float64) / feats_per_angle
    ).to(pose_vec.dtype)
    angles = pose_vec[..., :, None] * freqs  # (B, 3, half)
    feats = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)  # (B, 3, feats)
    return feats.reshape(*pose_vec.shape[:-1], 3 * feats_per_angle)


class Conditioner(nn.Module):
    """Trainable condition machinery: identity token expansion, the two fusion
    attention maps, and the pose projection."""

    def __init__(self, d: int = 64, n_tokens: int = 4, pose_feats_per_angle: int = 20) -> None:
        super().__init__()
        self.d = d
        self.n_tokens = n_tokens
        self.pose_feats_per_angle = pose_feats_per_angle
        self.expand = nn.Sequential(
            nn.Linear(d, d * n_tokens), nn.SiLU(), nn.Linear(d * n_tokens, d * n_tokens)
        )
        self.fuse_id = AttentionFusion(d)
        self.fuse_attr = AttentionFusion(d, zero_init_output=True)
        self.pose_proj = nn.Linear(3 * pose_feats_per_angle, d)

    def identity_tokens(self, embedding: torch.Tensor) -> torch.Tensor:
        """Expand an L2-normalized (B, d) identity vector into (B, n, d) tokens."""
        return self.expand(embedding).view(-1, self.n_tokens, self.d)

    def fuse_identity(
        self, c_face: torch.Tensor, c_dino: torch.Tensor, lambda_id: float
    ) -> torch.Tensor:
        if lambda_id == 0.0:
            return c_face
        return c_face + lambda_id * self.fuse_id(c_face, c_dino)

    def fuse_condition(
        self, c_id: torch.Tensor, c_attr: torch.Tensor, lambda_fuse: float
    ) -> torch.Tensor:
        if lambda_fuse == 0.0:
            return c_id
        return c_id + lambda_fuse * self.fuse_attr(c_id, c_attr)

    def encode_pose(self, pose_vec: torch.Tensor) -> torch.Tensor:
        """Project sinusoidal pose features to a single (B, 1, d) token."""
        feats = fourier_pose_features(pose_vec, self.pose_feats_per_angle)
        return self.pose_proj(feats).unsqueeze(-2)

    def assemble(self, bundle: ConditionBundle) -> torch.Tensor:
        """Final condition sequence: fused identity tokens plus the pose token,
        shape (B, n_tokens + 1, d)."""
        c_id = self.fuse_identity(bundle.c_face, bundle.c_dino, bundle.lambda_id)
        c_fuse = self.fuse_condition(c_id, bundle.c_attr, bundle.lambda_fuse)
        pose_token = self.encode_pose(bundle.pose_vec)
        return torch.cat([c_fuse, pose_token], dim=-2)
