"""Encoder pretraining, the three-stage training scheduler, and checkpointing.

Stage 1 tunes the inpainting denoiser with identity-only conditioning
(lambda_fuse = 0). Stage 2 re-zeroes the attribute fusion output projection
(cold start), enables the fused condition (lambda_fuse = 1) and weakens the
spatial enhancement factor to 0.2. Stage 3 treats the whole DDIM sampler as
one generative model and refines it with hinge-adversarial + identity losses,
backpropagating through k randomly sampled steps only.

Batch composition is a pure function of the seed, so reruns consume identical
batch sequences.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch.nn import functional as F

from . import diffusion
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .conditioning import AttributeEncoder, IdentityEncoder
from .config import StageConfig
from .denoiser import DenoiserConfig, augment_input
from .gan import Discriminator, DiscriminatorConfig, hinge_d_loss, hinge_g_loss
from .model import SwapModel
from .optim import AdaptiveMoment
from .synthdata import ManifestRecord, load_image, load_mask, records_by_identity

ATTR_TARGET_FIELDS = ("yaw", "roll", "pitch", "mouth_curve", "brightness_grad")


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# corpus access


class Corpus:
    """Manifest-backed image/mask cache with tensor accessors."""

    def __init__(self, records: list[ManifestRecord], root: Path) -> None:
        self.records = records
        self.root = Path(root)
        self.by_identity = records_by_identity(records)
        self._images: dict[int, torch.Tensor] = {}
        self._masks: dict[int, torch.Tensor] = {}

    @staticmethod
    def open(manifest_path: str | Path) -> "Corpus":
        from .synthdata import load_manifest

        path = Path(manifest_path)
        return Corpus(load_manifest(path), path.parent)

    def image(self, idx: int) -> torch.Tensor:
        if idx not in self._images:
            self._images[idx] = torch.from_numpy(load_image(self.root / self.records[idx].path))
        return self._images[idx]

    def mask(self, idx: int) -> torch.Tensor:
        if idx not in self._masks:
            m = load_mask(self.root / self.records[idx].mask_path)
            self._masks[idx] = torch.from_numpy(m.astype(np.float32)).unsqueeze(0)
        return self._masks[idx]

    def pose(self, idx: int) -> torch.Tensor:
        a = self.records[idx].attributes()
        return torch.tensor([a.roll, a.yaw, a.pitch], dtype=torch.float32)

    def attr_targets(self, idx: int) -> torch.Tensor:
        a = self.records[idx].attributes()
        return torch.tensor([getattr(a, f) for f in ATTR_TARGET_FIELDS], dtype=torch.float32)

    def batch(self, indices: list[int]) -> dict[str, torch.Tensor]:
        return {
            "image": torch.stack([self.image(i) for i in indices]),
            "mask": torch.stack([self.mask(i) for i in indices]),
            "pose": torch.stack([self.pose(i) for i in indices]),
            "attrs": torch.stack([self.attr_targets(i) for i in indices]),
        }

    def holdout_split(self, fraction: float) -> tuple[list[int], list[int]]:
        """Per-identity deterministic split: the last ceil(fraction * n)
        renders of every identity are held out."""
        train, held = [], []
        index_of = {id(rec): i for i, rec in enumerate(self.records)}
        for ident in sorted(self.by_identity):
            group = self.by_identity[ident]
            n_held = max(1, math.ceil(fraction * len(group)))
            for rec in group[:-n_held]:
                train.append(index_of[id(rec)])
            for rec in group[-n_held:]:
                held.append(index_of[id(rec)])
        return train, held


def pair_indices(corpus: Corpus, rng: np.random.Generator, batch_size: int,
                 identities: list[int] | None = None) -> tuple[list[int], list[int]]:
    """Same-identity (source, target) index pairs for one batch."""
    pool = identities if identities is not None else sorted(
        i for i, g in corpus.by_identity.items() if len(g) >= 2
    )
    rec_index = {(r.identity_id, r.path): i for i, r in enumerate(corpus.records)}
    src, tgt = [], []
    for _ in range(batch_size):
        ident = pool[int(rng.integers(0, len(pool)))]
        group = corpus.by_identity[ident]
        i, j = rng.choice(len(group), size=2, replace=False)
        src.append(rec_index[(ident, group[int(i)].path)])
        tgt.append(rec_index[(ident, group[int(j)].path)])
    return src, tgt


def swap_indices(corpus: Corpus, rng: np.random.Generator, batch_size: int) -> tuple[list[int], list[int]]:
    """Cross-identity (source, target) index pairs for one batch."""
    src, tgt = [], []
    n = len(corpus.records)
    while len(src) < batch_size:
        i, j = rng.integers(0, n, size=2)
        if corpus.records[int(i)].identity_id != corpus.records[int(j)].identity_id:
            src.append(int(i))
            tgt.append(int(j))
    return src, tgt


# ---------------------------------------------------------------------------
# encoder pretraining


def _r2_per_field(pred: torch.Tensor, true: torch.Tensor) -> list[float]:
    resid = ((pred - true) ** 2).sum(dim=0)
    total = ((true - true.mean(dim=0)) ** 2).sum(dim=0)
    return (1.0 - resid / total).tolist()


def pretrain_encoders(
    manifest_path: str | Path,
    cfg: dict[str, Any],
    out_path: str | Path,
) -> dict[str, Any]:
    """Train the identity classifier and attribute regressor, freeze them and
    write a stage-0 checkpoint. Returns held-out metrics."""
    corpus = Corpus.open(manifest_path)
    n_identities = len(corpus.by_identity)
    if n_identities < 10:
        raise TrainingError(f"dataset too small: {n_identities} identities (< 10)")
    torch.manual_seed(cfg["seed"])
    pre = cfg["pretrain"]
    train_idx, held_idx = corpus.holdout_split(pre["holdout_fraction"])

    res = cfg["model"]["resolution"]
    enc_id = IdentityEncoder(d=cfg["cond"]["d"], n_identities=n_identities, resolution=res)
    enc_attr = AttributeEncoder(d=cfg["cond"]["d"], resolution=res)
    labels = torch.tensor([corpus.records[i].identity_id for i in train_idx])
    held_labels = torch.tensor([corpus.records[i].identity_id for i in held_idx])

    rng = np.random.default_rng(cfg["seed"])
    batch = pre["batch_size"]

    jobs = (
        (enc_id, "identity", pre["identity_epochs"], pre["identity_learning_rate"]),
        (enc_attr, "attributes", pre["attribute_epochs"], pre["attribute_learning_rate"]),
    )
    for enc, mode, epochs, lr in jobs:
        opt = AdaptiveMoment(dict(enc.named_parameters()), lr=lr)
        decay_at = {int(f * epochs) for f in pre["lr_decay_milestones"]}
        for ep in range(epochs):
            if ep in decay_at:
                opt.lr *= 0.5
            order = rng.permutation(len(train_idx))
            for start in range(0, len(order) - batch + 1, batch):
                sel = [train_idx[k] for k in order[start : start + batch]]
                data = corpus.batch(sel)
                if mode == "identity":
                    logits = enc_id(data["image"])
                    loss = F.cross_entropy(logits, labels[order[start : start + batch]])
                else:
                    pred = enc_attr.predict_attributes(data["image"])
                    loss = F.mse_loss(pred, data["attrs"])
                opt.zero_grad()
                loss.backward()
                opt.step()

    with torch.no_grad():
        held = corpus.batch(held_idx)
        acc = float((enc_id(held["image"]).argmax(dim=1) == held_labels).float().mean())
        r2 = _r2_per_field(enc_attr.predict_attributes(held["image"]), held["attrs"])

    for enc in (enc_id, enc_attr):
        for p in enc.parameters():
            p.requires_grad_(False)

    metrics = {
        "identity_accuracy": acc,
        "attribute_r2": dict(zip(ATTR_TARGET_FIELDS, r2)),
        "n_identities": n_identities,
    }
    arrays = {}
    for tag, enc in (("enc.id", enc_id), ("enc.attr", enc_attr)):
        for name, val in enc.state_dict().items():
            arrays[f"{tag}.{name}"] = val
    save_checkpoint(out_path, stage=0, arrays=arrays, config=cfg, extra_meta=metrics)
    return metrics


# ---------------------------------------------------------------------------
# shared stage machinery


def build_model(cfg: dict[str, Any], n_identities: int) -> SwapModel:
    m = cfg["model"]
    dcfg = DenoiserConfig(
        resolution=m["resolution"],
        base_channels=m["base_channels"],
        channel_mults=tuple(m["channel_mults"]),
        num_res_blocks=m["num_res_blocks"],
        attention_resolutions=tuple(m["attention_resolutions"]),
        d_cond=cfg["cond"]["d"],
        n_heads=m["n_heads"],
    )
    return SwapModel(
        denoiser_config=dcfg,
        d_cond=cfg["cond"]["d"],
        n_tokens=cfg["cond"]["n_tokens"],
        n_identities=n_identities,
        pose_feats_per_angle=cfg["cond"]["pose_feats_per_angle"],
    )


def make_schedule_from_config(cfg: dict[str, Any]) -> diffusion.NoiseSchedule:
    d = cfg["diffusion"]
    return diffusion.make_schedule(d["T"], d["beta_start"], d["beta_end"])


def identity_loss(output: torch.Tensor, source: torch.Tensor, enc_id: IdentityEncoder) -> torch.Tensor:
    """1 - cosine similarity of frozen identity embeddings, in [0, 2]."""
    e_out = enc_id.embed(output)
    with torch.no_grad():
        e_src = enc_id.embed(source)
    return (1.0 - (e_out * e_src).sum(dim=-1)).mean()


def sampled_step_backprop(
    model: SwapModel,
    x_start: torch.Tensor,
    mask: torch.Tensor,
    target: torch.Tensor,
    cond: torch.Tensor,
    sched: diffusion.NoiseSchedule,
    sample_steps: int,
    k: int,
    rng: np.random.Generator,
) -> torch.Tensor:
    """DDIM swap whose gradient flows through exactly k uniformly chosen steps.

    Forward values equal plain sampling for every k; the noise predictions of
    non-sampled steps enter the update as constants, so the denoiser graph is
    only kept for the k sampled steps.
    """
    if not 1 <= k <= sample_steps:
        raise ValueError(f"k must lie in [1, {sample_steps}], got {k}")
    chosen = rng.choice(sample_steps, size=k, replace=False)
    return model.sample_swap(
        x_start, mask, target, cond, sched, sample_steps,
        grad_steps=(int(i) for i in chosen),
    )


def _diffusion_step_loss(
    model: SwapModel,
    corpus: Corpus,
    src_idx: list[int],
    tgt_idx: list[int],
    stage_cfg: StageConfig,
    sched: diffusion.NoiseSchedule,
    gen: torch.Generator,
) -> torch.Tensor:
    source = corpus.batch(src_idx)["image"]
    tgt = corpus.batch(tgt_idx)
    target, mask, pose = tgt["image"], tgt["mask"], tgt["pose"]
    b = target.shape[0]
    ts = torch.randint(1, sched.total_steps + 1, (b,), generator=gen)
    eps = torch.randn(target.shape, generator=gen)
    ab = sched.alpha_bars.to(torch.float32)[ts - 1].view(b, 1, 1, 1)
    x_t = ab.sqrt() * target + (1.0 - ab).sqrt() * eps

    bundle = model.build_bundle(source, pose, target,
                                stage_cfg.lambda_id, stage_cfg.lambda_fuse)
    cond = model.condition(bundle)
    aug = augment_input(x_t, mask, x_t)
    t_emb = diffusion.time_embedding_batch(
        [float(t) for t in ts.tolist()], model.unet.config.time_dim
    )
    eps_hat = model.unet(aug, t_emb, cond)
    return diffusion.diffusion_loss(eps_hat, eps)


def _run_diffusion_stage(
    corpus: Corpus,
    stage_cfg: StageConfig,
    cfg: dict[str, Any],
    model: SwapModel,
    out_path: str | Path,
    resume_meta: dict[str, Any],
    extra_arrays: dict[str, torch.Tensor] | None = None,
) -> dict[str, Any]:
    sched = make_schedule_from_config(cfg)
    seed = cfg["seed"] + stage_cfg.stage
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)

    val_rng = np.random.default_rng(seed + 10_000)
    val_gen = torch.Generator().manual_seed(seed + 10_000)
    val_src, val_tgt = pair_indices(corpus, val_rng, stage_cfg.batch_size)

    def val_loss() -> float:
        g = torch.Generator().manual_seed(val_gen.initial_seed())
        with torch.no_grad():
            return float(_diffusion_step_loss(model, corpus, val_src, val_tgt, stage_cfg, sched, g))

    opt = AdaptiveMoment(model.trainable_parameters(), lr=stage_cfg.learning_rate)
    initial_val = val_loss()
    for step in range(stage_cfg.steps):
        src_idx, tgt_idx = pair_indices(corpus, rng, stage_cfg.batch_size)
        loss = _diffusion_step_loss(model, corpus, src_idx, tgt_idx, stage_cfg, sched, gen)
        if not torch.isfinite(loss):
            raise TrainingError(
                f"non-finite diffusion loss at stage {stage_cfg.stage} step {step}: {loss.item()}"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
    final_val = val_loss()

    meta = dict(resume_meta)
    meta.update({
        "lambda_id": stage_cfg.lambda_id,
        "lambda_fuse": stage_cfg.lambda_fuse,
        "steps": stage_cfg.steps,
        "initial_val_loss": initial_val,
        "final_val_loss": final_val,
        "optimizer": {"kind": "adaptive_moment", "lr": stage_cfg.learning_rate,
                      "beta2": opt.beta2, "eps": opt.eps},
    })
    arrays = model.tagged_arrays()
    for name, v in opt.state_arrays().items():
        arrays[f"opt.{name}"] = v
    if extra_arrays:
        arrays.update(extra_arrays)
    save_checkpoint(out_path, stage=stage_cfg.stage, arrays=arrays, config=cfg, extra_meta=meta)
    return meta


def train_stage1(
    manifest_path: str | Path,
    stage_cfg: StageConfig,
    cfg: dict[str, Any],
    encoder_ckpt: str | Path,
    out_path: str | Path,
) -> dict[str, Any]:
    """Identity-oriented inpainting tuning from pretrained encoders."""
    if stage_cfg.lambda_fuse != 0.0:
        raise TrainingError("stage 1 requires lambda_fuse = 0")
    ck = load_checkpoint(encoder_ckpt)
    if ck.stage != 0:
        raise TrainingError(f"stage 1 must start from a stage-0 encoder checkpoint, got stage {ck.stage}")
    corpus = Corpus.open(manifest_path)
    torch.manual_seed(cfg["seed"] + 1)  # fresh UNet/fusion init must not depend on ambient RNG state
    model = build_model(cfg, int(ck.meta["n_identities"]))
    enc_arrays = {k: v for k, v in ck.arrays.items() if k.startswith("enc.")}
    model.load_tagged_arrays({**model.tagged_arrays(), **enc_arrays})
    return _run_diffusion_stage(corpus, stage_cfg, cfg, model, out_path,
                                {"n_identities": ck.meta["n_identities"]})


def load_model_from_checkpoint(ck: Checkpoint, cfg: dict[str, Any] | None = None) -> SwapModel:
    cfg = cfg or ck.config
    model = build_model(cfg, int(ck.meta["n_identities"]))
    model.load_tagged_arrays({k: v for k, v in ck.arrays.items()
                              if not k.startswith(("opt.", "disc."))})
    return model


def train_stage2(
    manifest_path: str | Path,
    stage_cfg: StageConfig,
    cfg: dict[str, Any],
    stage1_ckpt: str | Path,
    out_path: str | Path,
) -> dict[str, Any]:
    """Attribute tuning with the zero-initialized cold start."""
    ck = load_checkpoint(stage1_ckpt)
    if ck.stage != 1:
        raise TrainingError(f"stage 2 must resume a stage-1 checkpoint, got stage {ck.stage}")
    corpus = Corpus.open(manifest_path)
    model = load_model_from_checkpoint(ck, cfg)
    model.conditioner.fuse_attr.zero_output()  # cold start, exactly once at entry
    return _run_diffusion_stage(corpus, stage_cfg, cfg, model, out_path,
                                {"n_identities": ck.meta["n_identities"]})


def train_stage3(
    manifest_path: str | Path,
    stage_cfg: StageConfig,
    cfg: dict[str, Any],
    stage2_ckpt: str | Path,
    out_path: str | Path,
) -> dict[str, Any]:
    """End-to-end refinement with hinge-adversarial + identity losses through
    sampled-step backprop. The diffusion loss is deliberately not included."""
    ck = load_checkpoint(stage2_ckpt)
    if ck.stage != 2:
        raise TrainingError(f"stage 3 must resume a stage-2 checkpoint, got stage {ck.stage}")
    corpus = Corpus.open(manifest_path)
    model = load_model_from_checkpoint(ck, cfg)
    sched = make_schedule_from_config(cfg)
    s3 = cfg["stage3"]
    disc_cfg = DiscriminatorConfig(
        widths=tuple(s3["disc_widths"]),
        n_power_iterations=s3["disc_power_iterations"],
        resolution=cfg["model"]["resolution"],
    )
    seed = cfg["seed"] + 3
    torch.manual_seed(seed)
    disc = Discriminator(disc_cfg)
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)

    g_opt = AdaptiveMoment(model.trainable_parameters(), lr=stage_cfg.learning_rate)
    d_opt = AdaptiveMoment(dict(disc.named_parameters()), lr=stage_cfg.disc_learning_rate)

    def generate(src_idx: list[int], tgt_idx: list[int]) -> tuple[torch.Tensor, torch.Tensor]:
        source = corpus.batch(src_idx)["image"]
        tgt = corpus.batch(tgt_idx)
        bundle = model.build_bundle(source, tgt["pose"], tgt["image"],
                                    stage_cfg.lambda_id, stage_cfg.lambda_fuse)
        cond = model.condition(bundle)
        x_start = torch.randn(tgt["image"].shape, generator=gen)
        image = sampled_step_backprop(
            model, x_start, tgt["mask"], tgt["image"], cond, sched,
            stage_cfg.sample_steps, stage_cfg.k, rng,
        )
        return image, source

    for step in range(stage_cfg.steps):
        src_idx, tgt_idx = swap_indices(corpus, rng, stage_cfg.batch_size)
        real_idx = [int(i) for i in rng.integers(0, len(corpus.records), stage_cfg.batch_size)]

        # discriminator update
        with torch.no_grad():
            fake, _ = generate(src_idx, tgt_idx)
        real = corpus.batch(real_idx)["image"]
        d_loss = hinge_d_loss(disc(real), disc(fake))
        if not torch.isfinite(d_loss):
            raise TrainingError(f"non-finite discriminator loss at step {step}")
        d_opt.zero_grad()
        d_loss.backward()
        d_opt.step()

        # generator update
        if stage_cfg.lambda_adv == 0.0 and stage_cfg.lambda_id_loss == 0.0:
            continue
        fake, source = generate(src_idx, tgt_idx)
        g_loss = (
            stage_cfg.lambda_adv * hinge_g_loss(disc(fake))
            + stage_cfg.lambda_id_loss * identity_loss(fake, source, model.enc_id)
        )
        if not torch.isfinite(g_loss):
            raise TrainingError(f"non-finite generator loss at step {step}")
        g_opt.zero_grad()
        g_loss.backward()
        g_opt.step()

    meta = {
        "n_identities": ck.meta["n_identities"],
        "lambda_id": stage_cfg.lambda_id,
        "lambda_fuse": stage_cfg.lambda_fuse,
        "k": stage_cfg.k,
        "sample_steps": stage_cfg.sample_steps,
        "lambda_adv": stage_cfg.lambda_adv,
        "lambda_id_loss": stage_cfg.lambda_id_loss,
        "steps": stage_cfg.steps,
        "noise_seed": seed,
        "optimizer": {"kind": "adaptive_moment", "lr": stage_cfg.learning_rate,
                      "disc_lr": stage_cfg.disc_learning_rate},
    }
    arrays = model.tagged_arrays()
    for name, v in disc.state_dict().items():
        arrays[f"disc.{name}"] = v
    for name, v in g_opt.state_arrays().items():
        arrays[f"opt.{name}"] = v
    save_checkpoint(out_path, stage=3, arrays=arrays, config=cfg, extra_meta=meta)
    return meta
