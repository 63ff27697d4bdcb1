"""Desk-scale evaluation: ID retrieval, pose/expression error, Frechet feature
distance and a background-preservation audit."""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .checkpoint import file_sha256, load_checkpoint
from .config import config_hash
from .training import Corpus, load_model_from_checkpoint, make_schedule_from_config, swap_indices


@dataclass(frozen=True)
class EvalReport:
    top1: float
    top5: float
    pose_err: float
    expr_err: float
    frechet: float
    bg_mse: float
    n_pairs: int

    def validate(self) -> None:
        fields = asdict(self)
        if any(not np.isfinite(v) for v in fields.values()):
            raise ValueError(f"non-finite report field: {fields}")
        if self.top1 > self.top5:
            raise ValueError("top1 cannot exceed top5")


def id_retrieval(
    outputs: torch.Tensor, sources: torch.Tensor, true_index: torch.Tensor
) -> tuple[float, float]:
    """Cosine-similarity retrieval of each output's true source in the gallery.

    `outputs`: (N, d) embeddings of swapped images; `sources`: (G, d) gallery
    embeddings, deduplicated per identity; `true_index[i]` is the gallery row
    of output i's real source.
    """
    if sources.shape[0] < 5:
        raise ValueError(f"gallery must hold >= 5 identities, got {sources.shape[0]}")
    out = torch.nn.functional.normalize(outputs, dim=-1)
    gal = torch.nn.functional.normalize(sources, dim=-1)
    sims = out @ gal.T
    ranks = sims.argsort(dim=-1, descending=True)
    hits = ranks == true_index[:, None]
    top1 = float(hits[:, :1].any(dim=-1).float().mean())
    top5 = float(hits[:, :5].any(dim=-1).float().mean())
    return top1, top5


def _probe_errors(
    outputs: torch.Tensor,
    true_values: torch.Tensor,
    probe,
    columns: list[int],
) -> float:
    """Mean absolute error of probe predictions on selected attribute columns."""
    with torch.no_grad():
        pred = probe.predict_attributes(outputs)[:, columns]
    return float((pred - true_values).abs().mean())


def pose_error(outputs: torch.Tensor, target_pose: torch.Tensor, probe) -> float:
    """Mean |predicted - ground truth| over yaw/roll/pitch, in radians.

    `target_pose` columns are (yaw, roll, pitch), matching the probe head.
    """
    return _probe_errors(outputs, target_pose, probe, [0, 1, 2])


def expression_error(outputs: torch.Tensor, target_curve: torch.Tensor, probe) -> float:
    """Mean |predicted - ground truth| mouth curvature."""
    return _probe_errors(outputs, target_curve, probe, [3])


def frechet_distance(features_a: torch.Tensor, features_b: torch.Tensor) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}) on feature sets.

    The matrix square root uses a symmetric eigendecomposition with negative
    eigenvalues clamped at zero.
    """
    a = features_a.detach().cpu().to(torch.float64).numpy()
    b = features_b.detach().cpu().to(torch.float64).numpy()
    d = a.shape[1]
    if a.shape[0] <= d or b.shape[0] <= d:
        raise ValueError(
            f"need more samples than feature dim ({d}) per set, got {a.shape[0]} and {b.shape[0]}"
        )
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    # tr sqrt(S_a S_b) via the symmetric PSD similar form sqrt(S_a) S_b sqrt(S_a)
    sqrt_a = _sym_sqrt(cov_a)
    inner = _sym_sqrt(sqrt_a @ cov_b @ sqrt_a)
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a + cov_b - 2.0 * inner))
    return max(value, 0.0)


def _sym_sqrt(mat: np.ndarray) -> np.ndarray:
    sym = (mat + mat.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def background_preservation(
    output: torch.Tensor, target: torch.Tensor, mask: torch.Tensor
) -> float:
    """MSE restricted to mask == 0 pixels."""
    if output.shape != target.shape:
        raise ValueError("output/target shape mismatch")
    if mask.dim() == output.dim() - 1:
        mask = mask.unsqueeze(-3)
    outside = (mask == 0).expand_as(output)
    if not outside.any():
        raise ValueError("empty background region")
    diff = (output - target)[outside]
    return float((diff**2).mean())


# ---------------------------------------------------------------------------
# full protocol


def run_eval(
    ckpt_path: str | Path,
    manifest_path: str | Path,
    n_pairs: int,
    seed: int,
    report_path: str | Path | None = None,
    sample_steps: int | None = None,
    plots_dir: str | Path | None = None,
) -> EvalReport:
    """Swap `n_pairs` seeded cross-identity pairs and compute all metrics."""
    ck = load_checkpoint(ckpt_path)
    if ck.stage < 1:
        raise ValueError(f"evaluation needs a stage >= 1 checkpoint, got stage {ck.stage}")
    cfg = ck.config
    model = load_model_from_checkpoint(ck)
    model.eval()
    corpus = Corpus.open(manifest_path)
    sched = make_schedule_from_config(cfg)
    steps = sample_steps if sample_steps is not None else cfg["eval"]["sample_steps"]

    rng = np.random.default_rng(seed)
    src_idx, tgt_idx = swap_indices(corpus, rng, n_pairs)
    gen = torch.Generator().manual_seed(seed)

    lam_id = cfg["stage2"]["lambda_id"] if ck.stage >= 2 else cfg["stage1"]["lambda_id"]
    lam_fuse = cfg["stage2"]["lambda_fuse"] if ck.stage >= 2 else 0.0

    outputs, bg_mses = [], []
    batch = 10
    with torch.no_grad():
        for start in range(0, n_pairs, batch):
            s = src_idx[start : start + batch]
            t = tgt_idx[start : start + batch]
            source = corpus.batch(s)["image"]
            tgt = corpus.batch(t)
            bundle = model.build_bundle(source, tgt["pose"], tgt["image"], lam_id, lam_fuse)
            cond = model.condition(bundle)
            x_start = torch.randn(tgt["image"].shape, generator=gen)
            image = model.sample_swap(x_start, tgt["mask"], tgt["image"], cond, sched, steps)
            outputs.append(image)
            for i in range(image.shape[0]):
                bg_mses.append(
                    background_preservation(image[i], tgt["image"][i], tgt["mask"][i])
                )
    output = torch.cat(outputs)

    # gallery: one deduplicated render per identity (first render)
    gallery_ids = sorted(corpus.by_identity)
    gallery_imgs = torch.stack(
        [corpus.image(corpus.records.index(corpus.by_identity[i][0])) for i in gallery_ids]
    )
    with torch.no_grad():
        gal_emb = model.enc_id.embed(gallery_imgs)
        out_emb = model.enc_id.embed(output)
    row_of = {ident: row for row, ident in enumerate(gallery_ids)}
    true_index = torch.tensor([row_of[corpus.records[i].identity_id] for i in src_idx])
    top1, top5 = id_retrieval(out_emb, gal_emb, true_index)

    tgt_attrs = torch.stack([corpus.attr_targets(i) for i in tgt_idx])
    p_err = pose_error(output, tgt_attrs[:, :3], model.enc_attr)
    e_err = expression_error(output, tgt_attrs[:, 3:4], model.enc_attr)

    real_imgs = torch.stack([corpus.image(i) for i in tgt_idx])
    with torch.no_grad():
        feats_fake = model.enc_id.embed(output)
        feats_real = model.enc_id.embed(real_imgs)
    # covariances need more samples than dims; truncate features on smoke runs
    feat_dim = min(feats_real.shape[1], n_pairs - 1)
    fd = frechet_distance(feats_real[:, :feat_dim], feats_fake[:, :feat_dim])

    report = EvalReport(
        top1=top1, top5=top5, pose_err=p_err, expr_err=e_err,
        frechet=fd, bg_mse=float(np.mean(bg_mses)), n_pairs=n_pairs,
    )
    report.validate()
    if report_path is not None:
        write_report(report, report_path, ckpt_path, cfg, seed)
    if plots_dir is not None:
        emit_plots(report, output, real_imgs, Path(plots_dir))
    return report


def write_report(
    report: EvalReport, path: str | Path, ckpt_path: str | Path, cfg: dict[str, Any], seed: int
) -> None:
    lines = [f"{key} = {value!r}" for key, value in sorted(asdict(report).items())]
    lines.append(f"checkpoint_sha256 = '{file_sha256(ckpt_path)}'")
    lines.append(f"config_hash = '{config_hash(cfg)}'")
    lines.append(f"seed = {seed}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_report(path: str | Path) -> dict[str, Any]:
    import ast

    out = {}
    for line in Path(path).read_text().splitlines():
        key, _, value = line.partition(" = ")
        out[key] = ast.literal_eval(value)
    return out


def emit_plots(report: EvalReport, outputs: torch.Tensor, targets: torch.Tensor, out_dir: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir.mkdir(parents=True, exist_ok=True)
    fields = {k: v for k, v in asdict(report).items() if k != "n_pairs"}
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar(list(fields), list(fields.values()))
    ax.set_title("evaluation metrics")
    ax.tick_params(axis="x", rotation=45)
    fig.tight_layout()
    fig.savefig(out_dir / "metrics.png")
    plt.close(fig)

    n = min(8, outputs.shape[0])
    fig, axes = plt.subplots(2, n, figsize=(2 * n, 4.5))
    for i in range(n):
        for row, imgs, label in ((0, targets, "target"), (1, outputs, "swap")):
            ax = axes[row, i]
            ax.imshow(((imgs[i].permute(1, 2, 0) + 1) / 2).clamp(0, 1).numpy())
            ax.set_axis_off()
            if i == 0:
                ax.set_title(label)
    fig.tight_layout()
    fig.savefig(out_dir / "samples.png")
    plt.close(fig)
