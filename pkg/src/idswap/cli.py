"""Operator entry point: dataset synthesis, pretraining, staged training,
single-image swapping, evaluation and plotting.

One binary with subcommands; hyperparameters live in the config file, flags
cover paths, seeds and overrides. Outputs refuse to overwrite without --force.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np
import torch


def _apply_thread_cap() -> None:
    cap = os.environ.get("IDSWAP_THREADS")
    if cap:
        torch.set_num_threads(max(1, int(cap)))


def _guard_output(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass --force to overwrite")


def _add_force(p: argparse.ArgumentParser) -> None:
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="idswap",
        description="identity-constrained diffusion face swapping on synthetic faces",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="render the synthetic face corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--identities", type=int, default=200)
    p.add_argument("--per-identity", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=64)
    _add_force(p)

    p = sub.add_parser("pretrain", help="pretrain identity/attribute encoders")
    p.add_argument("--data", required=True, help="dataset directory (holds manifest.jsonl)")
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--out", required=True, help="encoder checkpoint path")
    _add_force(p)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", type=int, required=True, choices=(1, 2, 3))
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--data", required=True)
    p.add_argument("--resume", required=True, help="checkpoint of the previous stage")
    p.add_argument("--out", required=True)
    _add_force(p)

    p = sub.add_parser("swap", help="swap a source identity onto a target image")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lambda-fuse", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    _add_force(p)

    p = sub.add_parser("eval", help="run the evaluation protocol")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pairs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", required=True)
    p.add_argument("--plots", help="optional plot output directory")
    _add_force(p)

    p = sub.add_parser("plot", help="render charts from report files")
    p.add_argument("--report", required=True, nargs="+")
    p.add_argument("--out", required=True, help="output directory")
    _add_force(p)

    return parser


def _manifest_of(data_dir: str) -> Path:
    manifest = Path(data_dir) / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest at {manifest}")
    return manifest


def cmd_synth_data(args: argparse.Namespace) -> int:
    from .synthdata import build_dataset

    out = Path(args.out)
    _guard_output(out / "manifest.jsonl", args.force)
    manifest = build_dataset(out, args.identities, args.per_identity, args.seed, args.resolution)
    print(f"wrote {manifest} ({args.identities} identities x {args.per_identity} renders)")
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    from .config import load_config
    from .training import pretrain_encoders

    _guard_output(Path(args.out), args.force)
    cfg = load_config(args.config)
    metrics = pretrain_encoders(_manifest_of(args.data), cfg, args.out)
    print(f"identity accuracy: {metrics['identity_accuracy']:.4f}")
    for field, r2 in metrics["attribute_r2"].items():
        print(f"attribute R2 [{field}]: {r2:.4f}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    from .checkpoint import load_checkpoint
    from .config import load_config, stage_config
    from .training import TrainingError, train_stage1, train_stage2, train_stage3

    _guard_output(Path(args.out), args.force)
    cfg = load_config(args.config)
    resume = load_checkpoint(args.resume)
    if resume.stage != args.stage - 1:
        raise TrainingError(
            f"stage {args.stage} requires a stage-{args.stage - 1} checkpoint, "
            f"got stage {resume.stage}"
        )
    scfg = stage_config(cfg, args.stage)
    manifest = _manifest_of(args.data)
    runner = {1: train_stage1, 2: train_stage2, 3: train_stage3}[args.stage]
    meta = runner(manifest, scfg, cfg, args.resume, args.out)
    if "final_val_loss" in meta:
        print(f"stage {args.stage}: val loss {meta['initial_val_loss']:.4f} "
              f"-> {meta['final_val_loss']:.4f}")
    print(f"wrote {args.out}")
    return 0


def cmd_swap(args: argparse.Namespace) -> int:
    import json

    from .checkpoint import file_sha256, load_checkpoint
    from .synthdata import load_image, load_mask, to_uint8
    from .training import load_model_from_checkpoint, make_schedule_from_config
    from PIL import Image

    _guard_output(Path(args.out), args.force)
    for path in (args.source, args.target, args.ckpt):
        if not Path(path).exists():
            raise FileNotFoundError(path)
    ck = load_checkpoint(args.ckpt)
    if ck.stage < 1:
        raise ValueError(f"swap needs a stage >= 1 checkpoint, got stage {ck.stage}")
    cfg = ck.config
    lam_fuse = args.lambda_fuse
    if lam_fuse is None:
        lam_fuse = cfg["stage2"]["lambda_fuse"] if ck.stage >= 2 else 0.0
    if lam_fuse < 0:
        raise ValueError(f"lambda-fuse must be >= 0, got {lam_fuse}")
    lam_id = cfg["stage2"]["lambda_id"] if ck.stage >= 2 else cfg["stage1"]["lambda_id"]

    model = load_model_from_checkpoint(ck)
    model.eval()
    sched = make_schedule_from_config(cfg)
    res = cfg["model"]["resolution"]

    source = torch.from_numpy(load_image(args.source)).unsqueeze(0)
    target = torch.from_numpy(load_image(args.target)).unsqueeze(0)
    for name, img in (("source", source), ("target", target)):
        if img.shape[-2:] != (res, res):
            raise ValueError(f"{name} image must be {res}x{res}, got {tuple(img.shape[-2:])}")

    mask_file = Path(str(Path(args.target))[: -len(Path(args.target).suffix)] + ".mask.png")
    if mask_file.exists():
        mask = torch.from_numpy(load_mask(mask_file).astype(np.float32))[None, None]
    else:  # fallback: inscribed ellipse
        c = (res - 1) / 2.0
        ys, xs = np.mgrid[0:res, 0:res].astype(np.float64)
        ell = ((xs - c) / (0.45 * res)) ** 2 + ((ys - c) / (0.45 * res)) ** 2 <= 1.0
        mask = torch.from_numpy(ell.astype(np.float32))[None, None]

    pose = torch.zeros(1, 3)
    params_file = Path(str(Path(args.target))[: -len(Path(args.target).suffix)] + ".json")
    if params_file.exists():
        meta = json.loads(params_file.read_text())
        pose = torch.tensor([[meta["roll"], meta["yaw"], meta["pitch"]]], dtype=torch.float32)

    torch.manual_seed(args.seed)
    gen = torch.Generator().manual_seed(args.seed)
    with torch.no_grad():
        bundle = model.build_bundle(source, pose, target, lam_id, lam_fuse)
        cond = model.condition(bundle)
        x_start = torch.randn(target.shape, generator=gen)
        image = model.sample_swap(x_start, mask, target, cond, sched,
                                  cfg["diffusion"]["sample_steps"])
    Image.fromarray(to_uint8(image[0].clamp(-1, 1).numpy())).save(args.out)
    print(f"seed: {args.seed}")
    print(f"checkpoint_sha256: {file_sha256(args.ckpt)}")
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    from .evalsuite import run_eval

    _guard_output(Path(args.report), args.force)
    report = run_eval(
        args.ckpt, _manifest_of(args.data), args.pairs, args.seed,
        report_path=args.report, plots_dir=args.plots,
    )
    print(f"top1={report.top1:.3f} top5={report.top5:.3f} pose_err={report.pose_err:.4f} "
          f"expr_err={report.expr_err:.4f} frechet={report.frechet:.4f} bg_mse={report.bg_mse:.5f}")
    return 0


def cmd_plot(args: argparse.Namespace) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .evalsuite import read_report

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics = ["top1", "top5", "pose_err", "expr_err", "frechet", "bg_mse"]
    reports = [read_report(p) for p in args.report]
    names = [Path(p).stem for p in args.report]
    for metric in metrics:
        target = out_dir / f"{metric}.png"
        _guard_output(target, args.force)
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.bar(names, [r[metric] for r in reports])
        ax.set_title(metric)
        ax.tick_params(axis="x", rotation=30)
        fig.tight_layout()
        fig.savefig(target)
        plt.close(fig)
    print(f"wrote {len(metrics)} charts to {out_dir}")
    return 0


_COMMANDS = {
    "synth-data": cmd_synth_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "swap": cmd_swap,
    "eval": cmd_eval,
    "plot": cmd_plot,
}


def main(argv: list[str] | None = None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # single-line diagnostics, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
