import numpy as np
import pytest
import torch

from idswap.config import default_config
from idswap.synthdata import build_dataset
from idswap.training import Corpus


def small_config(tmp: bool = True) -> dict:
    """Tiny 32x32 run configuration for fast unit tests."""
    cfg = default_config()
    cfg["model"].update(
        resolution=32, base_channels=8, channel_mults=[1, 2], num_res_blocks=1,
        attention_resolutions=[16],
    )
    cfg["diffusion"].update(T=50, sample_steps=10)
    cfg["eval"].update(sample_steps=5, pairs=5)
    cfg["pretrain"].update(
        identity_epochs=2, attribute_epochs=2, batch_size=16,
        identity_learning_rate=3e-3, attribute_learning_rate=3e-3,
    )
    for stage in ("stage1", "stage2", "stage3"):
        cfg[stage].update(steps=2, batch_size=2)
    cfg["stage3"].update(sample_steps=4, k=2, disc_widths=[8, 16])
    return cfg


@pytest.fixture(scope="session")
def tiny_config():
    return small_config()


@pytest.fixture(scope="session")
def tiny_corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus32")
    build_dataset(out, n_identities=12, renders_per_identity=3, seed=5, resolution=32)
    return out


@pytest.fixture(scope="session")
def tiny_corpus(tiny_corpus_dir):
    return Corpus.open(tiny_corpus_dir / "manifest.jsonl")


@pytest.fixture(scope="session")
def tiny_pipeline(tiny_config, tiny_corpus_dir, tmp_path_factory):
    """Pretrain + all three stages at toy scale; returns checkpoint paths."""
    from idswap.config import stage_config
    from idswap.training import pretrain_encoders, train_stage1, train_stage2, train_stage3

    out = tmp_path_factory.mktemp("pipeline")
    manifest = tiny_corpus_dir / "manifest.jsonl"
    paths = {s: out / f"stage{s}.ckpt" for s in (0, 1, 2, 3)}
    metrics = pretrain_encoders(manifest, tiny_config, paths[0])
    meta1 = train_stage1(manifest, stage_config(tiny_config, 1), tiny_config, paths[0], paths[1])
    meta2 = train_stage2(manifest, stage_config(tiny_config, 2), tiny_config, paths[1], paths[2])
    meta3 = train_stage3(manifest, stage_config(tiny_config, 3), tiny_config, paths[2], paths[3])
    return {
        "manifest": manifest,
        "paths": paths,
        "pretrain_metrics": metrics,
        "meta": {1: meta1, 2: meta2, 3: meta3},
        "config": tiny_config,
    }


@pytest.fixture(autouse=True)
def _seeded():
    torch.manual_seed(1234)
    np.random.seed(1234)
