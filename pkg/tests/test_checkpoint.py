import pytest
import torch

from idswap.checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    file_sha256,
    load_checkpoint,
    restore_rng_state,
    rng_state_snapshot,
    save_checkpoint,
)


@pytest.fixture
def sample_arrays():
    g = torch.Generator().manual_seed(7)
    return {
        "unet.block.weight": torch.randn(4, 3, 3, 3, generator=g),
        "unet.block.bias": torch.randn(4, generator=g),
        "fusion.w_o.weight": torch.randn(8, 8, generator=g),
        "opt.step_count": torch.tensor([12.0]),
    }


class TestRoundTrip:
    def test_arrays_bitwise(self, tmp_path, sample_arrays):
        path = tmp_path / "a.ckpt"
        save_checkpoint(path, stage=1, arrays=sample_arrays, config={"seed": 3})
        ck = load_checkpoint(path)
        assert sorted(ck.arrays) == sorted(sample_arrays)
        for name, t in sample_arrays.items():
            assert torch.equal(ck.arrays[name], t)
            assert ck.arrays[name].dtype == torch.float32

    def test_header_fields(self, tmp_path, sample_arrays):
        path = tmp_path / "a.ckpt"
        meta = {"final_val_loss": 0.5, "n_identities": 12}
        save_checkpoint(path, stage=2, arrays=sample_arrays, config={"seed": 3}, extra_meta=meta)
        ck = load_checkpoint(path)
        assert ck.stage == 2
        assert ck.config == {"seed": 3}
        assert ck.meta == meta

    def test_component_prefix_filter(self, tmp_path, sample_arrays):
        path = tmp_path / "a.ckpt"
        save_checkpoint(path, stage=1, arrays=sample_arrays, config={})
        ck = load_checkpoint(path)
        unet = ck.component("unet")
        assert sorted(unet) == ["block.bias", "block.weight"]
        assert torch.equal(unet["block.weight"], sample_arrays["unet.block.weight"])

    def test_scalar_and_empty_arrays(self, tmp_path):
        path = tmp_path / "a.ckpt"
        arrays = {"s": torch.tensor(2.5), "e": torch.zeros(0)}
        save_checkpoint(path, stage=1, arrays=arrays, config={})
        ck = load_checkpoint(path)
        assert float(ck.arrays["s"]) == 2.5
        assert ck.arrays["e"].numel() == 0

    def test_save_is_deterministic(self, tmp_path, sample_arrays):
        rng = rng_state_snapshot()
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, 1, sample_arrays, {"seed": 0}, rng_state=rng)
        save_checkpoint(p2, 1, sample_arrays, {"seed": 0}, rng_state=rng)
        assert file_sha256(p1) == file_sha256(p2)


class TestValidation:
    def test_rejects_wrong_magic(self, tmp_path):
        path = tmp_path / "junk"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
        with pytest.raises(ValueError, match="not a checkpoint"):
            load_checkpoint(path)

    def test_rejects_wrong_version(self, tmp_path, sample_arrays):
        path = tmp_path / "a.ckpt"
        save_checkpoint(path, 1, sample_arrays, {})
        raw = bytearray(path.read_bytes())
        assert raw[:8] == MAGIC and FORMAT_VERSION == 1
        raw[8] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(path)


class TestRngState:
    def test_restore_reproduces_stream(self):
        torch.manual_seed(42)
        snap = rng_state_snapshot()
        a = torch.randn(5)
        restore_rng_state(snap)
        b = torch.randn(5)
        assert torch.equal(a, b)

    def test_round_trips_through_file(self, tmp_path):
        torch.manual_seed(9)
        snap = rng_state_snapshot()
        save_checkpoint(tmp_path / "a.ckpt", 1, {"x": torch.zeros(1)}, {}, rng_state=snap)
        expected = torch.randn(3)
        restore_rng_state(load_checkpoint(tmp_path / "a.ckpt").rng_state)
        assert torch.equal(torch.randn(3), expected)
