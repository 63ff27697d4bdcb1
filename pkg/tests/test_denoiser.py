import math

import pytest
import torch

from idswap.denoiser import DenoiserConfig, GatedCrossAttention, UNet, augment_input, predict_noise
from idswap.diffusion import diffusion_loss, time_embedding_batch

TINY = DenoiserConfig(
    resolution=16, base_channels=8, channel_mults=(1, 2), num_res_blocks=1,
    attention_resolutions=(8,), d_cond=8,
)


class TestAugmentInput:
    def test_full_foreground(self):
        x = torch.randn(2, 3, 4, 4)
        aug = augment_input(x, torch.ones(2, 1, 4, 4), x)
        assert torch.equal(aug[:, 4:], torch.zeros(2, 3, 4, 4))

    def test_full_background(self):
        x = torch.randn(2, 3, 4, 4)
        tgt = torch.randn(2, 3, 4, 4)
        aug = augment_input(x, torch.zeros(2, 1, 4, 4), tgt)
        assert torch.equal(aug[:, 4:], tgt)

    def test_channel_order(self):
        x = torch.randn(1, 3, 4, 4)
        m = (torch.rand(1, 1, 4, 4) > 0.5).float()
        aug = augment_input(x, m, x)
        assert aug.shape == (1, 7, 4, 4)
        assert torch.equal(aug[:, :3], x)
        assert torch.equal(aug[:, 3:4], m)

    def test_checkerboard_hand_oracle(self):
        m = torch.tensor([[[[1.0, 0.0], [0.0, 1.0]]]])
        tgt = torch.tensor([[[[1.0, 2.0], [3.0, 4.0]]] * 3])
        aug = augment_input(torch.zeros(1, 3, 2, 2), m, tgt)
        expected = torch.tensor([[0.0, 2.0], [3.0, 0.0]])
        for ch in range(3):
            assert torch.equal(aug[0, 4 + ch], expected)

    def test_rejects_non_binary_mask(self):
        x = torch.zeros(1, 3, 2, 2)
        with pytest.raises(ValueError):
            augment_input(x, torch.full((1, 1, 2, 2), 0.5), x)


class TestGatedCrossAttention:
    def test_zero_gate_identity(self):
        attn = GatedCrossAttention(8, 6)
        hidden = torch.randn(2, 5, 8)
        out = attn(hidden, torch.randn(2, 3, 6))
        assert torch.equal(out, hidden)

    def test_single_key_normalization(self):
        attn = GatedCrossAttention(8, 6)
        with torch.no_grad():
            attn.gate.fill_(0.7)
        hidden = torch.randn(1, 4, 8)
        cond = torch.randn(1, 1, 6)
        out = attn(hidden, cond)
        # softmax over one key is 1: every query receives Wo(Wv(token))
        expected = hidden + math.tanh(0.7) * attn.w_o(attn.w_v(cond))
        assert torch.allclose(out, expected, atol=1e-6)

    def test_matches_dense_softmax_oracle(self):
        attn = GatedCrossAttention(8, 6).double()
        with torch.no_grad():
            attn.gate.fill_(1.3)
        hidden = torch.randn(1, 3, 8, dtype=torch.float64)
        cond = torch.randn(1, 2, 6, dtype=torch.float64)

        q = hidden[0] @ attn.w_q.weight.T
        k = cond[0] @ attn.w_k.weight.T
        v = cond[0] @ attn.w_v.weight.T
        scores = (q @ k.T) / math.sqrt(8)
        w = torch.exp(scores)
        w = w / w.sum(dim=-1, keepdim=True)
        oracle = hidden[0] + math.tanh(1.3) * (w @ v) @ attn.w_o.weight.T

        out = attn(hidden, cond)[0]
        assert float((out - oracle).abs().max().detach()) <= 1e-10

    def test_attention_rows_sum_to_one(self):
        attn = GatedCrossAttention(8, 6)
        w = attn.attention_weights(torch.randn(2, 5, 8), torch.randn(2, 4, 6))
        assert torch.allclose(w.sum(dim=-1), torch.ones(2, 1, 5), atol=1e-6)

    def test_rejects_dim_mismatch(self):
        attn = GatedCrossAttention(8, 6)
        with pytest.raises(ValueError):
            attn(torch.randn(1, 3, 7), torch.randn(1, 2, 6))


class TestUNet:
    def test_output_shape(self):
        unet = UNet(TINY)
        aug = torch.randn(2, 7, 16, 16)
        t_emb = time_embedding_batch([3.0, 9.0], TINY.time_dim)
        out = unet(aug, t_emb, torch.randn(2, 5, 8))
        assert out.shape == (2, 3, 16, 16)

    def test_zero_gate_condition_invariance(self):
        unet = UNet(TINY)
        aug = torch.randn(1, 7, 16, 16)
        t_emb = time_embedding_batch([4.0], TINY.time_dim)
        out_a = unet(aug, t_emb, torch.randn(1, 5, 8))
        out_b = unet(aug, t_emb, torch.randn(1, 5, 8) * 100)
        assert torch.equal(out_a, out_b)

    def test_parameter_count_determinism(self):
        a, b = UNet(TINY), UNet(TINY)
        shapes_a = {n: tuple(p.shape) for n, p in a.named_parameters()}
        shapes_b = {n: tuple(p.shape) for n, p in b.named_parameters()}
        assert shapes_a == shapes_b
        assert sum(p.numel() for p in a.parameters()) == sum(p.numel() for p in b.parameters())

    def test_predict_noise_wrapper(self):
        unet = UNet(TINY)
        x = torch.randn(2, 3, 16, 16)
        m = (torch.rand(2, 1, 16, 16) > 0.5).float()
        out = predict_noise(unet, x, m, x, 5, torch.randn(2, 4, 8))
        assert out.shape == (2, 3, 16, 16)

    def test_rejects_wrong_channels(self):
        unet = UNet(TINY)
        with pytest.raises(ValueError):
            unet(torch.randn(1, 3, 16, 16), time_embedding_batch([1.0], TINY.time_dim),
                 torch.randn(1, 2, 8))

    def test_rejects_bad_attention_resolution(self):
        with pytest.raises(ValueError):
            DenoiserConfig(resolution=16, attention_resolutions=(7,))


def _loss_of(unet, aug, t_emb, cond, eps):
    return diffusion_loss(unet(aug, t_emb, cond), eps)


class TestGradientCorrectness:
    def test_backprop_matches_finite_differences(self):
        torch.manual_seed(7)
        unet = UNet(TINY).double()
        # open the adapter gates so condition-path params get gradients
        with torch.no_grad():
            for name, p in unet.named_parameters():
                if name.endswith("attn.gate"):
                    p.fill_(0.5)
        aug = torch.randn(1, 7, 16, 16, dtype=torch.float64)
        t_emb = time_embedding_batch([6.0], TINY.time_dim, torch.float64)
        cond = torch.randn(1, 4, 8, dtype=torch.float64)
        eps = torch.randn(1, 3, 16, 16, dtype=torch.float64)

        loss = _loss_of(unet, aug, t_emb, cond, eps)
        loss.backward()

        params = [p for p in unet.parameters() if p.grad is not None]
        rng = torch.Generator().manual_seed(5)
        h = 1e-6
        checked = 0
        for _ in range(20):
            p = params[int(torch.randint(len(params), (1,), generator=rng))]
            flat = p.data.view(-1)
            idx = int(torch.randint(flat.numel(), (1,), generator=rng))
            orig = float(flat[idx])
            with torch.no_grad():
                flat[idx] = orig + h
                up = float(_loss_of(unet, aug, t_emb, cond, eps))
                flat[idx] = orig - h
                down = float(_loss_of(unet, aug, t_emb, cond, eps))
                flat[idx] = orig
            fd = (up - down) / (2 * h)
            bp = float(p.grad.view(-1)[idx])
            denom = max(abs(fd), abs(bp), 1e-8)
            assert abs(fd - bp) / denom <= 1e-4, f"fd={fd} bp={bp}"
            checked += 1
        assert checked == 20
