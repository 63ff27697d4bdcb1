import math

import pytest
import torch

from idswap.conditioning import (
    AttentionFusion,
    AttributeEncoder,
    ConditionBundle,
    Conditioner,
    IdentityEncoder,
    SpatialEncoder,
    fourier_pose_features,
)


@pytest.fixture
def cond():
    torch.manual_seed(3)
    return Conditioner(d=16, n_tokens=4, pose_feats_per_angle=20)


def random_bundle(cond, lam_id=1.0, lam_fuse=1.0, gen_seed=0):
    g = torch.Generator().manual_seed(gen_seed)
    return ConditionBundle(
        c_face=torch.randn(2, cond.n_tokens, cond.d, generator=g),
        c_dino=torch.randn(2, 6, cond.d, generator=g),
        c_attr=torch.randn(2, 5, cond.d, generator=g),
        pose_vec=torch.randn(2, 3, generator=g) * 0.4,
        lambda_id=lam_id,
        lambda_fuse=lam_fuse,
    )


class TestEncoders:
    def test_identity_token_shape_and_determinism(self, cond):
        enc = IdentityEncoder(d=16, n_identities=10)
        img = torch.randn(3, 3, 64, 64)
        e1, e2 = enc.embed(img), enc.embed(img)
        assert torch.equal(e1, e2)
        assert torch.allclose(e1.norm(dim=-1), torch.ones(3), atol=1e-6)
        tokens = cond.identity_tokens(e1)
        assert tokens.shape == (3, 4, 16)
        assert torch.equal(tokens, cond.identity_tokens(e2))

    def test_spatial_token_shape(self):
        enc = SpatialEncoder(d=16)
        out = enc(torch.randn(2, 3, 64, 64))
        assert out.shape == (2, 64, 16)

    def test_spatial_shift_equivariance(self):
        torch.manual_seed(0)
        enc = SpatialEncoder(d=8)
        big = torch.randn(1, 3, 64, 72)
        crop_a = big[..., :64]
        crop_b = big[..., 8:72]
        fa = enc.feature_map(crop_a)
        fb = enc.feature_map(crop_b)
        # shifting the input by one token stride (8 px) permutes interior tokens
        assert torch.allclose(fa[..., 2:6, 2:6], fb[..., 2:6, 1:5], atol=1e-5)

    def test_attribute_token_shape_and_determinism(self):
        enc = AttributeEncoder(d=16)
        img = torch.randn(2, 3, 64, 64)
        out = enc(img)
        assert out.shape == (2, 64, 16)
        assert torch.equal(out, enc(img))
        assert enc.predict_attributes(img).shape == (2, 5)


class TestFuseIdentity:
    def test_zero_factor_identity(self, cond):
        b = random_bundle(cond)
        assert torch.equal(cond.fuse_identity(b.c_face, b.c_dino, 0.0), b.c_face)

    def test_single_key(self, cond):
        c_face = torch.randn(1, 4, 16)
        c_dino = torch.randn(1, 1, 16)
        out = cond.fuse_identity(c_face, c_dino, 1.0)
        fusion = cond.fuse_id
        expected = c_face + fusion.w_o(fusion.w_v(c_dino))
        assert torch.allclose(out, expected, atol=1e-6)

    def test_matches_softmax_oracle(self):
        torch.manual_seed(9)
        fusion = AttentionFusion(16).double()
        q = torch.randn(1, 2, 16, dtype=torch.float64)
        kv = torch.randn(1, 3, 16, dtype=torch.float64)
        with torch.no_grad():
            scores = (q[0] @ fusion.w_q.weight.T.detach()) @ (kv[0] @ fusion.w_k.weight.T.detach()).T
            scores = scores / math.sqrt(16)
            w = torch.exp(scores)
            w = w / w.sum(dim=-1, keepdim=True)
            oracle = (w @ (kv[0] @ fusion.w_v.weight.T.detach())) @ fusion.w_o.weight.T.detach()
            out = fusion(q, kv)[0]
        assert float((out - oracle).abs().max()) <= 1e-10

    def test_rows_sum_to_one(self, cond):
        b = random_bundle(cond)
        w = cond.fuse_id.attention_weights(b.c_face, b.c_dino)
        assert torch.allclose(w.sum(dim=-1), torch.ones(2, 4), atol=1e-6)

    def test_rejects_dim_mismatch(self, cond):
        with pytest.raises(ValueError):
            cond.fuse_id(torch.randn(1, 2, 8), torch.randn(1, 2, 16))


class TestFuseCondition:
    def test_lambda_zero_disables_attributes(self, cond):
        b = random_bundle(cond)
        c_id = cond.fuse_identity(b.c_face, b.c_dino, 1.0)
        assert torch.equal(cond.fuse_condition(c_id, b.c_attr, 0.0), c_id)

    def test_zero_init_projection_is_inert(self, cond):
        # fresh Conditioner: fuse_attr output projection is zero-initialized
        b = random_bundle(cond)
        c_id = cond.fuse_identity(b.c_face, b.c_dino, 1.0)
        for lam in (0.5, 1.0, 7.0):
            out = cond.fuse_condition(c_id, torch.randn(2, 5, 16), lam)
            assert torch.equal(out, c_id)

    def test_residual_scales_linearly_in_lambda(self, cond):
        with torch.no_grad():  # open the gate so the branch is non-zero
            cond.fuse_attr.w_o.weight.normal_()
        b = random_bundle(cond)
        with torch.no_grad():
            c_id = cond.fuse_identity(b.c_face, b.c_dino, 1.0)
            delta1 = cond.fuse_condition(c_id, b.c_attr, 1.0) - c_id
            delta3 = cond.fuse_condition(c_id, b.c_attr, 3.0) - c_id
        assert torch.allclose(delta3, 3.0 * delta1, atol=1e-5)
        norm1 = float(delta1.norm())
        with torch.no_grad():
            norm2 = float((cond.fuse_condition(c_id, b.c_attr, 2.0) - c_id).norm())
        assert norm2 == pytest.approx(2.0 * norm1, rel=1e-5)


class TestPoseEmbedding:
    def test_zero_pose_features(self):
        feats = fourier_pose_features(torch.zeros(1, 3), 10)
        feats = feats.view(3, 10)
        assert torch.equal(feats[:, :5], torch.zeros(3, 5))
        assert torch.equal(feats[:, 5:], torch.ones(3, 5))

    def test_distinct_poses_distinct_embeddings(self, cond):
        with torch.no_grad():
            a = cond.encode_pose(torch.tensor([[0.1, 0.0, 0.2]]))
            b = cond.encode_pose(torch.tensor([[0.1, 0.5, 0.2]]))
        sim = torch.nn.functional.cosine_similarity(a.flatten(), b.flatten(), dim=0)
        assert float(sim) < 1.0 - 1e-4

    def test_determinism(self, cond):
        pose = torch.tensor([[0.3, -0.2, 0.1]])
        assert torch.equal(cond.encode_pose(pose), cond.encode_pose(pose))

    def test_rejects_non_finite(self, cond):
        with pytest.raises(ValueError):
            cond.encode_pose(torch.tensor([[float("nan"), 0.0, 0.0]]))


class TestAssemble:
    def test_token_count(self, cond):
        out = cond.assemble(random_bundle(cond))
        assert out.shape == (2, 5, 16)

    def test_double_zero_factor_passthrough(self, cond):
        b = random_bundle(cond, lam_id=0.0, lam_fuse=0.0)
        out = cond.assemble(b)
        assert torch.equal(out[:, :4], b.c_face)

    def test_matches_hand_chained_sub_ops(self, cond):
        with torch.no_grad():
            cond.fuse_attr.w_o.weight.normal_()
        b = random_bundle(cond, lam_id=0.7, lam_fuse=1.3)
        out = cond.assemble(b)
        c_id = cond.fuse_identity(b.c_face, b.c_dino, 0.7)
        c_fuse = cond.fuse_condition(c_id, b.c_attr, 1.3)
        expected = torch.cat([c_fuse, cond.encode_pose(b.pose_vec)], dim=1)
        assert torch.equal(out, expected)

    def test_cold_start_gate_ignores_attributes_bitwise(self, cond):
        b1 = random_bundle(cond, gen_seed=1)
        b2 = ConditionBundle(
            c_face=b1.c_face, c_dino=b1.c_dino,
            c_attr=torch.randn(2, 5, 16) * 50,
            pose_vec=b1.pose_vec,
            lambda_id=b1.lambda_id, lambda_fuse=b1.lambda_fuse,
        )
        assert torch.equal(cond.assemble(b1), cond.assemble(b2))

    def test_rejects_negative_lambda(self, cond):
        with pytest.raises(ValueError):
            random_bundle(cond, lam_id=-1.0)
