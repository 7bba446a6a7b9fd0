"""Velocity-network structure: conditioning paths, identities, gradients."""
import numpy as np
import pytest

from conftest import finite_diff_grad, max_rel_err
from flowcast import nn
from flowcast import tensor as T
from flowcast.errors import ConfigError, DimensionError
from flowcast.stunet import (ConditionBundle, STUNet, STUNetConfig, SpatialResBlock, TemporalBlock,
                             stunet_forward, temporal_attention_block)
from flowcast.tensor import Tensor

TINY = STUNetConfig(m=2, base=8, mults=(1, 2), blocks=1, side_scales=(1,), emb_dim=16)


def _bundle(rng, m=2, h=16, w=16, idx=None):
    return ConditionBundle(
        backbone_cond=rng.random((m, 1, h, w)).astype(np.float32),
        side_cond=rng.random((m, 1, h, w)).astype(np.float32),
        t=0.4,
        segment_index=idx,
    )


class TestConfig:
    def test_side_scales_must_be_deep(self):
        with pytest.raises(ConfigError, match="deeper half"):
            STUNetConfig(mults=(1, 2, 2), side_scales=(0,)).validate()
        STUNetConfig(mults=(1, 2, 2), side_scales=(1, 2)).validate()
        STUNetConfig(mults=(1, 2), side_scales=(1,)).validate()

    def test_out_of_range_scale(self):
        with pytest.raises(ConfigError):
            STUNetConfig(mults=(1, 2), side_scales=(5,)).validate()

    def test_roundtrip(self):
        cfg = STUNetConfig(index_vocab=5)
        assert STUNetConfig.from_dict(cfg.to_dict()) == cfg


class TestForward:
    def test_shape_preserved(self, rng):
        model = STUNet(TINY, rng)
        z = rng.standard_normal((2, 1, 16, 16)).astype(np.float32)
        out = stunet_forward(model, z, _bundle(rng))
        assert out.shape == (2, 1, 16, 16)

    def test_full_scale_shape(self, rng):
        model = STUNet(STUNetConfig(), rng)
        z = rng.standard_normal((5, 1, 32, 32)).astype(np.float32)
        out = stunet_forward(model, z, ConditionBundle(
            backbone_cond=rng.random((5, 1, 32, 32)).astype(np.float32),
            side_cond=rng.random((5, 1, 32, 32)).astype(np.float32), t=0.1))
        assert out.shape == (5, 1, 32, 32)

    def test_side_cond_irrelevant_at_init(self, rng):
        """Zero-initialized FiLM heads: the side input cannot influence the output."""
        model = STUNet(TINY, rng)
        z = rng.standard_normal((2, 1, 16, 16)).astype(np.float32)
        cond_a = _bundle(rng)
        cond_b = ConditionBundle(cond_a.backbone_cond, np.zeros_like(cond_a.side_cond), cond_a.t)
        np.testing.assert_array_equal(stunet_forward(model, z, cond_a), stunet_forward(model, z, cond_b))

    def test_side_cond_sensitivity_after_training(self, rng):
        """Two gradient steps make the side path live (step one only un-zeroes
        the output head, which gates every upstream gradient)."""
        from flowcast import optim

        model = STUNet(TINY, rng)
        z = rng.standard_normal((1, 2, 1, 16, 16)).astype(np.float32)
        cond = ConditionBundle(backbone_cond=rng.random((1, 2, 1, 16, 16)).astype(np.float32),
                               side_cond=rng.random((1, 2, 1, 16, 16)).astype(np.float32),
                               t=np.array([0.3], dtype=np.float32))
        store = model.param_store()
        state = optim.init_adam(store)
        target = nn.as_input(rng.random(z.shape), np.float32)
        for _ in range(3):
            loss = T.mse(model.forward(z, cond), target)
            T.grad_eval(store, loss)
            optim.adam_step(store, state, 1e-2)
        film_params = np.concatenate([h.proj.w.data.reshape(-1) for h in model.side.heads])
        assert np.abs(film_params).max() > 0  # the heads did move
        out_a = stunet_forward(model, z[0], ConditionBundle(cond.backbone_cond[0], cond.side_cond[0], 0.3))
        other = rng.random((2, 1, 16, 16)).astype(np.float32)
        out_b = stunet_forward(model, z[0], ConditionBundle(cond.backbone_cond[0], other, 0.3))
        assert np.abs(out_a - out_b).max() > 0

    def test_backbone_cond_shape_checked(self, rng):
        model = STUNet(TINY, rng)
        z = rng.standard_normal((2, 1, 16, 16)).astype(np.float32)
        bad = _bundle(rng)
        bad.backbone_cond = bad.backbone_cond[:1]
        with pytest.raises(DimensionError):
            stunet_forward(model, z, bad)

    def test_missing_segment_index_rejected(self, rng):
        model = STUNet(STUNetConfig(m=2, base=8, mults=(1, 2), side_scales=(1,), emb_dim=16,
                                    index_vocab=5), rng)
        z = rng.standard_normal((2, 1, 16, 16)).astype(np.float32)
        with pytest.raises(ConfigError, match="segment index"):
            stunet_forward(model, z, _bundle(rng, idx=None))

    def test_segment_index_distinguishes(self, rng):
        cfg = STUNetConfig(m=2, base=8, mults=(1, 2), side_scales=(1,), emb_dim=16, index_vocab=5)
        model = STUNet(cfg, rng)
        # every zero-initialized projection blocks the embedding path at exact
        # init; nudge them all off zero so the wiring is observable
        for p in model.named_parameters().values():
            p.data += rng.standard_normal(p.data.shape).astype(np.float32) * 0.02
        z = rng.standard_normal((2, 1, 16, 16)).astype(np.float32)
        out_i1 = stunet_forward(model, z, _bundle(np.random.default_rng(0), idx=1))
        out_i2 = stunet_forward(model, z, _bundle(np.random.default_rng(0), idx=2))
        again = stunet_forward(model, z, _bundle(np.random.default_rng(0), idx=1))
        assert not np.array_equal(out_i1, out_i2)  # embedding table is live
        np.testing.assert_array_equal(out_i1, again)  # and evaluation is pure

    def test_sampler_film_cache_matches_direct(self, rng):
        model = STUNet(TINY, rng)
        # make the film path live so the cache actually matters
        for head in model.side.heads:
            head.proj.w.data += 0.1 * rng.standard_normal(head.proj.w.data.shape).astype(np.float32)
        z = rng.standard_normal((2, 1, 16, 16)).astype(np.float32)
        cond = _bundle(rng)
        fn = model.make_sampler(cond)
        np.testing.assert_array_equal(fn(z, cond, 0.7), model.velocity(z, cond, 0.7))


class TestTemporalBlock:
    def test_zero_init_projection_is_identity(self, rng):
        block = TemporalBlock(m=3, c=4, rng=rng)
        x = rng.standard_normal((3, 4, 8, 8)).astype(np.float32)
        out = temporal_attention_block(x, block)
        np.testing.assert_array_equal(out.data, x)

    def test_single_frame_degenerates(self, rng):
        block = TemporalBlock(m=1, c=8, rng=rng)
        x = rng.standard_normal((1, 8, 8, 8)).astype(np.float32)
        assert temporal_attention_block(x, block).data.shape == (1, 8, 8, 8)

    def test_frames_mix_after_perturbation(self, rng):
        """With a live projection, permuting input frames changes each output frame."""
        block = TemporalBlock(m=3, c=4, rng=rng)
        block.pw2.w.data += 0.5 * rng.standard_normal(block.pw2.w.data.shape).astype(np.float32)
        x = rng.standard_normal((3, 4, 8, 8)).astype(np.float32)
        out = temporal_attention_block(x, block).data
        out_perm = temporal_attention_block(x[::-1].copy(), block).data
        # frame 1 sees different neighbors under the permutation
        assert np.abs(out[1] - out_perm[1]).max() > 1e-6

    def test_wrong_geometry_rejected(self, rng):
        block = TemporalBlock(m=3, c=4, rng=rng)
        with pytest.raises(DimensionError):
            temporal_attention_block(np.zeros((2, 4, 8, 8), np.float32), block)


class TestSpatialResBlock:
    def test_zero_init_second_conv_is_identity(self, rng):
        block = SpatialResBlock(4, emb_dim=0, rng=rng)
        x = Tensor(rng.standard_normal((2, 4, 8, 8)).astype(np.float32))
        np.testing.assert_array_equal(block(x).data, x.data)

    def test_shape_preserved(self, rng):
        block = SpatialResBlock(4, emb_dim=8, rng=rng)
        x = Tensor(rng.standard_normal((4, 4, 8, 8)).astype(np.float32))
        emb = Tensor(rng.standard_normal((2, 8)).astype(np.float32))
        assert block(x, emb, frames_per_sample=2).data.shape == (4, 4, 8, 8)

    def test_gradients_match_fd(self, rng):
        block = SpatialResBlock(3, emb_dim=4, rng=rng, dtype=np.float64)
        x = Tensor(rng.standard_normal((2, 3, 6, 6)))
        emb = Tensor(rng.standard_normal((1, 4)))
        proj = rng.standard_normal(2 * 3 * 6 * 6)

        def loss_fn():
            out = block(x, emb, frames_per_sample=2)
            return T.sum_(T.mul(T.reshape(out, (-1,)), Tensor(proj)))

        for p in block.named_parameters().values():
            p.clear_grad()
            loss_fn().backward()
            analytic = p.grad.copy()
            sample = np.arange(0, p.data.size, max(1, p.data.size // 25))
            fd = finite_diff_grad(lambda: loss_fn().item(), p.data, sample=sample)
            assert max_rel_err(analytic, fd) < 1e-4


class TestBudget:
    def test_desk_config_under_two_million_params(self, rng):
        model = STUNet(STUNetConfig(index_vocab=5), rng)
        assert model.n_params() < 2_000_000
