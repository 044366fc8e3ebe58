"""Model assembly: shape contracts, fusion, ablations, checkpoints, inference."""

import numpy as np
import pytest

from vesselseg import autodiff as ad
from vesselseg import graph, network
from vesselseg.autodiff import Tensor
from vesselseg.errors import ConfigError, DimensionMismatchError, FileFormatError


def micro_model(seed=0, **overrides):
    return network.SegmentationModel(network.config_from_profile("micro", **overrides), seed=seed)


class TestModelConfig:
    def test_profiles_validate(self):
        for name in ("tiny", "micro", "large"):
            cfg = network.config_from_profile(name)
            assert cfg.stages == len(cfg.cnn_channels)

    def test_patch_divisibility_enforced(self):
        with pytest.raises(ConfigError, match="divisible"):
            network.config_from_profile("micro", patch_shape=(8, 8, 12))

    def test_list_length_enforced(self):
        with pytest.raises(ConfigError, match="cnn_channels"):
            network.config_from_profile("micro", cnn_channels=[2, 2])
        with pytest.raises(ConfigError, match="graph stage"):
            network.config_from_profile("micro", vig_units_per_stage=[1, 1])

    def test_knn_feasibility(self):
        # deepest graph stage of an 8^3 patch at 3 stages has 8 nodes
        with pytest.raises(ConfigError, match="infeasible"):
            network.config_from_profile("micro", knn_k=8)

    def test_unknown_profile(self):
        with pytest.raises(ConfigError, match="profile"):
            network.config_from_profile("giant")

    def test_config_text_round_trip(self):
        cfg = network.config_from_profile("tiny", knn_k=5, use_channel_attention=False)
        back = network.config_from_text(network.config_to_text(cfg))
        assert back == cfg

    def test_config_text_rejects_unknown_key(self):
        text = network.config_to_text(network.config_from_profile("micro")) + "bogus = 1\n"
        with pytest.raises(ConfigError, match="bogus"):
            network.config_from_text(text)


class TestStem:
    def test_paper_scale_node_count(self):
        """An 80x192x160 input reduces 4x per axis: 20*48*40 = 38400 nodes."""
        cfg = network.config_from_profile("micro")
        assert cfg.node_count((80, 192, 160)) == 38400
        model = micro_model()
        x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 80, 192, 160)))
        h = x
        for blk in model.params.stem:
            h = model._run_conv_block(h, blk)
        nodes, pos = graph.grid_to_nodes(h, 0)
        assert nodes.shape[0] == 38400
        assert tuple(h.shape[2:]) == (20, 48, 40)
        assert pos.shape == (38400, 3)

    def test_stem_shape_algebra(self):
        model = micro_model()
        h = Tensor(np.zeros((1, 1, 8, 8, 8)))
        for blk in model.params.stem:
            h = model._run_conv_block(h, blk)
        assert tuple(h.shape[2:]) == (2, 2, 2)

    def test_stem_output_channels_follow_level_one_width(self):
        model = network.SegmentationModel(
            network.config_from_profile("micro", vig_channels=[2, 3, 4]), seed=0
        )
        h = Tensor(np.zeros((1, 1, 8, 8, 8)))
        for blk in model.params.stem:
            h = model._run_conv_block(h, blk)
        assert h.shape[1] == 3


class TestCnnBranch:
    def test_stage_dims_halve_and_zero_propagates(self):
        model = micro_model()
        h = Tensor(np.zeros((1, 1, 8, 8, 8)))
        sizes = []
        for i in range(model.config.stages):
            h = model._run_conv_block(h, model.params.cnn_blocks[i])
            h = ad.conv3d(h, model.params.cnn_down[i])
            sizes.append(h.shape[2])
            np.testing.assert_array_equal(h.data, 0.0)
            assert h.shape[1] == model.config.cnn_channels[i]
        assert sizes == [4, 2, 1]


class TestChannelAttention:
    def _fusion(self, c_total, rng=None, zero=False):
        rng = rng or np.random.default_rng(0)
        hidden = max(1, c_total // 4)
        fp = network.FusionParams(
            mlp1=ad.make_linear(rng, hidden, c_total),
            mlp2=ad.make_linear(rng, c_total, hidden),
        )
        if zero:
            fp.mlp1.weight.data[:] = 0
            fp.mlp2.weight.data[:] = 0
        return fp

    def test_zero_mlp_halves_concat(self):
        rng = np.random.default_rng(1)
        cnn_f = Tensor(rng.normal(size=(2, 3, 2, 2, 2)))
        vig_f = Tensor(rng.normal(size=(2, 2, 2, 2, 2)))
        out = network.channel_attention_fuse(cnn_f, vig_f, self._fusion(5, zero=True))
        expect = 0.5 * np.concatenate([cnn_f.data, vig_f.data], axis=1)
        np.testing.assert_allclose(out.data, expect, atol=1e-15)

    def test_matches_scripted_oracle(self):
        rng = np.random.default_rng(2)
        cnn_f = Tensor(rng.normal(size=(2, 3, 2, 3, 2)))
        vig_f = Tensor(rng.normal(size=(2, 3, 2, 3, 2)))
        fp = self._fusion(6, rng=rng)
        out = network.channel_attention_fuse(cnn_f, vig_f, fp)

        merged = np.concatenate([cnn_f.data, vig_f.data], axis=1)
        pooled = merged.mean(axis=(2, 3, 4))
        hidden = np.maximum(pooled @ fp.mlp1.weight.data.T + fp.mlp1.bias.data, 0.0)
        gate = 1.0 / (1.0 + np.exp(-(hidden @ fp.mlp2.weight.data.T + fp.mlp2.bias.data)))
        expect = merged * gate[:, :, None, None, None]
        np.testing.assert_allclose(out.data, expect, atol=1e-12)

    def test_gate_bounds_output(self):
        rng = np.random.default_rng(3)
        cnn_f = Tensor(rng.normal(size=(1, 2, 2, 2, 2)) * 5)
        vig_f = Tensor(rng.normal(size=(1, 2, 2, 2, 2)) * 5)
        out = network.channel_attention_fuse(cnn_f, vig_f, self._fusion(4, rng=rng))
        merged = np.concatenate([cnn_f.data, vig_f.data], axis=1)
        assert (np.abs(out.data) <= np.abs(merged)).all()
        assert (np.abs(out.data) > 0).all()

    def test_spatial_mismatch_rejected(self):
        fp = self._fusion(4)
        with pytest.raises(DimensionMismatchError, match="spatial"):
            network.channel_attention_fuse(
                Tensor(np.zeros((1, 2, 2, 2, 2))), Tensor(np.zeros((1, 2, 4, 4, 4))), fp
            )


class TestForward:
    def test_tiny_shape_contract(self):
        cfg = network.config_from_profile("tiny")
        model = network.SegmentationModel(cfg, seed=0)
        x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 32, 64, 64)))
        final, aux = model.forward(x)
        assert final.shape == (1, 2, 32, 64, 64)
        assert [tuple(a.shape) for a in aux] == [(1, 2, 16, 32, 32), (1, 2, 8, 16, 16)]

    def test_forward_deterministic(self):
        model = micro_model(seed=3)
        x = Tensor(np.random.default_rng(1).normal(size=(2, 1, 8, 8, 8)))
        f1, a1 = model.forward(x)
        f2, a2 = model.forward(x)
        np.testing.assert_array_equal(f1.data, f2.data)
        for t1, t2 in zip(a1, a2):
            np.testing.assert_array_equal(t1.data, t2.data)

    def test_patch_shape_enforced(self):
        model = micro_model()
        with pytest.raises(DimensionMismatchError, match="spatial"):
            model.forward(Tensor(np.zeros((1, 1, 16, 16, 16))))

    def test_graph_blocks_count_follows_units(self):
        """A 6-stage config with units [1,1,2,1] instantiates exactly 5 blocks."""
        cfg = network.ModelConfig(
            stages=6,
            cnn_channels=[2] * 6,
            vig_channels=[2] * 6,
            vig_units_per_stage=[1, 1, 2, 1],
            knn_k=2,
            patch_shape=(64, 64, 64),
        )
        model = network.SegmentationModel(cfg, seed=0)
        assert sum(len(s.blocks) for s in model.params.graph_stages) == 5

    def test_fusion_projection_reconciles_widths(self):
        cfg = network.config_from_profile("micro", cnn_channels=[2, 2, 5], vig_channels=[2, 2, 3])
        model = network.SegmentationModel(cfg, seed=0)
        assert model.params.fusion[2].project is not None
        x = Tensor(np.random.default_rng(2).normal(size=(1, 1, 8, 8, 8)))
        final, _ = model.forward(x)
        assert final.shape == (1, 2, 8, 8, 8)

    def test_backward_reaches_every_parameter(self):
        model = micro_model(seed=5)
        x = Tensor(np.random.default_rng(4).normal(size=(1, 1, 8, 8, 8)))
        final, aux = model.forward(x)
        loss = ad.weighted_sum(
            [ad.mean_all(h) for h in [final] + aux], [0.6, 0.4]
        )
        model.zero_grad()
        loss.backward()
        for name, p in model.named_parameters():
            assert p.grad is not None, name
            assert np.isfinite(p.grad).all(), name


class TestAblations:
    def test_no_graph_ops_when_vig_disabled(self):
        model = micro_model(use_vig3d=False)
        graph.reset_graph_op_counter()
        model.forward(Tensor(np.random.default_rng(0).normal(size=(1, 1, 8, 8, 8))))
        assert graph.graph_op_count() == 0

    def test_graph_ops_counted_when_enabled(self):
        model = micro_model()
        graph.reset_graph_op_counter()
        model.forward(Tensor(np.random.default_rng(0).normal(size=(1, 1, 8, 8, 8))))
        assert graph.graph_op_count() == 1

    def test_vig_ablation_shrinks_parameter_count(self):
        full = micro_model().parameter_count()
        no_vig = micro_model(use_vig3d=False).parameter_count()
        assert no_vig < full

    def test_all_flags_off_is_plain_unet(self):
        model = micro_model(
            use_vig3d=False, use_channel_attention=False, use_offset_decoder=False
        )
        x = Tensor(np.random.default_rng(1).normal(size=(1, 1, 8, 8, 8)))
        final, aux = model.forward(x)
        assert final.shape == (1, 2, 8, 8, 8)
        assert len(aux) == 1
        assert not model.params.fusion
        assert not model.params.graph_stages

    @pytest.mark.parametrize(
        "flags",
        [
            dict(use_channel_attention=False),
            dict(use_offset_decoder=False),
            dict(use_channel_attention=False, use_offset_decoder=False),
        ],
    )
    def test_single_ablations_run(self, flags):
        model = micro_model(**flags)
        x = Tensor(np.random.default_rng(2).normal(size=(1, 1, 8, 8, 8)))
        final, _ = model.forward(x)
        assert final.shape == (1, 2, 8, 8, 8)

    def test_dense_skips_add_parameters(self):
        """Fused skip levels exist from 4 stages up; dense wiring widens them."""
        kwargs = dict(
            stages=4,
            cnn_channels=[2, 2, 3, 3],
            vig_channels=[2, 2, 3, 3],
            vig_units_per_stage=[1, 1],
            knn_k=2,
            patch_shape=(16, 16, 16),
        )
        offset = network.SegmentationModel(network.ModelConfig(**kwargs)).parameter_count()
        dense = network.SegmentationModel(
            network.ModelConfig(use_offset_decoder=False, **kwargs)
        ).parameter_count()
        assert dense > offset

    def test_spatial_knn_config_runs(self):
        model = micro_model(knn_space="spatial")
        final, _ = model.forward(Tensor(np.random.default_rng(3).normal(size=(1, 1, 8, 8, 8))))
        assert final.shape == (1, 2, 8, 8, 8)


class TestDeterminism:
    def test_same_seed_same_parameters(self):
        a = micro_model(seed=11)
        b = micro_model(seed=11)
        assert a.parameter_count() == b.parameter_count()
        for (na, ta), (nb, tb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(ta.data, tb.data)

    def test_different_seed_different_parameters(self):
        a = micro_model(seed=11)
        b = micro_model(seed=12)
        assert any(
            not np.array_equal(ta.data, tb.data)
            for (_, ta), (_, tb) in zip(a.named_parameters(), b.named_parameters())
        )


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = micro_model(seed=7)
        path = tmp_path / "model.ckpt"
        model.save(path)
        loaded = network.SegmentationModel.load(path)
        assert loaded.config == model.config
        for (na, ta), (nb, tb) in zip(model.named_parameters(), loaded.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(ta.data, tb.data)
        x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 8, 8, 8)))
        f1, _ = model.forward(x)
        f2, _ = loaded.forward(x)
        np.testing.assert_array_equal(f1.data, f2.data)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "model.ckpt"
        micro_model().save(path)
        data = bytearray(path.read_bytes())
        data[0] = ord("X")
        path.write_bytes(bytes(data))
        with pytest.raises(FileFormatError, match="magic") as exc:
            network.SegmentationModel.load(path)
        assert exc.value.offset == 0

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "model.ckpt"
        micro_model().save(path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 17])
        with pytest.raises(FileFormatError, match="truncated"):
            network.SegmentationModel.load(path)

    def test_trailing_garbage(self, tmp_path):
        path = tmp_path / "model.ckpt"
        micro_model().save(path)
        path.write_bytes(path.read_bytes() + b"x")
        with pytest.raises(FileFormatError, match="trailing"):
            network.SegmentationModel.load(path)


class TestSlidingWindow:
    def test_single_window_equals_direct_argmax(self):
        model = micro_model(seed=2)
        vol = np.random.default_rng(5).normal(size=(8, 8, 8))
        pred = network.sliding_window_predict(vol, model, overlap=0.0)
        with ad.no_grad():
            logits, _ = model.forward(Tensor(vol[None, None]))
            direct = ad.softmax_channel(logits).data[0].argmax(axis=0).astype(np.uint8)
        np.testing.assert_array_equal(pred, direct)

    def test_output_shape_matches_input(self):
        model = micro_model(seed=2)
        vol = np.random.default_rng(6).normal(size=(20, 20, 20))
        pred = network.sliding_window_predict(vol, model, overlap=0.5)
        assert pred.shape == vol.shape
        assert pred.dtype == np.uint8

    def test_constant_volume_overlap_invariance(self):
        """With a translation-invariant map every window agrees, so overlap
        must not change the result. Zeroing the kernels and positional table
        (bias-only network) removes the padding-frame dependence."""
        model = micro_model(seed=2)
        rng = np.random.default_rng(8)
        for _, p in model.named_parameters():
            if p.ndim >= 2:
                p.data[:] = 0.0
            else:
                p.data[:] = rng.normal(scale=0.5, size=p.shape)
        vol = np.full((16, 16, 16), 0.42)
        a = network.sliding_window_predict(vol, model, overlap=0.0)
        b = network.sliding_window_predict(vol, model, overlap=0.5)
        np.testing.assert_array_equal(a, b)
        assert len(np.unique(a)) == 1

    def test_smaller_volume_padded_reflectively(self):
        model = micro_model(seed=2)
        vol = np.random.default_rng(7).normal(size=(6, 9, 6))
        pred = network.sliding_window_predict(vol, model, overlap=0.0)
        assert pred.shape == vol.shape

    def test_bad_overlap_rejected(self):
        model = micro_model()
        with pytest.raises(ConfigError, match="overlap"):
            network.sliding_window_predict(np.zeros((8, 8, 8)), model, overlap=1.0)
