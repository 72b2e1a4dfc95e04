import logging

import numpy as np
import pytest

from logcan import tensor as T
from logcan.class_aware import gca_forward
from logcan.config import ConfigError, ModelConfig, default_config
from logcan.decoder import (
    build_decoder_graph,
    class_map,
    decoder_forward,
    feature_map,
    init_model,
    init_params,
    model_forward,
    toy_backbone_forward,
)
from logcan.gradcheck import decoder_case
from logcan.profiler import count_params
from logcan.serialization import encode_checkpoint, decode_checkpoint
from logcan.tensor import ShapeError, Tape, Tensor

SMALL = ModelConfig(classes=3, width_factor=1 / 16, d=8, grids=((2, 2), (2, 2), (1, 1), (1, 1)), seed=3)


@pytest.fixture(scope="module")
def small_model():
    return init_model(SMALL, 64, 64, dtype=np.float64)


def _image(seed=0, extent=64, n=1):
    return Tensor(np.random.default_rng(seed).standard_normal((n, 3, extent, extent)))


class TestBackbone:
    def test_stage_shapes(self):
        cfg = ModelConfig()
        pyr = toy_backbone_forward(Tensor(np.zeros((1, 3, 64, 64), np.float32)), init_model(cfg))
        assert [r.shape for r in pyr.stages] == [(1, 32, 16, 16), (1, 64, 8, 8), (1, 128, 4, 4), (1, 256, 2, 2)]

    def test_full_width_channel_plan(self):
        assert ModelConfig(width_factor=1.0).stage_channels == (256, 512, 1024, 2048)
        assert ModelConfig(width_factor=1.0).stem_channels == 64

    def test_zero_input_zero_bias_gives_zero_pyramid(self, small_model):
        pyr = toy_backbone_forward(Tensor(np.zeros((1, 3, 64, 64))), small_model)
        for r in pyr.stages:
            assert not np.any(r.data)

    def test_rejects_bad_inputs(self, small_model):
        with pytest.raises(ShapeError, match="divisible by 32"):
            toy_backbone_forward(Tensor(np.zeros((1, 3, 48, 64))), small_model)
        with pytest.raises(ShapeError, match="N x 3"):
            toy_backbone_forward(Tensor(np.zeros((1, 4, 64, 64))), small_model)


class TestBlocks:
    def test_feature_map_is_relu_conv(self, rng):
        x = rng.standard_normal((1, 5, 4, 4))
        w = rng.standard_normal((6, 5, 3, 3))
        b = rng.standard_normal(6)
        params = {"stage2.fmap.weight": Tensor(w), "stage2.fmap.bias": Tensor(b)}
        out = feature_map(Tensor(x), 2, params).data
        ref = np.maximum(T.conv2d(Tensor(x), Tensor(w), Tensor(b)).data, 0)
        np.testing.assert_array_equal(out, ref)
        assert out.shape == (1, 6, 4, 4) and out.min() >= 0

    def test_class_map_is_shared_linear_map(self, rng):
        c = rng.standard_normal((2, 4, 5))
        w = rng.standard_normal((3, 5, 1, 1))
        b = rng.standard_normal(3)
        out = class_map(Tensor(c), {"m.weight": Tensor(w), "m.bias": Tensor(b)}, "m").data
        np.testing.assert_allclose(out, c @ w[:, :, 0, 0].T + b, atol=1e-12)


class TestNetwork:
    def test_output_shapes(self, small_model):
        logits, aux = model_forward(_image(n=2), SMALL, small_model)
        assert logits.shape == aux.shape == (2, 3, 64, 64)

    def test_deterministic(self, small_model):
        a = model_forward(_image(), SMALL, small_model)[0].data
        b = model_forward(_image(), SMALL, small_model)[0].data
        assert a.tobytes() == b.tobytes()
        again = init_model(SMALL, 64, 64, dtype=np.float64)
        assert all(again[k].data.tobytes() == small_model[k].data.tobytes() for k in again)

    def test_batch_items_independent(self, small_model):
        pair = _image(n=2)
        both = model_forward(pair, SMALL, small_model)[0].data
        one = model_forward(Tensor(pair.data[1:]), SMALL, small_model)[0].data
        np.testing.assert_allclose(both[1:], one, atol=1e-12)

    def test_zero_class_maps_reduce_to_plain_decoder(self, small_model):
        # zero class vectors make every class-aware branch output zero
        params = dict(small_model)
        for i in range(1, 5):
            for part in ("weight", "bias"):
                key = f"stage{i}.cmap.{part}"
                params[key] = Tensor(np.zeros(params[key].shape))
        img = _image(5)
        logits, _ = model_forward(img, SMALL, params)
        pyr = toy_backbone_forward(img, params)
        y4 = feature_map(pyr.r4, 4, params)
        y3 = feature_map(T.concat([pyr.r3, T.upsample_bilinear(y4, 2)]), 3, params)
        y2 = feature_map(T.concat([pyr.r2, T.upsample_bilinear(y3, 2)]), 2, params)
        y1 = feature_map(T.concat([pyr.r1, T.upsample_bilinear(y2, 2)]), 1, params)
        up = T.upsample_bilinear
        fused = y1.data + up(y2, 2).data + up(y3, 4).data + up(up(y4, 4), 2).data
        head = T.conv2d(Tensor(fused), params["head.weight"], params["head.bias"])
        np.testing.assert_allclose(logits.data, up(head, 4).data, atol=1e-10)

    def _branches(self, params, img):
        """Per-stage outputs Y_i rebuilt from the public blocks."""
        from logcan.class_aware import lca_forward
        pyr = toy_backbone_forward(img, params)
        _, c_g = gca_forward(pyr.r4, params)
        grids = SMALL.effective_grids(64, 64)
        ys = {}
        for i in (4, 3, 2, 1):
            r = pyr.stages[i - 1]
            x = r if i == 4 else T.concat([r, T.upsample_bilinear(ys[i + 1], 2)])
            f = feature_map(x, i, params)
            cg = class_map(c_g.reps, params, f"stage{i}.cmap")
            ys[i] = T.add(f, lca_forward(f, cg, grids[i - 1], params, f"stage{i}.lca"))
        return ys

    def test_fusion_is_linear_per_branch(self, small_model):
        img = _image(4)
        ys = self._branches(small_model, img)
        logits, _ = model_forward(img, SMALL, small_model)
        up = T.upsample_bilinear
        chains = {1: [], 2: [2], 3: [4], 4: [4, 2]}
        w, b = small_model["head.weight"], small_model["head.bias"]

        def branch_logits(i):
            y = ys[i]
            for f in chains[i]:
                y = up(y, f)
            return up(T.conv2d(y, w), 4).data

        bias_only = up(T.conv2d(Tensor(np.zeros((1, 8, 16, 16))), w, b), 4).data
        per_branch = {i: branch_logits(i) for i in ys}
        np.testing.assert_allclose(logits.data, sum(per_branch.values()) + bias_only, atol=1e-10)
        # every branch but stage 4 zeroed: only the stage-4 path reaches the logits
        stage4_only = up(T.conv2d(up(up(ys[4], 4), 2), w, b), 4).data
        np.testing.assert_allclose(stage4_only, per_branch[4] + bias_only, atol=1e-10)
        # summation order of the branches does not matter
        fused = [up(up(ys[4], 4), 2).data, up(ys[3], 4).data, up(ys[2], 2).data, ys[1].data]
        np.testing.assert_allclose(sum(fused), sum(fused[::-1]), atol=1e-12)

    def test_aux_logits_come_from_gca(self, small_model):
        img = _image(2)
        pyr = toy_backbone_forward(img, small_model)
        dist, _ = gca_forward(pyr.r4, small_model)
        _, aux = decoder_forward(pyr, SMALL, small_model)
        up = T.upsample_bilinear
        np.testing.assert_allclose(aux.data, up(up(up(dist.logits, 4), 4), 2).data, atol=1e-12)

    def test_graph_matches_recorded_ops(self, small_model):
        graph = build_decoder_graph(SMALL, 1, 64, 64)
        with Tape() as tape:
            model_forward(_image(), SMALL, small_model)
        recorded = [(n.op, n.output.shape) for n in tape.nodes]
        declared = [(layer.kind, layer.out_shape) for layer in graph.layers]
        assert recorded == declared

    def test_graph_matches_recorded_ops_default_config(self):
        cfg = default_config()
        graph = build_decoder_graph(cfg, 2, 64, 64)
        with Tape() as tape:
            model_forward(Tensor(np.zeros((2, 3, 64, 64), np.float32)), cfg, init_model(cfg))
        assert [(n.op, n.output.shape) for n in tape.nodes] == [(l.kind, l.out_shape) for l in graph.layers]

    def test_every_parameter_receives_gradient(self):
        # 64 px so the deepest stage has more than one pixel per patch
        loss, arrays = decoder_case(seed=7, extent=64)
        params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        with Tape() as tape:
            value = loss(params)
        grads = tape.gradients(value, params)
        dead = [k for k, g in grads.items() if not np.any(g)]
        assert dead == []

    def test_param_count_matches_checkpoint(self, small_model):
        graph = build_decoder_graph(SMALL, 1, 64, 64)
        restored = decode_checkpoint(encode_checkpoint(small_model))
        assert count_params(graph) == sum(t.size for t in restored.values())

    def test_missing_parameter_names_stage(self, small_model):
        params = {k: v for k, v in small_model.items() if k != "stage2.fmap.weight"}
        with pytest.raises(ShapeError, match="stage 2"):
            model_forward(_image(), SMALL, params)

    def test_init_params_he_normal(self):
        graph = build_decoder_graph(ModelConfig(width_factor=0.5, d=64), 1, 64, 64)
        p = init_params(graph, seed=0)
        w = p["stage1.fmap.weight"].data
        assert abs(w.std() - np.sqrt(2 / np.prod(w.shape[1:]))) < 0.02 * w.std() + 1e-3
        assert not np.any(p["head.bias"].data)
        assert all(t.dtype == np.float32 for t in p.values())


class TestConfig:
    def test_text_round_trip(self):
        cfg = ModelConfig(classes=4, width_factor=0.25, d=16, grids=((2, 2), (4, 2), (1, 1), (8, 8)), aux_weight=0.0)
        assert ModelConfig.from_text(cfg.to_text()) == cfg

    def test_default_file(self):
        cfg = default_config()
        assert cfg == ModelConfig()
        assert cfg.d == 40 and cfg.grids == ((4, 4),) * 4

    @pytest.mark.parametrize(
        "text,message",
        [("depth = 3", "unknown key"), ("d = many", "bad value"), ("just words", "key = value"),
         ("grid_stage5 = 2x2", "unknown key"), ("grid_stage1 = 0x2", "bad grid"), ("d = 2", "d=2")],
    )
    def test_errors(self, text, message):
        with pytest.raises(ConfigError, match=message):
            ModelConfig.from_text(text)

    def test_grid_fallback(self, caplog):
        with caplog.at_level(logging.INFO, logger="logcan"):
            grids = ModelConfig(grids=((4, 4), (4, 4), (3, 3), (4, 4))).effective_grids(64, 64)
        assert grids == [(4, 4), (4, 4), (1, 1), (1, 1)]
        assert "stage 3" in caplog.text and "stage 4" in caplog.text
