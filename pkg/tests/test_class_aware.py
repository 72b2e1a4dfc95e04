import numpy as np
import pytest

from logcan import tensor as T
from logcan.class_aware import (
    gca_forward,
    lca_details,
    lca_forward,
    lca_global_variant,
    pre_classify,
)
from logcan.tensor import ShapeError, Tensor

import oracles
from conftest import as_tensors, preclassifier


def _zero_logit_params(channels, classes, prefix="h"):
    return as_tensors({
        f"{prefix}.cls1.weight": np.zeros((channels, channels, 1, 1)),
        f"{prefix}.cls1.bias": np.zeros(channels),
        f"{prefix}.cls2.weight": np.zeros((classes, channels, 1, 1)),
        f"{prefix}.cls2.bias": np.zeros(classes),
    })


class TestPreClassify:
    def test_zero_logits_uniform_over_classes(self, rng):
        dist = pre_classify(Tensor(rng.standard_normal((1, 4, 3, 3))), _zero_logit_params(4, 6), "h")
        np.testing.assert_allclose(dist.probs.data, 1 / 6, atol=1e-15)
        assert dist.normalization_axis == "class"

    def test_saturated_class(self, rng):
        p = _zero_logit_params(4, 6)
        bias = np.zeros(6)
        bias[2] = 20.0
        p["h.cls2.bias"] = Tensor(bias)
        dist = pre_classify(Tensor(rng.standard_normal((1, 4, 3, 3))), p, "h")
        assert np.all(dist.probs.data[:, 2] > 0.999)

    @pytest.mark.parametrize("axis,sum_axes", [("class", (1,)), ("spatial", (2, 3))])
    def test_normalisation(self, rng, axis, sum_axes):
        p = as_tensors(preclassifier(rng, "h", 6, 6, scale=2.0))
        dist = pre_classify(Tensor(rng.standard_normal((1, 6, 4, 4))), p, "h", axis=axis)
        assert np.all(np.abs(dist.probs.data.sum(axis=sum_axes) - 1) <= 1e-6)
        assert dist.probs.data.min() >= 0 and dist.probs.data.max() <= 1
        assert dist.logits.shape == (1, 6, 4, 4)

    def test_unknown_axis(self, rng):
        with pytest.raises(ValueError):
            pre_classify(Tensor(np.ones((1, 2, 2, 2))), _zero_logit_params(2, 2), "h", axis="pixel")


class TestGCA:
    def test_one_hot_selection(self):
        # two positions; class 0 strongly prefers position 0 and class 1 position 1
        f = np.array([[1.0, -2.0], [3.0, 0.5], [0.0, 4.0]])  # C x (H*W)
        r_g = Tensor(f.reshape(1, 3, 1, 2))
        p = _zero_logit_params(3, 2, "gca")
        # logits: class 0 = 800 * feature0, class 1 = -800 * feature0 -> one-hot rows
        w2 = np.zeros((2, 3, 1, 1))
        w2[0, 0], w2[1, 0] = 400.0, -400.0
        p["gca.cls1.weight"] = Tensor(np.eye(3).reshape(3, 3, 1, 1) * 1.0)
        p["gca.cls1.bias"] = Tensor(np.full(3, 2.0))
        p["gca.cls2.weight"] = Tensor(w2)
        _, reps = gca_forward(r_g, p)
        np.testing.assert_allclose(reps.reps.data[0], f.T, atol=1e-12)

    def test_uniform_weights_give_mean(self, rng):
        r_g = rng.standard_normal((2, 5, 3, 4))
        _, reps = gca_forward(Tensor(r_g), _zero_logit_params(5, 3, "gca"))
        mean = r_g.reshape(2, 5, -1).mean(axis=2)
        np.testing.assert_allclose(reps.reps.data, np.repeat(mean[:, None], 3, axis=1), atol=1e-12)

    def test_loop_oracle(self, rng):
        r_g = rng.standard_normal((1, 8, 4, 4))
        p = preclassifier(rng, "gca", 8, 3)
        _, reps = gca_forward(Tensor(r_g.astype(np.float32)), as_tensors(p, np.float32))
        assert np.max(np.abs(reps.reps.data - oracles.gca_loops(r_g, p))) < 1e-6

    def test_reps_are_convex_combinations(self, rng):
        r_g = rng.standard_normal((1, 5, 4, 4))
        p = as_tensors(preclassifier(rng, "gca", 5, 3, scale=2.0))
        dist, reps = gca_forward(Tensor(r_g), p)
        weights = dist.probs.data.reshape(1, 3, 16)
        assert dist.normalization_axis == "spatial"
        assert weights.min() >= 0
        np.testing.assert_allclose(weights.sum(axis=2), 1.0, atol=1e-12)
        feats = r_g.reshape(5, 16)
        np.testing.assert_allclose(reps.reps.data[0], weights[0] @ feats.T, atol=1e-12)
        # each rep lies inside the per-channel range of the features
        assert np.all(reps.reps.data[0] <= feats.max(axis=1) + 1e-12)
        assert np.all(reps.reps.data[0] >= feats.min(axis=1) - 1e-12)


def _lca_inputs(rng, n=1, c=8, h=8, w=8, k=3):
    r = rng.standard_normal((n, c, h, w))
    c_g = rng.standard_normal((n, k, c))
    p = preclassifier(rng, "lca", c, k, bias2=False)
    return r, c_g, p


class TestLCA:
    def test_loop_oracle(self, rng):
        r, c_g, p = _lca_inputs(rng)
        out = lca_forward(Tensor(r.astype(np.float32)), Tensor(c_g.astype(np.float32)), (2, 2),
                          as_tensors(p, np.float32))
        assert np.max(np.abs(out.data - oracles.lca_loops(r, c_g, p, (2, 2)))) < 1e-5

    @pytest.mark.parametrize("grid", [(1, 1), (2, 4), (4, 2), (8, 8)])
    def test_loop_oracle_grids(self, rng, grid):
        r, c_g, p = _lca_inputs(rng, n=2, c=3, k=2)
        out = lca_forward(Tensor(r), Tensor(c_g), grid, as_tensors(p))
        np.testing.assert_allclose(out.data, oracles.lca_loops(r, c_g, p, grid), atol=1e-12)

    def test_single_patch_matches_global_variant(self, rng):
        r, c_g, p = _lca_inputs(rng, n=2)
        tp = as_tensors(p)
        a = lca_forward(Tensor(r), Tensor(c_g), (1, 1), tp).data
        b = lca_global_variant(Tensor(r), Tensor(c_g), tp).data
        assert np.max(np.abs(a - b)) < 1e-12

    def test_single_class_outputs_global_vector(self, rng):
        r, c_g, p = _lca_inputs(rng, k=1)
        details = lca_details(Tensor(r), Tensor(c_g), (2, 2), as_tensors(p))
        np.testing.assert_array_equal(details.affinity.aff.data, 1.0)
        expected = np.broadcast_to(c_g[0, 0][:, None, None], (8, 8, 8))
        np.testing.assert_allclose(details.output.data[0], expected, atol=1e-12)
        glob = lca_global_variant(Tensor(r), Tensor(c_g), as_tensors(p)).data
        np.testing.assert_allclose(glob[0], expected, atol=1e-12)

    def test_constant_features_give_constant_output(self, rng):
        r = np.broadcast_to(rng.standard_normal(6)[None, :, None, None], (1, 6, 4, 4)).copy()
        c_g = rng.standard_normal((1, 3, 6))
        out = lca_global_variant(Tensor(r), Tensor(c_g), as_tensors(preclassifier(rng, "lca", 6, 3))).data
        np.testing.assert_allclose(out, np.broadcast_to(out[:, :, :1, :1], out.shape), atol=1e-12)

    def test_affinity_and_local_weights_normalised(self, rng):
        r, c_g, p = _lca_inputs(rng)
        d = lca_details(Tensor(r.astype(np.float32) * 3), Tensor(c_g.astype(np.float32)), (2, 2),
                        as_tensors(p, np.float32))
        assert d.affinity.aff.shape == (4, 16, 3)
        assert np.all(np.abs(d.affinity.aff.data.astype(np.float64).sum(axis=2) - 1) <= 1e-6)
        per_patch = T.patch_split(d.distribution.probs, (2, 2)).data
        patch_sums = per_patch.reshape(4, 3, 16).astype(np.float64).sum(axis=2)
        assert np.all(np.abs(patch_sums - 1) <= 1e-6)
        assert d.local_reps.reps.shape == (4, 3, 8)
        assert d.local_reps.grid == (2, 2) and d.local_reps.patch == (4, 4)

    def test_patch_independence(self, rng):
        r, c_g, p = _lca_inputs(rng, n=2)
        tp = as_tensors(p)
        grid = (2, 2)
        full = lca_forward(Tensor(r), Tensor(c_g), grid, tp).data
        patches = T.patch_split(Tensor(r), grid).data
        perm = rng.permutation(patches.shape[0])
        owner = np.arange(patches.shape[0]) // 4
        out = lca_forward(Tensor(patches[perm]), Tensor(c_g[owner[perm]]), (1, 1), tp).data
        restored = np.empty_like(out)
        restored[perm] = out
        merged = T.patch_merge(Tensor(restored), grid).data
        np.testing.assert_allclose(merged, full, atol=1e-12)

    def test_translation_by_whole_patch(self, rng):
        r, c_g, p = _lca_inputs(rng)
        tp = as_tensors(p)
        out = lca_forward(Tensor(r), Tensor(c_g), (2, 2), tp).data
        shifted = np.roll(r, shift=(4, 4), axis=(2, 3))
        out_shifted = lca_forward(Tensor(shifted), Tensor(c_g), (2, 2), tp).data
        np.testing.assert_allclose(out_shifted, np.roll(out, shift=(4, 4), axis=(2, 3)), atol=1e-12)

    def test_errors(self, rng):
        r, c_g, p = _lca_inputs(rng)
        tp = as_tensors(p)
        with pytest.raises(ShapeError, match="not divisible"):
            lca_forward(Tensor(r), Tensor(c_g), (3, 3), tp)
        with pytest.raises(ShapeError, match="channel mismatch"):
            lca_forward(Tensor(r), Tensor(c_g[:, :, :5]), (2, 2), tp)
        with pytest.raises(ShapeError, match="channel mismatch"):
            lca_global_variant(Tensor(r), Tensor(c_g[:, :, :5]), tp)
