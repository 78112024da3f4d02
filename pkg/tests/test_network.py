"""Model construction, receptive-field arithmetic, forward pass, fusion."""

import numpy as np
import pytest

from patchbank.network import (
    BackboneSpec,
    DFLModuleSpec,
    FilterBank,
    ModelSpec,
    build_model,
    builtin_backbone,
    conv,
    feature_shapes,
    forward,
    fuse_predictions,
    pool,
    receptive_field,
    relu_layer,
    tap_features,
    tinynet_spec,
    vgg16_backbone,
)
from patchbank.tensor import Tensor


# ------------------------------------------------------------ receptive field


def probe_changed_sites(spec, in_channels, input_size, pixel, tap):
    """Empirical receptive-field oracle: bump one input pixel hugely and
    report which tap sites change.

    Uses positive weights and positive inputs so a positive bump always
    propagates through convs, max pools, and relus.
    """
    from patchbank import ops
    from patchbank.tensor import Tensor as T

    rng = np.random.default_rng(1234)
    weights = []
    c = in_channels
    for layer in spec.layers:
        if layer.kind == "conv":
            weights.append(rng.uniform(0.1, 1.0, (layer.out_channels, c, layer.kernel, layer.kernel)))
            c = layer.out_channels
        else:
            weights.append(None)

    def run(img):
        cur = T(img)
        for layer, w in zip(spec.layers[: spec.taps[tap] + 1], weights):
            if layer.kind == "conv":
                cur = ops.conv2d(cur, T(w), layer.stride, layer.pad)
            elif layer.kind == "pool":
                cur = ops.maxpool2d(cur, layer.kernel, layer.stride)
            else:
                cur = ops.relu(cur)
        return cur.data

    base = rng.uniform(0.5, 1.5, (in_channels, input_size, input_size))
    bumped = base.copy()
    bumped[:, pixel[0], pixel[1]] += 1e6
    diff = np.abs(run(bumped) - run(base)).max(axis=0)
    return {(h, w) for h, w in zip(*np.nonzero(diff > 1e-6))}


def predicted_sites(rf, n_h, n_w, pixel, input_size):
    start0 = rf.offset - (rf.size - 1) / 2.0
    sites = set()
    for h in range(n_h):
        for w in range(n_w):
            top = start0 + rf.stride * h
            left = start0 + rf.stride * w
            if top <= pixel[0] <= top + rf.size - 1 and left <= pixel[1] <= left + rf.size - 1:
                sites.add((h, w))
    return sites


class TestReceptiveField:
    def test_vgg16_conv4_3_is_92_by_8(self):
        rf = receptive_field(vgg16_backbone(), "conv4_3")
        assert rf.size == 92
        assert rf.stride == 8

    def test_single_1x1_conv(self):
        spec = BackboneSpec(layers=(conv(1, 4),), taps={"t": 0})
        rf = receptive_field(spec, "t")
        assert (rf.size, rf.stride, rf.offset) == (1, 1, 0.0)

    def test_conv_pool_conv_is_8_by_2(self):
        spec = BackboneSpec(layers=(conv(3, 4), pool(2, 2), conv(3, 4)), taps={"t": 2})
        rf = receptive_field(spec, "t")
        assert rf.size == 8
        assert rf.stride == 2
        # Verify empirically: the set of tap sites changed by a single-pixel
        # bump must equal the sites whose declared field covers that pixel.
        shapes = feature_shapes(spec, 2, 16)
        n_h, n_w = shapes[-1][1:]
        for pixel in [(5, 7), (8, 3), (11, 11)]:
            got = probe_changed_sites(spec, 2, 16, pixel, "t")
            assert got == predicted_sites(rf, n_h, n_w, pixel, 16)

    def test_unknown_tap_rejected(self):
        with pytest.raises(KeyError, match="unknown tap"):
            receptive_field(vgg16_backbone(), "conv9_9")

    def test_tinynet_tap_is_18_by_4(self):
        spec = tinynet_spec(classes=8)
        rf = receptive_field(spec.backbone, "block3")
        assert (rf.size, rf.stride) == (18, 4)

    @pytest.mark.parametrize("seed", range(6))
    def test_probing_agrees_on_random_specs(self, seed):
        rng = np.random.default_rng(seed)
        for _ in range(20):  # rejection-sample a spec whose maps stay >= 1
            layers = []
            for _ in range(int(rng.integers(1, 9))):
                kind = rng.choice(["conv", "pool", "relu"], p=[0.5, 0.3, 0.2])
                if kind == "conv":
                    layers.append(conv(int(rng.integers(1, 5)), int(rng.integers(1, 4)),
                                       stride=int(rng.integers(1, 3)), pad=int(rng.integers(0, 2))))
                elif kind == "pool":
                    layers.append(pool(int(rng.integers(2, 4)), int(rng.integers(1, 3))))
                else:
                    layers.append(relu_layer())
            spec = BackboneSpec(layers=tuple(layers), taps={"t": len(layers) - 1})
            try:
                shapes = feature_shapes(spec, 2, 20)
                break
            except ValueError:
                continue
        else:
            pytest.skip("no valid random spec found")
        rf = receptive_field(spec, "t")
        n_h, n_w = shapes[-1][1:]
        pixel = (int(rng.integers(3, 17)), int(rng.integers(3, 17)))
        got = probe_changed_sites(spec, 2, 20, pixel, "t")
        want = predicted_sites(rf, n_h, n_w, pixel, 20)
        # The declared field is the bounding hull of the true dependency set,
        # so changed sites are always inside it; when every prefix keeps the
        # composed jump within the composed size the dependencies are dense
        # and the two sets coincide.
        assert got <= want
        size, jump, dense = 1, 1, True
        for layer in spec.layers:
            k = 1 if layer.kind == "relu" else layer.kernel
            s = 1 if layer.kind == "relu" else layer.stride
            size += (k - 1) * jump
            jump *= s
            dense = dense and jump <= size
        if dense:
            assert got == want


# -------------------------------------------------------------------- build


class TestBuildModel:
    def test_filter_counts_from_classes_and_k(self):
        spec = tinynet_spec(classes=4, filters_per_class=3)
        model = build_model(spec, seed=0)
        assert model.params["module0.conv6.weight"].shape == (12, 64, 1, 1)
        outs = forward(model, np.zeros((3, 64, 64)))
        assert outs.pool6[0].shape == (12,)
        assert outs.side_logits[0].shape == (4,)

    def test_two_modules_two_p_streams_one_g_stream(self):
        base = tinynet_spec(classes=4, filters_per_class=2)
        mods = (
            DFLModuleSpec(tap="block3", classes=4, filters_per_class=2),
            DFLModuleSpec(tap="block4", classes=4, filters_per_class=2),
        )
        spec = ModelSpec(backbone=base.backbone, modules=mods, input_size=64)
        model = build_model(spec, seed=0)
        outs = forward(model, np.zeros((3, 64, 64)))
        assert len(outs.p_logits) == 2
        assert len(outs.side_logits) == 2
        assert outs.g_logits.shape == (4,)

    def test_bank_init_copied_bit_exactly(self):
        spec = tinynet_spec(classes=4, filters_per_class=3)
        rng = np.random.default_rng(5)
        bank = FilterBank(weight=Tensor(rng.standard_normal((12, 64, 1, 1))),
                          classes=4, filters_per_class=3)
        model = build_model(spec, bank_init=[bank], seed=0)
        np.testing.assert_array_equal(model.params["module0.conv6.weight"].data, bank.weight.data)

    def test_bank_init_leaves_other_weights_unchanged(self):
        spec = tinynet_spec(classes=4, filters_per_class=3)
        bank = FilterBank(weight=Tensor(np.zeros((12, 64, 1, 1))), classes=4, filters_per_class=3)
        a = build_model(spec, seed=3)
        b = build_model(spec, bank_init=[bank], seed=3)
        np.testing.assert_array_equal(a.params["backbone.0.weight"].data,
                                      b.params["backbone.0.weight"].data)
        np.testing.assert_array_equal(a.params["ghead.weight"].data, b.params["ghead.weight"].data)

    def test_bank_shape_mismatch_rejected(self):
        spec = tinynet_spec(classes=4, filters_per_class=3)
        bank = FilterBank(weight=Tensor(np.zeros((12, 32, 1, 1))), classes=4, filters_per_class=3)
        with pytest.raises(ValueError, match="does not match"):
            build_model(spec, bank_init=[bank])

    def test_filter_bank_class_ownership(self):
        bank = FilterBank(weight=Tensor(np.zeros((12, 8, 1, 1))), classes=4, filters_per_class=3)
        assert [bank.class_of_filter(j) for j in range(12)] == [0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]


# ------------------------------------------------------------------ forward


def hand_trace(x, w1, w6, wp, bp, wg, bg):
    """Fully hand-rolled forward for a 1-conv backbone with one module (k=1, M=2)."""
    bb = np.einsum("oc,chw->ohw", w1[:, :, 0, 0], x)
    g = wg @ bb.mean(axis=(1, 2)) + bg
    c6 = np.einsum("fc,chw->fhw", w6[:, :, 0, 0], bb)
    pool6 = c6.reshape(2, -1).max(axis=1)
    p = wp @ pool6 + bp
    side = pool6.copy()  # k=1: group means are the values themselves
    return g, p, side, pool6


class TestForward:
    def test_shapes_contract(self):
        model = build_model(tinynet_spec(classes=8, filters_per_class=4), seed=0)
        outs = forward(model, np.random.default_rng(0).random((3, 64, 64)))
        assert outs.g_logits.shape == (8,)
        assert outs.p_logits[0].shape == (8,)
        assert outs.side_logits[0].shape == (8,)
        assert outs.pool6[0].shape == (32,)
        assert outs.peak_argmax[0].shape == (32, 2)

    def test_zero_input_zero_weights_zero_logits(self):
        model = build_model(tinynet_spec(classes=4, filters_per_class=2), seed=0)
        for p in model.params.values():
            p.data[...] = 0.0
        outs = forward(model, np.zeros((3, 64, 64)))
        assert not outs.g_logits.data.any()
        assert not outs.p_logits[0].data.any()
        assert not outs.side_logits[0].data.any()

    def test_matches_hand_rolled_trace(self):
        backbone = BackboneSpec(layers=(conv(1, 3),), taps={"t": 0})
        spec = ModelSpec(
            backbone=backbone,
            modules=(DFLModuleSpec(tap="t", classes=2, filters_per_class=1),),
            input_size=2,
            in_channels=2,
        )
        model = build_model(spec, seed=9)
        rng = np.random.default_rng(10)
        x = rng.standard_normal((2, 2, 2))
        outs = forward(model, x)
        g, p, side, pool6 = hand_trace(
            x,
            model.params["backbone.0.weight"].data,
            model.params["module0.conv6.weight"].data,
            model.params["module0.phead.weight"].data,
            model.params["module0.phead.bias"].data,
            model.params["ghead.weight"].data,
            model.params["ghead.bias"].data,
        )
        np.testing.assert_allclose(outs.g_logits.data, g, atol=1e-12)
        np.testing.assert_allclose(outs.p_logits[0].data, p, atol=1e-12)
        np.testing.assert_allclose(outs.side_logits[0].data, side, atol=1e-12)
        np.testing.assert_allclose(outs.pool6[0].data, pool6, atol=1e-12)

    def test_deterministic_bit_identical(self):
        model = build_model(tinynet_spec(classes=4, filters_per_class=2), seed=1)
        x = np.random.default_rng(2).random((3, 64, 64))
        a, b = forward(model, x), forward(model, x)
        np.testing.assert_array_equal(a.g_logits.data, b.g_logits.data)
        np.testing.assert_array_equal(a.p_logits[0].data, b.p_logits[0].data)
        np.testing.assert_array_equal(a.pool6[0].data, b.pool6[0].data)
        np.testing.assert_array_equal(a.peak_argmax[0], b.peak_argmax[0])

    def test_batched_matches_per_sample(self):
        model = build_model(tinynet_spec(classes=4, filters_per_class=2), seed=1)
        xs = np.random.default_rng(3).random((3, 3, 64, 64))
        batched = forward(model, xs)
        for i in range(3):
            single = forward(model, xs[i])
            np.testing.assert_allclose(batched.g_logits.data[i], single.g_logits.data, atol=1e-12)
            np.testing.assert_allclose(batched.p_logits[0].data[i], single.p_logits[0].data,
                                       atol=1e-12)

    def test_input_size_mismatch_rejected(self):
        model = build_model(tinynet_spec(classes=4, filters_per_class=2), seed=0)
        with pytest.raises(ValueError, match="does not match"):
            forward(model, np.zeros((3, 32, 32)))

    def test_side_logits_depend_only_on_conv6_given_tap_features(self):
        # No learnable parameter sits between the side loss and conv6:
        # perturbing any head weight leaves side logits untouched.
        model = build_model(tinynet_spec(classes=4, filters_per_class=2), seed=4)
        x = np.random.default_rng(5).random((3, 64, 64))
        before = forward(model, x)
        model.params["ghead.weight"].data += 1.0
        model.params["module0.phead.weight"].data += 1.0
        after = forward(model, x)
        np.testing.assert_array_equal(before.side_logits[0].data, after.side_logits[0].data)
        assert not np.array_equal(before.g_logits.data, after.g_logits.data)
        assert not np.array_equal(before.p_logits[0].data, after.p_logits[0].data)

    def test_p_stream_invariant_to_post_tap_backbone(self):
        # The two streams are asymmetric: layers after the tap affect only G.
        model = build_model(tinynet_spec(classes=4, filters_per_class=2), seed=6)
        x = np.random.default_rng(7).random((3, 64, 64))
        before = forward(model, x)
        model.params["backbone.8.weight"].data += 0.5  # block-4 conv, after the tap
        after = forward(model, x)
        np.testing.assert_array_equal(before.p_logits[0].data, after.p_logits[0].data)
        np.testing.assert_array_equal(before.side_logits[0].data, after.side_logits[0].data)
        assert not np.array_equal(before.g_logits.data, after.g_logits.data)

    def test_tap_features_match_forward_prefix(self):
        model = build_model(tinynet_spec(classes=4, filters_per_class=2), seed=8)
        x = np.random.default_rng(9).random((3, 64, 64))
        taps = tap_features(model, x, "block3")
        assert taps.shape == (64, 16, 16)


# ------------------------------------------------------------------- fusion


class TestFusePredictions:
    def _outputs(self, g, p, side):
        from patchbank.network import StreamOutputs
        return StreamOutputs(g_logits=Tensor(np.asarray(g, dtype=float)),
                             p_logits=[Tensor(np.asarray(p, dtype=float))],
                             side_logits=[Tensor(np.asarray(side, dtype=float))],
                             pool6=[], peak_values=[], peak_argmax=[])

    def test_one_hot_weight_selects_g_stream(self):
        outs = self._outputs([0.0, 3.0], [5.0, 0.0], [9.0, 0.0])
        fused, cls = fuse_predictions(outs, (1.0, 0.0, 0.0))
        np.testing.assert_array_equal(fused.data, [0.0, 3.0])
        assert cls == 1

    def test_default_weights_mirror_training_losses(self):
        spec = tinynet_spec(classes=8, filters_per_class=4)
        np.testing.assert_array_equal(spec.default_fusion_weights(), [1.0, 1.0, 0.1])

    def test_scaling_all_weights_preserves_argmax(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            outs = self._outputs(rng.standard_normal(5), rng.standard_normal(5),
                                 rng.standard_normal(5))
            w = rng.random(3) + 0.1
            _, cls = fuse_predictions(outs, w)
            _, cls_scaled = fuse_predictions(outs, w * 7.5)
            assert cls == cls_scaled

    def test_tie_breaks_to_smallest_index(self):
        outs = self._outputs([1.0, 1.0], [0.0, 0.0], [0.0, 0.0])
        _, cls = fuse_predictions(outs, (1.0, 1.0, 1.0))
        assert cls == 0

    def test_length_mismatch_rejected(self):
        outs = self._outputs([1.0, 1.0], [0.0, 0.0], [0.0, 0.0])
        with pytest.raises(ValueError, match="fusion weights"):
            fuse_predictions(outs, (1.0, 1.0))

    def test_negative_weight_rejected(self):
        outs = self._outputs([1.0, 1.0], [0.0, 0.0], [0.0, 0.0])
        with pytest.raises(ValueError, match="nonnegative"):
            fuse_predictions(outs, (1.0, -1.0, 0.0))


class TestSpecValidation:
    def test_tap_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            BackboneSpec(layers=(conv(3, 4),), taps={"t": 5})

    def test_collapsing_feature_map_rejected(self):
        spec = BackboneSpec(layers=(pool(2, 2), pool(2, 2), pool(2, 2)), taps={"t": 2})
        with pytest.raises(ValueError, match="collapses"):
            feature_shapes(spec, 3, 4)

    def test_module_needs_two_classes(self):
        with pytest.raises(ValueError, match="classes"):
            DFLModuleSpec(tap="t", classes=1, filters_per_class=2)

    def test_builtin_backbone_lookup(self):
        assert "conv4_3" in builtin_backbone("vgg16").taps
        with pytest.raises(ValueError, match="unknown builtin"):
            builtin_backbone("lenet")
