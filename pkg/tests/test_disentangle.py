"""Class activation maps and per-class feature pooling."""

import numpy as np
import pytest

from avalign.heads import ClassifierHead
from avalign.disentangle import (ClassActivationMap, ClassFeatureSet, grad_cam,
                                 weighted_pool, select_valid_classes,
                                 disentangle_sample)
from avalign.nn import autodiff as ad
from avalign.nn.autodiff import Tensor

RNG = np.random.default_rng(7)


def _gap_linear_logit(leaf: Tensor, w: np.ndarray, c: int) -> Tensor:
    pooled = ad.tmean(leaf, axis=(2, 3))          # (1, D)
    return ad.matmul(pooled, Tensor(w))[0, c]


def test_grad_cam_unit_gradient_gives_unit_map():
    leaf = Tensor(np.ones((1, 1, 3, 4)), requires_grad=True)
    logit = ad.tmean(leaf)      # d logit / dF = 1/12 everywhere, alpha = 1/12
    cam = grad_cam(leaf, logit)
    assert cam.weights.shape == (3, 4)
    assert np.allclose(cam.weights, 1.0 / 12.0, atol=1e-15)
    assert not cam.degenerate


def test_grad_cam_equals_cam_on_gap_linear_head():
    # on a global-average-pool + linear classifier the gradient-weighted map
    # reduces to the plain class activation map ReLU(sum_k w_ck F_k)
    d, u, v, n_cls = 6, 5, 7, 4
    w = RNG.standard_normal((d, n_cls))
    for trial in range(50):
        x = RNG.standard_normal((1, d, u, v))
        c = int(RNG.integers(n_cls))
        leaf = Tensor(x.copy(), requires_grad=True)
        cam = grad_cam(leaf, _gap_linear_logit(leaf, w, c), class_id=c)
        want = np.maximum(np.tensordot(w[:, c], x[0], axes=([0], [0])) / (u * v), 0.0)
        assert np.allclose(cam.weights, want, atol=1e-5)


def test_grad_cam_negated_logit_flips_pre_relu_map():
    leaf = Tensor(RNG.standard_normal((1, 3, 4, 4)), requires_grad=True)
    w = RNG.standard_normal((3, 2))
    pos = grad_cam(leaf, _gap_linear_logit(leaf, w, 0)).weights
    leaf2 = Tensor(leaf.data.copy(), requires_grad=True)
    neg = grad_cam(leaf2, ad.mul(_gap_linear_logit(leaf2, w, 0), -1.0)).weights
    raw = np.tensordot(w[:, 0], leaf.data[0], axes=([0], [0])) / 16.0
    assert np.allclose(pos, np.maximum(raw, 0.0), atol=1e-12)
    assert np.allclose(neg, np.maximum(-raw, 0.0), atol=1e-12)


def test_grad_cam_disconnected_logit_raises():
    leaf = Tensor(np.ones((1, 2, 3, 3)), requires_grad=True)
    stray = Tensor(np.array(1.5), requires_grad=True)
    with pytest.raises(ValueError):
        grad_cam(leaf, ad.mul(stray, 2.0))


def test_grad_cam_zero_gradient_flags_degenerate():
    leaf = Tensor(np.ones((1, 2, 3, 3)), requires_grad=True)
    logit = ad.tsum(ad.mul(leaf, 0.0))
    cam = grad_cam(leaf, logit)
    assert cam.degenerate
    assert np.all(cam.weights == 0.0)


def test_grad_cam_rejects_nonscalar_logit():
    leaf = Tensor(np.ones((1, 2, 3, 3)), requires_grad=True)
    with pytest.raises(ValueError):
        grad_cam(leaf, ad.tsum(leaf, axis=(0, 1)))


def test_activation_map_rejects_negative_entries():
    with pytest.raises(ValueError):
        ClassActivationMap(weights=np.array([[-0.1, 0.0]]), class_id=0,
                           modality="audio", degenerate=False)


def test_weighted_pool_uniform_weights_is_spatial_mean():
    x = Tensor(RNG.standard_normal((4, 3, 5)))
    got = weighted_pool(x, np.ones((3, 5))).data
    assert np.allclose(got, x.data.mean(axis=(1, 2)), atol=1e-12)


def test_weighted_pool_one_hot_picks_single_cell():
    x = Tensor(RNG.standard_normal((4, 3, 5)))
    w = np.zeros((3, 5))
    w[1, 3] = 2.7
    got = weighted_pool(x, w).data
    assert np.allclose(got, x.data[:, 1, 3], atol=1e-12)


def test_weighted_pool_matches_double_loop_oracle():
    for _ in range(10):
        x = RNG.standard_normal((6, 4, 4))
        w = RNG.random((4, 4))
        want = np.zeros(6)
        for u in range(4):
            for vv in range(4):
                want += x[:, u, vv] * w[u, vv]
        want /= w.sum()
        got = weighted_pool(Tensor(x), w).data
        assert np.allclose(got, want, atol=1e-6)


def test_weighted_pool_scale_invariant_in_weights():
    x = Tensor(RNG.standard_normal((3, 4, 4)))
    w = RNG.random((4, 4))
    a = weighted_pool(x, w).data
    b = weighted_pool(x, 37.0 * w).data
    assert np.allclose(a, b, atol=1e-12)


def test_weighted_pool_zero_sum_falls_back_to_uniform():
    x = Tensor(RNG.standard_normal((3, 2, 2)))
    got = weighted_pool(x, np.zeros((2, 2))).data
    assert np.allclose(got, x.data.mean(axis=(1, 2)), atol=1e-12)


def test_weighted_pool_output_in_convex_hull():
    x = RNG.standard_normal((5, 3, 3))
    w = RNG.random((3, 3))
    got = weighted_pool(Tensor(x), w).data
    lo = x.min(axis=(1, 2))
    hi = x.max(axis=(1, 2))
    assert np.all(got >= lo - 1e-12) and np.all(got <= hi + 1e-12)


def test_weighted_pool_gradient_skips_weights():
    x = Tensor(RNG.standard_normal((2, 3, 3)), requires_grad=True)
    w = RNG.random((3, 3))
    ad.tsum(weighted_pool(x, w)).backward()
    assert x.grad is not None
    # each channel's gradient is the normalized weight map itself
    assert np.allclose(x.grad[0], w / w.sum(), atol=1e-12)


def test_weighted_pool_shape_mismatch():
    with pytest.raises(ValueError):
        weighted_pool(Tensor(np.zeros((2, 3, 3))), np.ones((4, 4)))


def test_select_valid_classes_threshold_inclusive():
    assert select_valid_classes(np.array([0.9, 0.1]), 0.5) == (0,)
    assert select_valid_classes(np.array([0.5, 0.5]), 0.5) == (0, 1)
    assert select_valid_classes(np.array([0.2, 0.3]), 0.0) == (0, 1)
    assert select_valid_classes(np.array([0.2, 0.3]), 0.9) == ()


def test_select_valid_classes_unions_true_labels():
    got = select_valid_classes(np.array([0.9, 0.1, 0.2]), 0.5,
                               true_labels=np.array([0, 0, 1]))
    assert got == (0, 2)


def test_disentangle_sample_keys_track_valid_classes():
    head = ClassifierHead(4, 3, np.random.default_rng(0))
    fmap = Tensor(RNG.standard_normal((4, 3, 3)), requires_grad=False)
    out = disentangle_sample(fmap, head, 0.0, video_id=9, modality="audio")
    assert out.video_id == 9
    assert out.valid_classes == (0, 1, 2)
    assert set(out.features) == {0, 1, 2}
    assert all(f.shape == (4,) for f in out.features.values())
    assert all(out.cams[c].class_id == c for c in out.cams)


def test_disentangle_sample_explicit_classes_override():
    head = ClassifierHead(4, 3, np.random.default_rng(0))
    fmap = Tensor(RNG.standard_normal((4, 3, 3)), requires_grad=False)
    out = disentangle_sample(fmap, head, 0.5, 1, "visual", classes=(2, 0))
    assert out.valid_classes == (0, 2)
    assert set(out.features) == {0, 2}


def test_disentangle_sample_empty_selection():
    head = ClassifierHead(4, 3, np.random.default_rng(0))
    fmap = Tensor(np.zeros((4, 3, 3)))
    out = disentangle_sample(fmap, head, 1.1, 0, "audio")
    assert out.valid_classes == ()
    assert out.features == {}


def test_disentangle_sample_leaves_head_grads_untouched():
    head = ClassifierHead(4, 3, np.random.default_rng(0))
    fmap = Tensor(RNG.standard_normal((4, 3, 3)), requires_grad=True)
    out = disentangle_sample(fmap, head, 0.0, 0, "audio")
    assert head.fc.weight.grad is None
    assert head.fc.bias.grad is None
    # pooled features stay connected to the live map
    fmap.grad = None
    ad.tsum(out.features[0]).backward()
    assert fmap.grad is not None and np.any(fmap.grad != 0)


def test_disentangle_sample_disjoint_regions_give_distinct_features():
    # two classes whose head weights each react to one channel; the map
    # activates those channels in disjoint regions
    head = ClassifierHead(2, 2, np.random.default_rng(1))
    head.fc.weight.data[:] = np.array([[5.0, 0.0], [0.0, 5.0]])
    head.fc.bias.data[:] = 0.0
    x = np.zeros((2, 4, 4))
    x[0, :2, :] = 3.0      # class-0 evidence in the top half
    x[1, 2:, :] = 3.0      # class-1 evidence in the bottom half
    x += 0.01 * RNG.standard_normal((2, 4, 4))
    out = disentangle_sample(Tensor(x), head, 0.5, 0, "visual", classes=(0, 1))
    f0, f1 = out.features[0].data, out.features[1].data
    cos = f0 @ f1 / (np.linalg.norm(f0) * np.linalg.norm(f1))
    assert cos < 0.99


def test_feature_set_rejects_keys_outside_valid():
    with pytest.raises(ValueError):
        ClassFeatureSet(video_id=0, modality="audio",
                        features={3: Tensor(np.zeros(2))},
                        valid_classes=(0, 1), cams={})
