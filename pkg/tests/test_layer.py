"""ARC layer: kernel combination, combined vs per-expert forward, gradients."""

import math

import numpy as np
import pytest

from arcconv import functional as F
from arcconv.layer import ArcLayer, ArcLayerConfig, arc_forward, arc_forward_naive, combine_kernels
from arcconv.rotation import rotate_kernel_stack
from arcconv.tensor import ConfigurationError, DimensionError, Parameter, Tensor, backward, no_grad


def make(n=2, k=3, cin=3, cout=4, seed=0, **kw):
    return ArcLayer.create(ArcLayerConfig(cin, cout, n=n, k=k, padding=k // 2, **kw), seed=seed)


def direct_conv(x, w, padding):
    """Per-sample reference convolution via explicit shifted products."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho, wo = h + 2 * padding - k + 1, wd + 2 * padding - k + 1
    y = np.zeros((n, o, ho, wo))
    for u in range(k):
        for v in range(k):
            y += np.einsum("oc,nchw->nohw", w[:, :, u, v], xp[:, :, u:u + ho, v:v + wo])
    return y


def test_single_expert_unit_weight_zero_angle_is_identity_kernel():
    rng = np.random.default_rng(0)
    W = rng.standard_normal((1, 1, 4, 3, 3, 3))
    out = combine_kernels(Tensor(W), Tensor(np.ones((1, 1))))
    assert np.array_equal(out.data[0], W[0, 0])


def test_one_hot_weights_select_rotated_expert():
    rng = np.random.default_rng(1)
    W = rng.standard_normal((3, 2, 2, 3, 3))
    theta = np.array([0.4, -1.2, 2.0])
    rot = rotate_kernel_stack(W, theta)
    out = combine_kernels(Tensor(rot[None]), Tensor(np.array([[0.0, 1.0, 0.0]])))
    assert np.array_equal(out.data[0], rot[1])


def test_combination_matches_elementwise_sum():
    rng = np.random.default_rng(2)
    rot = rng.standard_normal((3, 4, 2, 3, 3, 3))
    lam = rng.uniform(size=(3, 4))
    out = combine_kernels(Tensor(rot), Tensor(lam)).data
    ref = np.zeros_like(out)
    for b in range(3):
        for i in range(4):
            ref[b] += lam[b, i] * rot[b, i]
    assert np.max(np.abs(out - ref)) <= 1e-14


def test_degenerate_layer_is_static_conv():
    layer = make(n=1, k=3)
    x = np.random.default_rng(3).standard_normal((2, 3, 6, 6))
    y = arc_forward(layer, Tensor(x), theta=np.zeros((2, 1)), lam=np.ones((2, 1))).data
    ref = F.conv2d(Tensor(x), Tensor(layer.kernels.data[0]), padding=1).data
    assert np.max(np.abs(y - ref)) <= 1e-14
    assert np.max(np.abs(y - direct_conv(x, layer.kernels.data[0], 1))) <= 1e-13


@pytest.mark.parametrize("n", [1, 2, 4])
@pytest.mark.parametrize("k", [1, 3, 5])
@pytest.mark.parametrize("batch", [1, 3])
def test_combined_equals_per_expert_sum(n, k, batch):
    layer = make(n=n, k=k, seed=10 * n + k)
    x = Tensor(np.random.default_rng(batch).standard_normal((batch, 3, 7, 7)))
    with no_grad():
        a, b = arc_forward(layer, x).data, arc_forward_naive(layer, x).data
    assert np.max(np.abs(a - b)) <= 1e-12


def test_naive_path_against_independent_reference():
    layer = make(n=3, k=3, seed=4)
    x = np.random.default_rng(4).standard_normal((2, 3, 6, 6))
    with no_grad():
        r = layer.route(Tensor(x))
        y = arc_forward_naive(layer, Tensor(x)).data
    ref = np.zeros_like(y)
    for b in range(2):
        rot = rotate_kernel_stack(layer.kernels.data, r.theta.data[b])
        for i in range(3):
            ref[b] += r.lam.data[b, i] * direct_conv(x[b:b + 1], rot[i], 1)[0]
    assert np.max(np.abs(y - ref)) <= 1e-12


def test_naive_single_expert_and_zero_weights():
    layer = make(n=1, k=3, seed=5)
    x = Tensor(np.random.default_rng(5).standard_normal((2, 3, 5, 5)))
    theta = np.array([[0.3], [-0.9]])
    y = arc_forward_naive(layer, x, theta=theta, lam=np.array([[0.5], [2.0]])).data
    for b, s in enumerate([0.5, 2.0]):
        w = rotate_kernel_stack(layer.kernels.data, theta[b])[0]
        assert np.allclose(y[b], s * direct_conv(x.data[b:b + 1], w, 1)[0], rtol=1e-12, atol=1e-13)
    z = arc_forward_naive(make(n=3, seed=6), x, lam=np.zeros((2, 3))).data
    assert not z.any()


def test_batch_permutation_permutes_outputs():
    layer = make(n=4, k=3, seed=7)
    x = np.random.default_rng(7).standard_normal((4, 3, 6, 6))
    perm = np.array([2, 0, 3, 1])
    with no_grad():
        a = arc_forward(layer, Tensor(x)).data
        b = arc_forward(layer, Tensor(x[perm])).data
    assert np.max(np.abs(a[perm] - b)) <= 1e-14


def test_strided_layer_output_shape_and_equivalence():
    layer = ArcLayer.create(ArcLayerConfig(3, 5, n=2, k=3, stride=2, padding=1), seed=8)
    x = Tensor(np.random.default_rng(8).standard_normal((2, 3, 8, 8)))
    with no_grad():
        a, b = arc_forward(layer, x).data, arc_forward_naive(layer, x).data
    assert a.shape == (2, 5, 4, 4) and np.max(np.abs(a - b)) <= 1e-12


def test_float32_equivalence_relative():
    layer = ArcLayer.create(ArcLayerConfig(3, 4, n=4, k=3), seed=9, dtype=np.float32)
    x = Tensor(np.random.default_rng(9).standard_normal((3, 3, 8, 8)), dtype=np.float32)
    with no_grad():
        a, b = arc_forward(layer, x).data, arc_forward_naive(layer, x).data
    assert a.dtype == np.float32
    assert np.max(np.abs(a - b)) / np.max(np.abs(b)) <= 1e-5


def _fd_rel(layer, x, R, eps=1e-5):
    params = {**layer.named_parameters(), "x": x}
    for p in params.values():
        p.zero_grad()
    backward((arc_forward(layer, x) * R).sum())
    worst = 0.0
    for name, p in params.items():
        num = np.zeros_like(p.data)
        for idx in np.ndindex(p.shape):
            keep = p.data[idx]
            with no_grad():
                p.data[idx] = keep + eps
                up = float((arc_forward(layer, x).data * R).sum())
                p.data[idx] = keep - eps
                down = float((arc_forward(layer, x).data * R).sum())
            p.data[idx] = keep
            num[idx] = (up - down) / (2 * eps)
        scale = max(np.linalg.norm(num), np.linalg.norm(p.grad))
        if scale:
            worst = max(worst, np.linalg.norm(num - p.grad) / scale)
    return worst


def test_layer_gradients_match_finite_differences():
    layer = ArcLayer.create(ArcLayerConfig(4, 4, n=2, k=3), seed=11)
    rng = np.random.default_rng(11)
    x = Parameter(rng.standard_normal((2, 4, 6, 6)))
    assert _fd_rel(layer, x, rng.standard_normal((2, 4, 6, 6))) <= 1e-5


def test_zero_upstream_gives_zero_grads():
    layer = make(n=2, seed=12)
    x = Parameter(np.random.default_rng(12).standard_normal((2, 3, 5, 5)))
    backward((arc_forward(layer, x) * np.zeros((2, 4, 5, 5))).sum())
    assert not x.grad.any()
    assert all(not p.grad.any() for p in layer.named_parameters().values())


def test_one_by_one_layer_ignores_angles():
    layer = make(n=2, k=1, seed=13)
    x = Parameter(np.random.default_rng(13).standard_normal((2, 3, 5, 5)))
    backward((arc_forward(layer, x) * np.random.default_rng(0).standard_normal((2, 4, 5, 5))).sum())
    assert np.array_equal(layer.router.theta_weight.grad, np.zeros((2, 3)))


def test_config_and_shape_validation():
    with pytest.raises(ConfigurationError):
        ArcLayerConfig(3, 4, n=0)
    with pytest.raises(ConfigurationError):
        ArcLayerConfig(3, 4, padding=-1)
    with pytest.raises(DimensionError):
        make()(Tensor(np.zeros((1, 5, 6, 6))))
    layer = make()
    with pytest.raises(DimensionError):
        ArcLayer(layer.config, np.zeros((3, 4, 3, 3, 3)), layer.router)
