import math

import numpy as np
import pytest
import torch

from fdcheck import TOL
from gradsuite import LAYERS, layer_error
from thin_inpaint.nn_core import (Adam, BatchNorm, Conv, SNConv, adam_step, adaptive_avg_pool,
                                  backward, batchnorm, conv2d, freeze_power_iteration, leaky_relu,
                                  relu, sigmoid, softmax_channels, spectral_normalize,
                                  upsample_nearest)

torch.set_default_dtype(torch.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def test_conv_identity_1x1():
    x = torch.randn(2, 1, 5, 5)
    out = conv2d(x, torch.ones(1, 1, 1, 1), torch.zeros(1))
    assert torch.equal(out, x)


def test_conv_output_shape():
    out = conv2d(torch.randn(1, 3, 8, 8), torch.randn(4, 3, 3, 3), stride=2, padding=1)
    assert out.shape == (1, 4, 4, 4)


def test_conv_hand_computed():
    x = torch.arange(1.0, 10.0).reshape(1, 1, 3, 3)
    assert conv2d(x, torch.ones(1, 1, 3, 3)).item() == 45.0


def test_conv_channel_mismatch_names_dims():
    with pytest.raises(ValueError, match="3 channels"):
        conv2d(torch.randn(1, 3, 8, 8), torch.randn(4, 2, 3, 3))


def _bn_args(c):
    return torch.ones(c), torch.zeros(c), torch.zeros(c), torch.ones(c)


def test_batchnorm_standardised_input_unchanged():
    x = torch.randn(4, 1, 8, 8)
    x = (x - x.mean()) / x.std(unbiased=False)
    assert torch.allclose(batchnorm(x, *_bn_args(1), training=True), x, atol=1e-5)


def test_batchnorm_constant_channel_gives_beta():
    g, b, rm, rv = _bn_args(1)
    b = torch.tensor([0.7])
    out = batchnorm(torch.full((2, 1, 3, 3), 5.0), g, b, rm, rv, training=True)
    assert torch.allclose(out, torch.full_like(out, 0.7))


def test_batchnorm_two_values():
    x = torch.tensor([1.0, 3.0]).reshape(2, 1, 1, 1)
    out = batchnorm(x, *_bn_args(1), training=True).reshape(-1)
    expected = torch.tensor([-1.0, 1.0]) / math.sqrt(1 + 1e-5)
    assert torch.allclose(out, expected, atol=1e-12)


def test_batchnorm_running_stats_and_eval():
    g, b, rm, rv = _bn_args(1)
    x = torch.tensor([1.0, 3.0]).reshape(2, 1, 1, 1)
    batchnorm(x, g, b, rm, rv, training=True)
    assert rm.item() == pytest.approx(0.1 * 2.0)
    # running variance uses the unbiased estimate (2.0) blended with momentum 0.1
    assert rv.item() == pytest.approx(0.9 * 1.0 + 0.1 * 2.0)
    out = batchnorm(x, g, b, rm, rv, training=False)
    assert torch.allclose(out, (x - rm) / torch.sqrt(rv + 1e-5))


def test_batchnorm_single_value_train_error():
    with pytest.raises(ValueError):
        batchnorm(torch.ones(1, 1, 1, 1), *_bn_args(1), training=True)


def test_spectral_norm_diag():
    w = torch.diag(torch.tensor([3.0, 1.0]))
    out, u = spectral_normalize(w, torch.tensor([0.6, 0.8]), iterations=8)
    assert torch.allclose(out, torch.diag(torch.tensor([1.0, 1 / 3])), atol=1e-4)
    assert u.norm().item() == pytest.approx(1.0)


def test_spectral_norm_orthogonal():
    q, _ = torch.linalg.qr(torch.randn(6, 6))
    out, _ = spectral_normalize(q, torch.randn(6), iterations=5)
    assert torch.allclose(out, q, atol=1e-8)


def test_spectral_norm_random_matrices_vs_svd():
    g = torch.Generator().manual_seed(0)
    for _ in range(50):
        w = torch.randn(16, 32, generator=g)
        u = torch.randn(16, generator=g)
        out, _ = spectral_normalize(w, u, iterations=30)
        assert abs(torch.linalg.svdvals(out)[0].item() - 1.0) < 0.02


def test_spectral_norm_zero_matrix():
    u = torch.tensor([1.0, 0.0])
    out, u2 = spectral_normalize(torch.zeros(2, 3), u, iterations=3)
    assert not out.any() and u2 is u


def test_snconv_updates_unit_vector():
    layer = SNConv(2, 3, 3, generator=torch.Generator().manual_seed(0)).double()
    before = layer.u.clone()
    layer(torch.randn(1, 2, 5, 5))
    assert not torch.equal(before, layer.u)
    assert layer.u.norm().item() == pytest.approx(1.0)
    freeze_power_iteration(layer)
    frozen = layer.u.clone()
    layer(torch.randn(1, 2, 5, 5))
    assert torch.equal(frozen, layer.u)


def test_activations():
    x = torch.tensor([-1.0, 2.0])
    assert relu(x).tolist() == [0.0, 2.0]
    assert leaky_relu(torch.tensor([-1.0])).item() == pytest.approx(-0.2)
    assert sigmoid(torch.tensor(2.0)).item() == pytest.approx(1 / (1 + math.exp(-2)), abs=1e-15)
    assert sigmoid(torch.tensor(2.0)).item() == pytest.approx(0.880797, abs=1e-6)


def test_softmax_equal_logits_and_sum():
    out = softmax_channels(torch.zeros(1, 4, 2, 2))
    assert torch.allclose(out, torch.full_like(out, 0.25))
    out = softmax_channels(torch.randn(3, 2, 7, 7) * 10)
    assert (out.sum(dim=1) - 1).abs().max().item() < 1e-12
    with pytest.raises(ValueError):
        softmax_channels(torch.zeros(1, 1, 2, 2))


def test_upsample_nearest():
    x = torch.tensor([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    expected = [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
    assert upsample_nearest(x).reshape(4, 4).tolist() == expected
    assert torch.equal(upsample_nearest(x, 1), x)


def test_downsample_of_upsampled_constant():
    x = torch.full((1, 1, 4, 4), 2.5)
    w = torch.randn(1, 1, 3, 3)
    out = conv2d(upsample_nearest(x), w, torch.tensor([0.1]), stride=2, padding=0)
    assert torch.allclose(out, torch.full_like(out, out.reshape(-1)[0].item()))
    assert out.reshape(-1)[0].item() == pytest.approx(2.5 * w.sum().item() + 0.1)


def test_adaptive_pool():
    assert adaptive_avg_pool(torch.full((1, 1, 3, 5), 4.0)).item() == 4.0
    x = torch.tensor([[0.0, 2.0], [4.0, 6.0]]).reshape(1, 1, 2, 2)
    assert adaptive_avg_pool(x).item() == 3.0
    y = torch.randn(2, 3, 5, 7)
    assert torch.allclose(adaptive_avg_pool(upsample_nearest(y)), adaptive_avg_pool(y))


# --- finite differences per layer ----------------------------------------------------------

@pytest.mark.parametrize("name", LAYERS)
def test_layer_gradients_match_finite_differences(name):
    for instance in range(5):
        err = layer_error(name, instance)
        assert err < TOL, f"{name} instance {instance}: relative error {err:.2e}"


def test_backward_constant_times_input():
    x = torch.randn(3, 4, requires_grad=True)
    (gx,) = backward((2.5 * x).sum(), [x])
    assert torch.equal(gx, torch.full_like(x, 2.5))


def test_backward_relu_mask():
    x = torch.randn(1, 1, 6, 6, requires_grad=True)
    w = torch.randn(1, 1, 3, 3)
    (gx,) = backward(relu(conv2d(x, w, padding=1)).mean(), [x])
    # cotangent reaching the conv output is zero where relu is inactive
    pre2 = conv2d(x, w, padding=1).detach().requires_grad_()
    (gp,) = backward(relu(pre2).mean(), [pre2])
    assert torch.all(gp[pre2 <= 0] == 0)
    assert torch.all(gp[pre2 > 0] > 0)
    assert gx.shape == x.shape


def test_backward_without_graph():
    with pytest.raises(RuntimeError):
        backward(torch.tensor(1.0), [torch.tensor(2.0, requires_grad=True)])


def test_backward_nonscalar_needs_cotangent():
    x = torch.randn(3, requires_grad=True)
    with pytest.raises(ValueError):
        backward(x * 2, [x])
    (g,) = backward(x * 2, [x], torch.ones(3))
    assert torch.equal(g, torch.full((3,), 2.0))


# --- Adam --------------------------------------------------------------------------------

def test_adam_zero_gradient():
    p = torch.randn(4)
    before = p.clone()
    opt = Adam([p], lr=1e-2)
    adam_step([p], [torch.zeros(4)], opt)
    assert torch.equal(p, before) and opt.step_count == 1


def test_adam_first_step():
    lr, eps = 1e-3, 1e-8
    p = torch.tensor([0.5])
    opt = Adam([p], lr=lr, eps=eps)
    adam_step([p], [torch.tensor([1.0])], opt)
    assert p.item() == pytest.approx(0.5 - lr / (1 + eps), abs=1e-15)


def test_adam_deterministic_trajectories():
    def run():
        g = torch.Generator().manual_seed(3)
        p = torch.randn(5, generator=g)
        opt = Adam([p], lr=1e-2)
        traj = []
        for _ in range(20):
            adam_step([p], [torch.randn(5, generator=g)], opt)
            traj.append(p.clone())
        return torch.stack(traj)

    assert torch.equal(run(), run())


def test_adam_rejects_non_finite():
    p = torch.zeros(2)
    opt = Adam([p], lr=1e-3)
    with pytest.raises(FloatingPointError):
        opt.step([torch.tensor([1.0, float("nan")])])


def test_adam_shape_check():
    p = torch.zeros(2)
    with pytest.raises(ValueError):
        Adam([p], lr=1e-3).step([torch.zeros(3)])
