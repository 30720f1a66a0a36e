"""Differentiable building blocks on top of torch tensors.

Functional ops (``conv2d``, ``batchnorm``, ...) validate their inputs and delegate to
``torch.nn.functional``; gradients come from torch autograd.  The layer classes own their
parameters and use He-normal initialisation from an explicit ``torch.Generator``.
"""
from __future__ import annotations

import math
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

PROB_CLIP = 1e-7
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# Parameters are always drawn in float32 so that seeded initialisation does not depend on
# torch's global default dtype; call .double() on a module for 64-bit work.
INIT_DTYPE = torch.float32

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    if x.dim() != 4 or weight.dim() != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {tuple(x.shape)} and {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input has {x.shape[1]} channels, "
                         f"weight expects {weight.shape[1]} (weight shape {tuple(weight.shape)})")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    k = weight.shape[-1]
    if x.shape[2] + 2 * padding < k or x.shape[3] + 2 * padding < k:
        raise ValueError(f"conv2d input {tuple(x.shape[2:])} with padding {padding} is smaller than kernel {k}")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor, running_var: Tensor,
              training: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalisation; in training mode the running statistics are updated in place."""
    if training and x.shape[0] * x.shape[2] * x.shape[3] < 2:
        raise ValueError("batchnorm in train mode needs at least 2 values per channel")
    return F.batch_norm(x, running_mean, running_var, gamma, beta, training, momentum, eps)


def _l2normalize(v: Tensor, eps: float = 1e-12) -> Tensor:
    return v / (v.norm() + eps)


def spectral_normalize(weight: Tensor, u: Tensor, iterations: int = 1) -> tuple[Tensor, Tensor]:
    """Divide ``weight`` by a power-iteration estimate of its largest singular value.

    ``weight`` is viewed as ``(out_channels, -1)``.  Returns the normalised weight and the
    refined left singular vector.  A zero matrix comes back unchanged together with ``u``.

    The final ``u`` is the Rayleigh-Ritz vector of the span of all power iterates, which
    converges far faster than the last iterate when the top two singular values are close.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    mat = weight.reshape(weight.shape[0], -1)
    if not torch.any(mat != 0):
        return torch.zeros_like(weight), u
    with torch.no_grad():
        iterates = [_l2normalize(u)]
        for _ in range(iterations):
            v = _l2normalize(mat.t() @ u)
            u = _l2normalize(mat @ v)
            iterates.append(u)
        basis, r = torch.linalg.qr(torch.stack(iterates, dim=1))
        keep = r.diagonal().abs() > 1e-10 * r.diagonal().abs().max()
        basis = basis[:, keep]
        left, _, _ = torch.linalg.svd(basis.t() @ mat, full_matrices=False)
        u = _l2normalize(basis @ left[:, 0])
        if torch.dot(u, iterates[-1]) < 0:
            u = -u
        v = _l2normalize(mat.t() @ u)
    sigma = torch.dot(u, mat @ v)
    return weight / sigma, u


def relu(x: Tensor) -> Tensor:
    return F.relu(x)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    return F.leaky_relu(x, slope)


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def softmax_channels(x: Tensor) -> Tensor:
    if x.shape[1] < 2:
        raise ValueError("softmax over channels needs at least 2 channels")
    return torch.softmax(x, dim=1)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    if factor < 1 or int(factor) != factor:
        raise ValueError("upsampling factor must be a positive integer")
    if factor == 1:
        return x
    return x.repeat_interleave(factor, dim=2).repeat_interleave(factor, dim=3)


def adaptive_avg_pool(x: Tensor) -> Tensor:
    """Mean over all spatial positions: ``(B, C, H, W) -> (B, C)``."""
    return x.mean(dim=(2, 3))


def backward(output: Tensor, inputs: Sequence[Tensor], cotangent: Tensor | None = None,
             retain_graph: bool = False) -> tuple[Tensor, ...]:
    """Reverse-mode gradients of ``output`` w.r.t. ``inputs``."""
    if output.grad_fn is None and not output.requires_grad:
        raise RuntimeError("output has no recorded graph; run the forward pass with grad enabled")
    if cotangent is None:
        if output.numel() != 1:
            raise ValueError("a cotangent is required for non-scalar outputs")
        cotangent = torch.ones_like(output)
    grads = torch.autograd.grad(output, list(inputs), cotangent, retain_graph=retain_graph,
                                allow_unused=True)
    return tuple(torch.zeros_like(x) if g is None else g for g in grads)


class Conv(nn.Module):
    """3x3 / kxk convolution with zero padding, He-normal weights and zero bias."""

    def __init__(self, cin: int, cout: int, kernel: int = 3, stride: int = 1,
                 padding: int | None = None, generator: torch.Generator | None = None,
                 bias: bool = True):
        super().__init__()
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        std = math.sqrt(2.0 / (cin * kernel * kernel))
        self.weight = nn.Parameter(torch.randn(cout, cin, kernel, kernel, generator=generator, dtype=INIT_DTYPE) * std)
        self.bias = nn.Parameter(torch.zeros(cout, dtype=INIT_DTYPE)) if bias else None

    def effective_weight(self) -> Tensor:
        return self.weight

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.effective_weight(), self.bias, self.stride, self.padding)


class SNConv(Conv):
    """Convolution whose weight is spectrally normalised on every forward pass.

    In training mode each forward refines ``u`` with one power iteration unless
    ``update_u`` is switched off (used by the finite-difference checks).
    """

    def __init__(self, *args, generator: torch.Generator | None = None, **kwargs):
        super().__init__(*args, generator=generator, **kwargs)
        u = torch.randn(self.weight.shape[0], generator=generator, dtype=INIT_DTYPE)
        self.register_buffer("u", _l2normalize(u))
        self.update_u = True

    def effective_weight(self) -> Tensor:
        mat = self.weight.reshape(self.weight.shape[0], -1)
        u = self.u
        if self.training and self.update_u:
            with torch.no_grad():
                v = _l2normalize(mat.t() @ u)
                u = _l2normalize(mat @ v)
                self.u.copy_(u)
        with torch.no_grad():
            v = _l2normalize(mat.t() @ u)
        sigma = torch.dot(u, mat @ v)
        if sigma == 0:
            return self.weight * 0.0
        return self.weight / sigma


class BatchNorm(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(channels, dtype=INIT_DTYPE))
        self.beta = nn.Parameter(torch.zeros(channels, dtype=INIT_DTYPE))
        self.register_buffer("running_mean", torch.zeros(channels, dtype=INIT_DTYPE))
        self.register_buffer("running_var", torch.ones(channels, dtype=INIT_DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.training)


def freeze_power_iteration(module: nn.Module, frozen: bool = True) -> None:
    for m in module.modules():
        if isinstance(m, SNConv):
            m.update_u = not frozen


class Adam:
    """Adam with bias correction; moments live next to the parameters they track."""

    def __init__(self, params: Iterable[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 max_grad_norm: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.step_count = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self, grads: Sequence[Tensor] | None = None) -> None:
        if grads is None:
            grads = [torch.zeros_like(p) if p.grad is None else p.grad for p in self.params]
        if len(grads) != len(self.params):
            raise ValueError("one gradient per parameter is required")
        for g, p in zip(grads, self.params):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
            if not torch.isfinite(g).all():
                raise FloatingPointError("non-finite gradient passed to Adam")
        if self.max_grad_norm is not None:
            total = torch.sqrt(sum((g.double() ** 2).sum() for g in grads))
            if total > self.max_grad_norm:
                scale = (self.max_grad_norm / (total + 1e-12)).to(grads[0].dtype)
                grads = [g * scale for g in grads]
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            denom = (v / bc2).sqrt_().add_(self.eps)
            p.addcdiv_(m, denom, value=-self.lr / bc1)


def adam_step(params: Sequence[Tensor], grads: Sequence[Tensor], state: Adam) -> Adam:
    """Apply one Adam update to ``params`` (which must be the ones ``state`` tracks)."""
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ValueError("state does not track these parameters")
    state.step(grads)
    return state
