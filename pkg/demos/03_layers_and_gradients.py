"""The neural building blocks: a finite-difference check and spectral normalization.

Run: python demos/03_layers_and_gradients.py
"""
import torch

from thin_inpaint.nn_core import BatchNorm, Conv, SNConv, relu, spectral_normalize

torch.manual_seed(0)

# Central differences against autograd on a conv -> batch norm -> relu stack, in float64.
conv, bn = Conv(2, 3, 3, stride=2).double(), BatchNorm(3).double()
x = torch.randn(4, 2, 8, 8, dtype=torch.float64, requires_grad=True)
head = torch.randn(4, 3, 4, 4, dtype=torch.float64)


def f():
    return (relu(bn(conv(x))) * head).sum()


(grad,) = torch.autograd.grad(f(), x)
eps, worst = 1e-3, 0.0
with torch.no_grad():
    for idx in [(0, 0, 1, 1), (1, 1, 3, 4), (3, 0, 7, 2)]:
        x[idx] += eps
        up = f().item()
        x[idx] -= 2 * eps
        down = f().item()
        x[idx] += eps
        fd = (up - down) / (2 * eps)
        worst = max(worst, abs(fd - grad[idx].item()) / max(abs(fd), 1e-12))
        print(f"d/dx{idx}: autograd {grad[idx].item():+.6f}  finite diff {fd:+.6f}")
print(f"worst relative error {worst:.1e}")

# Spectral normalization divides a weight by its estimated largest singular value.
w = torch.randn(32, 72, dtype=torch.float64) * 5
for iters in (1, 3, 30):
    w_sn, _ = spectral_normalize(w, torch.randn(32, dtype=torch.float64), iterations=iters)
    print(f"{iters:2d} power iterations: sigma_max {torch.linalg.svdvals(w_sn)[0].item():.6f}")

# SNConv keeps its power-iteration vector as a buffer and refreshes it in training mode.
sn = SNConv(8, 8, 3).double()
sn(torch.randn(2, 8, 6, 6, dtype=torch.float64))
print("SNConv sigma after one pass:", torch.linalg.svdvals(sn.effective_weight().flatten(1))[0].item())
