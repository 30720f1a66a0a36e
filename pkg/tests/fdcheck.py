"""Central finite-difference gradient oracle (float64), independent of autograd."""
from __future__ import annotations

import contextlib

import numpy as np
import torch

from thin_inpaint import models

EPS = 1e-3
TOL = 1e-4


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||)."""
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


class KinkRecorder:
    """Records the sign pattern of every ReLU / LeakyReLU input during a forward pass.

    Central differences are only an oracle where the function is smooth on the whole stencil,
    so coordinates whose +/- eps evaluations flip any activation are skipped.
    """

    def __init__(self):
        self.pattern = []

    @contextlib.contextmanager
    def active(self):
        relu, leaky = models.relu, models.leaky_relu

        def rec_relu(x):
            self.pattern.append((x > 0).detach().clone())
            return relu(x)

        def rec_leaky(x, slope=0.2):
            self.pattern.append((x > 0).detach().clone())
            return leaky(x, slope)

        models.relu, models.leaky_relu = rec_relu, rec_leaky
        try:
            yield self
        finally:
            models.relu, models.leaky_relu = relu, leaky

    def run(self, f):
        self.pattern = []
        value = f().item()
        return value, self.pattern


def _same(a, b):
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def check_coords(f, tensors, rng, max_coords: int = 40, eps: float = EPS,
                 recorder: KinkRecorder | None = None, stats: dict | None = None,
                 max_tries: int = 8) -> float:
    """Relative error of the gradient restricted to up to ``max_coords`` random coordinates per tensor.

    The sampled coordinates of all tensors form one vector, so parameters whose true gradient is
    zero (a bias in front of batch norm) are judged against the whole gradient, not their own noise.
    With a ``recorder``, coordinates whose stencil crosses an activation kink are skipped.
    """
    grads = torch.autograd.grad(f(), tensors, allow_unused=True)
    base = recorder.run(f)[1] if recorder else None
    ana_all, num_all, skipped = [], [], 0
    for t, g in zip(tensors, grads):
        g = torch.zeros_like(t) if g is None else g
        flat = t.data.view(-1)
        accepted = []
        for i in rng.permutation(t.numel())[:max_tries * max_coords]:
            if len(accepted) == max_coords:
                break
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + eps
                fp, pp = recorder.run(f) if recorder else (float(f()), None)
                flat[i] = old - eps
                fm, pm = recorder.run(f) if recorder else (float(f()), None)
                flat[i] = old
            if recorder and not (_same(pp, base) and _same(pm, base)):
                skipped += 1
                continue
            accepted.append(i)
            num_all.append((fp - fm) / (2 * eps))
        ana_all.extend(g.detach().reshape(-1)[accepted].tolist())
    if stats is not None:
        stats["checked"] = len(num_all)
        stats["skipped"] = skipped
    return rel_error(np.array(ana_all), np.array(num_all))


def away_from_zero(rng, shape, margin: float = 0.05) -> torch.Tensor:
    """Random normals with |x| >= margin so piecewise-linear kinks stay out of the FD stencil."""
    x = rng.standard_normal(shape)
    x = np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)
    return torch.from_numpy(x).double()
