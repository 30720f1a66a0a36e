"""Generator (U-Net), local Markovian discriminator, global similarity discriminator, and losses."""
from __future__ import annotations

import math
import warnings

import torch
from torch import Tensor, nn
import torch.nn.functional as F

from .nn_core import (PROB_CLIP, BatchNorm, Conv, SNConv, adaptive_avg_pool, leaky_relu, relu,
                      softmax_channels, upsample_nearest)


class ConvBNReLU(nn.Module):
    def __init__(self, cin, cout, stride=1, generator=None):
        super().__init__()
        self.conv = Conv(cin, cout, 3, stride, generator=generator)
        self.bn = BatchNorm(cout)

    def forward(self, x):
        return relu(self.bn(self.conv(x)))


class GeneratorNet(nn.Module):
    """U-Net: four stride-2 encoder stages, four nearest-upsampling decoder stages with skips.

    Input ``(B, 1, H, W)`` with H and W divisible by 16; output a 2-channel softmax map
    (channel 1 = foreground probability).
    """

    depth = 4

    def __init__(self, base_width: int = 16, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        w = [base_width * 2 ** i for i in range(self.depth + 1)]
        self.stem = ConvBNReLU(1, w[0], generator=g)
        self.down = nn.ModuleList()
        for i in range(self.depth):
            self.down.append(nn.Sequential(ConvBNReLU(w[i], w[i + 1], stride=2, generator=g),
                                           ConvBNReLU(w[i + 1], w[i + 1], generator=g)))
        self.up = nn.ModuleList()
        for i in reversed(range(self.depth)):
            self.up.append(nn.Sequential(ConvBNReLU(w[i + 1] + w[i], w[i], generator=g),
                                         ConvBNReLU(w[i], w[i], generator=g)))
        self.head = Conv(w[0], 2, 3, generator=g)

    def forward(self, x: Tensor) -> Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(1)
        h, w = x.shape[-2:]
        m = 2 ** self.depth
        if h % m or w % m:
            raise ValueError(f"generator input {h}x{w} is not divisible by {m}; "
                             f"zero-pad it to a multiple of {m} first")
        skips = [self.stem(x)]
        for stage in self.down:
            skips.append(stage(skips[-1]))
        y = skips.pop()
        for stage in self.up:
            y = stage(torch.cat([upsample_nearest(y, 2), skips.pop()], dim=1))
        return softmax_channels(self.head(y))


def generator_forward(G: GeneratorNet, x: Tensor) -> Tensor:
    return G(x)


class DiscBlock(nn.Module):
    def __init__(self, cin, cout, kernel, generator=None):
        super().__init__()
        self.conv = SNConv(cin, cout, kernel, 2, generator=generator)
        self.bn = BatchNorm(cout)

    def forward(self, x):
        return leaky_relu(self.bn(self.conv(x)), 0.2)


class LocalDiscriminatorNet(nn.Module):
    """Markovian critic: five SN-conv/BN/LeakyReLU stride-2 blocks and a 4x4 stride-1 conv + sigmoid.

    Scores one ``sub_patch`` x ``sub_patch`` tile; ``local_d_score`` averages over the tiles of a patch.
    """

    def __init__(self, base_width: int = 16, sub_patch: int = 128, seed: int = 1):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.sub_patch = sub_patch
        w = [1] + [base_width * 2 ** i for i in range(5)]
        self.blocks = nn.Sequential(*[DiscBlock(w[i], w[i + 1], 3, generator=g) for i in range(5)])
        self.final = Conv(w[5], 1, 4, 1, padding=0, generator=g)

    def forward(self, tiles: Tensor) -> Tensor:
        """``(N, 1, s, s)`` tiles -> ``(N,)`` scores in [0, 1]."""
        h = self.blocks(tiles)
        pad = math.ceil(max(0, 4 - min(h.shape[-2:])) / 2)
        if pad:
            h = F.pad(h, (pad, pad, pad, pad))
        return torch.sigmoid(self.final(h)).mean(dim=(1, 2, 3))


def to_tiles(x: Tensor, size: int) -> Tensor:
    """``(B, 1, H, W)`` -> ``(B * n_tiles, 1, size, size)``, tiles of each image contiguous."""
    b, c, h, w = x.shape
    t = x.reshape(b, c, h // size, size, w // size, size).permute(0, 2, 4, 1, 3, 5)
    return t.reshape(-1, c, size, size)


def local_d_score(D_L: LocalDiscriminatorNet, patch: Tensor) -> Tensor:
    """Mean of the sub-patch scores of each patch: ``(B, 1, H, W) -> (B,)``."""
    if patch.dim() == 3:
        patch = patch.unsqueeze(1)
    s = D_L.sub_patch
    h, w = patch.shape[-2:]
    if h % s or w % s:
        raise ValueError(f"local discriminator input {h}x{w} must be a multiple of {s}")
    scores = D_L(to_tiles(patch, s))
    return scores.reshape(patch.shape[0], -1).mean(dim=1)


class GlobalDiscriminatorNet(nn.Module):
    """Similarity critic: shared feature extractor ``f`` (kernel 5) pooled to a feature vector."""

    def __init__(self, base_width: int = 16, feature_dim: int = 512, seed: int = 2):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        w = [1] + [base_width * 2 ** i for i in range(5)]
        self.blocks = nn.Sequential(*[DiscBlock(w[i], w[i + 1], 5, generator=g) for i in range(5)])
        self.final = SNConv(w[5], feature_dim, 5, 2, generator=g)
        self.feature_dim = feature_dim

    def features(self, x: Tensor) -> Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(1)
        return adaptive_avg_pool(self.final(self.blocks(x)))

    def logits(self, a: Tensor, b: Tensor) -> Tensor:
        return (self.features(a) * self.features(b)).sum(dim=1)

    def forward(self, a: Tensor, b: Tensor) -> Tensor:
        return torch.sigmoid(self.logits(a, b))


def similarity_from_features(fa: Tensor, fb: Tensor) -> Tensor:
    return torch.sigmoid((fa * fb).sum(dim=-1))


def global_similarity(D_G: GlobalDiscriminatorNet, a: Tensor, b: Tensor) -> Tensor:
    return D_G(a, b)


# --- losses ---------------------------------------------------------------------------------

def _check_pair(prob: Tensor, target: Tensor) -> Tensor:
    if prob.dim() != 4 or prob.shape[1] != 2:
        raise ValueError(f"probability map must be (B, 2, H, W), got {tuple(prob.shape)}")
    if target.dim() == 4:
        target = target[:, 0]
    if target.shape != prob.shape[:1] + prob.shape[2:]:
        raise ValueError(f"target shape {tuple(target.shape)} does not match {tuple(prob.shape)}")
    return target.to(prob.dtype)


def _pixel_ce(prob: Tensor, target: Tensor) -> Tensor:
    p = prob.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
    return -((1.0 - target) * torch.log(p[:, 0]) + target * torch.log(p[:, 1]))


def ce_loss(prob: Tensor, target: Tensor) -> Tensor:
    """Two-channel cross entropy averaged over batch and pixels."""
    target = _check_pair(prob, target)
    return _pixel_ce(prob, target).mean()


def masked_ce_loss(prob: Tensor, target: Tensor, gaps: Tensor) -> Tensor:
    """Cross entropy over gap pixels only, normalised by the gap-pixel count."""
    target = _check_pair(prob, target)
    gaps = _check_pair(prob, gaps)
    n = gaps.sum()
    if n == 0:
        warnings.warn("masked_ce_loss: gap mask is empty, returning 0", RuntimeWarning)
        return (prob * 0).sum()
    return (_pixel_ce(prob, target) * gaps).sum() / n


def lsgan_d_loss(real_scores: Tensor, fake_scores: Tensor) -> Tensor:
    return ((1.0 - real_scores) ** 2).mean() + (fake_scores ** 2).mean()


def lsgan_g_loss(fake_scores: Tensor) -> Tensor:
    return ((1.0 - fake_scores) ** 2).mean()


def bce_similarity_loss(sim_real: Tensor, sim_fake: Tensor) -> Tensor:
    """``-mean log s_real - mean log(1 - s_fake)`` with probabilities clipped."""
    sr = torch.as_tensor(sim_real).clamp(PROB_CLIP, 1.0 - PROB_CLIP)
    sf = torch.as_tensor(sim_fake).clamp(PROB_CLIP, 1.0 - PROB_CLIP)
    return -torch.log(sr).mean() - torch.log(1.0 - sf).mean()


def global_d_loss(D_G: GlobalDiscriminatorNet, y1: Tensor, y2: Tensor, fake: Tensor) -> Tensor:
    """Real pairs ``(y1, y2)`` should score 1, fake pairs ``(fake, y1)`` 0.

    Works on logits with log-sigmoid so saturated similarities keep their gradient.
    """
    n = y1.shape[0]
    feats = D_G.features(torch.cat([y1, y2, fake], dim=0))
    f1, f2, ff = feats[:n], feats[n:2 * n], feats[2 * n:]
    real_logit = (f1 * f2).sum(dim=1)
    fake_logit = (ff * f1).sum(dim=1)
    return -F.logsigmoid(real_logit).mean() - F.logsigmoid(-fake_logit).mean()


def bernoulli_log_likelihood(prob: Tensor, sampled: Tensor) -> Tensor:
    """Per-image mean log-likelihood of a binary sample under the foreground probabilities."""
    p = (prob[:, 1] if prob.dim() == 4 else prob).clamp(PROB_CLIP, 1.0 - PROB_CLIP)
    s = sampled.to(p.dtype)
    if s.dim() == 4:
        s = s[:, 0]
    ll = s * torch.log(p) + (1.0 - s) * torch.log(1.0 - p)
    return ll.reshape(ll.shape[0], -1).mean(dim=1)


def pg_generator_loss(reward, prob: Tensor, sampled: Tensor, baseline: float = 0.0) -> Tensor:
    """REINFORCE surrogate: ``-(reward - baseline) * mean log-likelihood`` of the sampled mask.

    ``reward`` is a scalar or one value per image; it is treated as a constant.
    """
    r = torch.as_tensor(reward, dtype=prob.dtype).detach()
    if torch.any(r <= 0) or torch.any(r >= 1):
        raise ValueError(f"reward must lie in (0, 1), got {r}")
    ll = bernoulli_log_likelihood(prob, sampled)
    return -((r - baseline) * ll).mean()
