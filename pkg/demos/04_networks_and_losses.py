"""Generator, both discriminators and the losses that tie them together.

Run: python demos/04_networks_and_losses.py
"""
import numpy as np
import torch

from thin_inpaint.models import (GeneratorNet, GlobalDiscriminatorNet, LocalDiscriminatorNet, ce_loss,
                                 global_d_loss, global_similarity, local_d_score, lsgan_d_loss,
                                 lsgan_g_loss, pg_generator_loss)
from thin_inpaint.patching import bernoulli_binarize

torch.manual_seed(0)
G = GeneratorNet(8, seed=0)
D_L = LocalDiscriminatorNet(8, sub_patch=32, seed=1)
D_G = GlobalDiscriminatorNet(8, feature_dim=64, seed=2)

y = (torch.rand(4, 1, 64, 64) < 0.1).float()
x = y * (torch.rand_like(y) < 0.8)
prob = G(x)
print("generator output", tuple(prob.shape), "channel sums ~1:", bool(torch.allclose(prob.sum(1), torch.ones(1))))
print(f"pixel cross-entropy {ce_loss(prob, y[:, 0]).item():.4f}")

fake = prob[:, 1:2]
real_scores, fake_scores = local_d_score(D_L, y), local_d_score(D_L, fake)
print(f"local scores real {real_scores.mean().item():.3f} fake {fake_scores.mean().item():.3f}")
print(f"LSGAN: D loss {lsgan_d_loss(real_scores, fake_scores).item():.4f}, G loss {lsgan_g_loss(fake_scores).item():.4f}")

# The global critic compares whole images: similar pairs should score near 1.
big_a, big_b = (torch.rand(2, 1, 128, 128) < 0.1).float(), (torch.rand(2, 1, 128, 128) < 0.1).float()
print("similarity", global_similarity(D_G, big_a, big_b).detach().numpy().round(3))
print(f"global D loss {global_d_loss(D_G, big_a, big_b, big_a * 0).item():.4f}")

# The generator only sees the global critic through a sampled binary image and a scalar
# reward; the policy-gradient loss scales the sampled log-likelihood by that reward.
sampled = torch.from_numpy(bernoulli_binarize(prob.detach().numpy(), np.random.default_rng(0))).float()
loss = pg_generator_loss(0.7, prob, sampled)
loss.backward()
print(f"policy-gradient loss {loss.item():.4f}; stem grad norm {G.stem.conv.weight.grad.norm().item():.4f}")
