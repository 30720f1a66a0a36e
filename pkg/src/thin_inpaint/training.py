"""Training loop for the generator and its two discriminators, checkpointing and inference.

All randomness is counter based: every draw comes from a ``numpy`` generator seeded with
``(seed, stream, step, ...)``.  A checkpoint therefore only needs the step counter to resume
the exact stream positions.
"""
from __future__ import annotations

import contextlib
import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from .gap_synth import GapConfig, corrupt, desk_gap_config, sample_gap_mask
from .models import (GeneratorNet, GlobalDiscriminatorNet, LocalDiscriminatorNet, ce_loss,
                     global_d_loss, local_d_score, lsgan_d_loss, lsgan_g_loss, masked_ce_loss,
                     pg_generator_loss)
from .nn_core import PROB_CLIP, Adam, freeze_power_iteration
from .patching import (PatchLayout, extract_patches, partial_recompose, recompose,
                       threshold_binarize)

log = logging.getLogger(__name__)

VARIANTS = ("unet", "gan_l", "gan_g", "gan_gl", "gan_gl_m")
LOCAL_VARIANTS = ("gan_l", "gan_gl", "gan_gl_m")
GLOBAL_VARIANTS = ("gan_g", "gan_gl", "gan_gl_m")

# rng stream ids
BATCH_STREAM, GAP_STREAM, BERNOULLI_STREAM, REAL_STREAM = 0, 1, 2, 3

LOG_COLUMNS = ("step", "L_CE", "L_LocDadv", "L_LocGadv", "L_GloDadv", "reward")


class NumericAbort(FloatingPointError):
    """A loss or gradient became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "gan_gl"
    lambda_ce: float = 1000.0
    lambda_loc: float = 1.0
    lambda_glo: float = 1.0
    lr_g: float = 2e-4
    lr_d: float = 4e-4
    batch_size: int = 8
    patch_size: int = 256
    sub_patch: int = 128
    g_width: int = 16
    dl_width: int = 16
    dg_width: int = 16
    feature_dim: int = 512
    grad_clip: float = 10.0
    pg_baseline: bool = False
    baseline_momentum: float = 0.9
    gap: GapConfig = field(default_factory=GapConfig)
    steps: int = 1000
    seed: int = 0
    checkpoint_every: int = 500
    log_every: int = 50
    data: str = ""
    real_data: str = ""

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("lambda_ce", "lambda_loc", "lambda_glo"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.patch_size % 16:
            raise ValueError("patch_size must be a multiple of 16")
        if self.patch_size % self.sub_patch:
            raise ValueError("patch_size must be a multiple of sub_patch")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if self.variant == "gan_gl_m" and not self.real_data:
            raise ValueError("variant gan_gl_m requires real_data")

    @property
    def uses_local(self) -> bool:
        return self.variant in LOCAL_VARIANTS

    @property
    def uses_global(self) -> bool:
        return self.variant in GLOBAL_VARIANTS

    def effective_lambdas(self) -> tuple[float, float, float]:
        loc = self.lambda_loc if self.uses_local else 0.0
        glo = self.lambda_glo if self.uses_global else 0.0
        return self.lambda_ce, loc, glo

    def config_hash(self) -> str:
        """Hash of everything that shapes the trajectory (run length and paths excluded)."""
        d = dataclasses.asdict(self)
        for k in ("steps", "checkpoint_every", "log_every", "data", "real_data"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def desk_config(**overrides) -> TrainConfig:
    """Small-scale preset: 64-pixel patches, 32-pixel local tiles, narrow networks."""
    base = dict(patch_size=64, sub_patch=32, g_width=8, dl_width=8, dg_width=8,
                gap=desk_gap_config(64))
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class TrainState:
    G: GeneratorNet
    D_L: LocalDiscriminatorNet
    D_G: GlobalDiscriminatorNet
    opt_g: Adam
    opt_dl: Adam
    opt_dg: Adam
    step: int = 0
    averages: dict = field(default_factory=dict)
    baseline: float = 0.5
    last: dict = field(default_factory=dict)

    def nets(self) -> dict:
        return {"gen": self.G, "dloc": self.D_L, "dglo": self.D_G}

    def optimizers(self) -> dict:
        return {"gen": self.opt_g, "dloc": self.opt_dl, "dglo": self.opt_dg}


def init_state(cfg: TrainConfig, dtype=torch.float32) -> TrainState:
    G = GeneratorNet(cfg.g_width, seed=cfg.seed * 3).to(dtype)
    D_L = LocalDiscriminatorNet(cfg.dl_width, cfg.sub_patch, seed=cfg.seed * 3 + 1).to(dtype)
    D_G = GlobalDiscriminatorNet(cfg.dg_width, cfg.feature_dim, seed=cfg.seed * 3 + 2).to(dtype)
    clip = cfg.grad_clip if cfg.grad_clip > 0 else None
    return TrainState(
        G, D_L, D_G,
        Adam(G.parameters(), cfg.lr_g, max_grad_norm=clip),
        Adam(D_L.parameters(), cfg.lr_d, max_grad_norm=clip),
        Adam(D_G.parameters(), cfg.lr_d, max_grad_norm=clip),
    )


def stream(cfg: TrainConfig, stream_id: int, step: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, stream_id, step, *extra])


# --- batches ------------------------------------------------------------------------------

@dataclass
class Batch:
    y1: np.ndarray        # (B, s, s) complete patches from Y1
    y2: np.ndarray        # (B, s, s) complete patches from Y2
    x1: np.ndarray        # (B, s, s) corrupted y1
    gaps: np.ndarray      # (B, s, s) artificial gap masks
    Y1: np.ndarray        # complete parent mask
    X1: np.ndarray        # Y1 with the same gaps applied at the chosen patches
    indices: np.ndarray   # patch indices of y1 inside Y1
    layout: PatchLayout
    parents: tuple[int, int]


def _sample_indices(rng, count, k):
    return rng.choice(count, size=k, replace=count < k)


def assemble_batch(dataset: Sequence[np.ndarray], cfg: TrainConfig, step: int,
                   gap_stream: int = GAP_STREAM, batch_stream: int = BATCH_STREAM) -> Batch:
    """Patches of one parent (y1, corrupted to x1) and of a different parent (y2)."""
    if len(dataset) < 2:
        raise ValueError("at least 2 parent masks are needed (y2 must come from a different mask)")
    rng = stream(cfg, batch_stream, step)
    a = int(rng.integers(len(dataset)))
    b = int(rng.integers(len(dataset) - 1))
    b = b + 1 if b >= a else b
    Y1, Y2 = dataset[a], dataset[b]
    p1, layout = extract_patches(Y1, cfg.patch_size)
    p2, layout2 = extract_patches(Y2, cfg.patch_size)
    idx1 = _sample_indices(rng, layout.count, cfg.batch_size)
    idx2 = _sample_indices(rng, layout2.count, cfg.batch_size)
    y1 = np.stack([p1[i] for i in idx1])
    y2 = np.stack([p2[i] for i in idx2])
    shape = (cfg.patch_size, cfg.patch_size)
    gaps = np.stack([sample_gap_mask(cfg.gap, shape, stream(cfg, gap_stream, step, i))
                     for i in range(cfg.batch_size)])
    x1 = np.stack([corrupt(y, m) for y, m in zip(y1, gaps)])
    X1 = partial_recompose(Y1, list(x1), list(idx1), layout)
    return Batch(y1, y2, x1, gaps, Y1, X1, idx1, layout, (a, b))


def _t(a: np.ndarray, dtype) -> torch.Tensor:
    t = torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32)).to(dtype)
    return t.unsqueeze(1) if t.dim() == 3 else t


@contextlib.contextmanager
def frozen_buffers(module: torch.nn.Module):
    """Run a module in train mode without letting it touch its buffers (BN stats, SN vectors).

    The forward pass sees scratch copies, so the graph never aliases the real buffers and
    nothing has to be written back in place before the backward pass.
    """
    originals = []
    for m in module.modules():
        for name, buf in m._buffers.items():
            if buf is not None:
                originals.append((m, name, buf))
                m._buffers[name] = buf.clone()
    freeze_power_iteration(module, True)
    try:
        yield module
    finally:
        freeze_power_iteration(module, False)
        for m, name, buf in originals:
            m._buffers[name] = buf


def _check_finite(name: str, value: torch.Tensor) -> None:
    if not torch.isfinite(value).all():
        raise NumericAbort(f"non-finite {name}: {value.detach().cpu().numpy()!r}")


def _apply(opt: Adam, loss: torch.Tensor, name: str) -> None:
    _check_finite(name, loss)
    grads = torch.autograd.grad(loss, opt.params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(opt.params, grads)]
    for g in grads:
        if not torch.isfinite(g).all():
            raise NumericAbort(f"non-finite gradient of {name}")
    opt.step(grads)


def update_local_discriminator(state: TrainState, y1: torch.Tensor, fake_bin: torch.Tensor) -> float:
    state.D_L.train()
    n = y1.shape[0]
    scores = local_d_score(state.D_L, torch.cat([y1, fake_bin], dim=0))
    loss = lsgan_d_loss(scores[:n], scores[n:])
    _apply(state.opt_dl, loss, "L_LocDadv")
    return float(loss.detach())


def update_global_discriminator(state: TrainState, y1, y2, fake_bin) -> float:
    state.D_G.train()
    loss = global_d_loss(state.D_G, y1, y2, fake_bin)
    _apply(state.opt_dg, loss, "L_GloDadv")
    return float(loss.detach())


@torch.no_grad()
def image_reward(D_G: GlobalDiscriminatorNet, inpainted: np.ndarray, complete: np.ndarray,
                 dtype=torch.float32) -> float:
    """Similarity of a re-composed inpainted image and its complete parent, clipped into (0, 1)."""
    was_training = D_G.training
    D_G.eval()
    try:
        a = _t(inpainted[None], dtype)
        b = _t(complete[None], dtype)
        sim = float(D_G(a, b)[0])
    finally:
        D_G.train(was_training)
    return min(max(sim, PROB_CLIP), 1.0 - PROB_CLIP)


def generator_loss_terms(state: TrainState, batch: Batch, prob: torch.Tensor, cfg: TrainConfig,
                         step: int) -> dict:
    """Weighted loss terms for the generator update; terms with zero weight are not built."""
    lam_ce, lam_loc, lam_glo = cfg.effective_lambdas()
    dtype = prob.dtype
    y1 = _t(batch.y1, dtype)
    terms = {"L_CE": ce_loss(prob, y1)}
    weighted = lam_ce * terms["L_CE"]
    if lam_loc > 0:
        with frozen_buffers(state.D_L):
            state.D_L.train()
            terms["L_LocGadv"] = lsgan_g_loss(local_d_score(state.D_L, prob[:, 1:2]))
        weighted = weighted + lam_loc * terms["L_LocGadv"]
    if lam_glo > 0:
        fg = prob[:, 1].detach().cpu().numpy().astype(np.float64)
        sampled = np.stack([stream(cfg, BERNOULLI_STREAM, step, i).random(fg[i].shape) < fg[i]
                            for i in range(fg.shape[0])])
        X_hat = partial_recompose(batch.X1, list(sampled), list(batch.indices), batch.layout)
        reward = image_reward(state.D_G, X_hat, batch.Y1, dtype)
        baseline = state.baseline if cfg.pg_baseline else 0.0
        terms["reward"] = reward
        terms["L_GloGadv"] = pg_generator_loss(reward, prob, torch.from_numpy(sampled), baseline)
        weighted = weighted + lam_glo * terms["L_GloGadv"]
    terms["total"] = weighted
    return terms


def train_step(state: TrainState, batch: Batch, cfg: TrainConfig) -> TrainState:
    """One iteration: local critic, global critic, then the generator."""
    dtype = next(state.G.parameters()).dtype
    state.G.train()
    x1 = _t(batch.x1, dtype)
    y1 = _t(batch.y1, dtype)
    prob = state.G(x1)
    fake_bin = (prob.detach()[:, 1:2] >= 0.5).to(dtype)
    record = {"L_LocDadv": float("nan"), "L_GloDadv": float("nan")}
    if cfg.uses_local:
        record["L_LocDadv"] = update_local_discriminator(state, y1, fake_bin)
    if cfg.uses_global:
        record["L_GloDadv"] = update_global_discriminator(state, y1, _t(batch.y2, dtype), fake_bin)
    terms = generator_loss_terms(state, batch, prob, cfg, state.step)
    for name, value in terms.items():
        if name != "total" and not math.isfinite(float(value.detach() if torch.is_tensor(value) else value)):
            raise NumericAbort(f"non-finite generator term {name}")
    _apply(state.opt_g, terms["total"], "L_G")
    if "reward" in terms and cfg.pg_baseline:
        m = cfg.baseline_momentum
        state.baseline = m * state.baseline + (1 - m) * terms["reward"]
    record["L_CE"] = float(terms["L_CE"].detach())
    record["L_LocGadv"] = float(terms["L_LocGadv"].detach()) if "L_LocGadv" in terms else float("nan")
    record["reward"] = float(terms.get("reward", float("nan")))
    _record(state, record)
    state.step += 1
    return state


def _record(state: TrainState, record: dict) -> None:
    state.last = record
    for k, v in record.items():
        if math.isfinite(v):
            prev = state.averages.get(k)
            state.averages[k] = v if prev is None else 0.99 * prev + 0.01 * v


def real_batch(real: Sequence[np.ndarray], cfg: TrainConfig, step: int) -> Batch:
    """Patches from one real mask with fresh artificial gaps; its inherent gaps stay untouched."""
    if len(real) == 0:
        raise ValueError("gan_gl_m needs at least one real mask")
    rng = stream(cfg, REAL_STREAM, step)
    Y = real[int(rng.integers(len(real)))]
    patches, layout = extract_patches(Y, cfg.patch_size)
    idx = _sample_indices(rng, layout.count, cfg.batch_size)
    y = np.stack([patches[i] for i in idx])
    shape = (cfg.patch_size, cfg.patch_size)
    gaps = np.stack([sample_gap_mask(cfg.gap, shape, stream(cfg, REAL_STREAM, step, i + 1))
                     for i in range(cfg.batch_size)])
    x = np.stack([corrupt(p, m) for p, m in zip(y, gaps)])
    return Batch(y, y, x, gaps, Y, partial_recompose(Y, list(x), list(idx), layout), idx, layout,
                 (-1, -1))


def masked_generator_step(state: TrainState, batch: Batch, cfg: TrainConfig) -> TrainState:
    """Generator-only update with the cross entropy restricted to the artificial gaps."""
    dtype = next(state.G.parameters()).dtype
    state.G.train()
    prob = state.G(_t(batch.x1, dtype))
    loss = masked_ce_loss(prob, _t(batch.y1, dtype), _t(batch.gaps, dtype))
    _apply(state.opt_g, cfg.lambda_ce * loss, "L_MCE")
    _record(state, {"L_CE": float(loss.detach()), "L_LocDadv": float("nan"), "L_LocGadv": float("nan"),
                    "L_GloDadv": float("nan"), "reward": float("nan")})
    state.step += 1
    return state


def schedule_step(state: TrainState, cfg: TrainConfig, synth: Sequence[np.ndarray],
                  real: Sequence[np.ndarray] | None = None) -> str:
    """Advance one batch; returns ``"S"`` for a synthetic batch or ``"R"`` for a real one.

    For ``gan_gl_m`` even steps run the full update on synthetic data and odd steps a
    masked generator-only update on real data; other variants always use synthetic data.
    """
    if cfg.variant == "gan_gl_m" and state.step % 2 == 1:
        if not real:
            raise ValueError("gan_gl_m requires real masks for its odd batches")
        masked_generator_step(state, real_batch(real, cfg, state.step), cfg)
        return "R"
    train_step(state, assemble_batch(synth, cfg, state.step), cfg)
    return "S"


def train_epoch_schedule(state: TrainState, cfg: TrainConfig, synth: Sequence[np.ndarray],
                         real: Sequence[np.ndarray], batches: int) -> list[str]:
    if cfg.variant != "gan_gl_m":
        raise ValueError("the alternating schedule applies to gan_gl_m only")
    if not real:
        raise ValueError("gan_gl_m requires real masks for its odd batches")
    return [schedule_step(state, cfg, synth, real) for _ in range(batches)]


# --- checkpoints --------------------------------------------------------------------------

def save_checkpoint(state: TrainState, cfg: TrainConfig, path) -> None:
    entries = {}
    meta = {
        "step": state.step,
        "config_hash": cfg.config_hash(),
        "averages": state.averages,
        "baseline": state.baseline,
        "adam_steps": {},
    }
    for prefix, net in state.nets().items():
        for name, t in net.state_dict().items():
            entries[f"{prefix}.{name}"] = t.detach().cpu().numpy()
    for prefix, opt in state.optimizers().items():
        names = [n for n, _ in state.nets()[prefix].named_parameters()]
        meta["adam_steps"][prefix] = opt.step_count
        for n, m, v in zip(names, opt.m, opt.v):
            entries[f"adam.{prefix}.m.{n}"] = m.detach().cpu().numpy()
            entries[f"adam.{prefix}.v.{n}"] = v.detach().cpu().numpy()
    ckpt.write_container(path, entries, meta)


def load_checkpoint(path, cfg: TrainConfig, check_config: bool = True) -> TrainState:
    entries, meta = ckpt.read_container(path)
    if meta is None:
        raise ckpt.BadContainerError(f"{path}: training metadata missing")
    if check_config and meta["config_hash"] != cfg.config_hash():
        raise ckpt.ConfigMismatchError(
            f"{path}: checkpoint config hash {meta['config_hash']} != current {cfg.config_hash()}")
    state = init_state(cfg)
    try:
        for prefix, net in state.nets().items():
            sd = {name: torch.from_numpy(entries[f"{prefix}.{name}"]).reshape(t.shape)
                  for name, t in net.state_dict().items()}
            net.load_state_dict(sd)
        for prefix, opt in state.optimizers().items():
            names = [n for n, _ in state.nets()[prefix].named_parameters()]
            opt.step_count = int(meta["adam_steps"][prefix])
            for n, m, v in zip(names, opt.m, opt.v):
                m.copy_(torch.from_numpy(entries[f"adam.{prefix}.m.{n}"]).reshape(m.shape))
                v.copy_(torch.from_numpy(entries[f"adam.{prefix}.v.{n}"]).reshape(v.shape))
    except KeyError as exc:
        raise ckpt.BadContainerError(f"{path}: missing entry {exc}") from exc
    state.step = int(meta["step"])
    state.averages = dict(meta["averages"])
    state.baseline = float(meta["baseline"])
    return state


def load_generator(path, g_width: int | None = None) -> GeneratorNet:
    """Generator weights from a checkpoint (width inferred from the stem when not given)."""
    entries, _ = ckpt.read_container(path)
    if "gen.stem.conv.weight" not in entries:
        raise ckpt.BadContainerError(f"{path}: no generator weights")
    width = g_width or entries["gen.stem.conv.weight"].shape[0]
    G = GeneratorNet(width)
    sd = {}
    for name, t in G.state_dict().items():
        key = f"gen.{name}"
        if key not in entries:
            raise ckpt.BadContainerError(f"{path}: missing entry {key}")
        sd[name] = torch.from_numpy(entries[key]).reshape(t.shape)
    G.load_state_dict(sd)
    return G


# --- driver -------------------------------------------------------------------------------

def format_log_row(step: int, record: dict) -> str:
    vals = [record.get(k, float("nan")) for k in LOG_COLUMNS[1:]]
    return ",".join([str(step)] + [f"{v:.9g}" for v in vals])


def train(cfg: TrainConfig, synth: Sequence[np.ndarray], real: Sequence[np.ndarray] | None = None,
          out_dir=None, state: TrainState | None = None) -> TrainState:
    """Run to ``cfg.steps``, logging and checkpointing into ``out_dir`` when given."""
    state = state or init_state(cfg)
    out = Path(out_dir) if out_dir is not None else None
    metrics = timing = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        mode = "a" if state.step > 0 and (out / "metrics.csv").exists() else "w"
        metrics = open(out / "metrics.csv", mode)
        timing = open(out / "timing.csv", mode)
        if mode == "w":
            metrics.write(",".join(LOG_COLUMNS) + "\n")
            timing.write("step,wall_time\n")
        if state.step == 0:
            save_checkpoint(state, cfg, out / "ckpt_000000.tsin")
    start = time.perf_counter()
    try:
        while state.step < cfg.steps:
            schedule_step(state, cfg, synth, real)
            done = state.step
            if metrics is not None and (done % cfg.log_every == 0 or done == cfg.steps):
                metrics.write(format_log_row(done, state.last) + "\n")
                timing.write(f"{done},{time.perf_counter() - start:.3f}\n")
            if out is not None and cfg.checkpoint_every > 0 and done % cfg.checkpoint_every == 0:
                save_checkpoint(state, cfg, out / f"ckpt_{done:06d}.tsin")
            if done % max(cfg.log_every, 1) == 0:
                log.info("step %d %s", done, format_log_row(done, state.last))
    finally:
        if metrics is not None:
            metrics.close()
            timing.close()
    if out is not None and cfg.steps > 0:
        save_checkpoint(state, cfg, out / "final.tsin")
    return state


@torch.no_grad()
def infer(G: GeneratorNet, mask: np.ndarray, patch_size: int = 256, chunk: int = 16,
          threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Inpaint a whole mask patch by patch; returns ``(inpainted, filled = inpainted & ~input)``."""
    mask = np.asarray(mask, dtype=bool)
    patches, layout = extract_patches(mask, patch_size)
    dtype = next(G.parameters()).dtype
    G.eval()
    out = []
    for i in range(0, len(patches), chunk):
        x = _t(np.stack(patches[i:i + chunk]), dtype)
        out.extend(threshold_binarize(G(x).cpu().numpy(), threshold))
    inpainted = recompose(out, layout).astype(bool)
    return inpainted, inpainted & ~mask


def erased(inpainted: np.ndarray, original: np.ndarray) -> np.ndarray:
    return np.asarray(original, bool) & ~np.asarray(inpainted, bool)
