"""``thin-inpaint`` command line: synth, corrupt, train, infer, eval, traits.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric abort.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import zlib
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import checkpoint as ckpt
from .config import ConfigError, RunConfig
from .gap_synth import corrupt_image
from .mask_data import SPLITS, MaskIOError, generate_structure, load_mask, save_mask
from .metrics import PER_IMAGE_KEYS, connected_components, evaluate, root_traits
from .training import NumericAbort, infer, load_checkpoint, load_generator, train

log = logging.getLogger("thin_inpaint")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CONFIG_ECHO = "resolved.cfg"
THREADS_ENV = "THIN_INPAINT_THREADS"


class DataError(RuntimeError):
    """Missing, unreadable or unusable input data."""


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def name_key(name: str) -> int:
    return zlib.crc32(name.encode())


GAPS_SUFFIX, OVERLAY_SUFFIX = "_gaps.png", "_overlay.png"


def list_pngs(path: Path, skip: tuple[str, ...] = ()) -> list[Path]:
    """A single file, or the sorted PNGs of a directory minus names ending in ``skip``."""
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise DataError(f"input not found: {path}")
    files = [p for p in sorted(path.glob("*.png")) if not p.name.endswith(skip)]
    if not files:
        raise DataError(f"no PNG files in {path}")
    return files


def read_mask(path: Path) -> np.ndarray:
    mask = load_mask(path)
    if mask.size == 0:
        raise DataError(f"{path}: image has zero size")
    return mask


def prepare_out(out: Path, force: bool) -> Path:
    if out.exists() and not out.is_dir():
        raise ConfigError(f"output path {out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- subcommands ------------------------------------------------------------------------

def split_counts(count: int, fractions) -> list[int]:
    total = sum(fractions)
    tail = [round(count * f / total) for f in fractions[1:]]
    return [count - sum(tail)] + tail


def cmd_synth(cfg: RunConfig, out: Path, args) -> None:
    index = 0
    for split, n in zip(SPLITS, split_counts(cfg["synth.count"], cfg["synth.split"])):
        (out / split).mkdir(exist_ok=True)
        for _ in range(n):
            mask = generate_structure(cfg.synth_config(derive_seed(cfg["seed"], index)))
            save_mask(mask, out / split / f"synth_{index:05d}.png")
            index += 1
    log.info("wrote %d masks to %s", index, out)


def cmd_corrupt(cfg: RunConfig, out: Path, args) -> None:
    gap_cfg = cfg.gap_config()
    for path in list_pngs(Path(args.input)):
        mask = read_mask(path)
        x, gaps = corrupt_image(mask, gap_cfg, cfg["patch_size"], derive_seed(cfg["seed"], name_key(path.stem)))
        save_mask(x, out / f"{path.stem}_corrupt.png")
        save_mask(gaps, out / f"{path.stem}{GAPS_SUFFIX}")


def _load_dataset(path_text: str, what: str, minimum: int) -> list[np.ndarray]:
    root = Path(path_text)
    if (root / "train").is_dir():
        root = root / "train"
    masks = [read_mask(p) for p in list_pngs(root)]
    if len(masks) < minimum:
        raise DataError(f"{what} at {root} needs at least {minimum} masks, found {len(masks)}")
    return masks


def cmd_train(cfg: RunConfig, out: Path, args) -> None:
    tcfg = cfg.train_config()
    if not tcfg.data:
        raise ConfigError("train.data is not set (pass DATA or --set train.data=DIR)")
    # synthetic batches draw two different parents; real batches use one
    synth = _load_dataset(tcfg.data, "train.data", 2)
    real = _load_dataset(tcfg.real_data, "train.real_data", 1) if tcfg.real_data else None
    state = load_checkpoint(cfg["train.resume"], tcfg) if cfg["train.resume"] else None
    state = train(tcfg, synth, real, out_dir=out, state=state)
    log.info("finished at step %d", state.step)


def overlay(inpainted: np.ndarray, original: np.ndarray) -> np.ndarray:
    """RGB image: input foreground white, pixels filled by the model red."""
    rgb = np.zeros(original.shape + (3,), dtype=np.uint8)
    rgb[inpainted & ~original] = (255, 0, 0)
    rgb[original] = (255, 255, 255)
    return rgb


def cmd_infer(cfg: RunConfig, out: Path, args) -> None:
    G = load_generator(args.checkpoint)
    for path in list_pngs(Path(args.input), skip=(GAPS_SUFFIX, OVERLAY_SUFFIX)):
        mask = read_mask(path)
        inpainted, _ = infer(G, mask, cfg["patch_size"], cfg["infer.chunk"], cfg["infer.threshold"])
        save_mask(inpainted, out / f"{path.stem}_inpainted.png")
        Image.fromarray(overlay(inpainted, mask), mode="RGB").save(out / f"{path.stem}{OVERLAY_SUFFIX}")


def _counterpart(path: Path) -> Path:
    if not path.is_file():
        raise DataError(f"missing counterpart file: {path}")
    return path


def _inpainted_for(stem: str, root: Path) -> Path:
    for name in (f"{stem}_corrupt_inpainted.png", f"{stem}_inpainted.png"):
        if (root / name).is_file():
            return root / name
    raise DataError(f"missing counterpart file: {root / f'{stem}_corrupt_inpainted.png'}")


def _fmt(value) -> str:
    if value is None:
        return "none"
    return repr(float(value)) if isinstance(value, float) else str(value)


def write_report(report, names, out: Path) -> None:
    keys = [k for k in PER_IMAGE_KEYS if k in report.mean]
    lines = [f"images = {len(names)}"]
    for k in keys:
        lines += [f"{k}.mean = {_fmt(report.mean[k])}", f"{k}.std = {_fmt(report.std[k])}",
                  f"{k}.excluded = {report.excluded[k]}"]
    for name, row in zip(names, report.per_image):
        lines += [f"image.{name}.{k} = {_fmt(row.get(k))}" for k in keys]
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    table = [",".join(["file"] + keys)]
    table += [",".join([name] + [_fmt(row.get(k)) for k in keys]) for name, row in zip(names, report.per_image)]
    (out / "per_image.csv").write_text("\n".join(table) + "\n")


def cmd_eval(cfg: RunConfig, out: Path, args) -> None:
    gt_dir, x_dir, xh_dir = Path(args.gt), Path(args.corrupted), Path(args.inpainted)
    names, ys, xs, xhs, gs = [], [], [], [], []
    for path in list_pngs(gt_dir):
        stem = path.stem
        xs.append(read_mask(_counterpart(x_dir / f"{stem}_corrupt.png")))
        gs.append(read_mask(_counterpart(x_dir / f"{stem}{GAPS_SUFFIX}")))
        xhs.append(read_mask(_inpainted_for(stem, xh_dir)))
        ys.append(read_mask(path))
        names.append(path.name)
    try:
        report = evaluate(ys, xs, xhs, gs, cfg["eval.connectivity"], cfg["eval.pixel_diff_in_gaps"],
                          cfg["eval.traits"])
    except ValueError as exc:
        raise DataError(str(exc)) from None
    write_report(report, names, out)


def cmd_traits(cfg: RunConfig, out: Path, args) -> None:
    rows = ["file,length,tips,hull_area,components"]
    for path in list_pngs(Path(args.input), skip=(GAPS_SUFFIX, OVERLAY_SUFFIX)):
        mask = read_mask(path)
        t = root_traits(mask)
        comps = connected_components(mask, cfg["eval.connectivity"])
        rows.append(f"{path.name},{t.length!r},{t.tips},{float(t.hull_area)!r},{comps}")
    (out / "traits.csv").write_text("\n".join(rows) + "\n")


COMMANDS = {"synth": cmd_synth, "corrupt": cmd_corrupt, "train": cmd_train, "infer": cmd_infer,
            "eval": cmd_eval, "traits": cmd_traits}


# --- argument handling -------------------------------------------------------------------

def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value config file")
    common.add_argument("--seed", type=int, help="overrides the seed key")
    common.add_argument("--out", metavar="DIR", help="output directory (default: <command>_out)")
    common.add_argument("--force", action="store_true", help="allow a non-empty output directory")
    common.add_argument("--threads", type=int, help=f"torch intra-op threads (default ${THREADS_ENV} or 1)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides",
                        help="override one config key; repeatable")
    common.add_argument("--quiet", action="store_true", help="only log warnings")

    parser = argparse.ArgumentParser(prog="thin-inpaint", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic train/val/test dataset")
    p = sub.add_parser("corrupt", parents=[common], help="cut artificial gaps into masks")
    p.add_argument("input", help="PNG file or directory")
    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("data", nargs="?", help="dataset directory (overrides train.data)")
    p = sub.add_parser("infer", parents=[common], help="inpaint masks with a trained generator")
    p.add_argument("checkpoint")
    p.add_argument("input", help="PNG file or directory")
    p = sub.add_parser("eval", parents=[common], help="score inpainted masks against ground truth")
    p.add_argument("gt")
    p.add_argument("corrupted", help="directory with <name>_corrupt.png and <name>_gaps.png")
    p.add_argument("inpainted", help="directory with <name>_corrupt_inpainted.png")
    p = sub.add_parser("traits", parents=[common], help="length, tips, hull area and components per mask")
    p.add_argument("input", help="PNG file or directory")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    overrides.append(f"threads={args.threads if args.threads is not None else _default_threads()}")
    if getattr(args, "data", None):
        overrides.append(f"train.data={args.data}")
    return cfg.with_overrides(overrides).validate(training=args.command == "train")


def run(args) -> None:
    cfg = resolve_config(args)
    torch.set_num_threads(cfg["threads"])
    out = prepare_out(Path(args.out or f"{args.command}_out"), args.force)
    (out / CONFIG_ECHO).write_text(cfg.to_text())
    COMMANDS[args.command](cfg, out, args)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        run(args)
    except (ConfigError, ckpt.ConfigMismatchError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DataError, MaskIOError, ckpt.CheckpointError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except NumericAbort as exc:
        log.error("numeric abort: %s", exc)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
