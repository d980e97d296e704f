"""Command-line entry point: ``mirrornet <subcommand> [options]``.

Failures exit nonzero after printing exactly one line to stderr::

    error category=<usage|config|data|checkpoint|io|internal> message="..."
"""

from __future__ import annotations

import argparse
import struct
import sys
from pathlib import Path

import numpy as np

from .config import ABLATIONS, SEED_ENV, RunConfig, describe_keys, load_config, parse_config, serialize_config
from .crf import crf_refine
from .dataset import (
    DatasetError,
    SampleRecord,
    compute_stats,
    generate_synthetic,
    image_to_tensor,
    load_pairs,
    read_pnm,
    split_by_group,
    write_dataset,
    write_pnm,
)
from .metrics import MetricsReport
from .network import ConfigError, MirrorNet
from .params import ParamStore
from .tensor import sigmoid, upsample_bilinear
from .train import stack_samples, train

CKPT_MAGIC = b"MNCK"
EXIT_CODES = {"usage": 2, "config": 3, "data": 4, "checkpoint": 5, "io": 6, "internal": 1}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, cfg: RunConfig, store: ParamStore) -> None:
    text = serialize_config(cfg).encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", len(text)) + text + store.to_bytes())


def load_checkpoint(path) -> tuple[RunConfig, ParamStore]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CliError("checkpoint", f"{path}: {exc.strerror}") from None
    if buf[:4] != CKPT_MAGIC:
        raise CliError("checkpoint", f"{path}: not a mirrornet checkpoint")
    try:
        (n,) = struct.unpack_from("<I", buf, 4)
        cfg = parse_config(buf[8:8 + n].decode())
        store, end = ParamStore.from_bytes(buf, 8 + n)
    except (ValueError, struct.error, UnicodeDecodeError) as exc:
        raise CliError("checkpoint", f"{path}: corrupt checkpoint ({exc})") from None
    if end != len(buf):
        raise CliError("checkpoint", f"{path}: {len(buf) - end} trailing bytes")
    return cfg, store


def _network(cfg: RunConfig, store: ParamStore) -> MirrorNet:
    net_cfg = cfg.network_config(cfg.seed())
    try:
        return MirrorNet(net_cfg, store)
    except KeyError as exc:
        raise CliError("checkpoint", f"checkpoint lacks parameter {exc}") from None


# ---------------------------------------------------------------- helpers


def _load_data(directory) -> list:
    records = load_pairs(directory)
    if not records:
        raise CliError("data", f"{directory}: no image/mask pairs found")
    return records


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = []
    for item in args.set or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise CliError("usage", f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        section, name = key.split(".", 1)
        overrides.append(f"[{section.strip()}]\n{name.strip()} = {value.strip()}")
    if overrides:
        # apply one at a time so repeated sections do not collide
        for text in overrides:
            cfg = parse_config(text, base=cfg)
    if getattr(args, "mode", None):
        cfg.run.mode = args.mode
    cfg.run.seed = cfg.seed(args.seed)
    cfg.validate()
    return cfg


def _probabilities(net: MirrorNet, images: np.ndarray, batch: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Finest-level logits and probabilities for (N, 3, R, R) images."""
    logits = np.concatenate([net.forward(images[i:i + batch], training=False)[0][:, 0]
                             for i in range(0, len(images), batch)])
    return logits, sigmoid(logits.astype(np.float64))


def _emit(lines: str, log_path: str | None) -> None:
    print(lines, flush=True)
    if log_path:
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write(lines + "\n")


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    n = args.n if args.n is not None else cfg.data.n_samples
    res = args.resolution or cfg.network.resolution
    records = generate_synthetic(n, res, cfg.run.seed, cfg.synthetic_config())
    out = Path(args.out or cfg.run.data_dir)
    if args.split:
        tr, te = split_by_group(records, cfg.data.test_fraction, np.random.default_rng([cfg.run.seed, 2]))
        write_dataset(tr, out / "train")
        write_dataset(te, out / "test")
        print(f"wrote={len(records)} train={len(tr)} test={len(te)} dir={out}")
    else:
        write_dataset(records, out)
        print(f"wrote={len(records)} dir={out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    data = args.data or cfg.run.data_dir
    ckpt = args.checkpoint or cfg.run.checkpoint
    log_path = args.log or cfg.run.log or None
    net_cfg = cfg.network_config(cfg.run.seed)
    records = _load_data(data)
    _emit(f"mode={cfg.run.mode} loss={cfg.loss_kind()} bce_warmup={cfg.train.bce_warmup} "
          f"seed={cfg.run.seed} images={len(records)} epochs={cfg.optim.epochs}", log_path)
    result = train(records, net_cfg, cfg.optim, cfg.loss_kind(), augment=cfg.train.augment,
                   target_iou=cfg.train.target_iou, eval_every=cfg.train.eval_every,
                   log=lambda e: _emit(e.record(), log_path), bce_warmup=cfg.train.bce_warmup)
    save_checkpoint(ckpt, cfg, result.params)
    last = result.history[-1]
    iou = "nan" if result.final_iou is None else f"{result.final_iou:.6f}"
    _emit(f"done epochs={last.epoch} final_loss={last.loss!r} final_iou={iou} checkpoint={ckpt}",
          log_path)
    return 0


def cmd_eval(args) -> int:
    ckpt_cfg, store = load_checkpoint(args.checkpoint)
    if args.config or args.set:
        cfg = _resolve(args)
        if cfg.network.resolution != ckpt_cfg.network.resolution:
            raise CliError("config", f"resolution {cfg.network.resolution} does not match "
                           f"checkpoint resolution {ckpt_cfg.network.resolution}")
        ckpt_cfg.crf, ckpt_cfg.train.threshold = cfg.crf, cfg.train.threshold
    net = _network(ckpt_cfg, store)
    records = _load_data(args.data or ckpt_cfg.run.data_dir)
    images, masks = stack_samples(records, ckpt_cfg.network.resolution)
    _, probs = _probabilities(net, images)
    if args.crf:
        probs = np.stack([crf_refine(img, p, ckpt_cfg.crf) for img, p in zip(images, probs)])
    report = MetricsReport(threshold=ckpt_cfg.train.threshold)
    for p, m in zip(probs, masks):
        report.add(p, m[0])
    print(report.records())
    print(report.table())
    return 0


def cmd_infer(args) -> int:
    ckpt_cfg, store = load_checkpoint(args.checkpoint)
    if args.threshold is not None:
        ckpt_cfg.train.threshold = args.threshold
    net = _network(ckpt_cfg, store)
    res = ckpt_cfg.network.resolution
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in args.images:
        image = read_pnm(path)
        if image.ndim != 3:
            raise DatasetError(f"{path}: expected an RGB (P6) image")
        h, w = image.shape[:2]
        x = image_to_tensor(image)[None]
        if (h, w) != (res, res):
            x = upsample_bilinear(x, res, res)
        _, prob = _probabilities(net, x.astype(np.float32))
        prob = prob[0]
        if args.crf:
            prob = crf_refine(x[0], prob, ckpt_cfg.crf)
        if prob.shape != (h, w):
            prob = np.clip(upsample_bilinear(prob[None, None], h, w)[0, 0], 0.0, 1.0)
        stem = Path(path).stem
        write_pnm(out / f"{stem}_prob.pgm", np.round(255.0 * prob).astype(np.uint8))
        mask = (prob >= ckpt_cfg.train.threshold).astype(np.uint8) * 255
        write_pnm(out / f"{stem}_mask.pgm", mask)
        print(f"image={path} prob={out / f'{stem}_prob.pgm'} mask={out / f'{stem}_mask.pgm'} "
              f"mirror_fraction={float((mask > 0).mean()):.6f}")
    return 0


def cmd_stats(args) -> int:
    cfg = _resolve(args)
    records = _load_data(args.data or cfg.run.data_dir)
    stats = compute_stats(records, cfg.data.area_bins, args.map_size)
    print(stats.records())
    if args.location_map:
        write_pnm(args.location_map, np.round(255.0 * stats.location_map).astype(np.uint8))
        print(f"location_map={args.location_map}")
    return 0


def cmd_crf(args) -> int:
    cfg = _resolve(args)
    image = read_pnm(args.image)
    prob_img = read_pnm(args.prob)
    if image.ndim != 3 or prob_img.ndim != 2:
        raise DatasetError("crf expects an RGB (P6) image and a grayscale (P5) probability map")
    if image.shape[:2] != prob_img.shape:
        raise DatasetError(f"image {image.shape[:2]} and probability map {prob_img.shape} differ in size")
    refined = crf_refine(image, prob_img / 255.0, cfg.crf)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pnm(f"{out}_prob.pgm", np.round(255.0 * refined).astype(np.uint8))
    write_pnm(f"{out}_mask.pgm", (refined >= cfg.train.threshold).astype(np.uint8) * 255)
    print(f"prob={out}_prob.pgm mask={out}_mask.pgm")
    return 0


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


HELP_EPILOG = f"""\
Configuration files are line-oriented `key = value` text grouped under
[section] headers; `#` starts a comment. Unknown sections or keys are errors.
Tuples are comma-separated. `none` unsets an optional value. Every key with
its default:

{describe_keys()}
Ablation modes ([run] mode or --mode): {', '.join(ABLATIONS)}.
  full              network section as written
  bce_loss          no CCFE, BCE loss instead of lovasz hinge
  ccfe_no_contrast  CCFE branches keep only the dilated context conv
  1B4C / 4B1C       1 block x 4 scales / 4 blocks x 1 scale
  no_ccfe           backbone, gating and heads only

Seed: --seed, else [run] seed, else ${SEED_ENV}, else 0.
"""


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run configuration file")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help=f"seed (overrides config and ${SEED_ENV})")

    p = _Parser(prog="mirrornet", description="Mirror segmentation with contextual contrast.",
                epilog=HELP_EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    s.add_argument("--out", help="output directory (default [run] data_dir)")
    s.add_argument("--n", type=int, help="number of scenes (default [data] n_samples)")
    s.add_argument("--resolution", type=int, help="scene size (default [network] resolution)")
    s.add_argument("--split", action="store_true", help="write train/ and test/ by group")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", parents=[common], help="train and write a checkpoint")
    s.add_argument("--data", help="training directory (default [run] data_dir)")
    s.add_argument("--checkpoint", help="output checkpoint (default [run] checkpoint)")
    s.add_argument("--log", help="append key=value records to this file")
    s.add_argument("--mode", choices=ABLATIONS, help="ablation mode")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="metrics of a checkpoint on a dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", help="evaluation directory")
    s.add_argument("--crf", action="store_true", help="refine probabilities with the CRF first")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", parents=[common], help="probability and mask maps for images")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--threshold", type=float)
    s.add_argument("--crf", action="store_true")
    s.add_argument("images", nargs="+", help="P6 images")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("stats", parents=[common], help="dataset statistics")
    s.add_argument("--data", help="dataset directory")
    s.add_argument("--map-size", type=int, help="location map size (default: first mask)")
    s.add_argument("--location-map", help="write the location map as a PGM")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("crf", parents=[common], help="CRF-refine a probability map")
    s.add_argument("--image", required=True, help="P6 image")
    s.add_argument("--prob", required=True, help="P5 probability map (255 = 1.0)")
    s.add_argument("--out", required=True, help="output prefix for _prob.pgm and _mask.pgm")
    s.set_defaults(func=cmd_crf)
    return p


def _fail(category: str, message: str) -> int:
    flat = " ".join(str(message).split()).replace('"', "'")
    print(f'error category={category} message="{flat}"', file=sys.stderr)
    return EXIT_CODES[category]


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except CliError as exc:
        return _fail(exc.category, str(exc))
    except ConfigError as exc:
        return _fail("config", str(exc))
    except DatasetError as exc:
        return _fail("data", str(exc))
    except OSError as exc:
        return _fail("io", f"{exc.filename or ''}: {exc.strerror or exc}")
    except Exception as exc:  # noqa: BLE001 - last-resort single-line report
        return _fail("internal", f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
