"""Command-line entry point: ``semcolor synth-data | train | colorize | evaluate``.

Exit codes: 0 success, 1 usage error, 2 missing prerequisite, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("semcolor")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="semcolor", description="Semantic-aware latent diffusion colorization (desk scale).")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-data", help="generate the synthetic shapes dataset")
    s.add_argument("--seed", type=int)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")

    t = sub.add_parser("train", help="train one stage")
    t.add_argument("stage", choices=["vae", "decoder", "cdm"])
    t.add_argument("--config")
    t.add_argument("--data", dest="data_dir")
    t.add_argument("--val", dest="val_dir")
    t.add_argument("--ckpt", dest="ckpt_dir")
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--epochs", type=int, help="vae/decoder epochs")
    t.add_argument("--steps", type=int, help="cdm optimisation steps")
    t.add_argument("--dropout", dest="dropout_p", type=float)

    c = sub.add_parser("colorize", help="colorize grayscale (or color) PNGs")
    c.add_argument("--input", required=True, help="PNG file or folder")
    c.add_argument("--out", dest="out_dir")
    c.add_argument("--config")
    c.add_argument("--ckpt", dest="ckpt_dir")
    c.add_argument("--priors", help="folder with annotations/<name>.json (defaults to the input folder)")
    c.add_argument("--strength", type=float)
    c.add_argument("--cfg-scale", dest="cfg_scale", type=float)
    c.add_argument("--steps", dest="steps_T", type=int)
    c.add_argument("--eta", type=float)
    c.add_argument("--seed", type=int)
    c.add_argument("--no-seg-guidance", action="store_true")
    c.add_argument("--no-caption", action="store_true")
    c.add_argument("--lock-luminance", dest="luminance_lock", action="store_const", const=True)
    c.add_argument("--baseline-decoder", action="store_true")

    e = sub.add_parser("evaluate", help="colorfulness / PSNR / Frechet report")
    e.add_argument("--pred", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--frechet", action="store_true", help="add Frechet distance over pyramid features")
    return p


def _overrides(args, keys) -> dict:
    return {k: getattr(args, k, None) for k in keys}


def cmd_synth_data(args) -> int:
    from .data import save_dataset, synth_shapes

    if args.n < 1:
        raise UsageError("--n must be >= 1")
    cfg = load_config(args.config, {"seed": args.seed, "data_dir": args.out})
    seed = cfg.effective_seed
    samples = synth_shapes(seed, args.n, cfg.image_size)
    save_dataset(samples, args.out, seed)
    cfg.dump(args.out)
    log.info("wrote %d samples to %s", len(samples), args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import STAGES

    over = _overrides(args, ["data_dir", "val_dir", "ckpt_dir", "seed", "dropout_p"])
    if args.lr is not None:
        over[{"vae": "lr_vae", "decoder": "lr_decoder", "cdm": "lr_cdm"}[args.stage]] = args.lr
    if args.epochs is not None:
        over["vae_epochs" if args.stage == "vae" else "decoder_epochs"] = args.epochs
    if args.steps is not None:
        over["cdm_steps"] = args.steps
    cfg = load_config(args.config, over)
    path = STAGES[args.stage](cfg)
    log.info("saved %s", path)
    return EXIT_OK


def _collect_inputs(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if path.is_dir():
        img_dir = path / "images" if (path / "images").is_dir() else path
        return sorted(img_dir.glob("*.png"))
    raise FileNotFoundError(f"input {path} not found")


def cmd_colorize(args) -> int:
    from .colorspace import extract_gray, read_png, write_png
    from .data import fit_image
    from .diffusion import SamplerConfig
    from .guidance import GuidanceConfig
    from .pipeline import Colorizer
    from .priors import AnnotationProvider, generate_priors

    cfg = load_config(
        args.config,
        _overrides(args, ["out_dir", "ckpt_dir", "strength", "cfg_scale", "steps_T", "eta", "seed", "luminance_lock"]),
    )
    colorizer = Colorizer.from_dir(cfg.ckpt_dir, cfg.T_train)
    inputs = _collect_inputs(Path(args.input))
    if not inputs:
        raise FileNotFoundError(f"no PNG inputs under {args.input}")
    prior_root = Path(args.priors) if args.priors else (Path(args.input) if Path(args.input).is_dir() else Path(args.input).parent)
    provider = AnnotationProvider.from_folder(prior_root)

    grays, priors = [], []
    for path in inputs:
        gray = extract_gray(fit_image(read_png(path), cfg.image_size))
        grays.append(gray)
        priors.append(generate_priors(gray, provider, path.stem))
    images = colorizer.colorize(
        grays, priors,
        GuidanceConfig(cfg.strength, cfg.steps_T, cfg.cfg_scale),
        SamplerConfig(cfg.steps_T, cfg.eta, cfg.effective_seed),
        use_caption=not args.no_caption,
        use_segmentation=not args.no_seg_guidance,
        lock_luminance=cfg.luminance_lock,
        luminance_aware=not args.baseline_decoder,
    )
    out = Path(cfg.out_dir)
    for path, img in zip(inputs, images):
        write_png(out / f"{path.stem}.png", img)
    cfg.dump(out)
    log.info("wrote %d images to %s", len(images), out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .metrics import evaluate, pyramid_embedder

    for d in (args.pred, args.ref):
        if not Path(d).is_dir():
            raise FileNotFoundError(f"{d} is not a directory")
    report = evaluate(args.pred, args.ref, pyramid_embedder() if args.frechet else None)
    report.write(args.out)
    print(report.to_table(), end="")
    return EXIT_OK


COMMANDS = {"synth-data": cmd_synth_data, "train": cmd_train, "colorize": cmd_colorize, "evaluate": cmd_evaluate}


def main(argv: list[str] | None = None) -> int:
    from .pipeline import MissingCheckpoint

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"semcolor: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"semcolor: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingCheckpoint as exc:
        print(f"semcolor: error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as exc:
        print(f"semcolor: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        print(f"semcolor: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
