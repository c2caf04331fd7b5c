"""Command-line entry point: ``midget <command> --config <path> [flags]``.

Exit codes: 0 on success, 2 on a validation error, 3 when training diverges.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from midget import pipeline
from midget.config import PROFILES, PipelineConfig, load_config
from midget.errors import DivergenceError, ValidationError

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3

log = logging.getLogger("midget")


def apply_ablations(cfg: PipelineConfig, flags) -> list[str]:
    """Fold ablation flags into the config; returns the active flag names."""
    active = []
    if getattr(flags, "no_split", False):
        if cfg.vqvae.split_body:
            cfg.vqvae.split_body = False
            cfg.gpt.codebook_size = 2 * cfg.vqvae.codebook_size
        active.append("no_split")
    if getattr(flags, "no_extractor", False):
        cfg.gpt.use_extractor = False
        active.append("no_extractor")
    if getattr(flags, "no_ba_loss", False):
        cfg.gpt.lambda_ba = 0.0
        active.append("no_ba_loss")
    if getattr(flags, "single_step", False):
        cfg.gpt.single_step = True
        active.append("single_step")
    cfg.validate()
    return active


def _cmd_make_data(cfg, args):
    out = pipeline.make_data(cfg, args.out)
    print(out)


def _cmd_train_vqvae(cfg, args):
    apply_ablations(cfg, args)
    print(pipeline.train_vqvae_stage(cfg, resume=args.resume))


def _cmd_train_gpt(cfg, args):
    active = apply_ablations(cfg, args)
    print(pipeline.train_gpt_stage(cfg, args.vqvae, resume=args.resume, ablations=active))


def _cmd_generate(cfg, args):
    ckpt_dir = Path(cfg.paths.checkpoint_dir)
    out, codes = pipeline.generate_motion(
        args.gpt or ckpt_dir / "gpt.ckpt",
        args.vqvae or ckpt_dir / "vqvae.ckpt",
        args.music,
        args.seed_motion,
        args.horizon,
        args.out,
        seed_length=args.seed_length,
    )
    print(json.dumps({"motion": str(out), "codes": codes}, sort_keys=True))


def _cmd_evaluate(cfg, args):
    report = pipeline.evaluate(args.generated, args.reference, args.report or cfg.paths.report_path)
    print(json.dumps(report, sort_keys=True))


def _cmd_plot_beats(cfg, args):
    svg, csv = pipeline.plot_beats(args.motion, args.music, args.out)
    print(svg)
    print(csv)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="midget", description="Music-conditioned dance generation pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="JSON config layered over the profile")
        p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
        p.set_defaults(func=func)
        return p

    p = command("make-data", _cmd_make_data, "write the synthetic paired dataset")
    p.add_argument("--out", type=Path, help="dataset directory (default: paths.dataset_dir)")

    p = command("train-vqvae", _cmd_train_vqvae, "train the motion VQ-VAE")
    p.add_argument("--resume", action="store_true", help="continue from vqvae_last.ckpt")
    p.add_argument("--no-split", action="store_true", help="one whole-body codebook of 2N codes")

    p = command("train-gpt", _cmd_train_gpt, "train the motion GPT against a frozen VQ-VAE")
    p.add_argument("--vqvae", type=Path, help="VQ-VAE checkpoint (default: checkpoint_dir/vqvae.ckpt)")
    p.add_argument("--resume", action="store_true", help="continue from gpt_last.ckpt")
    p.add_argument("--no-extractor", action="store_true", help="naive music downsampling")
    p.add_argument("--no-ba-loss", action="store_true", help="set the beat-align weight to zero")
    p.add_argument("--single-step", action="store_true", help="supervise only the last step")
    p.add_argument("--no-split", action="store_true", help="whole-body codes (needs a --no-split VQ-VAE)")

    p = command("generate", _cmd_generate, "roll out a dance for a music file")
    p.add_argument("--gpt", type=Path)
    p.add_argument("--vqvae", type=Path)
    p.add_argument("--music", type=Path, required=True)
    p.add_argument("--seed-motion", type=Path, required=True)
    p.add_argument("--seed-length", type=int, default=None, help="seed codes taken from the seed motion (default: all)")
    p.add_argument("--horizon", type=int, required=True, help="total code steps, seed included")
    p.add_argument("--out", type=Path, required=True)

    p = command("evaluate", _cmd_evaluate, "FID, diversity and beat scores")
    p.add_argument("--generated", type=Path, required=True)
    p.add_argument("--reference", type=Path, required=True)
    p.add_argument("--report", type=Path, help="report path (default: paths.report_path)")

    p = command("plot-beats", _cmd_plot_beats, "SVG and CSV of speed curve and beats")
    p.add_argument("--motion", type=Path, required=True)
    p.add_argument("--music", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.profile)
        args.func(cfg, args)
    except DivergenceError as exc:
        print(f"midget: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValidationError, OSError) as exc:
        print(f"midget: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
