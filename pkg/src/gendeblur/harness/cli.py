"""Command line entry point.

Usage::

    gendeblur <mode> [--config FILE] [flags]

Values from ``--config`` are read first; flags given on the command line
override them.  Exit status: 0 success, 2 invalid configuration, 3 missing
or unreadable files, 4 solver failure.
"""

from __future__ import annotations

import argparse
import sys

from gendeblur.errors import ConfigError, ModelFormatError, NumericError, ShapeError, SolverError
from gendeblur.harness import config as hc
from gendeblur.harness.runner import run

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_SOLVER = 0, 2, 3, 4


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _words(text):
    return [v.strip() for v in text.split(",") if v.strip()]


# (flag, config path, type, help)
_FLAGS = [
    ("--output-dir", "output_dir", str, "directory for all outputs"),
    ("--seed", "seed", int, "global seed"),
    ("--image-model", "image_model", str, "image decoder file"),
    ("--kernel-model", "kernel_model", str, "kernel decoder file"),
    ("--image", "image", str, "clean image PNG"),
    ("--blurred", "blurred", str, "blurred input PNG (no ground truth)"),
    ("--image-dir", "image_dir", str, "directory of clean PNGs"),
    ("--toy-images", "toy_images", int, "number of procedural test images"),
    ("--kernels", "kernels", str, "kernel dataset container"),
    ("--kernel-index", "kernel_index", int, "kernel to use from --kernels"),
    ("--count", "count", int, "gen-blurs: number of kernels"),
    ("--split", "split", float, "gen-blurs: held-out fraction"),
    ("--length-min", "length_min", float, "gen-blurs: shortest blur"),
    ("--length-max", "length_max", float, "gen-blurs: longest blur"),
    ("--blur-length", "blur_length", float, "length of a synthesised blur"),
    ("--noise-sigma", "noise_sigma", float, "observation noise std"),
    ("--project-steps", "project_steps", int, "range projection steps"),
    ("--project-step-size", "project_step_size", float, "range projection step size"),
    ("--noise-sigmas", "noise_sigmas", _floats, "sweep: comma-separated noise levels"),
    ("--blur-lengths", "blur_lengths", _floats, "sweep: comma-separated blur lengths"),
    ("--methods", "methods", _words, "sweep: comma-separated methods (dd, dds)"),
    ("--workers", "workers", int, "sweep: worker threads"),
    ("--dd-steps", "dd.steps", int, None),
    ("--dd-restarts", "dd.restarts", int, None),
    ("--dd-step-size", "dd.step_size", float, None),
    ("--dd-decay", "dd.decay", float, None),
    ("--gamma", "dd.gamma", float, "DD weight on ||z_i||^2"),
    ("--lambda", "dd.lambda_", float, "DD weight on ||z_k||^2"),
    ("--dds-steps", "dds.steps", int, None),
    ("--dds-restarts", "dds.restarts", int, None),
    ("--dds-lr", "dds.adam_lr", float, None),
    ("--tau", "dds.tau", float, "DDS range-error weight"),
    ("--zeta", "dds.zeta", float, "DDS in-range measurement weight"),
    ("--rho", "dds.rho", float, "DDS TV weight"),
    ("--vae-data", "vae.data", str, "train-vae: kernels or images"),
    ("--latent-dim", "vae.latent_dim", int, None),
    ("--batch-size", "vae.batch_size", int, None),
    ("--learning-rate", "vae.learning_rate", float, None),
    ("--epochs", "vae.epochs", int, None),
    ("--steps", "vae.steps", int, "train-vae: total steps (overrides epochs)"),
    ("--obs-std", "vae.obs_std", float, "train-vae: likelihood std"),
    ("--widths", "vae.widths", _ints, "train-vae: image decoder widths"),
    ("--channels", "vae.channels", int, None),
    ("--image-size", "vae.image_size", int, None),
]


def build_parser():
    parser = argparse.ArgumentParser(prog="gendeblur", description="Blind deblurring with generative priors.")
    sub = parser.add_subparsers(dest="mode", required=True, metavar="MODE")
    for mode in hc.MODES:
        p = sub.add_parser(mode, help=f"run {mode}")
        p.add_argument("--config", help="JSON config file; command line flags override it")
        for flag, dest, typ, help_ in _FLAGS:
            p.add_argument(flag, dest=dest, type=typ, default=None, help=help_)
        p.add_argument("--write-pngs", dest="write_pngs", action="store_true", default=None,
                       help="gen-blurs: also write PNG previews")
        p.add_argument("--range-error", dest="range_error", action="store_true", default=None,
                       help="sweep: also project each image onto the generator range")
    return parser


def _overrides(ns):
    out = {"mode": ns.mode}
    for _, dest, _, _ in _FLAGS + [(None, "write_pngs", None, None), (None, "range_error", None, None)]:
        value = getattr(ns, dest)
        if value is None:
            continue
        node = out
        *head, leaf = dest.split(".")
        for key in head:
            node = node.setdefault(key, {})
        node[leaf] = value
    return out


def config_from_args(argv):
    ns = build_parser().parse_args(argv)
    base = hc.load(ns.config) if ns.config else {}
    if ns.config and base.get("mode", ns.mode) != ns.mode:
        raise ConfigError("mode", f"config file says {base['mode']!r} but command is {ns.mode!r}")
    return hc.parse(hc.merge(base, _overrides(ns)))


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = config_from_args(argv)
    except (ConfigError, ShapeError) as exc:
        print(f"gendeblur: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"gendeblur: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        summary = run(cfg)
    except (ConfigError, ShapeError) as exc:
        print(f"gendeblur: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ModelFormatError) as exc:
        print(f"gendeblur: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SolverError, NumericError) as exc:
        print(f"gendeblur: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    print(f"{cfg.mode}: done -> {cfg.output_dir}")
    if isinstance(summary, dict):
        for k in sorted(summary):
            if k != "image_ids" and not isinstance(summary[k], (dict, list)):
                print(f"  {k}: {summary[k]}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
