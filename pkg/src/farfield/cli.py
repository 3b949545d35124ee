"""Command-line front end.

    farfield simulate CONFIG -o DIR [key=value ...]
    farfield enhance  CONFIG -o DIR [key=value ...]
    farfield pipeline CONFIG -o DIR [key=value ...]
    farfield evaluate --estimate E.wav --reference R.wav [--mixture Y.wav] [-o report.txt]

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure
(the failing stage is named on stderr).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from .io import ConfigError, apply_overrides, format_table, load_config, read_wav, write_report
from .metrics import sdr_report
from .pipeline import StageError, run_pipeline
from .scene import export_scene, render_scene, scene_spec_from_config

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

log = logging.getLogger("farfield")


def _load(args) -> tuple[dict, Path]:
    tree = apply_overrides(load_config(args.config), args.overrides)
    return tree, Path(args.config).resolve().parent


def simulate_command(config_path, out_dir, overrides=()) -> dict:
    """Render the scene described by a config file and export it to ``out_dir``.

    The config is either a scene tree or a mapping with a ``scene`` key.
    Returns the manifest written next to the WAV files.
    """
    tree = apply_overrides(load_config(config_path), overrides)
    scene_tree = tree.get("scene", tree)
    try:
        scene = render_scene(scene_spec_from_config(scene_tree, Path(config_path).resolve().parent))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise StageError("simulate", exc) from exc
    export_scene(scene, out_dir)
    return yaml.safe_load((Path(out_dir) / "manifest.txt").read_text())


def _cmd_simulate(args):
    manifest = simulate_command(args.config, args.output, args.overrides)
    print(f"wrote {len(manifest['files'])} files to {args.output}")


def _stage_flags(args, tree):
    flags = {
        "wpe.taps": args.taps,
        "wpe.delay": args.delay,
        "wpe.iterations": args.iterations,
        "wpe.context": args.context,
        "clustering.noise_class": args.noise_class,
        "clustering.mask_input": args.mask_input,
    }
    overrides = [f"{k}={v}" for k, v in flags.items() if v is not None]
    if args.threads is not None:
        overrides.append(f"threads={args.threads}")
    if args.dump_intermediate:
        overrides.append("dump_intermediate=true")
    return apply_overrides(tree, overrides)


def _cmd_run(args, evaluate: bool):
    tree, base_dir = _load(args)
    tree = _stage_flags(args, tree)
    if not evaluate:
        tree["evaluate"] = False
    manifest = run_pipeline(tree, args.output, base_dir)
    if manifest.metrics:
        print(format_table(manifest.metrics))
    print(f"wrote {len(manifest.artifacts)} artifacts to {args.output}")


def _cmd_evaluate(args):
    estimate = read_wav(args.estimate).channel(0)
    reference = read_wav(args.reference).channel(args.channel)
    if args.mixture:
        unprocessed = read_wav(args.mixture).channel(args.channel)
    else:
        unprocessed = estimate
    report = sdr_report(estimate, reference, unprocessed)
    values = {
        "sdr_db": report.sdr_db,
        "input_sdr_db": report.input_sdr_db,
        "improvement_db": report.improvement_db,
    }
    if args.output:
        write_report(args.output, values)
    print(format_table(values))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="farfield", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--log-level", default="WARNING")
        p.add_argument("config", help="YAML config file")
        p.add_argument("overrides", nargs="*", metavar="key=value", help="dotted-key config overrides")
        p.add_argument("-o", "--output", required=True, help="output directory")

    p = sub.add_parser("simulate", help="render a scene and export its ground truth")
    with_config(p)
    p.set_defaults(func=_cmd_simulate)

    for name, evaluate in (("enhance", False), ("pipeline", True)):
        p = sub.add_parser(name, help="run WPE, masks and beamforming"
                           + (" and score the outputs" if evaluate else ""))
        with_config(p)
        p.add_argument("--taps", type=int)
        p.add_argument("--delay", type=int)
        p.add_argument("--iterations", type=int)
        p.add_argument("--context", type=int)
        p.add_argument("--noise-class", help="'auto' or a class index")
        p.add_argument("--mask-input", choices=("wpe", "observation"))
        p.add_argument("--threads", type=int, help="worker threads for per-frequency stages")
        p.add_argument("--dump-intermediate", action="store_true")
        p.set_defaults(func=lambda a, e=evaluate: _cmd_run(a, e))

    p = sub.add_parser("evaluate", help="SDR of an enhanced signal against a reference")
    p.add_argument("--estimate", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--mixture", help="unprocessed signal for the baseline SDR")
    p.add_argument("--channel", type=int, default=0, help="reference/mixture channel")
    p.add_argument("-o", "--output", help="key=value report file")
    p.add_argument("--log-level", default="WARNING")
    p.set_defaults(func=_cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    # overrides may follow option flags, which plain nargs="*" rejects
    args, extra = parser.parse_known_args(argv)
    unknown = [a for a in extra if a.startswith("-") or "=" not in a]
    if unknown or (extra and not hasattr(args, "overrides")):
        parser.error(f"unrecognized arguments: {' '.join(unknown or extra)}")
    if extra:
        args.overrides = list(args.overrides) + extra
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"numerical failure in stage {exc.stage}: {exc.cause}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
