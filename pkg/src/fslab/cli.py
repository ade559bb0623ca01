"""Command-line entry point: ``fslab {synth gen, train, eval, ablate, export-pr}``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig
from .datamodel import ContractError, FormatError
from .data import SplitError
from .train import CheckpointError, NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

SWEEP_PRESETS = {
    "directions": {"settings": None, "bpm_n": [4]},
    "depth": {"rcam_mode": ["full-duplex"], "bpm_mode": ["simplex-GtoF", "full-duplex"], "bpm_n": [0, 2, 4]},
}


def _cmd_synth_gen(args) -> int:
    from .synthdata import build_corpus

    manifest = build_corpus(
        args.clips, args.out, seed=args.seed, size=args.size, n_frames=args.frames, force=args.force
    )
    counts = {k: len(v) for k, v in manifest["splits"].items()}
    print(f"wrote {args.clips} clips to {args.out}: {counts}")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .train import train

    config = RunConfig.load(args.config)
    if args.output_dir:
        config.output_dir = args.output_dir
    final = train(config, resume=args.resume)
    for stage, path in final.items():
        print(f"{stage}: {path}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .train import evaluate

    report = evaluate(args.checkpoint, args.split, corpus=args.corpus, out_dir=args.out, head=args.head)
    print(json.dumps(report.summary(), indent=2))
    return EXIT_OK


def _load_sweep(spec: str) -> dict:
    if spec in SWEEP_PRESETS:
        from .ablate import DIRECTION_SETTINGS

        sweep = dict(SWEEP_PRESETS[spec])
        if "settings" in sweep:
            sweep["settings"] = DIRECTION_SETTINGS
        return sweep
    try:
        return json.loads(Path(spec).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"sweep must be one of {sorted(SWEEP_PRESETS)} or a JSON file: {exc}") from exc


def _cmd_ablate(args) -> int:
    from .ablate import ablate

    config = RunConfig.load(args.config)
    rows = ablate(config, _load_sweep(args.sweep), args.out, split=args.split, train_variants=not args.no_train)
    report = json.loads((Path(args.out) / "ablation_report.json").read_text())
    unit = report["bpm_unit"]
    print(f"{len(rows)} variants written to {Path(args.out) / 'ablation.csv'}")
    print(
        f"per-unit BPM params ({unit['preset']}): {unit['per_unit_params']} "
        f"vs reference {unit['reference_per_unit_params']:.0f} ({unit['relative_deviation']:+.1%})"
    )
    if "explanation" in unit:
        print(f"  {unit['explanation']}")
    return EXIT_OK


def _cmd_export_pr(args) -> int:
    from .ablate import export_pr

    reports = {}
    for item in args.report:
        label, sep, path = item.partition("=")
        if not sep:
            label, path = Path(item).parent.name or item, item
        reports[label] = path
    export_pr(reports, args.out)
    print(f"wrote {len(reports)} series to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fslab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="synthetic corpus tools")
    synth_sub = synth.add_subparsers(dest="synth_command", required=True)
    gen = synth_sub.add_parser("gen", help="render a moving-shapes corpus")
    gen.add_argument("--clips", type=int, default=40)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.add_argument("--size", type=int, default=64, help="frame height and width in pixels")
    gen.add_argument("--frames", type=int, default=8, help="frames per clip")
    gen.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    gen.set_defaults(func=_cmd_synth_gen)

    tr = sub.add_parser("train", help="run the three-stage schedule")
    tr.add_argument("--config", required=True, help="RunConfig JSON")
    tr.add_argument("--resume", help="checkpoint to resume from")
    tr.add_argument("--output-dir", help="override the config's output_dir")
    tr.set_defaults(func=_cmd_train)

    ev = sub.add_parser("eval", help="score a checkpoint on a split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--split", default="val")
    ev.add_argument("--corpus", help="defaults to the corpus recorded in the checkpoint")
    ev.add_argument("--out", help="directory for report.json, pr_curve.csv and masks")
    ev.add_argument("--head", choices=["SA", "SM", "mean"], help="prediction head (default: from config)")
    ev.set_defaults(func=_cmd_eval)

    ab = sub.add_parser("ablate", help="train and score a sweep of variants")
    ab.add_argument("--config", required=True, help="base RunConfig JSON")
    ab.add_argument("--sweep", default="depth", help=f"preset {sorted(SWEEP_PRESETS)} or a sweep JSON file")
    ab.add_argument("--out", required=True)
    ab.add_argument("--split", default="val")
    ab.add_argument("--no-train", action="store_true", help="only fill params, FLOPs and runtime")
    ab.set_defaults(func=_cmd_ablate)

    ex = sub.add_parser("export-pr", help="merge report PR curves into one CSV")
    ex.add_argument("report", nargs="+", help="report.json paths, optionally as label=path")
    ex.add_argument("--out", required=True)
    ex.set_defaults(func=_cmd_export_pr)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ContractError, FormatError, SplitError, CheckpointError, FileExistsError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
