"""Command-line entry point: ``trajgeom <subcommand> [options]``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from trajgeom import __version__
from trajgeom.archive import ArchiveError, write_result_table
from trajgeom.calib import CalibrationError
from trajgeom.pipeline import PLOT_KINDS, ConfigError, PipelineConfig, emit_plot_data, run_pipeline, run_stage

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# subcommand -> pipeline stage
STAGE_COMMANDS = {
    "segment": "segment",
    "geometry": "geometry",
    "calib": "calib",
    "correct": "correct",
    "couple": "couple",
    "strat": "strat",
    "probe": "probe",
    "behave": "behave",
}


class UsageError(Exception):
    pass


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _names(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON pipeline configuration")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--jobs", type=int, help="worker threads")
    common.add_argument("--out", help="output directory")
    common.add_argument("--cohort", help="cohort directory (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="trajgeom", description="Length-corrected geometry of hidden-state trajectories.")
    parser.add_argument("--version", action="version", version=f"trajgeom {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic cohort")
    p.add_argument("--items", type=int, default=500)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--hidden-dim", type=int, default=64)
    p.add_argument("--layers", type=lambda s: tuple(int(v) for v in s.split(",")), default=(4, 8))
    p.add_argument("--null", action="store_true", help="plant no coupling in any group")
    p.add_argument("--spec", help="JSON synthetic spec (overrides the flags)")

    p = sub.add_parser("segment", parents=[common], help="detect solution segments")
    p.add_argument("--variant", choices=("default", "full_output", "fixed_prefix"))
    p.add_argument("--tau", type=float)

    p = sub.add_parser("geometry", parents=[common], help="per-trajectory geometry")
    p.add_argument("--metrics", type=_names)

    p = sub.add_parser("calib", parents=[common], help="fit item difficulties")
    p.add_argument("--model", choices=("1pl", "2pl"))
    p.add_argument("--loo", action="store_true")
    p.add_argument("--difficulty-file")

    for name, help_text in (("correct", "fit length models and residualize"), ("couple", "corrected couplings")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--family")
        p.add_argument("--metric", type=_names, dest="metrics")
        p.add_argument("--bootstrap-n", type=int)

    p = sub.add_parser("probe", parents=[common], help="ridge probe heatmap")
    p.add_argument("--grid", type=int, help="positions per trace")
    p.add_argument("--folds", type=int)
    p.add_argument("--lambda-grid", type=_floats)
    p.add_argument("--residualize", action="store_true", default=True)
    p.add_argument("--perm", type=int)

    p = sub.add_parser("behave", parents=[common], help="behavior rates, agreement and mediation")
    p.add_argument("--bootstrap-n", type=int)

    p = sub.add_parser("strat", parents=[common], help="sensitivity analyses")
    p.add_argument("--n", type=int, help="shuffles / resamples")

    p = sub.add_parser("report", parents=[common], help="run the whole pipeline")
    p.add_argument("--stages", type=_names)

    p = sub.add_parser("plot", parents=[common], help="emit plot-ready tables")
    p.add_argument("kind", choices=PLOT_KINDS)
    p.add_argument("--bundle", help="report bundle directory (default: --out)")
    p.add_argument("--dest", help="CSV path (default: <bundle>/plot_<kind>.csv)")
    return parser


def _config(args) -> PipelineConfig:
    raw = {}
    if args.config:
        raw = PipelineConfig.load(args.config).to_dict()
    if args.cohort:
        raw["cohort"] = args.cohort
    if "cohort" not in raw:
        raise UsageError("a cohort is required (--cohort or a config with 'cohort')")
    cfg = PipelineConfig.from_dict(raw)
    overrides = {}
    for attr, key in (("seed", "seed"), ("jobs", "jobs"), ("out", "out")):
        if getattr(args, attr, None) is not None:
            overrides[key] = getattr(args, attr)
    mapping = {
        "variant": "boundary_variant",
        "tau": "tau",
        "metrics": "metrics",
        "model": "calib_model",
        "difficulty_file": "difficulty_file",
        "family": "family",
        "bootstrap_n": "bootstrap_n",
        "grid": "probe_positions",
        "folds": "probe_folds",
        "lambda_grid": "probe_lambda_grid",
        "perm": "probe_perm",
        "stages": "stages",
    }
    for attr, key in mapping.items():
        v = getattr(args, attr, None)
        if v is not None:
            overrides[key] = v
    if getattr(args, "loo", False):
        overrides["loo"] = True
    if getattr(args, "n", None) is not None:
        overrides["permutation_n"] = args.n
        overrides["run_resamples"] = args.n
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


def _synth(args) -> int:
    from trajgeom.synth import GeometryLaw, SynthSpec, synth_cohort

    if not args.out:
        raise UsageError("synth needs --out")
    if args.spec:
        spec = SynthSpec.from_dict(json.loads(Path(args.spec).read_text(encoding="utf-8")))
    else:
        spec = SynthSpec(n_items=args.items, runs=args.runs, hidden_dim=args.hidden_dim, layers=args.layers)
        if args.null:
            spec = replace(spec, geometry_law={"reasoning": GeometryLaw(), "baseline": GeometryLaw()})
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    synth_cohort(spec, args.out)
    print(f"cohort written to {args.out}")
    return EXIT_OK


def _plot(args) -> int:
    bundle = Path(args.bundle or args.out or "bundle")
    table = emit_plot_data(bundle, args.kind)
    dest = Path(args.dest) if args.dest else bundle / f"plot_{args.kind}.csv"
    write_result_table(table, dest)
    print(f"{len(table)} rows written to {dest}")
    return EXIT_OK


def dispatch(args) -> int:
    if args.command == "synth":
        return _synth(args)
    if args.command == "plot":
        return _plot(args)
    cfg = _config(args)
    if args.command == "report":
        prov = run_pipeline(cfg)
        failed = {k: v for k, v in prov["stages"].items() if v != "ok"}
        for k, v in failed.items():
            print(f"stage {k}: {v}", file=sys.stderr)
        print(f"report bundle written to {cfg.out} (config {prov['config_hash']})")
        return EXIT_OK
    run_stage(cfg, STAGE_COMMANDS[args.command])
    print(f"{args.command} outputs written to {cfg.out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArchiveError, OSError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ArithmeticError, ValueError, CalibrationError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
