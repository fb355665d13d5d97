"""Command-line entry point.

``surfmap synth`` writes a synthetic dataset, ``surfmap run <stage>``
executes pipeline stages against a manifest, ``surfmap report`` runs
the final stage and prints both tables.  The artifact tree defaults to
``$SURFMAP_CACHE``, then the config's ``out_dir``.

Exit codes: 0 success, 2 contract violation, 3 numeric failure,
4 missing/stale prerequisite artifacts.
"""

import argparse
import csv
import os
import sys

from .config import default_config, load_config
from .errors import ContractError, DependencyError, NumericError
from .pipeline import STAGES, run_all, run_stage, run_synth
from .synth import SynthSpec


def _build_parser():
    p = argparse.ArgumentParser(
        prog="surfmap",
        description="Spectral surface-collection analysis pipeline.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--collections", type=int, default=2)
    s.add_argument("--sessions", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-crop", action="store_true",
                   help="full-coverage sessions (no partial scans)")
    s.add_argument("--treated-side", choices=("L", "R"), default="",
                   help="pin the treated side instead of randomizing")
    s.add_argument("--out", default=None, help="artifact tree root")

    r = sub.add_parser("run", help="run pipeline stages")
    r.add_argument("stage", choices=[st for st in STAGES if st != "synth"]
                   + ["all"])
    r.add_argument("--manifest", required=True)
    r.add_argument("--config", default=None, help="config JSON path")
    r.add_argument("--jobs", type=int, default=1)
    r.add_argument("--out", default=None, help="artifact tree root")

    q = sub.add_parser("report", help="emit and print the final tables")
    q.add_argument("--manifest", required=True)
    q.add_argument("--config", default=None)
    q.add_argument("--jobs", type=int, default=1)
    q.add_argument("--out", default=None)
    return p


def _resolve_out(args, config):
    return args.out or os.environ.get("SURFMAP_CACHE") or config.out_dir


def _load(args):
    return load_config(args.config) if args.config else default_config()


def _print_csv(path, stream):
    stream.write(f"# {path}\n")
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            stream.write("  ".join(f"{c:>12}" for c in row) + "\n")


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "synth":
            out = args.out or os.environ.get("SURFMAP_CACHE") \
                or default_config().out_dir
            spec = SynthSpec(
                n_collections=args.collections,
                n_sessions=args.sessions,
                seed=args.seed,
                crop=not args.no_crop,
                treated_side=args.treated_side,
            )
            manifest = run_synth(spec, out)
            print(manifest)
            return 0
        config = _load(args)
        out = _resolve_out(args, config)
        if args.command == "run":
            if args.stage == "all":
                run_all(args.manifest, config, out, jobs=args.jobs)
            else:
                run_stage(args.stage, args.manifest, config, out,
                          jobs=args.jobs)
            return 0
        # report: make sure the stage artifacts exist, then print them
        run_stage("report", args.manifest, config, out, jobs=args.jobs)
        for name in ("displacements.csv", "volumes.csv"):
            _print_csv(os.path.join(out, "report", name), sys.stdout)
        return 0
    except DependencyError as exc:       # includes stale artifacts
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
