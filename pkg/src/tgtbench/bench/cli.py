"""tgtbench command line: dataset generation, training, evaluation, tables and figures."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .. import __version__
from ..diffcore.checkpoint import CheckpointError
from ..netgen import DatasetFormatError
from .config import ConfigError, ExperimentSpec, load_config, merge, resolve_spec
from .experiments import (
    RUNNERS,
    ManifestMismatchError,
    MissingCheckpointError,
    OverlapError,
    run_train,
    start,
)

COMMANDS = list(RUNNERS)
# commands where --checkpoint names the model being read rather than written
_READS_CHECKPOINT = {"eval", "table3", "table4", "fig2"}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML config or a run manifest (JSON) to rerun")
    common.add_argument("--seed", type=int, help="base seed (data = seed, eval = seed + 1000, train = seed)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--checkpoint", type=Path, help="model checkpoint to write (train) or read")
    common.add_argument("--threads", type=int, default=1, help="worker threads for generation and evaluation")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tgtbench", description=__doc__)
    parser.add_argument("--version", action="version", version=f"tgtbench {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=f"run {name}")
    rerun = sub.add_parser("rerun", parents=[common], help="rerun an experiment from its manifest")
    rerun.add_argument("manifest", type=Path)
    return parser


def _load_manifest(path: Path) -> dict | None:
    data = json.loads(path.read_text()) if path.suffix == ".json" else load_config(path)
    return data if isinstance(data, dict) and "spec" in data else None


def resolve(args) -> tuple[ExperimentSpec, dict | None]:
    manifest = None
    command = args.command
    config = args.config
    if command == "rerun":
        manifest = _load_manifest(args.manifest)
        if manifest is None:
            raise ConfigError(f"{args.manifest} is not a run manifest")
        command = manifest["spec"]["name"]
        config = args.manifest
    elif config is not None and config.suffix == ".json":
        manifest = _load_manifest(config)
    if command not in RUNNERS:
        raise ConfigError(f"manifest names unknown experiment {command!r}")
    spec = resolve_spec(command, config, seed=args.seed, out_dir=args.out)
    if args.checkpoint is not None and command in _READS_CHECKPOINT:
        spec = merge(spec, {"checkpoints": {"tgt": str(args.checkpoint)}})
    return spec, manifest


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        spec, manifest = resolve(args)
        run = start(spec, threads=max(1, args.threads), manifest=manifest)
        if spec.name == "train":
            result = run_train(run, args.checkpoint)
        else:
            result = RUNNERS[spec.name](run)
    except (ConfigError, MissingCheckpointError, ManifestMismatchError, OverlapError,
            CheckpointError, DatasetFormatError, ValueError) as exc:
        print(f"tgtbench: error: {exc}", file=sys.stderr)
        return 2
    _report(spec, result, run.out)
    return 0


def _report(spec: ExperimentSpec, result, out: Path) -> None:
    if spec.name == "gradcheck":
        print("\n".join(result.lines()))
        print(f"max relative error {result.max_error:.3e} ({'pass' if result.passed else 'FAIL'} at {result.tol:g})")
    elif spec.name == "train":
        print(f"checkpoint written to {result}")
    print(f"outputs in {out} (manifest {spec.name}.manifest.json)")


if __name__ == "__main__":
    sys.exit(main())
