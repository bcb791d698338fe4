"""Command-line interface.

Exit codes: 0 success, 2 configuration or usage error, 3 data error,
4 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import io, runs
from .config import VARIANTS, ConfigError, RunConfig
from .data import DataError, from_smiles, random_split, scaffold_split
from .io import FormatError
from .training import DivergenceError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", dest="seeds", help="seed or comma-separated seeds, e.g. 0,1,2")
    p.add_argument("--out", help="output run directory (default: <output_dir>/<dataset>-<variant>)")
    p.add_argument("--split", dest="split_file", help="use this split JSON instead of computing one")
    p.add_argument("--parallel-seeds", action="store_true", help="train seeds in separate processes")
    p.add_argument("--allow-out-of-range", action="store_true",
                   help="accept hyper-parameters outside their published ranges")
    group = p.add_argument_group("config overrides")
    for f in fields(RunConfig):
        if f.name in ("seeds", "split"):
            continue
        group.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, metavar="V")
    group.add_argument("--split-method", dest="cfg_split", metavar="V", help="scaffold or random")


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    if args.seeds is not None:
        overrides["seeds"] = args.seeds
    cfg = cfg.with_overrides(overrides)
    if not cfg.data:
        raise ConfigError("no dataset given (set 'data' in the config or pass --data)")
    return cfg.validate(allow_out_of_range=args.allow_out_of_range)


def _out_dir(cfg: RunConfig, args) -> Path:
    if args.out:
        return Path(args.out)
    stem = cfg.name or Path(cfg.data).stem
    return Path(cfg.output_dir) / f"{stem}-{cfg.variant}"


def _print(obj):
    print(json.dumps(io._jsonable(obj), indent=2, sort_keys=True))


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    if getattr(args, "variant_arg", None):
        cfg = cfg.replace(variant=args.variant_arg).validate(args.allow_out_of_range)
    if args.split_file and not Path(args.split_file).exists():
        raise UsageError(f"split file not found: {args.split_file}")
    out = _out_dir(cfg, args)
    result = runs.train(cfg, out, args.split_file, parallel=args.parallel_seeds)
    result["run_dir"] = str(out)
    _print(result)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if not args.run_dir and not args.params:
        raise UsageError("give a run directory or --params")
    params = Path(args.params) if args.params else Path(args.run_dir) / runs.PARAMS_FILE
    split = Path(args.split) if args.split else params.parent / runs.SPLIT_FILE
    if not split.exists():
        raise UsageError(f"split file not found: {split}")
    if not params.exists():
        raise UsageError(f"parameter file not found: {params}")
    cfg = RunConfig.from_file(args.config) if args.config else None
    report = runs.evaluate(params_path=params, split_path=split, data_path=args.data, cfg=cfg)
    _print(report)
    return EXIT_OK


def cmd_fp_sim(args) -> int:
    ds = _load_smiles_only(args)
    rows, cols, w = runs.fingerprint_edges(ds, args.tc_epsilon, args.radius, args.bits)
    io.write_edges(args.out, rows, cols, w)
    print(f"wrote {len(w)} edges to {args.out}")
    return EXIT_OK


def _load_smiles_only(args):
    """SMILES column only; label columns are not required for similarity export."""
    path = Path(args.data)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if args.smiles_column not in (reader.fieldnames or []):
            raise DataError(f"column {args.smiles_column!r} not found in {path}")
        smiles = [row[args.smiles_column] for row in reader]
    ds = from_smiles(smiles, np.zeros(len(smiles)), "regression", path.stem, ignore_stereo=not args.keep_stereo)
    if ds.n_dropped:
        logging.getLogger(__name__).warning("dropped %d unparseable SMILES; indices refer to kept rows",
                                            ds.n_dropped)
    return ds


def cmd_export_embeddings(args) -> int:
    shape = runs.export_embeddings(args.run_dir, args.out)
    print(f"wrote {shape[0]} x {shape[1]} embeddings to {args.out}")
    return EXIT_OK


def cmd_export_graph(args) -> int:
    n = runs.export_graph(args.run_dir, args.out, args.min_weight)
    print(f"wrote {n} edges to {args.out}")
    return EXIT_OK


def cmd_split(args) -> int:
    cfg = RunConfig(data=args.data, smiles_column=args.smiles_column, ignore_stereo=not args.keep_stereo)
    ds = runs.load_dataset(cfg)
    fractions = tuple(float(x) for x in args.fractions.split(","))
    if args.method == "scaffold":
        split = scaffold_split(ds, fractions, args.seed)
    else:
        split = random_split(len(ds), fractions, args.seed)
    split.save(args.out)
    print(f"train {len(split.train)}, valid {len(split.valid)}, test {len(split.test)} -> {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gslmpp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one or more seeds and write a run directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="train one ablation variant")
    p.add_argument("variant_arg", metavar="VARIANT", choices=VARIANTS)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="re-evaluate saved parameters on a split")
    p.add_argument("run_dir", nargs="?")
    p.add_argument("--params")
    p.add_argument("--split")
    p.add_argument("--data", help="dataset path (default: the one recorded in the run)")
    p.add_argument("--config", help="config file (default: config.txt next to the parameters)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("fp-sim", help="fingerprint similarity edge list")
    p.add_argument("--data", required=True)
    p.add_argument("--smiles-column", default="smiles")
    p.add_argument("--tc-epsilon", type=float, default=0.3)
    p.add_argument("--radius", type=int, default=2)
    p.add_argument("--bits", type=int, default=2048)
    p.add_argument("--keep-stereo", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fp_sim)

    p = sub.add_parser("export-embeddings", help="final molecule embeddings as CSV")
    p.add_argument("run_dir")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("export-graph", help="final fused molecule graph as an edge list")
    p.add_argument("run_dir")
    p.add_argument("--out", required=True)
    p.add_argument("--min-weight", type=float, default=0.0)
    p.set_defaults(func=cmd_export_graph)

    p = sub.add_parser("split", help="write a split JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--smiles-column", default="smiles")
    p.add_argument("--method", choices=("scaffold", "random"), default="scaffold")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fractions", default="0.8,0.1,0.1")
    p.add_argument("--keep-stereo", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, FileNotFoundError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
