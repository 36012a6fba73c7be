"""Command line entry point.

Stage-by-stage usage shares one working directory::

    mfair ingest --dataset ratings.dat --format movielens_dat --continents cont.tsv --out work
    mfair recommend --algo userknn --out work
    mfair mitigate --eps 1.0 --out work
    mfair evaluate --out work

``mfair run`` does all of it in one go, ``mfair compare`` lines up two runs.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import dataset as ds
from .harness import (
    ConfigError,
    ExperimentConfig,
    StageError,
    compare_runs,
    load_report,
    prepare_data,
    run_experiment,
    write_comparison,
)
from .recommenders import ALGORITHMS, read_lists, write_lists
from .testkit import SynthSpec, synth_dataset

logger = logging.getLogger("mfair")

FORMATS = ("movielens_dat", "bookcrossing_csv", "generic_tsv")


def _common(p: argparse.ArgumentParser, data=False, model=False, rerank=False):
    p.add_argument("--out", required=True, help="working / output directory")
    p.add_argument("--seed", type=int, default=0)
    if data:
        p.add_argument("--dataset", help="rating file")
        p.add_argument("--format", choices=FORMATS, default="generic_tsv")
        p.add_argument("--continents", help="item -> continent codes (TSV)")
        p.add_argument("--target", choices=("item", "rating"), default="item")
        p.add_argument("--min-ratings", type=int, default=None)
        p.add_argument("--train-fraction", type=float, default=0.8)
    if model:
        p.add_argument("--algo", choices=ALGORITHMS, default="mostpop")
        p.add_argument("--topn", type=int, default=150)
    if rerank:
        p.add_argument("--topk", type=int, default=20)
        p.add_argument("--eps", type=float, default=1.0)
        p.add_argument("--phases", choices=("visibility", "exposure", "both"), default="both")
        p.add_argument("--recompute", choices=("full", "incremental"), default="full")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfair", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("ingest", help="parse, filter, split; build catalog and targets"), data=True)
    _common(sub.add_parser("recommend", help="top-n lists from the ingested training split"), model=True)
    p = sub.add_parser("mitigate", help="MFAIR re-ranking of a list file")
    _common(p, model=True, rerank=True)
    p.add_argument("--lists", help="input lists (default: <out>/lists_vanilla.tsv)")
    p = sub.add_parser("evaluate", help="bias metrics and NDCG for a list file")
    _common(p, rerank=True)
    p.add_argument("--lists", help="lists to score (default: <out>/lists_mitigated.tsv)")
    p = sub.add_parser("run", help="end-to-end experiment")
    _common(p, data=True, model=True, rerank=True)
    p.add_argument("--synthetic", action="store_true", help="use a generated dataset instead of --dataset")
    p.add_argument("--synth-users", type=int, default=300)
    p.add_argument("--synth-items", type=int, default=400)
    p = sub.add_parser("compare", help="compare two run reports (b relative to a)")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--out", help="write the comparison CSV here")
    p = sub.add_parser("synth", help="write a synthetic dataset and continent map")
    _common(p)
    p.add_argument("--users", type=int, default=300)
    p.add_argument("--items", type=int, default=400)
    p.add_argument("--skew", type=float, default=1.0)
    return parser


def _load_work(out: Path):
    train = ds.parse_interactions(out / "train.tsv", "generic_tsv").with_split("train")
    test_path = out / "test.tsv"
    test = ds.parse_interactions(test_path, "generic_tsv").with_split("test") if test_path.stat().st_size else None
    catalog = ds.read_catalog(out / "catalog.tsv")
    with open(out / "targets.json", encoding="utf-8") as fh:
        targets = ds.TargetDistribution.from_dict(json.load(fh))
    return train, test, catalog, targets


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (StageError, ConfigError):
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def cmd_ingest(args):
    if not args.dataset or not args.continents:
        raise ConfigError("ingest needs --dataset and --continents")
    config = ExperimentConfig(dataset=args.dataset, format=args.format, continents=args.continents,
                              target_mode=args.target, seed=args.seed, min_ratings=args.min_ratings,
                              train_fraction=args.train_fraction)
    train, test, catalog, targets = _stage("ingest", prepare_data, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds.write_interactions(train, out / "train.tsv")
    ds.write_interactions(test, out / "test.tsv")
    ds.write_catalog(catalog, out / "catalog.tsv")
    with open(out / "targets.json", "w", encoding="utf-8") as fh:
        json.dump(targets.to_dict(), fh, indent=2, sort_keys=True)
    print(f"train={len(train)} test={len(test)} catalog={len(catalog)} dropped={len(catalog.dropped)}")


def cmd_recommend(args):
    from .recommenders import recommend

    out = Path(args.out)
    train, _, catalog, _ = _stage("load", _load_work, out)
    lists = _stage("recommend", recommend, args.algo, train, catalog, args.topn, args.seed)
    write_lists(lists, out / "lists_vanilla.tsv")
    print(f"{len(lists)} lists of up to {args.topn} items -> {out / 'lists_vanilla.tsv'}")


def cmd_mitigate(args):
    from .mitigation import MitigationConfig, mitigate_two_phase

    out = Path(args.out)
    _, _, catalog, targets = _stage("load", _load_work, out)
    lists = _stage("load", read_lists, args.lists or out / "lists_vanilla.tsv")
    n = min(args.topn, min(len(r) for r in lists))
    config = MitigationConfig(k=args.topk, n=n, eps=args.eps, target_mode=targets.mode, phases=args.phases,
                              recompute=args.recompute)
    result = _stage("mitigate", mitigate_two_phase, lists, catalog, targets, config)
    write_lists(result.lists, out / "lists_mitigated.tsv")
    for phase in result.phases:
        print(f"{phase.bias_type}: {phase.candidates} candidates, {len(phase.applied)} swaps applied")


def cmd_evaluate(args):
    from .metrics import evaluate

    out = Path(args.out)
    _, test, catalog, targets = _stage("load", _load_work, out)
    lists = _stage("load", read_lists, args.lists or out / "lists_mitigated.tsv")
    report = _stage("evaluate", evaluate, lists, catalog, targets, test, args.topk)
    report.write_json(out / "bias.json")
    report.write_csv(out / "bias.csv")
    for metric, group, value in report.rows():
        if group in ("Total BS", "all"):
            print(f"{metric:<20} {group:<9} {value: .4f}")


def cmd_run(args):
    synth = None
    if args.synthetic:
        synth = SynthSpec(n_users=args.synth_users, n_items=args.synth_items, seed=args.seed)
    elif not args.dataset:
        raise ConfigError("run needs --dataset (with --continents) or --synthetic")
    config = ExperimentConfig(dataset=args.dataset if not args.synthetic else None, format=args.format,
                              continents=args.continents, algorithm=args.algo, target_mode=args.target,
                              n=args.topn, k=args.topk, eps=args.eps, seed=args.seed, phases=args.phases,
                              out=args.out, train_fraction=args.train_fraction, min_ratings=args.min_ratings,
                              synth=synth, recompute=args.recompute)
    report = run_experiment(config)
    print(f"swaps applied: {report.swaps}")
    for fam, total in report.vanilla.totals.items():
        print(f"{fam:<14} vanilla {total:.4f}  mitigated {report.final.totals[fam]:.4f}")
    if report.vanilla.ndcg is not None:
        print(f"{'ndcg':<14} vanilla {report.vanilla.ndcg:.4f}  mitigated {report.final.ndcg:.4f}")


def cmd_compare(args):
    a = _stage("load", load_report, args.a)
    b = _stage("load", load_report, args.b)
    rows = compare_runs(a, b)
    for r in rows:
        flag = "*" if r.improved else " "
        print(f"{r.metric:<22} a={r.a: .4f} b={r.b: .4f} delta={r.delta: .4f} {flag}")
    if args.out:
        write_comparison(rows, args.out)


def cmd_synth(args):
    spec = SynthSpec(n_users=args.users, n_items=args.items, popularity_skew=args.skew, seed=args.seed)
    data, continents = synth_dataset(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds.write_interactions(data, out / "ratings.tsv")
    ds.write_continent_map(continents, out / "continents.tsv")
    print(f"{len(data)} ratings -> {out / 'ratings.tsv'}")


COMMANDS = {"ingest": cmd_ingest, "recommend": cmd_recommend, "mitigate": cmd_mitigate,
            "evaluate": cmd_evaluate, "run": cmd_run, "compare": cmd_compare, "synth": cmd_synth}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except StageError as exc:
        print(f"mfair {args.command}: error in stage '{exc.stage}': {exc.cause}", file=sys.stderr)
        return 1
    except (ConfigError, ValueError) as exc:
        print(f"mfair {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
