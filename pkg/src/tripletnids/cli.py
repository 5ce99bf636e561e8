"""Command-line front end.

Exit codes: 0 success, 2 usage or config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

from . import harness
from .data import load_csv, make_blobs, sample_subset, save_class_map, save_csv, stratified_split, SubsetSpec
from .errors import ConfigError, DataError, NumericError
from .rng import Rng
from .training import ModelBundle, SearchSpace, derive_seed, sample_config, train_model

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _csv_header(path: str) -> list[str]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            return [c.strip() for c in next(csv.reader(fh), [])]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def cmd_split(args) -> int:
    if args.synthetic:
        counts = [int(v) for v in args.counts.split(",")] if args.counts else [4000] + [200] * (args.classes - 1)
        if len(counts) != args.classes:
            raise ConfigError(f"--counts lists {len(counts)} classes but --classes is {args.classes}")
        ds = make_blobs(counts, args.dim, args.sep, derive_seed(args.seed, 0))
    else:
        if not args.input:
            raise ConfigError("split needs --input or --synthetic")
        if Path(args.input).is_file() and args.label_col not in _csv_header(args.input):
            raise ConfigError(f"label column {args.label_col!r} not found in {args.input}")
        ds = load_csv(args.input, args.label_col, args.benign)
    train, test = stratified_split(ds, args.fraction, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_csv(train, out / "train.csv", args.label_col)
    save_csv(test, out / "test.csv", args.label_col)
    save_class_map(ds, out / "classes.json")
    print(f"train={len(train)} test={len(test)} classes={list(ds.class_map)} -> {out}")
    return 0


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config, args.override or [])
    if getattr(args, "workers", None):
        cfg.workers = args.workers
    return cfg


def cmd_search(args) -> int:
    cfg = _config(args)
    report = harness.run_experiment(cfg)
    path = harness.write_report(report, harness.run_dir(cfg, args.run_root))
    print(path)
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    train, _, _ = harness.load_splits(cfg)
    subset = sample_subset(train, SubsetSpec(cfg.n_benign, cfg.n_per_attack[0], cfg.seeds.subset_seed(0)))
    config = {**sample_config(SearchSpace(), Rng(cfg.seeds.search_seed(0))), **cfg.fixed}
    bundle = train_model(cfg.settings, config, subset, derive_seed(cfg.seeds.configuration, 0))
    bundle.train_score = bundle.score(subset).to_dict()
    directory = harness.run_dir(cfg, args.run_root)
    directory.mkdir(parents=True, exist_ok=True)
    save_csv(subset, directory / "train_subset.csv", cfg.label_column)
    bundle.save(directory / "bundle.json")
    print(directory / "bundle.json")
    return 0


def cmd_eval(args) -> int:
    bundle = ModelBundle.load(args.bundle)
    ds = load_csv(args.input, args.label_col, args.benign, classes=bundle.data_classes or None)
    print(json.dumps(bundle.score(ds).to_dict(), sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    values = args.values.split(",") if args.values else None
    reports = harness.run_ablation(args.axis, cfg, values)
    directory = harness.run_dir(cfg, args.run_root) / f"ablate-{args.axis}"
    for value, report in reports.items():
        print(harness.write_report(report, directory, f"report-{value}"))
    return 0


def render_rows(rows: list[dict], fmt: str) -> str:
    if fmt == "json":
        return json.dumps(rows, sort_keys=True, indent=1) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
        return buf.getvalue()
    head = f"{'model':<40} {'N_M':>5}  {'macro F1':>17}  {'recall':>17}  {'precision':>17}  {'FP rate':>17}  {'gap':>17}"
    lines = [head, "-" * len(head)]
    for r in rows:
        cells = [f"{r[k + '_mean']:.4f} ± {r[k + '_std']:.4f}"
                 for k in ("macro_f1", "macro_recall", "macro_precision", "fp_rate", "gap")]
        lines.append(f"{r['model']:<40} {r['n_per_attack']:>5}  " + "  ".join(f"{c:>17}" for c in cells))
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    directory = Path(args.run)
    if not directory.is_dir():
        raise DataError(f"no run directory {directory}")
    rows = harness.collect_rows(directory)
    if not rows:
        raise DataError(f"no reports in {directory}")
    sys.stdout.write(render_rows(rows, args.format))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tripletnids", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("split", help="stratified train/test split of a CSV or synthetic blobs")
    sp.add_argument("--input")
    sp.add_argument("--label-col", default="label")
    sp.add_argument("--benign", default="benign")
    sp.add_argument("--fraction", type=float, default=0.5)
    sp.add_argument("--seed", type=int, default=39058032)
    sp.add_argument("--out", required=True)
    sp.add_argument("--synthetic", choices=["blobs"])
    sp.add_argument("--classes", type=int, default=5)
    sp.add_argument("--dim", type=int, default=20)
    sp.add_argument("--sep", type=float, default=6.0)
    sp.add_argument("--counts", help="comma-separated rows per class, benign first")
    sp.set_defaults(func=cmd_split)

    for name, func, text in (("search", cmd_search, "run the full selection and evaluation protocol"),
                             ("train", cmd_train, "fit one configuration and save the model bundle"),
                             ("ablate", cmd_ablate, "run one ablation axis")):
        c = sub.add_parser(name, help=text)
        c.add_argument("--config", required=True)
        c.add_argument("--override", action="append", metavar="KEY=VALUE")
        c.add_argument("--run-root", help=f"defaults to ${harness.RUN_ROOT_ENV} or ./runs")
        c.add_argument("--workers", type=int)
        if name == "ablate":
            c.add_argument("--axis", required=True, choices=harness.ABLATION_AXES)
            c.add_argument("--values", help="comma-separated subset of the axis values")
        c.set_defaults(func=func)

    ev = sub.add_parser("eval", help="score a saved bundle on a CSV")
    ev.add_argument("--bundle", required=True)
    ev.add_argument("--input", required=True)
    ev.add_argument("--label-col", default="label")
    ev.add_argument("--benign", default="benign")
    ev.set_defaults(func=cmd_eval)

    rp = sub.add_parser("report", help="tabulate the reports in a run directory")
    rp.add_argument("--run", required=True)
    rp.add_argument("--format", choices=["table", "csv", "json"], default="table")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
