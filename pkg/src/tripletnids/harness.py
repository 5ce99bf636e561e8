"""Few-shot evaluation protocol: subsets, random search with stratified CV, final fit, test scores.

For every requested malicious-sample count and every repetition s:

1. sample a training subset (``n_benign`` benign + ``n_per_attack`` per attack class);
2. score each search trial by mean macro F1 over stratified K folds, with the
   normaliser refitted on every fold's training part;
3. retrain the best trial on the whole subset and score it on the held-out
   test split and on the subset itself.

Reports are plain dicts that serialise to byte-stable JSON.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .contrastive import METRICS, MINING
from .data import (FlowDataset, SubsetSpec, apply_normalizer, load_csv, sample_subset, stratified_kfold,
                   stratified_split)
from .errors import ConfigError, DataError, NumericError
from .metrics import generalization_gap
from .rng import Rng
from .training import (FAMILIES, SearchSpace, TrainSettings, attach_inference, derive_seed, sample_config,
                       task_labels, train_model)

RUN_ROOT_ENV = "TRIPLETNIDS_RUN_ROOT"
SUMMARY_KEYS = ("macro_f1", "macro_recall", "macro_precision", "fp_rate", "train_macro_f1", "gap")
BENIGN_COUNTS = (1000, 5000, 10000, 20000)
HYPERPARAMS = {"lr": float, "batch_size": int, "weight_decay": float, "neurons": int, "depth": int,
               "dropout": float, "f_out": int, "margin": float, "k": int}


@dataclass(frozen=True)
class SeedSchedule:
    configuration: int = 0
    subset_sampling: int = 19048
    cv_split: int = 19324
    hyperparameter_search: int = 4564
    dataset_split: int = 39058032

    def subset_seed(self, s: int) -> int:
        return self.subset_sampling + s

    def search_seed(self, s: int) -> int:
        return self.hyperparameter_search + s


@dataclass
class ExperimentConfig:
    name: str = ""
    dataset_csv: str = ""
    train_csv: str = ""
    test_csv: str = ""
    label_column: str = "label"
    benign: str = "benign"
    task: str = "multiclass"
    train_labels: str = "multiclass"
    triplet_average: str = "valid"
    include_self: bool = False
    family: str = "triplet"
    mining: str = "batch_all"
    metric: str = "euclidean"
    inference: str = "knn"
    vote: str = "hard"
    tau: float = 0.1
    repetitions: int = 3
    n_benign: int = 2000
    n_per_attack: tuple = (10,)
    folds: int = 5
    budget: int = 20
    epochs: int = 50
    offline_count: int = 30000
    probe_lr: float = 1e-2
    workers: int = 1
    seed_configuration: int = 0
    seed_subset: int = 19048
    seed_cv: int = 19324
    seed_search: int = 4564
    seed_split: int = 39058032
    fixed: dict = field(default_factory=dict)

    def __post_init__(self):
        self.n_per_attack = tuple(int(v) for v in self.n_per_attack)
        self.fixed = {k: HYPERPARAMS[k](v) for k, v in sorted(self.fixed.items()) if self._known(k)}
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.budget < 1:
            raise ConfigError("search budget must be >= 1")
        if not self.n_per_attack:
            raise ConfigError("n_per_attack needs at least one value")
        if self.mining not in MINING:
            raise ConfigError(f"unknown mining {self.mining!r}; expected one of {MINING}")
        if self.metric not in METRICS:
            raise ConfigError(f"unknown metric {self.metric!r}; expected one of {METRICS}")
        if self.vote not in ("hard", "soft", "weighted"):
            raise ConfigError(f"unknown vote rule {self.vote!r}")
        self.settings  # validates the remaining enums

    @staticmethod
    def _known(key: str) -> bool:
        if key not in HYPERPARAMS:
            raise ConfigError(f"unknown fixed hyperparameter {key!r}; expected one of {sorted(HYPERPARAMS)}")
        return True

    @property
    def label(self) -> str:
        return self.name or self.family

    @property
    def seeds(self) -> SeedSchedule:
        return SeedSchedule(self.seed_configuration, self.seed_subset, self.seed_cv, self.seed_search,
                            self.seed_split)

    @property
    def settings(self) -> TrainSettings:
        return TrainSettings(self.family, self.mining, self.metric, self.inference, self.vote, self.tau,
                             self.epochs, self.offline_count, self.probe_lr, self.task, self.train_labels,
                             self.triplet_average, self.include_self)

    def to_dict(self) -> dict:
        """Everything that determines results; ``workers`` is left out."""
        d = asdict(self)
        d.pop("workers")
        d["n_per_attack"] = list(self.n_per_attack)
        return d

    def digest(self) -> str:
        d = self.to_dict()
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


def _convert(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc
    return raw


def config_from_mapping(values: dict[str, str], fixed: dict[str, str] | None = None) -> ExperimentConfig:
    """Build a config from string key/value pairs, converting by each field's default type."""
    defaults = ExperimentConfig()
    known = {f.name for f in fields(ExperimentConfig)} - {"fixed"}
    kwargs = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        kwargs[key] = _convert(key, raw, getattr(defaults, key))
    fixed_vals = {}
    for key, raw in (fixed or {}).items():
        if key not in HYPERPARAMS:
            raise ConfigError(f"unknown fixed hyperparameter {key!r}")
        try:
            fixed_vals[key] = HYPERPARAMS[key](raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for fixed.{key}: {raw!r}") from exc
    return ExperimentConfig(**kwargs, fixed=fixed_vals)


def load_config(path, overrides: list[str] = ()) -> ExperimentConfig:
    """Read an INI file with an ``[experiment]`` section and an optional ``[fixed]`` section.

    ``overrides`` are ``key=value`` strings applied on top of the file;
    ``fixed.<name>=value`` pins a hyperparameter. Relative CSV paths resolve
    against the config file's directory.
    """
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        if not parser.read(path, encoding="utf-8"):
            raise ConfigError(f"cannot read config {path}")
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    values = dict(parser["experiment"]) if parser.has_section("experiment") else {}
    fixed = dict(parser["fixed"]) if parser.has_section("fixed") else {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key.startswith("fixed."):
            fixed[key[len("fixed."):]] = raw
        else:
            values[key] = raw
    for key in ("dataset_csv", "train_csv", "test_csv"):
        if values.get(key) and not Path(values[key]).is_absolute():
            values[key] = str((path.parent / values[key]).resolve())
    return config_from_mapping(values, fixed)


def load_splits(cfg: ExperimentConfig) -> tuple[FlowDataset, FlowDataset, bool]:
    """Training and test splits plus a flag saying whether both come from one file."""
    if cfg.train_csv and cfg.test_csv:
        train = load_csv(cfg.train_csv, cfg.label_column, cfg.benign)
        test = load_csv(cfg.test_csv, cfg.label_column, cfg.benign, classes=train.class_map)
        return train, test, False
    if cfg.dataset_csv:
        full = load_csv(cfg.dataset_csv, cfg.label_column, cfg.benign)
        train, test = stratified_split(full, 0.5, cfg.seeds.dataset_split)
        return train, test, True
    raise ConfigError("config needs dataset_csv or both train_csv and test_csv")


def _trial_configs(cfg: ExperimentConfig, s: int, space: SearchSpace) -> list[dict]:
    if cfg.family == "knn":
        ks = [cfg.fixed["k"]] if "k" in cfg.fixed else list(space.k)
        return [{"k": int(k)} for k in ks]
    rng = Rng(cfg.seeds.search_seed(s))
    return [{**sample_config(space, rng), **cfg.fixed} for _ in range(cfg.budget)]


def evaluate_trial(settings: TrainSettings, config: dict, subset: FlowDataset, folds, trial_seed: int) -> dict:
    """Mean validation macro F1 over the folds; a numeric blow-up marks the trial failed."""
    scores = []
    try:
        with np.errstate(all="ignore"):
            for f, (tr, va) in enumerate(folds):
                bundle = train_model(settings, config, subset.take(tr), derive_seed(trial_seed, f))
                scores.append(bundle.score(subset.take(va)).macro_f1)
    except NumericError as exc:
        return {"config": config, "fold_f1": scores, "mean_f1": None, "failed": str(exc)}
    return {"config": config, "fold_f1": scores, "mean_f1": float(np.mean(scores)), "failed": None}


def _run_trial(args):
    return evaluate_trial(*args)


def select_best(trials: list[dict]) -> int:
    """Index of the highest mean fold F1 among non-failed trials; ties go to the earliest."""
    best = None
    for i, t in enumerate(trials):
        if t["failed"] is None and (best is None or t["mean_f1"] > trials[best]["mean_f1"]):
            best = i
    if best is None:
        raise NumericError("every search trial failed")
    return best


def _score_dict(report) -> dict:
    return report.to_dict()


def _summarise(subsets: list[dict], key: str | None = None) -> dict:
    rows = []
    for sub in subsets:
        src = sub if key is None else sub["variants"][key]
        rows.append({
            "macro_f1": src["test"]["macro_f1"],
            "macro_recall": src["test"]["macro_recall"],
            "macro_precision": src["test"]["macro_precision"],
            "fp_rate": src["test"]["fp_rate"],
            "train_macro_f1": src["train"]["macro_f1"],
            "gap": src["gap"],
        })
    out = {}
    for k in SUMMARY_KEYS:
        vals = np.array([r[k] for r in rows], dtype=np.float64)
        out[k] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out


def _gap(train_f1: float, test_f1: float) -> float:
    return generalization_gap(train_f1, test_f1) if train_f1 > 0 else 0.0


def run_experiment(cfg: ExperimentConfig, train: FlowDataset | None = None, test: FlowDataset | None = None,
                   extra_inference: tuple[str, ...] = (), space: SearchSpace | None = None) -> dict:
    """Run the whole protocol and return the experiment report."""
    same_source = False
    if train is None or test is None:
        train, test, same_source = load_splits(cfg)
    space = space or SearchSpace()
    settings = cfg.settings
    seeds = cfg.seeds
    results = []
    for n_m in cfg.n_per_attack:
        subsets = []
        for s in range(cfg.repetitions):
            subset = sample_subset(train, SubsetSpec(cfg.n_benign, n_m, seeds.subset_seed(s)))
            if same_source and np.intersect1d(subset.row_ids, test.row_ids).size:
                raise DataError("subset rows leaked into the test split")
            folds = stratified_kfold(subset.labels, cfg.folds, seeds.cv_split)
            configs = _trial_configs(cfg, s, space)
            jobs = [(settings, c, subset, folds, derive_seed(seeds.search_seed(s), t))
                    for t, c in enumerate(configs)]
            if cfg.workers > 1:
                with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
                    trials = list(pool.map(_run_trial, jobs))
            else:
                trials = [_run_trial(j) for j in jobs]
            best = select_best(trials)
            final_seed = derive_seed(seeds.configuration, s, n_m)
            with np.errstate(all="ignore"):
                final = train_model(settings, trials[best]["config"], subset, final_seed)
            test_score = final.score(test)
            train_score = final.score(subset)
            record = {
                "subset": s,
                "n_per_attack": n_m,
                "subset_seed": seeds.subset_seed(s),
                "search_seed": seeds.search_seed(s),
                "trials": trials,
                "best_trial": best,
                "best_config": trials[best]["config"],
                "test": _score_dict(test_score),
                "train": _score_dict(train_score),
                "gap": _gap(train_score.macro_f1, test_score.macro_f1),
            }
            if extra_inference:
                record["variants"] = _variants(final, subset, test, extra_inference, final_seed)
            subsets.append(record)
        result = {"n_per_attack": n_m, "subsets": subsets, "summary": _summarise(subsets)}
        if extra_inference:
            result["variant_summary"] = {v: _summarise(subsets, v) for v in extra_inference}
        results.append(result)
    return {"label": cfg.label, "config": cfg.to_dict(), "results": results}


def _variants(final, subset, test, names, seed) -> dict:
    """Score several inference rules on one trained encoder."""
    ds = apply_normalizer(final.normalizer, subset)
    labels = task_labels(ds.labels, "binary") if final.settings.train_labels == "binary" else ds.labels
    out = {}
    for i, name in enumerate(names):
        with np.errstate(all="ignore"):
            bundle = attach_inference(final, ds, labels, name, Rng(derive_seed(seed, 100 + i)))
        te, tr = bundle.score(test), bundle.score(subset)
        out[name] = {"test": te.to_dict(), "train": tr.to_dict(), "gap": _gap(tr.macro_f1, te.macro_f1)}
    return out


ABLATION_AXES = ("mining", "distance", "inference", "benign_count", "rebalanced_inference",
                 "siamese_vs_triplet")
INFERENCE_VARIANTS = {
    "knn_hard": {"inference": "knn", "vote": "hard"},
    "knn_soft": {"inference": "knn", "vote": "soft"},
    "knn_weighted": {"inference": "knn", "vote": "weighted"},
    "prototype": {"inference": "prototype"},
    "linear_probe": {"inference": "linear_probe"},
}
REBALANCE_VARIANTS = ("knn", "balanced_knn", "linear_probe", "imbalanced_linear")


def _axis_overrides(axis: str, values) -> dict[str, dict]:
    if axis == "mining":
        return {v: {"mining": v} for v in (values or MINING)}
    if axis == "distance":
        return {v: {"metric": v} for v in (values or METRICS)}
    if axis == "inference":
        names = values or tuple(INFERENCE_VARIANTS)
        return {v: INFERENCE_VARIANTS[v] for v in names}
    if axis == "benign_count":
        return {str(v): {"n_benign": int(v)} for v in (values or BENIGN_COUNTS)}
    if axis == "siamese_vs_triplet":
        fams = values or ("triplet_offline", "siamese")
        return {v: {"family": v, "inference": "prototype"} for v in fams}
    raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")


def run_ablation(axis: str, base: ExperimentConfig, values=None, train: FlowDataset | None = None,
                 test: FlowDataset | None = None) -> dict[str, dict]:
    """One report per axis value, everything else held at ``base``.

    ``rebalanced_inference`` trains once and scores every inference variant on
    the same encoders.
    """
    if train is None or test is None:
        train, test, _ = load_splits(base)
    if axis == "rebalanced_inference":
        names = tuple(values or REBALANCE_VARIANTS)
        report = run_experiment(base, train, test, extra_inference=names)
        out = {}
        for name in names:
            results = []
            for res in report["results"]:
                subsets = [{**{k: v for k, v in sub.items() if k != "variants"}, **sub["variants"][name]}
                           for sub in res["subsets"]]
                results.append({"n_per_attack": res["n_per_attack"], "subsets": subsets,
                                "summary": res["variant_summary"][name]})
            out[name] = {"label": f"{base.label}/{name}", "config": report["config"], "axis": axis,
                         "value": name, "results": results}
        return out
    out = {}
    for value, changes in _axis_overrides(axis, values).items():
        cfg = replace(base, **changes)
        label = f"{base.label}/{axis}={value}"
        report = run_experiment(replace(cfg, name=label), train, test)
        report.update(axis=axis, value=value)
        out[value] = report
    return out


def dump_report(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=1) + "\n"


def run_dir(cfg: ExperimentConfig, root=None) -> Path:
    root = Path(root or os.environ.get(RUN_ROOT_ENV, "runs"))
    return root / f"{cfg.name or cfg.family}-{cfg.digest()}".replace("/", "_")


def metrics_csv(report: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["label", "n_per_attack", "subset", "macro_f1", "macro_recall", "macro_precision",
                     "fp_rate", "train_macro_f1", "gap"])
    for res in report["results"]:
        for sub in res["subsets"]:
            t = sub["test"]
            writer.writerow([report["label"], res["n_per_attack"], sub["subset"], repr(t["macro_f1"]),
                             repr(t["macro_recall"]), repr(t["macro_precision"]), repr(t["fp_rate"]),
                             repr(sub["train"]["macro_f1"]), repr(sub["gap"])])
    return buf.getvalue()


def write_report(report: dict, directory, stem: str = "report") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{stem}.json"
    path.write_text(dump_report(report), encoding="utf-8")
    (directory / f"{stem}.csv").write_text(metrics_csv(report), encoding="utf-8")
    return path


def collect_rows(directory) -> list[dict]:
    """Summary rows (label, n_per_attack, mean/std per metric) from every report in a run directory."""
    rows = []
    for path in sorted(Path(directory).glob("*.json")):
        report = json.loads(path.read_text(encoding="utf-8"))
        if "results" not in report:
            continue
        for res in report["results"]:
            row = {"model": report["label"], "n_per_attack": res["n_per_attack"]}
            for k in SUMMARY_KEYS:
                row[f"{k}_mean"] = res["summary"][k]["mean"]
                row[f"{k}_std"] = res["summary"][k]["std"]
            rows.append(row)
    rows.sort(key=lambda r: (r["n_per_attack"], r["model"]))
    return rows
