"""Hyperparameter sampling, per-family training loops and the serialisable model bundle."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .contrastive import (contrastive_pair_loss, mine, offline_triplet_loss, sample_offline_pairs,
                          sample_offline_triplets)
from .data import (BalancedSampler, FlowDataset, Normalizer, apply_normalizer, compute_sample_weights,
                   fit_normalizer)
from .errors import ConfigError, DataError, NumericError
from .inference import (EmbeddingIndex, LinearProbe, build_index, knn_predict, linear_probe,
                        random_prototype_predict, rebalance_index)
from .metrics import ScoreReport, score_labels
from .rng import MASK64, Rng, splitmix64

FAMILIES = ("triplet", "triplet_offline", "siamese", "mlp", "knn")
INFERENCE = ("knn", "balanced_knn", "prototype", "linear_probe", "imbalanced_linear")
CONTRASTIVE = ("triplet", "triplet_offline", "siamese")
BUNDLE_VERSION = 1
MAX_REDRAWS = 1000


def derive_seed(*parts: int) -> int:
    """Mix integers into one 64-bit seed with splitmix64."""
    x = 0
    for p in parts:
        _, x = splitmix64(x ^ (int(p) & MASK64))
    return x


@dataclass(frozen=True)
class SearchSpace:
    lr: tuple[float, float] = (1e-6, 1e-3)
    batch_size: tuple[int, ...] = (32, 64, 128, 256, 512, 1024)
    weight_decay: tuple[float, float] = (1e-6, 0.05)
    neurons: tuple[int, ...] = (32, 64, 128, 256, 512, 1024)
    depth: tuple[int, ...] = (1, 2, 3, 4)
    dropout: tuple[float, ...] = (0.1, 0.2, 0.3)
    f_out: tuple[int, ...] = (8, 16, 32, 64, 128)
    margin: tuple[float, ...] = tuple(round(0.1 * i, 1) for i in range(1, 11))
    k: tuple[int, ...] = (1, 2, 4, 8, 16, 32, 64, 128)


def _log_uniform(rng: Rng, lo: float, hi: float) -> float:
    return math.exp(rng.uniform(math.log(lo), math.log(hi)))


def _pick(rng: Rng, options):
    return options[rng.integers(len(options))]


def sample_config(space: SearchSpace, rng: Rng) -> dict:
    """One random-search trial. Every field is drawn, in a fixed order, whatever the model family."""
    return {
        "lr": _log_uniform(rng, *space.lr),
        "batch_size": int(_pick(rng, space.batch_size)),
        "weight_decay": _log_uniform(rng, *space.weight_decay),
        "neurons": int(_pick(rng, space.neurons)),
        "depth": int(_pick(rng, space.depth)),
        "dropout": float(_pick(rng, space.dropout)),
        "f_out": int(_pick(rng, space.f_out)),
        "margin": float(_pick(rng, space.margin)),
        "k": int(_pick(rng, space.k)),
    }


@dataclass
class TrainSettings:
    """Everything about a training run that is not a searched hyperparameter."""

    family: str = "triplet"
    mining: str = "batch_all"
    metric: str = "euclidean"
    inference: str = "knn"
    vote: str = "hard"
    tau: float = 0.1
    epochs: int = 50
    offline_count: int = 30000
    probe_lr: float = 1e-2
    task: str = "multiclass"
    train_labels: str = "multiclass"
    triplet_average: str = "valid"  # batch-all denominator: all valid triplets or only active ones
    include_self: bool = False  # batch-all admits p == a

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.inference not in INFERENCE:
            raise ConfigError(f"unknown inference {self.inference!r}; expected one of {INFERENCE}")
        if self.task not in ("binary", "multiclass"):
            raise ConfigError("task must be 'binary' or 'multiclass'")
        if self.train_labels not in ("binary", "multiclass"):
            raise ConfigError("train_labels must be 'binary' or 'multiclass'")
        if self.train_labels == "binary" and self.task != "binary":
            raise ConfigError("binary training labels only make sense for the binary task")
        if self.triplet_average not in ("valid", "active"):
            raise ConfigError("triplet_average must be 'valid' or 'active'")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")


@dataclass
class ModelBundle:
    """A trained model: normaliser, encoder/head and the inference state needed to predict."""

    settings: TrainSettings
    config: dict
    class_map: tuple[str, ...]
    normalizer: Normalizer
    seed: int
    encoder: nn.EncoderParams | None = None
    index: EmbeddingIndex | None = None
    head: nn.EncoderParams | None = None
    loss_history: list[float] = field(default_factory=list)
    train_score: dict | None = None
    data_classes: tuple[str, ...] = ()

    def embed(self, X: np.ndarray) -> np.ndarray:
        Xn = self.normalizer.transform(X)
        return Xn if self.encoder is None else nn.embed(self.encoder, Xn)

    def predict(self, X: np.ndarray, rng: Rng | None = None) -> np.ndarray:
        """Class ids in the bundle's training label space."""
        s = self.settings
        Xn = self.normalizer.transform(X)
        if s.family == "mlp":
            return np.argmax(nn.embed(self.encoder, Xn), axis=1)
        Z = Xn if self.encoder is None else nn.embed(self.encoder, Xn)
        if not np.all(np.isfinite(Z)):
            raise NumericError("non-finite test embedding")
        if s.inference in ("linear_probe", "imbalanced_linear"):
            return LinearProbe(self.head).predict(Z)
        if s.inference == "prototype":
            return random_prototype_predict(self.index, Z, rng or Rng(derive_seed(self.seed, 2)))
        k = min(int(self.config.get("k", 1)), len(self.index))
        return knn_predict(self.index, Z, k, s.vote, s.tau)[0]

    def predict_task(self, X: np.ndarray, rng: Rng | None = None) -> np.ndarray:
        pred = self.predict(X, rng)
        return (pred != 0).astype(np.int64) if self.settings.task == "binary" else pred

    def score(self, ds: FlowDataset, rng: Rng | None = None) -> ScoreReport:
        """Score on ``ds`` (labels in the dataset's full multiclass space)."""
        y = task_labels(ds.labels, self.settings.task)
        C = 2 if self.settings.task == "binary" else len(ds.class_map)
        return score_labels(y, self.predict_task(ds.features, rng), C)

    def to_dict(self) -> dict:
        return {
            "format_version": BUNDLE_VERSION,
            "settings": vars(self.settings),
            "config": self.config,
            "class_map": list(self.class_map),
            "normalizer": self.normalizer.to_dict(),
            "seed": self.seed,
            "encoder": None if self.encoder is None else self.encoder.to_dict(),
            "index": None if self.index is None else self.index.to_dict(),
            "head": None if self.head is None else self.head.to_dict(),
            "loss_history": self.loss_history,
            "train_score": self.train_score,
            "data_classes": list(self.data_classes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelBundle":
        if d.get("format_version") != BUNDLE_VERSION:
            raise DataError(f"unsupported bundle version {d.get('format_version')!r}")
        return cls(
            settings=TrainSettings(**d["settings"]),
            config=d["config"],
            class_map=tuple(d["class_map"]),
            normalizer=Normalizer.from_dict(d["normalizer"]),
            seed=int(d["seed"]),
            encoder=None if d["encoder"] is None else nn.EncoderParams.from_dict(d["encoder"]),
            index=None if d["index"] is None else EmbeddingIndex.from_dict(d["index"]),
            head=None if d["head"] is None else nn.EncoderParams.from_dict(d["head"]),
            loss_history=list(d["loss_history"]),
            train_score=d["train_score"],
            data_classes=tuple(d["data_classes"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ModelBundle":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def task_labels(labels: np.ndarray, task: str) -> np.ndarray:
    return (labels != 0).astype(np.int64) if task == "binary" else np.asarray(labels, dtype=np.int64)


def _has_triplet(y: np.ndarray) -> bool:
    counts = np.bincount(y)
    return np.count_nonzero(counts) >= 2 and counts.max() >= 2


def _check_finite(loss: float, params: nn.EncoderParams) -> None:
    if not math.isfinite(loss) or not params.all_finite():
        raise NumericError("training diverged to non-finite values")


def _encoder_cfg(X: np.ndarray, config: dict, f_out: int) -> nn.EncoderConfig:
    return nn.EncoderConfig(X.shape[1], int(config["neurons"]), int(config["depth"]), f_out,
                            float(config["dropout"]))


def _train_online_triplet(X, y, config, settings, rng, history):
    params = nn.init_encoder(_encoder_cfg(X, config, int(config["f_out"])), rng)
    B = int(config["batch_size"])
    steps_per_epoch = math.ceil(len(X) / B)
    state = nn.OptimState.for_params(params, float(config["lr"]), settings.epochs * steps_per_epoch,
                                     float(config["weight_decay"]))
    sampler = BalancedSampler(compute_sample_weights(y))
    margin = float(config["margin"])
    for _ in range(settings.epochs):
        epoch_loss = 0.0
        for _ in range(steps_per_epoch):
            for _ in range(MAX_REDRAWS):
                batch = sampler.draw(B, rng)
                if _has_triplet(y[batch]):
                    break
            else:
                raise DataError("could not draw a batch containing a valid triplet")
            Z, trace = nn.forward(params, X[batch], True, rng)
            kw = ({"average": settings.triplet_average, "include_self": settings.include_self}
                  if settings.mining == "batch_all" else {})
            out = mine(settings.mining, Z, y[batch], margin, settings.metric, **kw)
            nn.adamw_step(state, params, nn.backward(params, trace, out.grad_Z))
            _check_finite(out.loss, params)
            epoch_loss += out.loss
        history.append(epoch_loss / steps_per_epoch)
    return params


def _train_offline(X, y, config, settings, rng, history):
    """Fixed pre-sampled triplets (triplet_offline) or pairs (siamese); one epoch is one pass."""
    params = nn.init_encoder(_encoder_cfg(X, config, int(config["f_out"])), rng)
    B = int(config["batch_size"])
    margin = float(config["margin"])
    if settings.family == "siamese":
        items, sim = sample_offline_pairs(y, settings.offline_count, rng)
    else:
        items = sample_offline_triplets(y, settings.offline_count, rng)
    width = items.shape[1]
    steps_per_epoch = math.ceil(len(items) / B)
    state = nn.OptimState.for_params(params, float(config["lr"]), settings.epochs * steps_per_epoch,
                                     float(config["weight_decay"]))
    for _ in range(settings.epochs):
        order = rng.permutation(len(items))
        epoch_loss = 0.0
        for s in range(steps_per_epoch):
            sel = order[s * B:(s + 1) * B]
            n = len(sel)
            rows = items[sel].T.reshape(-1)  # role-major: all first members, then second, ...
            Z, trace = nn.forward(params, X[rows], True, rng)
            parts = [Z[i * n:(i + 1) * n] for i in range(width)]
            if settings.family == "siamese":
                loss, gi, gj = contrastive_pair_loss(parts[0], parts[1], sim[sel], margin, settings.metric)
                dZ = np.concatenate([gi, gj])
            else:
                loss, ga, gp, gn = offline_triplet_loss(*parts, margin, settings.metric)
                dZ = np.concatenate([ga, gp, gn])
            nn.adamw_step(state, params, nn.backward(params, trace, dZ))
            _check_finite(loss, params)
            epoch_loss += loss
        history.append(epoch_loss / steps_per_epoch)
    return params


def _train_mlp(X, y, n_classes, config, settings, rng, history):
    params = nn.init_encoder(_encoder_cfg(X, config, n_classes), rng)
    B = int(config["batch_size"])
    steps_per_epoch = math.ceil(len(X) / B)
    state = nn.OptimState.for_params(params, float(config["lr"]), settings.epochs * steps_per_epoch,
                                     float(config["weight_decay"]))
    sampler = BalancedSampler(compute_sample_weights(y))
    for _ in range(settings.epochs):
        epoch_loss = 0.0
        for _ in range(steps_per_epoch):
            batch = sampler.draw(B, rng)
            logits, trace = nn.forward(params, X[batch], True, rng)
            loss, dlogits = nn.softmax_xent(logits, y[batch])
            nn.adamw_step(state, params, nn.backward(params, trace, dlogits))
            _check_finite(loss, params)
            epoch_loss += loss
        history.append(epoch_loss / steps_per_epoch)
    return params


def attach_inference(bundle: ModelBundle, ds_norm: FlowDataset, labels: np.ndarray, inference: str,
                     rng: Rng) -> ModelBundle:
    """Build the index or probe head for ``inference`` on top of a trained encoder.

    Returns a new bundle sharing the encoder, so one encoder can serve several
    inference variants.
    """
    s = TrainSettings(**{**vars(bundle.settings), "inference": inference})
    out = ModelBundle(s, bundle.config, bundle.class_map, bundle.normalizer, bundle.seed,
                      encoder=bundle.encoder, loss_history=bundle.loss_history,
                      data_classes=bundle.data_classes)
    ref = FlowDataset(ds_norm.features, labels, bundle.class_map, ds_norm.feature_names, ds_norm.row_ids)
    if s.family == "mlp":
        return out
    index = build_index(bundle.encoder, ref, s.metric)
    if inference == "balanced_knn":
        index = rebalance_index(index, rng)
    if inference in ("linear_probe", "imbalanced_linear"):
        c = bundle.config
        probe = linear_probe(index.Z_ref, index.labels, len(bundle.class_map), rng,
                             epochs=s.epochs, batch_size=int(c.get("batch_size", 128)), lr=s.probe_lr,
                             weight_decay=float(c.get("weight_decay", 0.0)),
                             balanced=inference == "linear_probe")
        out.head = probe.params
    else:
        out.index = index
    return out


def train_model(settings: TrainSettings, config: dict, subset: FlowDataset, seed: int,
                normalizer: Normalizer | None = None) -> ModelBundle:
    """Fit one model on ``subset`` (raw features; the normaliser is fitted here unless given).

    With ``settings.train_labels == "binary"`` the subset is collapsed to
    benign/malicious before training.
    """
    nz = normalizer or fit_normalizer(subset)
    ds = apply_normalizer(nz, subset)
    if settings.train_labels == "binary":
        labels = task_labels(ds.labels, "binary")
        class_map = ("benign", "malicious")
    else:
        labels = ds.labels
        class_map = ds.class_map
    rng = Rng(seed)
    history: list[float] = []
    X = ds.features
    fam = settings.family
    encoder = None
    if fam == "triplet":
        encoder = _train_online_triplet(X, labels, config, settings, rng, history)
    elif fam in ("triplet_offline", "siamese"):
        encoder = _train_offline(X, labels, config, settings, rng, history)
    elif fam == "mlp":
        encoder = _train_mlp(X, labels, len(class_map), config, settings, rng, history)
    bundle = ModelBundle(settings, dict(config), tuple(class_map), nz, int(seed), encoder=encoder,
                         loss_history=history, data_classes=subset.class_map)
    if fam == "mlp":
        return bundle
    return attach_inference(bundle, ds, labels, settings.inference, Rng(derive_seed(seed, 1)))
