"""Reference click predictors (LR, Poly2, FM, MLP) and the shared training loop.

Every model reads the same field-sparse encoding of a prepared dataset: for
each row and feature field one global feature index and one value (1 for a
categorical id, the standardized value for a numeric field).
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn
from .data import DataError, Dataset, FieldKind, PredictionSet, SplitSpec, atomic_write_text
from .metrics import MetricError, auc_roc

log = logging.getLogger(__name__)

KINDS = ("lr", "poly2", "fm", "mlp")
MIN_DELTA = 1e-5
EMBED_INIT_STD = 0.01


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    embedding_dim: int = 16
    hidden_layers: tuple[int, ...] = (64, 64)
    dropout: float = 0.0
    pair_hash_buckets: int = 1 << 16
    l2_embedding_weight: float = 1e-6

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be >= 1")
        if self.pair_hash_buckets < 1:
            raise ValueError("pair_hash_buckets must be >= 1")
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))

    @property
    def name(self) -> str:
        return self.kind.upper() if self.kind != "poly2" else "Poly2"

    @classmethod
    def from_mapping(cls, d) -> "ModelSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model key(s): {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_layers"] = list(self.hidden_layers)
        return d


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 99
    early_stop_patience: int = 2
    batch_size: int = 4096
    learning_rate: float = 0.001
    seeds: tuple[int, ...] = (2019, 2020)
    monitor_metric: str = "auc"

    def __post_init__(self):
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.monitor_metric not in ("auc", "logloss"):
            raise ValueError(f"unknown monitor metric {self.monitor_metric!r}")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    @classmethod
    def from_mapping(cls, d) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train key(s): {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d


# -- encoding -----------------------------------------------------------------


@dataclass
class FeatureLayout:
    """Global feature indexing for a prepared schema."""

    fields: list[str]
    kinds: list[str]
    offsets: np.ndarray
    sizes: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    @property
    def n_features(self) -> int:
        return int(self.offsets[-1] + self.sizes[-1]) if len(self.sizes) else 0

    @property
    def n_fields(self) -> int:
        return len(self.fields)

    @classmethod
    def from_dataset(cls, dataset: Dataset, fit_rows=None) -> "FeatureLayout":
        names, kinds, sizes, means, stds = [], [], [], [], []
        for f in dataset.feature_fields:
            if f.kind is FieldKind.TEMPORAL:
                continue
            if f.kind is FieldKind.CATEGORICAL:
                if not f.encoded:
                    raise DataError(f"field {f.name!r} must be vocabulary-encoded before training")
                sizes.append(f.cardinality)
                means.append(0.0)
                stds.append(1.0)
            else:
                col = dataset.columns[f.name]
                col = col if fit_rows is None else col[fit_rows]
                sd = float(col.std())
                sizes.append(1)
                means.append(float(col.mean()))
                stds.append(sd if sd > 0 else 1.0)
            names.append(f.name)
            kinds.append(f.kind.value)
        sizes_a = np.asarray(sizes, dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes_a)[:-1]]).astype(np.int64)
        return cls(names, kinds, offsets, sizes_a, np.asarray(means), np.asarray(stds))

    def encode(self, dataset: Dataset, rows=None) -> tuple[np.ndarray, np.ndarray]:
        n = len(dataset) if rows is None else len(rows)
        idx = np.empty((n, self.n_fields), dtype=np.int64)
        val = np.ones((n, self.n_fields))
        for j, (name, kind) in enumerate(zip(self.fields, self.kinds)):
            try:
                col = dataset.columns[name]
                f = dataset.field(name)
            except KeyError:
                raise DataError(f"dataset lacks field {name!r}") from None
            if f.kind.value != kind:
                raise DataError(f"field {name!r} is {f.kind.value}, model expects {kind}")
            col = col if rows is None else col[rows]
            if kind == FieldKind.CATEGORICAL.value:
                if f.cardinality != self.sizes[j]:
                    raise DataError(f"field {name!r} cardinality {f.cardinality} != {self.sizes[j]}")
                idx[:, j] = self.offsets[j] + col
            else:
                idx[:, j] = self.offsets[j]
                val[:, j] = (col - self.means[j]) / self.stds[j]
        return idx, val

    def to_arrays(self) -> dict:
        return {"layout_offsets": self.offsets, "layout_sizes": self.sizes,
                "layout_means": self.means, "layout_stds": self.stds}


# -- scoring ------------------------------------------------------------------

_M1 = np.uint64(0x9E3779B97F4A7C15)
_M2 = np.uint64(0xC2B2AE3D27D4EB4F)
_M3 = np.uint64(0x94D049BB133111EB)


def pair_hash(i, j, buckets: int):
    """Deterministic symmetric hash of a feature pair into ``buckets`` slots."""
    i = np.asarray(i, dtype=np.uint64)
    j = np.asarray(j, dtype=np.uint64)
    lo, hi = np.minimum(i, j), np.maximum(i, j)
    with np.errstate(over="ignore"):
        h = lo * _M1 ^ (hi + np.uint64(1)) * _M2
        h ^= h >> np.uint64(31)
        h *= _M3
        h ^= h >> np.uint64(29)
    out = (h % np.uint64(buckets)).astype(np.int64)
    return out if out.ndim else int(out)


def _check_ids(idx: np.ndarray, n_features: int):
    if idx.size and (idx.min() < 0 or idx.max() >= n_features):
        raise DataError("unknown feature id")


def _batch(idx, val):
    idx = np.atleast_2d(np.asarray(idx, dtype=np.int64))
    val = np.ones(idx.shape) if val is None else np.atleast_2d(np.asarray(val, dtype=np.float64))
    return idx, val


def _unbatch(x, like):
    return float(x[0]) if np.ndim(like) == 1 else x


def lr_score(weights: dict, idx, val=None):
    """w0 + sum_i w_i x_i over the active features of each row."""
    i2, v2 = _batch(idx, val)
    _check_ids(i2, len(weights["w"]))
    return _unbatch(weights["w0"][0] + np.sum(weights["w"][i2] * v2, axis=1), idx)


def _pairs(n_fields: int):
    a, b = np.triu_indices(n_fields, k=1)
    return a, b


def poly2_score(weights: dict, idx, val=None):
    i2, v2 = _batch(idx, val)
    _check_ids(i2, len(weights["w"]))
    a, b = _pairs(i2.shape[1])
    h = pair_hash(i2[:, a], i2[:, b], len(weights["w2"]))
    pair = np.sum(weights["w2"][h] * v2[:, a] * v2[:, b], axis=1)
    return _unbatch(lr_score(weights, i2, v2) + pair, idx)


def fm_score(params: dict, idx, val=None):
    """Linear terms plus 1/2 sum_d [(sum_i v_id x_i)^2 - sum_i v_id^2 x_i^2]."""
    i2, v2 = _batch(idx, val)
    _check_ids(i2, len(params["V"]))
    e = params["V"][i2] * v2[..., None]
    s = e.sum(axis=1)
    pair = 0.5 * np.sum(s * s - np.sum(e * e, axis=1), axis=1)
    return _unbatch(lr_score(params, i2, v2) + pair, idx)


def mlp_score(net: nn.DenseNet, embeddings: np.ndarray, idx, val=None):
    i2, v2 = _batch(idx, val)
    _check_ids(i2, len(embeddings))
    x = (embeddings[i2] * v2[..., None]).reshape(len(i2), -1)
    out, _ = net.forward(x, "eval")
    return _unbatch(out[:, 0], idx)


def _scatter(rows: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    """Sum ``rows`` (shape (m, k)) into an (n, k) table at positions ``idx`` (shape (m,))."""
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    starts = np.flatnonzero(np.r_[True, sidx[1:] != sidx[:-1]])
    out = np.zeros((n, rows.shape[1]))
    out[sidx[starts]] = np.add.reduceat(rows[order], starts, axis=0)
    return out


class CTRModel:
    """Parameters plus forward/backward for one of the four reference models."""

    def __init__(self, spec: ModelSpec, layout: FeatureLayout, params: dict, net: nn.DenseNet | None = None):
        self.spec = spec
        self.layout = layout
        self.params = params
        self.net = net

    @classmethod
    def init(cls, spec: ModelSpec, layout: FeatureLayout, rng: np.random.Generator | None = None,
             zero: bool = False, base_rate: float | None = None) -> "CTRModel":
        """Fresh parameters; the intercept (MLP: output bias) starts at logit(base_rate) when given."""
        nf, k = layout.n_features, spec.embedding_dim
        b0 = 0.0
        if base_rate is not None:
            r = min(max(base_rate, 1e-6), 1 - 1e-6)
            b0 = math.log(r / (1 - r))
        params = {"w0": np.full(1, b0), "w": np.zeros(nf)}
        net = None
        if spec.kind == "poly2":
            params["w2"] = np.zeros(spec.pair_hash_buckets)
        elif spec.kind == "fm":
            params["V"] = np.zeros((nf, k)) if zero else rng.normal(0.0, EMBED_INIT_STD, (nf, k))
        elif spec.kind == "mlp":
            del params["w0"], params["w"]
            params["E"] = np.zeros((nf, k)) if zero else rng.normal(0.0, EMBED_INIT_STD, (nf, k))
            sizes = [layout.n_fields * k, *spec.hidden_layers, 1]
            net = nn.DenseNet.create(sizes, rng, dropout_rate=spec.dropout, zero=zero)
            net.biases[-1][:] = b0
        return cls(spec, layout, params, net)

    @property
    def arrays(self) -> list[np.ndarray]:
        """Every trainable array, in a fixed order."""
        out = [self.params[k] for k in sorted(self.params)]
        return out + (self.net.params if self.net is not None else [])

    def snapshot(self) -> list[np.ndarray]:
        return [a.copy() for a in self.arrays]

    def restore(self, snap: Sequence[np.ndarray]) -> None:
        for a, s in zip(self.arrays, snap):
            a[...] = s

    def logits(self, idx, val, mode: str = "eval", rng=None):
        """Return ``(logit, cache)`` for a batch."""
        kind = self.spec.kind
        if kind == "mlp":
            e = self.params["E"][idx] * val[..., None]
            out, net_cache = self.net.forward(e.reshape(len(idx), -1), mode, rng)
            return out[:, 0], (idx, val, e, net_cache)
        w = self.params
        logit = w["w0"][0] + np.sum(w["w"][idx] * val, axis=1)
        extra = None
        if kind == "poly2":
            a, b = _pairs(idx.shape[1])
            h = pair_hash(idx[:, a], idx[:, b], len(w["w2"]))
            vv = val[:, a] * val[:, b]
            logit = logit + np.sum(w["w2"][h] * vv, axis=1)
            extra = (h, vv)
        elif kind == "fm":
            e = w["V"][idx] * val[..., None]
            s = e.sum(axis=1)
            logit = logit + 0.5 * np.sum(s * s - np.sum(e * e, axis=1), axis=1)
            extra = (e, s)
        return logit, (idx, val, extra)

    def gradients(self, cache, dlogit: np.ndarray, l2: float = 0.0) -> list[np.ndarray]:
        """Gradients aligned with :attr:`arrays`; ``l2`` regularizes looked-up embeddings."""
        kind = self.spec.kind
        nf = self.layout.n_features
        n = len(dlogit)
        grads = {}
        if kind == "mlp":
            idx, val, e, net_cache = cache
            net_grads, dx = self.net.backward(net_cache, dlogit[:, None])
            k = e.shape[-1]
            de = dx.reshape(e.shape) * val[..., None]
            if l2:
                de = de + (2.0 * l2 / n) * self.params["E"][idx]
            grads["E"] = _scatter(de.reshape(-1, k), idx.ravel(), nf)
            return [grads[k_] for k_ in sorted(self.params)] + net_grads
        idx, val, extra = cache
        grads["w0"] = np.array([dlogit.sum()])
        grads["w"] = np.bincount(idx.ravel(), weights=(dlogit[:, None] * val).ravel(), minlength=nf)
        if kind == "poly2":
            h, vv = extra
            grads["w2"] = np.bincount(h.ravel(), weights=(dlogit[:, None] * vv).ravel(),
                                      minlength=len(self.params["w2"]))
        elif kind == "fm":
            e, s = extra
            k = e.shape[-1]
            de = dlogit[:, None, None] * (s[:, None, :] - e) * val[..., None]
            if l2:
                de = de + (2.0 * l2 / n) * self.params["V"][idx]
            grads["V"] = _scatter(de.reshape(-1, k), idx.ravel(), nf)
        return [grads[k_] for k_ in sorted(self.params)]

    def predict_proba(self, idx, val, batch_size: int = 65536) -> np.ndarray:
        out = [self.logits(idx[s : s + batch_size], val[s : s + batch_size])[0]
               for s in range(0, len(idx), batch_size)]
        return nn.sigmoid(np.concatenate(out)) if out else np.empty(0)

    def save(self, path) -> Path:
        arrays = {f"param:{k}": v for k, v in self.params.items()}
        arrays.update(self.layout.to_arrays())
        meta = {"model": self.spec.to_dict(), "fields": self.layout.fields, "kinds": self.layout.kinds}
        nets = {"mlp": self.net} if self.net is not None else {}
        return nn.save_checkpoint(path, nets, arrays, meta)

    @classmethod
    def load(cls, path) -> "CTRModel":
        nets, arrays, meta = nn.load_checkpoint(path)
        spec = ModelSpec.from_mapping(meta["model"])
        layout = FeatureLayout(meta["fields"], meta["kinds"], arrays["layout_offsets"], arrays["layout_sizes"],
                               arrays["layout_means"], arrays["layout_stds"])
        params = {k.split(":", 1)[1]: v for k, v in arrays.items() if k.startswith("param:")}
        return cls(spec, layout, params, nets.get("mlp"))


# -- training -----------------------------------------------------------------


class EarlyStopping:
    """Tracks the best monitor value; stops after ``patience`` epochs without
    an improvement larger than ``min_delta``."""

    def __init__(self, patience: int, higher_is_better: bool = True, min_delta: float = MIN_DELTA):
        self.patience = patience
        self.sign = 1.0 if higher_is_better else -1.0
        self.min_delta = min_delta
        self.best: float | None = None
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record one epoch; returns True if it is the new best."""
        if self.best is None or self.sign * (value - self.best) > self.min_delta:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@dataclass
class TrainedModel:
    model: CTRModel
    history: list[dict]
    best_epoch: int
    seed: int


def _validation_monitor(model: CTRModel, idx, val, y, metric: str) -> float:
    p = model.predict_proba(idx, val)
    if metric == "auc":
        return auc_roc(PredictionSet(y, p))
    pc = np.clip(p, 1e-7, 1 - 1e-7)
    return float(-np.mean(y * np.log(pc) + (1 - y) * np.log(1 - pc)))


def train_model(
    spec: ModelSpec,
    dataset: Dataset,
    split: SplitSpec,
    config: TrainConfig = TrainConfig(),
    seed: int | None = None,
    monitor_fn: Callable[[CTRModel, int], float] | None = None,
    validation: Dataset | None = None,
) -> TrainedModel:
    """Mini-batch Adam on BCE with early stopping on the validation monitor.

    The returned model carries the parameters of the best epoch. ``monitor_fn``
    replaces the validation metric (called with the model and the epoch
    number). With ``validation`` given, ``split.validation`` indexes into that
    dataset instead of ``dataset``.
    """
    seed = config.seeds[0] if seed is None else seed
    if len(split.train) == 0 or len(split.validation) == 0:
        raise DataError("empty train or validation set")
    layout = FeatureLayout.from_dataset(dataset, split.train)
    rng = np.random.default_rng(seed)
    tr_idx, tr_val = layout.encode(dataset, split.train)
    tr_y = dataset.labels[split.train].astype(np.float64)
    model = CTRModel.init(spec, layout, rng, base_rate=float(tr_y.mean()))
    vsource = dataset if validation is None else validation
    va_idx, va_val = layout.encode(vsource, split.validation)
    va_y = vsource.labels[split.validation]
    if monitor_fn is None and config.monitor_metric == "auc" and len(np.unique(va_y)) < 2:
        raise MetricError("validation set has a single class; AUC-ROC monitor undefined")

    arrays = model.arrays
    state = nn.AdamState.like(arrays, lr=config.learning_rate)
    l2 = spec.l2_embedding_weight if spec.kind in ("fm", "mlp") else 0.0
    stopper = EarlyStopping(config.early_stop_patience, higher_is_better=config.monitor_metric == "auc")
    best = model.snapshot()
    history = []
    n = len(tr_y)
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, config.batch_size):
            b = order[s : s + config.batch_size]
            logit, cache = model.logits(tr_idx[b], tr_val[b], "train", rng)
            loss, dlogit = nn.bce_with_logits(logit, tr_y[b])
            nn.adam_step(arrays, model.gradients(cache, dlogit, l2), state)
            total += loss * len(b)
        if monitor_fn is not None:
            monitor = float(monitor_fn(model, epoch))
        else:
            monitor = _validation_monitor(model, va_idx, va_val, va_y, config.monitor_metric)
        improved = stopper.update(epoch, monitor)
        if improved:
            best = model.snapshot()
        history.append({"epoch": epoch, "train_loss": total / n, "monitor": monitor, "best": improved})
        log.debug("%s seed=%d epoch=%d loss=%.5f monitor=%.5f", spec.kind, seed, epoch, total / n, monitor)
        if stopper.should_stop:
            break
    model.restore(best)
    return TrainedModel(model, history, stopper.best_epoch, seed)


def predict(model: CTRModel, dataset: Dataset, rows=None, segment_field: str | None = None) -> PredictionSet:
    """Click probabilities for ``rows`` (all rows by default), in order."""
    idx, val = model.layout.encode(dataset, rows)
    y = dataset.labels if rows is None else dataset.labels[rows]
    z = None
    if segment_field is not None:
        z = dataset.columns[segment_field]
        z = z if rows is None else z[rows]
    return PredictionSet(y, model.predict_proba(idx, val), z)


def write_history(history: Sequence[dict], path) -> None:
    lines = ["epoch,train_loss,monitor,best"]
    lines += [f"{h['epoch']},{h['train_loss']!r},{h['monitor']!r},{int(h['best'])}" for h in history]
    atomic_write_text(path, "\n".join(lines) + "\n")
