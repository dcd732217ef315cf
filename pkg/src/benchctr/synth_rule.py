"""Rule-based synthetic click logs.

Rows are i.i.d.: categorical features from fixed categorical distributions,
a truncated-normal age, a truncated log-normal price, and a click drawn from
Bernoulli(base_rate + sum_k alpha_k * I_k(x)), where I_k sums the weighted
products of per-feature similarity scores over the order-k clusters.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Union

import numpy as np

from .data import Dataset, DataError, FieldKind, FieldSchema, Instance, atomic_write_text, content_hash, write_dataset

SHARD_SIZE = 50_000
DEFAULT_CONFIG = "rule_default.json"

Value = Union[str, float]


@dataclass(frozen=True)
class CategoricalSpec:
    name: str
    values: tuple[str, ...]
    probs: tuple[float, ...]

    @classmethod
    def zipf(cls, name: str, cardinality: int, exponent: float) -> "CategoricalSpec":
        w = 1.0 / np.arange(1, cardinality + 1) ** exponent
        return cls(name, tuple(f"{name}_{i}" for i in range(cardinality)), tuple((w / w.sum()).tolist()))


@dataclass(frozen=True)
class TruncNormalSpec:
    name: str = "age"
    mean: float = 35.0
    std: float = 12.0
    lo: float = 0.0
    hi: float = 100.0


@dataclass(frozen=True)
class LogNormalSpec:
    name: str = "price"
    mu_log: float = 4.5
    sigma_log: float = 1.2
    lo: float = 1.0
    hi: float = 30000.0


Spec = Union[CategoricalSpec, TruncNormalSpec, LogNormalSpec]


@dataclass(frozen=True)
class Cluster:
    weight: float
    targets: Mapping[str, Value]

    @property
    def order(self) -> int:
        return len(self.targets)


@dataclass
class RuleGenConfig:
    categorical: list[CategoricalSpec]
    age: TruncNormalSpec
    price: LogNormalSpec
    clusters: dict[int, list[Cluster]]
    order_weights: list[float]
    base_rate: float = 0.01
    similarity_scales: dict[str, float] = field(default_factory=dict)
    label: str = "click"
    version: str = ""

    @property
    def K(self) -> int:
        return len(self.order_weights)

    @property
    def numeric_specs(self) -> list[Spec]:
        return [self.age, self.price]

    @property
    def field_names(self) -> list[str]:
        return [c.name for c in self.categorical] + [self.age.name, self.price.name]

    def kind_of(self, name: str) -> FieldKind:
        if any(c.name == name for c in self.categorical):
            return FieldKind.CATEGORICAL
        if name in (self.age.name, self.price.name):
            return FieldKind.NUMERIC
        raise DataError(f"unknown feature {name!r}")

    def validate(self) -> None:
        names = self.field_names
        if len(set(names)) != len(names) or self.label in names:
            raise DataError("feature and label names must be unique")
        for c in self.categorical:
            p = np.asarray(c.probs)
            if len(p) != len(c.values) or len(p) == 0:
                raise DataError(f"{c.name}: values and probabilities differ in length")
            if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
                raise DataError(f"{c.name}: probabilities must be non-negative and sum to 1")
        for spec in self.numeric_specs:
            if not spec.lo < spec.hi:
                raise DataError(f"{spec.name}: empty truncation interval")
        if not 0.0 <= self.base_rate <= 1.0:
            raise DataError("base_rate must lie in [0, 1]")
        values = {c.name: set(c.values) for c in self.categorical}
        for k, clusters in self.clusters.items():
            if not 1 <= k <= self.K:
                raise DataError(f"cluster order {k} outside 1..K={self.K}")
            for g in clusters:
                if g.order != k:
                    raise DataError(f"order-{k} cluster references {g.order} features")
                for name, target in g.targets.items():
                    kind = self.kind_of(name)
                    if kind is FieldKind.CATEGORICAL and target not in values[name]:
                        raise DataError(f"target {target!r} is not a value of {name!r}")
                    if kind is FieldKind.NUMERIC and self.similarity_scales.get(name, 0) <= 0:
                        raise DataError(f"numeric feature {name!r} needs a positive similarity scale")

    def schema(self) -> tuple[FieldSchema, ...]:
        fields_ = [FieldSchema(c.name, FieldKind.CATEGORICAL) for c in self.categorical]
        fields_ += [FieldSchema(s.name, FieldKind.NUMERIC) for s in self.numeric_specs]
        return tuple(fields_) + (FieldSchema(self.label, FieldKind.LABEL),)

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": self.version,
            "label": self.label,
            "base_rate": self.base_rate,
            "order_weights": list(self.order_weights),
            "categorical": [{"name": c.name, "values": list(c.values), "probs": list(c.probs)}
                            for c in self.categorical],
            "age": vars(self.age).copy(),
            "price": vars(self.price).copy(),
            "similarity_scales": dict(self.similarity_scales),
            "clusters": {str(k): [{"weight": g.weight, "targets": dict(g.targets)} for g in gs]
                         for k, gs in sorted(self.clusters.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RuleGenConfig":
        cats = []
        for c in d["categorical"]:
            if "zipf" in c:
                cats.append(CategoricalSpec.zipf(c["name"], int(c["cardinality"]), float(c["zipf"])))
            else:
                cats.append(CategoricalSpec(c["name"], tuple(c["values"]), tuple(float(p) for p in c["probs"])))
        clusters = {int(k): [Cluster(float(g["weight"]), dict(g["targets"])) for g in gs]
                    for k, gs in d.get("clusters", {}).items()}
        cfg = cls(
            categorical=cats,
            age=TruncNormalSpec(**d.get("age", {})),
            price=LogNormalSpec(**d.get("price", {})),
            clusters=clusters,
            order_weights=[float(a) for a in d["order_weights"]],
            base_rate=float(d.get("base_rate", 0.01)),
            similarity_scales={k: float(v) for k, v in d.get("similarity_scales", {}).items()},
            label=d.get("label", "click"),
            version=str(d.get("version", "")),
        )
        cfg.validate()
        return cfg

    def hash(self) -> str:
        return content_hash(self.to_dict())


def load_config(path: str | Path | None = None) -> RuleGenConfig:
    """Load a JSON config; ``None`` loads the shipped default."""
    if path is None:
        text = resources.files("benchctr.resources").joinpath(DEFAULT_CONFIG).read_text()
    else:
        text = Path(path).read_text()
    return RuleGenConfig.from_dict(json.loads(text))


def save_config(config: RuleGenConfig, path: str | Path) -> None:
    atomic_write_text(path, json.dumps(config.to_dict(), indent=1, sort_keys=True))


# -- sampling -----------------------------------------------------------------


def _truncated(draw, lo: float, hi: float, size: int, rng) -> np.ndarray:
    out = np.empty(size)
    filled = 0
    while filled < size:
        need = size - filled
        x = draw(rng, need + need // 8 + 16)
        x = x[(x >= lo) & (x <= hi)][:need]
        out[filled : filled + len(x)] = x
        filled += len(x)
    return out


def sample_feature(spec: Spec, rng: np.random.Generator, size: int | None = None):
    """Draw one value (or ``size`` values); bounded specs use rejection sampling."""
    n = 1 if size is None else size
    if isinstance(spec, CategoricalSpec):
        idx = rng.choice(len(spec.values), size=n, p=np.asarray(spec.probs))
        out = np.asarray(spec.values, dtype=object)[idx]
    elif isinstance(spec, TruncNormalSpec):
        out = _truncated(lambda r, m: r.normal(spec.mean, spec.std, m), spec.lo, spec.hi, n, rng)
    elif isinstance(spec, LogNormalSpec):
        out = _truncated(lambda r, m: r.lognormal(spec.mu_log, spec.sigma_log, m), spec.lo, spec.hi, n, rng)
    else:
        raise TypeError(f"unsupported spec {spec!r}")
    return out[0] if size is None else out


def similarity(x: Value, t: Value, kind: FieldKind | str, scale: float = 1.0) -> float:
    """Exact-match indicator for categoricals, Gaussian kernel for numerics."""
    kind = FieldKind(kind)
    if kind is FieldKind.CATEGORICAL:
        if isinstance(x, (int, float)) != isinstance(t, (int, float)):
            raise DataError("categorical similarity needs values of the same kind")
        return 1.0 if x == t else 0.0
    if kind is FieldKind.NUMERIC:
        if isinstance(x, str) or isinstance(t, str):
            raise DataError("numeric similarity needs numeric values")
        return math.exp(-((float(x) - float(t)) ** 2) / (2.0 * scale**2))
    raise DataError(f"no similarity defined for kind {kind.value}")


def _values(instance) -> Mapping[str, Value]:
    return instance.values if isinstance(instance, Instance) else instance


def interaction_score(instance, config: RuleGenConfig, k: int) -> float:
    """I_k(x) = sum over order-k clusters of w_g * prod_f s(x_f, t_f)."""
    if not 1 <= k <= config.K:
        raise DataError(f"order {k} outside 1..{config.K}")
    x = _values(instance)
    total = 0.0
    for g in config.clusters.get(k, []):
        score = g.weight
        for name, target in g.targets.items():
            score *= similarity(x[name], target, config.kind_of(name), config.similarity_scales.get(name, 1.0))
        total += score
    return total


def raw_score(instance, config: RuleGenConfig) -> float:
    """base_rate + sum_k alpha_k I_k(x), before clamping."""
    return config.base_rate + sum(
        a * interaction_score(instance, config, k) for k, a in enumerate(config.order_weights, start=1)
    )


def click_probability(instance, config: RuleGenConfig) -> float:
    return min(1.0, max(0.0, raw_score(instance, config)))


def interaction_scores(columns: Mapping[str, np.ndarray], config: RuleGenConfig, k: int) -> np.ndarray:
    """Vectorized I_k over whole columns."""
    n = len(next(iter(columns.values())))
    total = np.zeros(n)
    for g in config.clusters.get(k, []):
        score = np.full(n, g.weight)
        for name, target in g.targets.items():
            col = columns[name]
            if config.kind_of(name) is FieldKind.CATEGORICAL:
                score *= col == target
            else:
                s = config.similarity_scales[name]
                score *= np.exp(-((col - float(target)) ** 2) / (2.0 * s * s))
        total += score
    return total


def click_probabilities(columns: Mapping[str, np.ndarray], config: RuleGenConfig) -> np.ndarray:
    n = len(next(iter(columns.values())))
    score = np.full(n, config.base_rate)
    for k, a in enumerate(config.order_weights, start=1):
        if a:
            score += a * interaction_scores(columns, config, k)
    return np.clip(score, 0.0, 1.0)


def _shard(config: RuleGenConfig, seed: int, shard: int, n: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, shard])
    cols = {c.name: sample_feature(c, rng, n) for c in config.categorical}
    for spec in config.numeric_specs:
        cols[spec.name] = sample_feature(spec, rng, n)
    p = click_probabilities(cols, config)
    cols[config.label] = (rng.random(n) < p).astype(np.int64)
    return cols


def generate_rule_dataset(config: RuleGenConfig, N: int, seed: int, workers: int = 1) -> Dataset:
    """N rows; shards of SHARD_SIZE rows draw from child seeds (seed, shard index),
    so the output does not depend on ``workers``."""
    if N < 1:
        raise DataError("N must be >= 1")
    config.validate()
    sizes = [min(SHARD_SIZE, N - s) for s in range(0, N, SHARD_SIZE)]
    jobs = list(enumerate(sizes))
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda j: _shard(config, seed, j[0], j[1]), jobs))
    else:
        parts = [_shard(config, seed, i, n) for i, n in jobs]
    schema = config.schema()
    columns = {f.name: np.concatenate([p[f.name] for p in parts]) for f in schema}
    return Dataset(schema, columns, provenance=f"rule:{content_hash(config.to_dict(), N, seed)}")


def write_rule_dataset(dataset: Dataset, path: str | Path, config: RuleGenConfig, seed: int) -> Path:
    """Dataset CSV plus a ``.provenance.json`` sidecar (config hash, seed, N)."""
    path = write_dataset(dataset, path)
    sidecar = {"generator": "rule", "config_hash": config.hash(), "seed": seed, "N": len(dataset),
               "provenance": dataset.provenance}
    atomic_write_text(str(path) + ".provenance.json", json.dumps(sidecar, indent=1, sort_keys=True))
    return path
