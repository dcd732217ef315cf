"""Typed, columnar representation of click logs, splits and predictions."""
from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

SCHEMA_SUFFIX = ".schema.json"
CACHE_VERSION = 1


class DataError(ValueError):
    """Malformed input data or schema."""


class FieldKind(str, Enum):
    NUMERIC = "numeric"
    CATEGORICAL = "categorical"
    TEMPORAL = "temporal"
    LABEL = "label"


@dataclass(frozen=True)
class FieldSchema:
    """One column of a click log.

    Categorical fields start out raw (``vocabulary is None``, string tokens)
    and become encoded once a vocabulary is attached; encoded values are
    integer ids in ``[0, cardinality)`` with ``oov_id`` absorbing rare and
    unseen tokens.
    """

    name: str
    kind: FieldKind
    vocabulary: Mapping[str, int] | None = None
    oov_id: int | None = None
    cardinality: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", FieldKind(self.kind))

    @property
    def encoded(self) -> bool:
        return self.kind is FieldKind.CATEGORICAL and self.vocabulary is not None

    def encode(self, tokens: Iterable[str]) -> np.ndarray:
        if not self.encoded:
            raise DataError(f"field {self.name!r} has no vocabulary")
        vocab, oov = self.vocabulary, self.oov_id
        return np.fromiter((vocab.get(t, oov) for t in tokens), dtype=np.int64)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"name": self.name, "kind": self.kind.value}
        if self.vocabulary is not None:
            out["vocabulary"] = dict(self.vocabulary)
            out["oov_id"] = self.oov_id
            out["cardinality"] = self.cardinality
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "FieldSchema":
        return cls(
            name=d["name"],
            kind=FieldKind(d["kind"]),
            vocabulary=d.get("vocabulary"),
            oov_id=d.get("oov_id"),
            cardinality=d.get("cardinality"),
        )


@dataclass(frozen=True)
class Instance:
    values: dict[str, Any]
    label: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable columnar dataset.

    ``missing`` holds a boolean mask for every field that had empty cells at
    ingest; masked positions carry a placeholder (0 or "") in ``columns``.
    """

    schema: tuple[FieldSchema, ...]
    columns: Mapping[str, np.ndarray]
    missing: Mapping[str, np.ndarray] = field(default_factory=dict)
    provenance: str = ""

    def __post_init__(self):
        object.__setattr__(self, "schema", tuple(self.schema))
        lengths = {len(c) for c in self.columns.values()}
        if len(lengths) > 1:
            raise DataError(f"ragged columns: lengths {sorted(lengths)}")
        missing = {k: np.asarray(m, dtype=bool) for k, m in self.missing.items() if np.any(m)}
        object.__setattr__(self, "missing", missing)
        for col in self.columns.values():
            col.flags.writeable = False

    def __len__(self) -> int:
        if not self.columns:
            return 0
        return len(next(iter(self.columns.values())))

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.schema]

    def field(self, name: str) -> FieldSchema:
        for f in self.schema:
            if f.name == name:
                return f
        raise KeyError(name)

    @property
    def label_field(self) -> FieldSchema:
        labels = [f for f in self.schema if f.kind is FieldKind.LABEL]
        if len(labels) != 1:
            raise DataError(f"expected exactly one label field, found {len(labels)}")
        return labels[0]

    @property
    def feature_fields(self) -> list[FieldSchema]:
        return [f for f in self.schema if f.kind is not FieldKind.LABEL]

    @property
    def labels(self) -> np.ndarray:
        return self.columns[self.label_field.name]

    def column(self, name: str) -> np.ndarray:
        return self.columns[name]

    def instance(self, i: int) -> Instance:
        lab = self.label_field.name
        values = {f.name: self.columns[f.name][i] for f in self.feature_fields}
        return Instance(values=values, label=int(self.columns[lab][i]))

    def take(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            schema=self.schema,
            columns={k: v[idx] for k, v in self.columns.items()},
            missing={k: m[idx] for k, m in self.missing.items()},
            provenance=self.provenance,
        )

    def replace(self, schema=None, columns=None, missing=None, provenance=None) -> "Dataset":
        return Dataset(
            schema=self.schema if schema is None else schema,
            columns=self.columns if columns is None else columns,
            missing=self.missing if missing is None else missing,
            provenance=self.provenance if provenance is None else provenance,
        )

    def equals(self, other: "Dataset") -> bool:
        if self.schema != other.schema or self.provenance != other.provenance:
            return False
        if set(self.columns) != set(other.columns) or set(self.missing) != set(other.missing):
            return False
        for k, v in self.columns.items():
            o = other.columns[k]
            if v.dtype != o.dtype or not np.array_equal(v, o):
                return False
        return all(np.array_equal(m, other.missing[k]) for k, m in self.missing.items())


@dataclass(frozen=True)
class SplitSpec:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        for name in ("train", "validation", "test"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))

    def check(self, n: int, require_test: bool = True) -> None:
        sets = [set(self.train.tolist()), set(self.validation.tolist()), set(self.test.tolist())]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise DataError("split sets overlap")
        every = sets[0] | sets[1] | sets[2]
        if every and (min(every) < 0 or max(every) >= n):
            raise DataError("split index out of range")
        if not self.train.size or not self.validation.size or (require_test and not self.test.size):
            raise DataError("split has an empty partition")


@dataclass(frozen=True)
class PredictionSet:
    """Labels ``y``, click probabilities ``p`` and optional segment ids ``z``."""

    y: np.ndarray
    p: np.ndarray
    z: np.ndarray | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.int64)
        p = np.asarray(self.p, dtype=np.float64)
        if y.ndim != 1 or y.shape != p.shape:
            raise DataError(f"y and p must be equal-length vectors, got {y.shape} and {p.shape}")
        if np.any((y != 0) & (y != 1)):
            raise DataError("labels must be 0 or 1")
        if np.any(~np.isfinite(p)) or np.any((p < 0) | (p > 1)):
            raise DataError("probabilities must lie in [0, 1]")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "p", p)
        if self.z is not None:
            z = np.asarray(self.z)
            if z.shape != y.shape:
                raise DataError("segment ids must match the number of predictions")
            object.__setattr__(self, "z", z)

    @property
    def N(self) -> int:
        return len(self.y)

    def __len__(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class Violation:
    rule: str
    field: str | None = None
    row: int | None = None


@dataclass
class ValidationReport:
    violations: list[Violation]

    @property
    def ok(self) -> bool:
        return not self.violations


def _first_rows(mask: np.ndarray, limit: int = 20) -> list[int]:
    return np.flatnonzero(mask)[:limit].tolist()


def validate_schema(schema: Sequence[FieldSchema]) -> list[Violation]:
    out = []
    names = [f.name for f in schema]
    for name in sorted({n for n in names if names.count(n) > 1}):
        out.append(Violation("unique field names", name))
    if sum(f.kind is FieldKind.LABEL for f in schema) != 1:
        out.append(Violation("exactly one label field"))
    for f in schema:
        if f.vocabulary is None:
            continue
        if f.cardinality is None or f.oov_id is None:
            out.append(Violation("vocabulary needs oov_id and cardinality", f.name))
            continue
        if not 0 <= f.oov_id < f.cardinality:
            out.append(Violation("oov_id<cardinality", f.name))
        if any(not 0 <= i < f.cardinality for i in f.vocabulary.values()):
            out.append(Violation("vocabulary id<cardinality", f.name))
    return out


def validate_dataset(dataset: Dataset) -> ValidationReport:
    """Check every dataset invariant; violations are returned, never raised."""
    out = validate_schema(dataset.schema)
    for f in dataset.schema:
        if f.name not in dataset.columns:
            out.append(Violation("column present", f.name))
            continue
        col = dataset.columns[f.name]
        present = ~dataset.missing.get(f.name, np.zeros(len(col), dtype=bool))
        if f.kind is FieldKind.LABEL:
            if col.dtype.kind not in "iu":
                out.append(Violation("label is integer", f.name))
            bad = present & (col != 0) & (col != 1)
            out.extend(Violation("label∈{0,1}", f.name, r) for r in _first_rows(bad))
        elif f.kind is FieldKind.NUMERIC:
            if col.dtype.kind != "f":
                out.append(Violation("numeric is float", f.name))
            else:
                out.extend(Violation("numeric finite", f.name, r) for r in _first_rows(present & ~np.isfinite(col)))
        elif f.kind is FieldKind.TEMPORAL:
            if col.dtype.kind not in "iu":
                out.append(Violation("timestamp is integer", f.name))
            else:
                out.extend(Violation("timestamp≥0", f.name, r) for r in _first_rows(present & (col < 0)))
        elif f.encoded:
            if col.dtype.kind not in "iu":
                out.append(Violation("encoded categorical is integer", f.name))
            else:
                out.extend(Violation("id≥0", f.name, r) for r in _first_rows(present & (col < 0)))
                out.extend(
                    Violation("id<cardinality", f.name, r)
                    for r in _first_rows(present & (col >= (f.cardinality or 0)))
                )
        elif col.dtype.kind != "O":
            out.append(Violation("raw categorical holds tokens", f.name))
    extra = set(dataset.columns) - set(dataset.names)
    out.extend(Violation("column declared in schema", name) for name in sorted(extra))
    return ValidationReport(out)


def positive_rate(dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise DataError("empty")
    return float(dataset.labels.sum()) / len(dataset)


def content_hash(*parts: Any) -> str:
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, (bytes, bytearray)):
            h.update(part)
        else:
            h.update(json.dumps(part, sort_keys=True, default=str).encode())
        h.update(b"\x00")
    return h.hexdigest()[:16]


def file_hash(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


# -- serialization ----------------------------------------------------------


def _format_cell(f: FieldSchema, value) -> str:
    if f.kind is FieldKind.NUMERIC:
        return repr(float(value))
    if f.kind is FieldKind.CATEGORICAL and not f.encoded:
        return str(value)
    return str(int(value))


def write_dataset(dataset: Dataset, path: str | os.PathLike, delimiter: str = ",") -> Path:
    """Write ``path`` (delimited text) plus ``path.schema.json``.

    Encoded categoricals are written as ids so OOV rows survive the round
    trip; missing cells are left empty.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    cols = [dataset.columns[f.name] for f in dataset.schema]
    masks = [dataset.missing.get(f.name) for f in dataset.schema]
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        writer.writerow(dataset.names)
        for i in range(len(dataset)):
            writer.writerow(
                "" if (m is not None and m[i]) else _format_cell(f, c[i])
                for f, c, m in zip(dataset.schema, cols, masks)
            )
    os.replace(tmp, path)
    meta = {
        "fields": [f.to_dict() for f in dataset.schema],
        "provenance": dataset.provenance,
        "delimiter": delimiter,
    }
    atomic_write_text(str(path) + SCHEMA_SUFFIX, json.dumps(meta, indent=1, sort_keys=True))
    return path


def read_dataset(path: str | os.PathLike) -> Dataset:
    """Inverse of :func:`write_dataset`."""
    from .prep import load_delimited

    sidecar = Path(str(path) + SCHEMA_SUFFIX)
    if not sidecar.exists():
        raise DataError(f"missing schema sidecar {sidecar}")
    meta = json.loads(sidecar.read_text(encoding="utf-8"))
    schema = [FieldSchema.from_dict(d) for d in meta["fields"]]
    ds = load_delimited(path, schema, meta.get("delimiter", ","), encoded_ids=True)
    return ds.replace(provenance=meta.get("provenance", ""))


def save_cache(dataset: Dataset, path: str | os.PathLike) -> Path:
    """Columnar binary cache (npz); exact round trip."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for f in dataset.schema:
        col = dataset.columns[f.name]
        arrays[f"col:{f.name}"] = col.astype(str) if col.dtype.kind == "O" else col
        if f.name in dataset.missing:
            arrays[f"miss:{f.name}"] = dataset.missing[f.name]
    meta = {
        "version": CACHE_VERSION,
        "fields": [f.to_dict() for f in dataset.schema],
        "provenance": dataset.provenance,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}.npz")
    np.savez(tmp, **arrays)
    os.replace(tmp, path)
    return path


def load_cache(path: str | os.PathLike) -> Dataset:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        if meta.get("version") != CACHE_VERSION:
            raise DataError(f"unsupported cache version {meta.get('version')}")
        schema = [FieldSchema.from_dict(d) for d in meta["fields"]]
        columns, missing = {}, {}
        for f in schema:
            col = z[f"col:{f.name}"]
            columns[f.name] = col.astype(object) if col.dtype.kind == "U" else col
            if f"miss:{f.name}" in z:
                missing[f.name] = z[f"miss:{f.name}"]
    return Dataset(tuple(schema), columns, missing, meta["provenance"])
