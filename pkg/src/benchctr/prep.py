"""Ingestion, preprocessing, feature engineering and dataset splitting."""
from __future__ import annotations

import csv
import math
import os
from collections import Counter
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import tomli

from .data import DataError, Dataset, FieldKind, FieldSchema, SplitSpec, content_hash, file_hash

NEG_BUCKET = -1
NEG_TOKEN = str(NEG_BUCKET)
TEMPORAL_PARTS = ("hour", "dow", "weekend")


@dataclass(frozen=True)
class PrepPolicy:
    numeric_missing_fill: float = 0.0
    categorical_missing_token: str = "unknown"
    oov_min_freq: int = 10
    bin_threshold: float = 2.0
    bin_numerics: bool = True

    def __post_init__(self):
        if self.oov_min_freq < 1:
            raise DataError("oov_min_freq must be >= 1")
        if self.bin_threshold < 1:
            raise DataError("bin_threshold must be >= 1")

    @classmethod
    def from_mapping(cls, d: Mapping) -> "PrepPolicy":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown policy key(s): {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def load_schema_file(path: str | os.PathLike) -> tuple[list[FieldSchema], PrepPolicy, str]:
    """Read a TOML schema file: ``[[fields]]`` tables plus optional ``[policy]``."""
    with open(path, "rb") as fh:
        doc = tomli.load(fh)
    try:
        schema = [FieldSchema(name=f["name"], kind=FieldKind(f["kind"])) for f in doc["fields"]]
    except (KeyError, ValueError) as exc:
        raise DataError(f"bad schema file {path}: {exc}") from exc
    policy = PrepPolicy.from_mapping(doc.get("policy", {}))
    return schema, policy, doc.get("delimiter", ",")


def _parse_label(cell: str, row: int) -> int:
    if cell not in ("0", "1"):
        raise DataError(f"label must be 0 or 1 at row {row}, got {cell!r}")
    return int(cell)


def load_delimited(
    path: str | os.PathLike,
    schema: Sequence[FieldSchema],
    delimiter: str = ",",
    encoded_ids: bool = False,
) -> Dataset:
    """Read a delimited file with a header row into a raw :class:`Dataset`.

    Empty cells are recorded in ``Dataset.missing``; labels may not be missing.
    With ``encoded_ids`` the cells of fields that carry a vocabulary are read
    as integer ids instead of tokens.
    """
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    schema = tuple(schema)
    names = [f.name for f in schema]
    with fh:
        reader = csv.reader(fh, delimiter=delimiter)
        header = next(reader, None)
        if header is None or sorted(header) != sorted(names) or len(set(header)) != len(header):
            raise DataError(f"header mismatch in {path}: expected {sorted(names)}, got {header}")
        pos = [header.index(n) for n in names]
        raw: list[list] = [[] for _ in schema]
        for rownum, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"arity mismatch at row {rownum}: {len(row)} cells, expected {len(header)}")
            for j, p in enumerate(pos):
                raw[j].append(row[p])

    columns, missing = {}, {}
    for f, cells in zip(schema, raw):
        mask = np.fromiter((c == "" for c in cells), dtype=bool, count=len(cells))
        try:
            if f.kind is FieldKind.LABEL:
                if mask.any():
                    raise DataError(f"missing label at row {int(np.argmax(mask)) + 1}")
                col = np.array([_parse_label(c, i + 1) for i, c in enumerate(cells)], dtype=np.int64)
            elif f.kind is FieldKind.NUMERIC:
                col = np.array([float(c) if c else 0.0 for c in cells], dtype=np.float64)
            elif f.kind is FieldKind.TEMPORAL or (encoded_ids and f.encoded):
                col = np.array([int(c) if c else 0 for c in cells], dtype=np.int64)
            else:
                col = np.array(cells, dtype=object) if cells else np.empty(0, dtype=object)
        except ValueError as exc:
            raise DataError(f"field {f.name!r}: {exc}") from exc
        columns[f.name] = col
        if mask.any():
            missing[f.name] = mask
    return Dataset(schema, columns, missing, provenance=f"{path.name}:{file_hash(path)}")


def impute_missing(dataset: Dataset, policy: PrepPolicy = PrepPolicy()) -> Dataset:
    """Fill every missing cell; categorical fills become a regular token."""
    if not dataset.missing:
        return dataset
    columns = dict(dataset.columns)
    for name, mask in dataset.missing.items():
        f = dataset.field(name)
        col = columns[name].copy()
        if f.kind is FieldKind.NUMERIC:
            col[mask] = policy.numeric_missing_fill
        elif f.kind is FieldKind.CATEGORICAL and not f.encoded:
            col[mask] = policy.categorical_missing_token
        elif f.kind is FieldKind.CATEGORICAL:
            col[mask] = f.oov_id
        else:
            raise DataError(f"cannot impute field {name!r} of kind {f.kind.value}")
        columns[name] = col
    return dataset.replace(columns=columns, missing={})


def vocab_for(tokens: Sequence[str], min_freq: int, reserved: Sequence[str] = ()) -> dict[str, int]:
    counts = Counter(tokens)
    keep = [t for t, c in counts.items() if c >= min_freq]
    keep.sort(key=lambda t: (-counts[t], t))
    keep += sorted(set(reserved) - set(keep))
    return {t: i for i, t in enumerate(keep)}


def build_vocab(
    dataset: Dataset,
    min_freq: int = 10,
    reserved: Mapping[str, Sequence[str]] | None = None,
) -> list[FieldSchema]:
    """Attach vocabularies to every raw categorical field.

    Ids go to tokens with frequency >= ``min_freq`` in descending frequency
    order (ties lexicographic); ``reserved`` tokens always get an id. The OOV
    id is the last one.
    """
    reserved = reserved or {}
    out = []
    for f in dataset.schema:
        if f.kind is not FieldKind.CATEGORICAL or f.encoded:
            out.append(f)
            continue
        col = dataset.columns[f.name]
        if f.name in dataset.missing:
            col = col[~dataset.missing[f.name]]
        vocab = vocab_for(col.tolist(), min_freq, reserved.get(f.name, ()))
        n = len(vocab)
        out.append(FieldSchema(f.name, f.kind, vocab, oov_id=n, cardinality=n + 1))
    return out


def apply_vocab(dataset: Dataset, schema: Sequence[FieldSchema]) -> Dataset:
    """Encode raw categorical columns with the vocabularies in ``schema``."""
    by_name = {f.name: f for f in schema}
    columns = dict(dataset.columns)
    new_schema = []
    missing = dict(dataset.missing)
    for f in dataset.schema:
        target = by_name.get(f.name, f)
        if f.kind is FieldKind.CATEGORICAL and not f.encoded and target.encoded:
            columns[f.name] = target.encode(dataset.columns[f.name].tolist())
            if f.name in missing:
                col = columns[f.name].copy()
                col[missing.pop(f.name)] = target.oov_id
                columns[f.name] = col
            new_schema.append(target)
        else:
            new_schema.append(f)
    return dataset.replace(schema=tuple(new_schema), columns=columns, missing=missing)


def bin_numeric(x: float, threshold: float = 2.0) -> int:
    """floor(ln(x)^2) above ``threshold``, floor(x) on [0, threshold], NEG_BUCKET below 0."""
    if not math.isfinite(x):
        raise DataError(f"cannot bin non-finite value {x!r}")
    if x > threshold:
        return math.floor(math.log(x) ** 2)
    if x >= 0:
        return math.floor(x)
    return NEG_BUCKET


def bin_numeric_array(x: np.ndarray, threshold: float = 2.0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DataError("cannot bin non-finite values")
    out = np.full(x.shape, NEG_BUCKET, dtype=np.int64)
    hi = x > threshold
    mid = (x >= 0) & ~hi
    out[hi] = np.floor(np.log(x[hi]) ** 2).astype(np.int64)
    out[mid] = np.floor(x[mid]).astype(np.int64)
    return out


def bin_numeric_fields(dataset: Dataset, threshold: float = 2.0) -> Dataset:
    """Turn every numeric field into a raw categorical of bucket tokens."""
    columns = dict(dataset.columns)
    schema = []
    for f in dataset.schema:
        if f.kind is FieldKind.NUMERIC:
            if f.name in dataset.missing:
                raise DataError(f"impute {f.name!r} before binning")
            buckets = bin_numeric_array(dataset.columns[f.name], threshold)
            columns[f.name] = np.array([str(b) for b in buckets.tolist()], dtype=object)
            schema.append(FieldSchema(f.name, FieldKind.CATEGORICAL))
        else:
            schema.append(f)
    return dataset.replace(schema=tuple(schema), columns=columns)


def extract_temporal(timestamp: int) -> tuple[int, int, int]:
    """(hour of day, day of week with Monday=0, is_weekend) for UTC epoch seconds."""
    hour, dow, weekend = extract_temporal_array(np.array([timestamp]))
    return int(hour[0]), int(dow[0]), int(weekend[0])


def extract_temporal_array(ts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ts = np.asarray(ts, dtype=np.int64)
    if np.any(ts < 0):
        raise DataError("timestamps must be non-negative")
    days, secs = np.divmod(ts, 86400)
    # 1970-01-01 was a Thursday.
    dow = (days + 3) % 7
    return secs // 3600, dow, (dow >= 5).astype(np.int64)


def expand_temporal(dataset: Dataset) -> Dataset:
    """Add ``<f>_hour``, ``<f>_dow``, ``<f>_weekend`` categoricals for every temporal field.

    The timestamp itself stays in place for chronological splitting; models
    ignore temporal fields.
    """
    columns = dict(dataset.columns)
    schema = list(dataset.schema)
    for f in dataset.schema:
        if f.kind is not FieldKind.TEMPORAL:
            continue
        if f.name in dataset.missing:
            raise DataError(f"temporal field {f.name!r} has missing cells")
        for part, values in zip(TEMPORAL_PARTS, extract_temporal_array(dataset.columns[f.name])):
            name = f"{f.name}_{part}"
            columns[name] = np.array([str(v) for v in values.tolist()], dtype=object)
            schema.append(FieldSchema(name, FieldKind.CATEGORICAL))
    return dataset.replace(schema=tuple(schema), columns=columns)


def prepare(dataset: Dataset, policy: PrepPolicy = PrepPolicy(), fit_indices=None) -> Dataset:
    """Impute, expand timestamps, bin numerics and encode categoricals.

    Vocabularies are fitted on ``fit_indices`` (all rows by default) and
    applied to every row, so tokens unseen in the fitting rows land on OOV.
    """
    ds = impute_missing(dataset, policy)
    ds = expand_temporal(ds)
    binned = set()
    if policy.bin_numerics:
        binned = {f.name for f in ds.schema if f.kind is FieldKind.NUMERIC}
        ds = bin_numeric_fields(ds, policy.bin_threshold)
    fit = ds if fit_indices is None else ds.take(fit_indices)
    schema = build_vocab(fit, policy.oov_min_freq, {name: [NEG_TOKEN] for name in binned})
    out = apply_vocab(ds, schema)
    return out.replace(provenance=content_hash(dataset.provenance, policy.to_dict(), _fit_key(fit_indices)))


def _fit_key(fit_indices):
    if fit_indices is None:
        return "all"
    return content_hash(np.asarray(fit_indices, dtype=np.int64).tobytes())


def encode_like(dataset: Dataset, reference: Dataset, policy: PrepPolicy = PrepPolicy()) -> Dataset:
    """Prepare ``dataset`` with the vocabularies already attached to ``reference``."""
    ds = expand_temporal(impute_missing(dataset, policy))
    if policy.bin_numerics:
        ds = bin_numeric_fields(ds, policy.bin_threshold)
    return apply_vocab(ds, reference.schema)


def _alloc(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios must be three positive numbers summing to 1, got {list(ratios)}")
    n_valid = math.floor(n * ratios[1] + 1e-9)
    n_test = math.floor(n * ratios[2] + 1e-9)
    return n - n_valid - n_test, n_valid, n_test


def split_holdout(
    dataset: Dataset,
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    mode: str = "random",
    seed: int = 0,
    time_field: str | None = None,
) -> SplitSpec:
    """Train/validation/test split by contiguous cuts.

    ``random`` shuffles with ``seed`` first; ``chronological`` stable-sorts by
    ``time_field`` so the earliest rows train and the latest rows test.
    Rounding remainders go to train.
    """
    n = len(dataset)
    if n < 3:
        raise DataError(f"need at least 3 rows to split, got {n}")
    n_train, n_valid, _ = _alloc(n, ratios)
    if mode == "random":
        order = np.random.default_rng(seed).permutation(n)
    elif mode == "chronological":
        if time_field is None:
            raise DataError("chronological split requires time_field")
        order = np.argsort(dataset.columns[time_field], kind="stable")
    else:
        raise DataError(f"unknown split mode {mode!r}")
    spec = SplitSpec(order[:n_train], order[n_train : n_train + n_valid], order[n_train + n_valid :])
    return spec


def split_kfold(dataset: Dataset, k: int = 5, seed: int = 0) -> list[SplitSpec]:
    """k folds, each used once as validation; sizes differ by at most one."""
    n = len(dataset)
    if not 2 <= k <= n:
        raise DataError(f"k must satisfy 2 <= k <= N={n}, got {k}")
    order = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(order, k)
    empty = np.empty(0, dtype=np.int64)
    return [
        SplitSpec(np.concatenate([folds[j] for j in range(k) if j != i]), folds[i], empty)
        for i in range(k)
    ]
