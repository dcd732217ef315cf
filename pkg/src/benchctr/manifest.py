"""Run manifests: one TOML file describing a full benchmark run.

Relative paths resolve against the manifest's own directory.

Example::

    seed = 2019
    output_dir = "out"

    [data]
    path = "clicks.csv"
    schema = "clicks.schema.toml"   # or: [data.rule] n = 20000

    [split]
    ratios = [0.8, 0.1, 0.1]
    mode = "random"

    [train]
    seeds = [2019, 2020]

    [[models]]
    kind = "lr"

    [[models]]
    kind = "fm"
    embedding_dim = 16
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli

from .models import ModelSpec, TrainConfig
from .prep import PrepPolicy
from .synth_diffusion import DiffusionConfig

TOP_KEYS = {"seed", "output_dir", "workers", "data", "prep", "split", "train", "models", "search",
            "diffusion", "tstr", "evaluate", "synth_rule"}


class ManifestError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"manifest key {key!r}: {message}")
        self.key = key


@dataclass
class Manifest:
    path: Path
    raw: dict[str, Any]
    seed: int = 2019
    output_dir: Path = Path("out")
    workers: int = 1
    data: dict = field(default_factory=dict)
    policy: PrepPolicy | None = None
    split: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    models: list[tuple[str, ModelSpec]] = field(default_factory=list)
    search: dict | None = None
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    diffusion_rows: int | None = None
    tstr: dict = field(default_factory=dict)
    evaluate: dict = field(default_factory=dict)
    synth_rule: dict = field(default_factory=dict)

    @property
    def base(self) -> Path:
        return self.path.parent

    def resolve(self, p: str | Path) -> Path:
        p = Path(p)
        return p if p.is_absolute() else (self.base / p)


def _section(raw: dict, key: str) -> dict:
    v = raw.get(key, {})
    if not isinstance(v, dict):
        raise ManifestError(key, "must be a table")
    return v


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except FileNotFoundError:
        raise ManifestError("manifest", f"file not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise ManifestError("manifest", f"not valid TOML: {exc}") from None
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise ManifestError(sorted(unknown)[0], "unknown key")
    m = Manifest(path=path.resolve(), raw=raw)
    for key, typ in (("seed", int), ("workers", int)):
        if key in raw:
            if not isinstance(raw[key], typ) or isinstance(raw[key], bool):
                raise ManifestError(key, f"must be {typ.__name__}")
            setattr(m, key, raw[key])
    m.output_dir = m.resolve(raw.get("output_dir", "out"))
    m.data = _section(raw, "data")
    if "prep" in raw:
        try:
            m.policy = PrepPolicy.from_mapping(_section(raw, "prep"))
        except (TypeError, ValueError) as exc:
            raise ManifestError("prep", str(exc)) from None
    m.split = _section(raw, "split")
    try:
        m.train = TrainConfig.from_mapping(_section(raw, "train"))
    except (TypeError, ValueError) as exc:
        raise ManifestError("train", str(exc)) from None
    models = raw.get("models", [])
    if not isinstance(models, list):
        raise ManifestError("models", "must be an array of tables")
    seen = set()
    for i, entry in enumerate(models):
        entry = dict(entry)
        name = entry.pop("name", None)
        try:
            spec = ModelSpec.from_mapping(entry)
        except (TypeError, ValueError) as exc:
            raise ManifestError(f"models[{i}]", str(exc)) from None
        name = name or spec.name
        if name in seen:
            raise ManifestError(f"models[{i}]", f"duplicate model name {name!r}")
        seen.add(name)
        m.models.append((name, spec))
    if "search" in raw:
        m.search = _section(raw, "search")
    diff = dict(_section(raw, "diffusion"))
    m.diffusion_rows = diff.pop("rows", None)
    try:
        m.diffusion = DiffusionConfig.from_mapping(diff)
    except (TypeError, ValueError) as exc:
        raise ManifestError("diffusion", str(exc)) from None
    m.tstr = _section(raw, "tstr")
    m.evaluate = _section(raw, "evaluate")
    m.synth_rule = _section(raw, "synth_rule")
    return m
