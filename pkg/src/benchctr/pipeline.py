"""Hyper-parameter search, multi-seed model comparison, TSTR and reporting."""
from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .data import DataError, Dataset, SplitSpec, atomic_write_text
from .metrics import (CONFUSION_FAMILY, DIRECTION, PROBABILITY_FAMILY, REPORT_ORDER, MetricReport,
                      auc_roc, compute_report, probability_metrics, relative_metrics)
from .models import ModelSpec, TrainConfig, predict, train_model

log = logging.getLogger(__name__)

SPEC_KEYS = {f.name for f in fields(ModelSpec)} - {"kind"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    """Ordered map; results come back by input index, never completion order."""
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


# -- search ---------------------------------------------------------------------


@dataclass
class SearchSpace:
    """Candidate lists per hyper-parameter.

    For random search a value may instead be a distribution:
    ``{"uniform": [lo, hi]}``, ``{"loguniform": [lo, hi]}``,
    ``{"randint": [lo, hi]}`` (inclusive) or ``{"choice": [...]}``.
    """

    params: dict[str, Any]

    def __post_init__(self):
        if not self.params:
            raise ValueError("search space is empty")
        unknown = set(self.params) - SPEC_KEYS - TRAIN_KEYS
        if unknown:
            raise ValueError(f"unknown hyper-parameter(s): {sorted(unknown)}")

    def grid(self) -> list[dict]:
        keys = list(self.params)
        lists = []
        for k in keys:
            v = self.params[k]
            if isinstance(v, Mapping):
                if set(v) != {"choice"}:
                    raise ValueError(f"grid search needs candidate lists, {k!r} is a distribution")
                v = v["choice"]
            if not v:
                raise ValueError(f"no candidates for {k!r}")
            lists.append(list(v))
        return [dict(zip(keys, combo)) for combo in itertools.product(*lists)]

    def sample(self, rng: np.random.Generator) -> dict:
        out = {}
        for k, v in self.params.items():
            if not isinstance(v, Mapping):
                out[k] = v[int(rng.integers(len(v)))]
                continue
            (dist, arg), = v.items()
            if dist == "choice":
                out[k] = arg[int(rng.integers(len(arg)))]
            elif dist == "uniform":
                out[k] = float(rng.uniform(arg[0], arg[1]))
            elif dist == "loguniform":
                out[k] = float(math.exp(rng.uniform(math.log(arg[0]), math.log(arg[1]))))
            elif dist == "randint":
                out[k] = int(rng.integers(arg[0], arg[1] + 1))
            else:
                raise ValueError(f"unknown distribution {dist!r} for {k!r}")
        return out


def apply_params(spec: ModelSpec, config: TrainConfig, params: Mapping) -> tuple[ModelSpec, TrainConfig]:
    spec_kw = {k: v for k, v in params.items() if k in SPEC_KEYS}
    train_kw = {k: v for k, v in params.items() if k in TRAIN_KEYS}
    if "hidden_layers" in spec_kw:
        spec_kw["hidden_layers"] = tuple(spec_kw["hidden_layers"])
    return replace(spec, **spec_kw), replace(config, **train_kw)


@dataclass
class Trial:
    index: int
    params: dict
    auc: float
    logloss: float
    epochs: int
    history: list[dict] = field(repr=False, default_factory=list)


@dataclass
class SearchResult:
    best: dict
    best_index: int
    trials: list[Trial]

    def log_rows(self) -> list[dict]:
        return [{"trial": t.index, **t.params, "AUC-ROC": t.auc, "Logloss": t.logloss, "epochs": t.epochs}
                for t in self.trials]


class TrialError(RuntimeError):
    pass


def _run_trial(kind: str, dataset: Dataset, split: SplitSpec, config: TrainConfig, base: ModelSpec | None):
    def run(item):
        index, params = item
        try:
            spec, cfg = apply_params(base or ModelSpec(kind), config, params)
            tm = train_model(spec, dataset, split, cfg, seed=cfg.seeds[0])
            preds = predict(tm.model, dataset, split.validation)
            return Trial(index, dict(params), auc_roc(preds), probability_metrics(preds)["Logloss"],
                         len(tm.history), tm.history)
        except Exception as exc:
            raise TrialError(f"trial {index} ({params}) failed: {exc}") from exc
    return run


def _select(trials: Sequence[Trial]) -> Trial:
    # highest validation AUC, then lowest Logloss, then enumeration order
    return min(trials, key=lambda t: (-t.auc, t.logloss, t.index))


def grid_search(space: SearchSpace, kind: str, dataset: Dataset, split: SplitSpec,
                config: TrainConfig = TrainConfig(), workers: int = 1,
                base_spec: ModelSpec | None = None) -> SearchResult:
    """Train every combination once and pick the best by validation AUC-ROC."""
    combos = list(enumerate(space.grid()))
    trials = _map(_run_trial(kind, dataset, split, config, base_spec), combos, workers)
    best = _select(trials)
    return SearchResult(best.params, best.index, trials)


def random_search(space: SearchSpace, n: int, seed: int, kind: str, dataset: Dataset, split: SplitSpec,
                  config: TrainConfig = TrainConfig(), workers: int = 1,
                  base_spec: ModelSpec | None = None) -> SearchResult:
    """``n`` seeded draws from the space, same selection rule as grid search."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    draws = list(enumerate(space.sample(rng) for _ in range(n)))
    trials = _map(_run_trial(kind, dataset, split, config, base_spec), draws, workers)
    best = _select(trials)
    return SearchResult(best.params, best.index, trials)


# -- comparison ------------------------------------------------------------------


@dataclass
class ComparisonResult:
    label: str
    models: list[str]
    seeds: list[int]
    per_seed: dict[str, dict[int, MetricReport]]
    averaged: dict[str, MetricReport]
    flags: dict[str, dict[str, str | None]]
    errors: dict[str, dict[int, str]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    histories: dict[str, dict[int, list[dict]]] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "models": list(self.models),
            "seeds": list(self.seeds),
            "per_seed": {m: {str(s): r.to_dict() for s, r in sorted(rs.items())} for m, rs in self.per_seed.items()},
            "averaged": {m: r.to_dict() for m, r in self.averaged.items()},
            "flags": self.flags,
            "errors": {m: {str(s): e for s, e in es.items()} for m, es in self.errors.items()},
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ComparisonResult":
        return cls(
            label=d["label"],
            models=list(d["models"]),
            seeds=[int(s) for s in d["seeds"]],
            per_seed={m: {int(s): MetricReport.from_dict(r) for s, r in rs.items()} for m, rs in d["per_seed"].items()},
            averaged={m: MetricReport.from_dict(r) for m, r in d["averaged"].items()},
            flags={k: dict(v) for k, v in d["flags"].items()},
            errors={m: {int(s): e for s, e in es.items()} for m, es in d.get("errors", {}).items()},
            meta=dict(d.get("meta", {})),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def average_reports(reports: Sequence[MetricReport]) -> MetricReport:
    keys = [k for k in reports[0].values if all(k in r.values for r in reports)]
    values = {k: float(sum(r.values[k] for r in reports) / len(reports)) for k in keys}
    return MetricReport(values, {"n_seeds": len(reports)})


def rank_flags(averaged: Mapping[str, MetricReport], order: Sequence[str]) -> dict[str, dict[str, str | None]]:
    """Best and second-best model per ranked metric; ties keep model order."""
    flags = {}
    metrics = [m for m in REPORT_ORDER if m in DIRECTION and any(m in r.values for r in averaged.values())]
    for metric in metrics:
        scored = [(name, averaged[name].values[metric]) for name in order
                  if name in averaged and metric in averaged[name].values
                  and not math.isnan(averaged[name].values[metric])]
        sign = -1.0 if DIRECTION[metric] else 1.0
        ranked = sorted(scored, key=lambda kv: sign * kv[1])
        flags[metric] = {"best": ranked[0][0] if ranked else None,
                         "second": ranked[1][0] if len(ranked) > 1 else None}
    return flags


def _named(specs) -> list[tuple[str, ModelSpec]]:
    if isinstance(specs, Mapping):
        return list(specs.items())
    out, seen = [], {}
    for spec in specs:
        name = spec.name
        seen[name] = seen.get(name, 0) + 1
        out.append((name if seen[name] == 1 else f"{name}-{seen[name]}", spec))
    return out


def _compare(label, specs, train_ds, split, config, test_ds, test_rows, workers, segment_field,
             baseline, validation=None, meta=None) -> ComparisonResult:
    named = _named(specs)
    cells = [(name, spec, seed) for name, spec in named for seed in config.seeds]

    def run(cell):
        name, spec, seed = cell
        try:
            tm = train_model(spec, train_ds, split, config, seed=seed, validation=validation)
            preds = predict(tm.model, test_ds, test_rows, segment_field)
            report = compute_report(preds, provenance={"model": name, "seed": seed, "best_epoch": tm.best_epoch,
                                                       "epochs": len(tm.history), "label": label})
            return report, tm.history, None
        except Exception as exc:  # reported per cell; the other cells still complete
            log.warning("cell %s seed %s failed: %s", name, seed, exc)
            return None, [], f"{type(exc).__name__}: {exc}"

    outcomes = _map(run, cells, workers)
    per_seed: dict[str, dict[int, MetricReport]] = {name: {} for name, _ in named}
    errors: dict[str, dict[int, str]] = {}
    histories: dict[str, dict[int, list]] = {name: {} for name, _ in named}
    for (name, _, seed), (report, hist, err) in zip(cells, outcomes):
        if err is None:
            per_seed[name][seed] = report
            histories[name][seed] = hist
        else:
            errors.setdefault(name, {})[seed] = err
    averaged = {name: average_reports([rs[s] for s in sorted(rs)]) for name, rs in per_seed.items() if rs}
    base_name = baseline if baseline is not None else (named[0][0] if named else None)
    if base_name in averaged:
        base = averaged[base_name]
        for rep in averaged.values():
            try:
                rep.values.update(relative_metrics(rep, base))
            except (KeyError, ValueError):
                pass
    order = [name for name, _ in named]
    return ComparisonResult(label, order, list(config.seeds), per_seed, averaged, rank_flags(averaged, order),
                            errors, {"baseline": base_name, **(meta or {})}, histories)


def run_comparison(specs, dataset: Dataset, split: SplitSpec, config: TrainConfig = TrainConfig(),
                   workers: int = 1, segment_field: str | None = None, baseline: str | None = None,
                   label: str = "holdout") -> ComparisonResult:
    """Train every (model, seed) cell, score it on the test split and average over seeds.

    ``specs`` is a sequence of :class:`ModelSpec` or a mapping name -> spec.
    RIG and RelaImpr in the averaged reports are relative to ``baseline``
    (default: the first model).
    """
    if not config.seeds:
        raise ValueError("need at least one seed")
    split.check(len(dataset))
    return _compare(label, specs, dataset, split, config, dataset, split.test, workers, segment_field, baseline,
                    meta={"dataset": dataset.provenance})


def check_compatible(a: Dataset, b: Dataset) -> None:
    fa = [(f.name, f.kind, f.cardinality, dict(f.vocabulary or {})) for f in a.schema]
    fb = [(f.name, f.kind, f.cardinality, dict(f.vocabulary or {})) for f in b.schema]
    if fa != fb:
        raise DataError("schema mismatch between synthetic and real datasets")


def run_tstr(synthetic: Dataset, real: Dataset, split: SplitSpec, specs, config: TrainConfig = TrainConfig(),
             workers: int = 1, synthetic_split: SplitSpec | None = None, validation_fraction: float = 0.1,
             seed: int = 0, segment_field: str | None = None, baseline: str | None = None) -> ComparisonResult:
    """Train on synthetic rows only and score on ``split.test`` of the real dataset.

    Early stopping watches a validation share carved from the synthetic data
    (``synthetic_split`` if given). Only the real test rows are ever read.
    """
    check_compatible(synthetic, real)
    if synthetic_split is None:
        n = len(synthetic)
        perm = np.random.default_rng(seed).permutation(n)
        n_val = max(1, int(round(n * validation_fraction)))
        synthetic_split = SplitSpec(perm[n_val:], perm[:n_val], np.empty(0, dtype=np.int64))
    test = real.take(split.test)
    return _compare("TSTR", specs, synthetic, synthetic_split, config, test, None, workers, segment_field, baseline,
                    meta={"synthetic": synthetic.provenance, "real": real.provenance})


# -- reports ----------------------------------------------------------------------

FORMATS = ("json", "csv", "markdown", "radar_svg")


def _fmt(v: float) -> str:
    return "nan" if v is None or math.isnan(v) else f"{v:.4f}"


def render_markdown(result: ComparisonResult, metrics: Sequence[str] | None = None) -> str:
    """Seed-averaged table; best per column in bold, second best underlined."""
    metrics = list(metrics or [m for m in CONFUSION_FAMILY + PROBABILITY_FAMILY
                               if any(m in r.values for r in result.averaged.values())])
    lines = [f"**{result.label}** (seeds: {', '.join(map(str, result.seeds))})", "",
             "| Model | " + " | ".join(metrics) + " |", "|---|" + "---|" * len(metrics)]
    for name in result.models:
        if name not in result.averaged:
            lines.append(f"| {name} | " + " | ".join("failed" for _ in metrics) + " |")
            continue
        cells = []
        for m in metrics:
            v = result.averaged[name].values.get(m)
            text = "-" if v is None else _fmt(v)
            flag = result.flags.get(m, {})
            if flag.get("best") == name:
                text = f"**{text}**"
            elif flag.get("second") == name:
                text = f"<u>{text}</u>"
            cells.append(text)
        lines.append(f"| {name} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def render_csv(result: ComparisonResult) -> str:
    keys = [k for k in REPORT_ORDER if any(k in r.values for rs in result.per_seed.values() for r in rs.values())
            or any(k in r.values for r in result.averaged.values())]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "model", "seed"] + keys)
    for name in result.models:
        for seed, rep in sorted(result.per_seed.get(name, {}).items()):
            w.writerow([result.label, name, seed] + [repr(rep.values[k]) if k in rep.values else "" for k in keys])
        if name in result.averaged:
            rep = result.averaged[name]
            w.writerow([result.label, name, "mean"] + [repr(rep.values[k]) if k in rep.values else "" for k in keys])
    return buf.getvalue()


def radar_normalize(result: ComparisonResult, metrics: Sequence[str]) -> dict[str, dict[str, float]]:
    """Min-max normalize each metric over models so the best maps to 1 and the worst to 0."""
    out: dict[str, dict[str, float]] = {name: {} for name in result.averaged}
    for m in metrics:
        vals = {n: r.values[m] for n, r in result.averaged.items() if m in r.values}
        if not vals:
            continue
        lo, hi = min(vals.values()), max(vals.values())
        for n, v in vals.items():
            if hi == lo:
                out[n][m] = 1.0
            elif DIRECTION.get(m, True):
                out[n][m] = (v - lo) / (hi - lo)
            else:
                out[n][m] = (hi - v) / (hi - lo)
    return out


_PALETTE = ("#d4a017", "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#17becf", "#7f7f7f")


def render_radar_svg(result: ComparisonResult, metrics: Sequence[str], title: str) -> str:
    metrics = [m for m in metrics if any(m in r.values for r in result.averaged.values())]
    norm = radar_normalize(result, metrics)
    size, cx, cy, radius = 420, 210, 220, 150
    n = max(len(metrics), 1)
    angles = [-math.pi / 2 + 2 * math.pi * i / n for i in range(n)]

    def pt(r, a):
        return f"{cx + r * math.cos(a):.2f},{cy + r * math.sin(a):.2f}"

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 40}" '
             f'viewBox="0 0 {size} {size + 40}">',
             f'<text x="{cx}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>']
    for ring in (0.25, 0.5, 0.75, 1.0):
        parts.append(f'<polygon points="{" ".join(pt(radius * ring, a) for a in angles)}" '
                     f'fill="none" stroke="#ccc" stroke-width="1"/>')
    for m, a in zip(metrics, angles):
        parts.append(f'<line x1="{cx}" y1="{cy}" x2="{pt(radius, a).split(",")[0]}" '
                     f'y2="{pt(radius, a).split(",")[1]}" stroke="#ccc"/>')
        lx, ly = pt(radius + 22, a).split(",")
        parts.append(f'<text x="{lx}" y="{ly}" text-anchor="middle" font-family="sans-serif" '
                     f'font-size="11">{m}</text>')
    for i, name in enumerate(n_ for n_ in result.models if n_ in norm):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(pt(radius * norm[name].get(m, 0.0), a) for m, a in zip(metrics, angles))
        parts.append(f'<polygon points="{pts}" fill="{color}" fill-opacity="0.12" stroke="{color}" '
                     f'stroke-width="2"><title>{name}</title></polygon>')
        parts.append(f'<text x="12" y="{size + 10 - 14 * i}" fill="{color}" font-family="sans-serif" '
                     f'font-size="11">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


RADAR_FAMILIES = {"confusion": CONFUSION_FAMILY, "probability": PROBABILITY_FAMILY}


def emit_report(result: ComparisonResult, fmt: str, path: str | Path) -> list[Path]:
    """Write one artifact (``radar_svg`` writes one file per metric family next to ``path``)."""
    path = Path(path)
    if fmt == "json":
        atomic_write_text(path, result.to_json())
        return [path]
    if fmt == "csv":
        atomic_write_text(path, render_csv(result))
        return [path]
    if fmt == "markdown":
        atomic_write_text(path, render_markdown(result))
        return [path]
    if fmt == "radar_svg":
        out = []
        folder = path if path.suffix == "" else path.parent
        for family, metrics in RADAR_FAMILIES.items():
            target = folder / f"radar_{family}.svg"
            atomic_write_text(target, render_radar_svg(result, metrics, f"{result.label}: {family} metrics"))
            out.append(target)
        return out
    raise ValueError(f"unknown report format {fmt!r}")


def load_result(path: str | Path) -> ComparisonResult:
    return ComparisonResult.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
