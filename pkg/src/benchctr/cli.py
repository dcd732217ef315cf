"""``benchctr`` command line.

Exit codes: 0 success, 1 usage error, 2 data or manifest error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import pipeline
from .data import DataError, Dataset, SplitSpec, atomic_write_text, read_dataset, save_cache, write_dataset
from .manifest import Manifest, ManifestError, load_manifest
from .models import CTRModel, predict, train_model, write_history
from .metrics import compute_report
from .prep import PrepPolicy, load_delimited, load_schema_file, prepare, split_holdout
from .synth_diffusion import generate_synthetic, train_diffusion
from .synth_rule import generate_rule_dataset, load_config, write_rule_dataset

log = logging.getLogger("benchctr")

COMMANDS = ("prepare", "synth-rule", "synth-diffusion", "train", "evaluate", "compare", "tstr", "report")
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="benchctr", description="Click-through-rate prediction benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--manifest", required=name != "report")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--format", choices=("json", "csv", "markdown"))
        p.add_argument("--workers", type=int)
        if name == "report":
            p.add_argument("--input", help="report.json to render (default: <out>/report.json)")
    return parser


class Run:
    """One command invocation: manifest plus flag overrides."""

    def __init__(self, manifest: Manifest, args):
        self.m = manifest
        self.seed = manifest.seed if args.seed is None else args.seed
        self.out = Path(args.out) if args.out else manifest.output_dir
        env = os.environ.get("BENCH_CTR_WORKERS")
        self.workers = args.workers or (int(env) if env else manifest.workers)
        self.fmt = args.format

    # -- data -----------------------------------------------------------------

    def raw_dataset(self) -> Dataset:
        data = self.m.data
        if "rule" in data:
            rule = data["rule"]
            config = load_config(self.m.resolve(rule["config"]) if "config" in rule else None)
            try:
                n = int(rule["n"])
            except (KeyError, TypeError, ValueError):
                raise ManifestError("data.rule.n", "required integer") from None
            return generate_rule_dataset(config, n, self.seed, self.workers)
        if "path" not in data:
            raise ManifestError("data", "needs 'path' or a [data.rule] table")
        path = self.m.resolve(data["path"])
        if not path.exists():
            raise DataError(f"dataset file not found: {path}")
        if "schema" in data:
            schema_path = self.m.resolve(data["schema"])
            if not schema_path.exists():
                raise DataError(f"schema file not found: {schema_path}")
            schema, _, delimiter = load_schema_file(schema_path)
            return load_delimited(path, schema, data.get("delimiter", delimiter))
        return read_dataset(path)

    def policy(self) -> PrepPolicy:
        if self.m.policy is not None:
            return self.m.policy
        if "schema" in self.m.data:
            return load_schema_file(self.m.resolve(self.m.data["schema"]))[1]
        return PrepPolicy()

    def split(self, dataset: Dataset) -> SplitSpec:
        s = self.m.split
        try:
            return split_holdout(dataset, tuple(s.get("ratios", (0.8, 0.1, 0.1))), s.get("mode", "random"),
                                 self.seed, s.get("time_field"))
        except DataError as exc:
            raise ManifestError("split", str(exc)) from None

    def prepared(self) -> tuple[Dataset, SplitSpec]:
        raw = self.raw_dataset()
        split = self.split(raw)
        return prepare(raw, self.policy(), fit_indices=split.train), split

    def models(self):
        if not self.m.models:
            raise ManifestError("models", "at least one model is required")
        return dict(self.m.models)

    # -- outputs --------------------------------------------------------------

    def write_result(self, result: pipeline.ComparisonResult, sub: str = "") -> Path:
        folder = self.out / sub if sub else self.out
        pipeline.emit_report(result, "json", folder / "report.json")
        extras = [self.fmt] if self.fmt else ["csv", "markdown", "radar_svg"]
        names = {"csv": "report.csv", "markdown": "report.md", "radar_svg": "."}
        for fmt in extras:
            if fmt != "json":
                pipeline.emit_report(result, fmt, folder / names[fmt])
        for name, per_seed in result.histories.items():
            for seed, hist in per_seed.items():
                write_history(hist, folder / "histories" / f"{name}_seed{seed}.csv")
        return folder / "report.json"



def cmd_prepare(run: Run) -> str:
    ds, split = run.prepared()
    path = write_dataset(ds, run.out / "prepared.csv")
    save_cache(ds, run.out / "prepared.npz")
    atomic_write_text(run.out / "split.json", json.dumps(
        {k: getattr(split, k).tolist() for k in ("train", "validation", "test")}))
    return f"prepare: {len(ds)} rows, {len(ds.feature_fields)} features -> {path}"


def cmd_synth_rule(run: Run) -> str:
    opts = dict(run.m.data.get("rule", {}))
    opts.update(run.m.synth_rule)
    config = load_config(run.m.resolve(opts["config"]) if "config" in opts else None)
    n = int(opts.get("n", 100_000))
    ds = generate_rule_dataset(config, n, run.seed, run.workers)
    path = write_rule_dataset(ds, run.out / "rule.csv", config, run.seed)
    return f"synth-rule: {n} rows, positive rate {ds.labels.mean():.4f} -> {path}"


def _diffusion(run: Run, ds: Dataset, split: SplitSpec) -> Dataset:
    bundle, history = train_diffusion(ds, run.m.diffusion, run.seed, rows=split.train)
    bundle.save(run.out / "diffusion_bundle.npz")
    lines = ["epoch,recon,kl,diff,ctr,total"]
    lines += [f"{i},{h.recon!r},{h.kl!r},{h.diff!r},{h.ctr!r},{h.total!r}" for i, h in enumerate(history, 1)]
    atomic_write_text(run.out / "diffusion_history.csv", "\n".join(lines) + "\n")
    m = run.m.diffusion_rows or len(split.train)
    return generate_synthetic(bundle, m, run.seed, run.workers)


def cmd_synth_diffusion(run: Run) -> str:
    ds, split = run.prepared()
    syn = _diffusion(run, ds, split)
    path = write_dataset(syn, run.out / "diffusion.csv")
    atomic_write_text(str(path) + ".provenance.json", json.dumps(
        {"generator": "diffusion", "seed": run.seed, "M": len(syn), "provenance": syn.provenance,
         "config": run.m.diffusion.to_dict()}, indent=1, sort_keys=True))
    return f"synth-diffusion: {len(syn)} rows, positive rate {syn.labels.mean():.4f} -> {path}"


def cmd_train(run: Run) -> str:
    ds, split = run.prepared()
    seed = run.m.train.seeds[0] if run.seed == run.m.seed else run.seed
    for name, spec in run.models().items():
        tm = train_model(spec, ds, split, run.m.train, seed=seed)
        tm.model.save(run.out / "models" / f"{name}.npz")
        write_history(tm.history, run.out / "models" / f"{name}.history.csv")
        log.info("trained %s: best epoch %d of %d", name, tm.best_epoch, len(tm.history))
    return f"train: {len(run.models())} model(s) -> {run.out / 'models'}"


def cmd_evaluate(run: Run) -> str:
    ds, split = run.prepared()
    segment = run.m.evaluate.get("segment_field")
    per_seed, averaged = {}, {}
    for name in run.models():
        path = run.out / "models" / f"{name}.npz"
        if not path.exists():
            raise DataError(f"no trained model at {path}; run 'train' first")
        report = compute_report(predict(CTRModel.load(path), ds, split.test, segment), provenance={"model": name})
        per_seed[name] = {0: report}
        averaged[name] = pipeline.average_reports([report])
    order = list(run.models())
    result = pipeline.ComparisonResult("evaluate", order, [0], per_seed, averaged,
                                       pipeline.rank_flags(averaged, order), meta={"dataset": ds.provenance})
    path = run.write_result(result, "evaluate")
    return f"evaluate: {len(order)} model(s) -> {path}"


def _search(run: Run, ds: Dataset, split: SplitSpec, models: dict):
    s = run.m.search
    target = s.get("model")
    target = next((n for n, spec in models.items() if target in (n, spec.kind)), target)
    if target not in models:
        raise ManifestError("search.model", f"must name one of {sorted(models)}")
    try:
        space = pipeline.SearchSpace(dict(s.get("space", {})))
    except ValueError as exc:
        raise ManifestError("search.space", str(exc)) from None
    base = models[target]
    if s.get("method", "grid") == "grid":
        res = pipeline.grid_search(space, base.kind, ds, split, run.m.train, run.workers, base)
    else:
        res = pipeline.random_search(space, int(s.get("n_trials", 10)), run.seed, base.kind, ds, split,
                                     run.m.train, run.workers, base)
    rows = res.log_rows()
    atomic_write_text(run.out / "search.json", json.dumps({"best": res.best, "trials": rows}, indent=1,
                                                          sort_keys=True, default=list))
    for t in res.trials:
        write_history(t.history, run.out / "histories" / f"search_{target}_trial{t.index}.csv")
    spec, config = pipeline.apply_params(base, run.m.train, res.best)
    models = dict(models)
    models[target] = spec
    return models, config


def cmd_compare(run: Run) -> str:
    ds, split = run.prepared()
    models, config = run.models(), run.m.train
    if run.m.search:
        models, config = _search(run, ds, split, models)
    result = pipeline.run_comparison(models, ds, split, config, run.workers,
                                     run.m.evaluate.get("segment_field"), run.m.evaluate.get("baseline"))
    run.write_result(result)
    if result.errors:
        raise RuntimeError(f"{sum(map(len, result.errors.values()))} cell(s) failed; see report.json")
    best = result.flags.get("AUC-ROC", {}).get("best")
    return f"compare: {len(models)} model(s) x {len(result.seeds)} seed(s), best AUC-ROC {best} -> {run.out}"


def cmd_tstr(run: Run) -> str:
    ds, split = run.prepared()
    if "synthetic" in run.m.tstr:
        path = run.m.resolve(run.m.tstr["synthetic"])
        if not path.exists():
            raise DataError(f"synthetic dataset not found: {path}")
        syn = read_dataset(path)
    else:
        syn = _diffusion(run, ds, split)
    result = pipeline.run_tstr(syn, ds, split, run.models(), run.m.train, run.workers, seed=run.seed,
                               segment_field=run.m.evaluate.get("segment_field"),
                               baseline=run.m.evaluate.get("baseline"))
    run.write_result(result, "tstr")
    if result.errors:
        raise RuntimeError(f"{sum(map(len, result.errors.values()))} cell(s) failed; see tstr/report.json")
    aucs = {n: round(r.values.get("AUC-ROC", float("nan")), 4) for n, r in result.averaged.items()}
    return f"tstr: test AUC-ROC {aucs} -> {run.out / 'tstr'}"


def cmd_report(args) -> str:
    if args.input:
        src = Path(args.input)
    else:
        out = Path(args.out) if args.out else (load_manifest(args.manifest).output_dir if args.manifest else Path("out"))
        src = out / "report.json"
    if not src.exists():
        raise DataError(f"report not found: {src}")
    result = pipeline.load_result(src)
    fmt = args.format or "markdown"
    if fmt == "json":
        sys.stdout.write(result.to_json() + "\n")
    elif fmt == "csv":
        sys.stdout.write(pipeline.render_csv(result))
    else:
        sys.stdout.write(pipeline.render_markdown(result))
    return f"report: rendered {src} as {fmt}"


HANDLERS = {"prepare": cmd_prepare, "synth-rule": cmd_synth_rule, "synth-diffusion": cmd_synth_diffusion,
            "train": cmd_train, "evaluate": cmd_evaluate, "compare": cmd_compare, "tstr": cmd_tstr}


def run_command(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        if args.command == "report":
            summary = cmd_report(args)
        else:
            run = Run(load_manifest(args.manifest), args)
            summary = HANDLERS[args.command](run)
    except ManifestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(summary)
    return EXIT_OK


def main() -> None:
    logging.basicConfig(level=os.environ.get("BENCH_CTR_LOGLEVEL", "WARNING"),
                        format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run_command())


if __name__ == "__main__":
    main()
