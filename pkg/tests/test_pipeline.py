import json
import re

import numpy as np
import pytest
from hypothesis import given, strategies as st

from benchctr.data import DataError, Dataset, SplitSpec
from benchctr.metrics import DIRECTION, MetricReport
from benchctr.models import ModelSpec, TrainConfig
from benchctr.pipeline import (
    ComparisonResult, SearchSpace, TrialError, average_reports, emit_report, grid_search, load_result,
    radar_normalize, random_search, rank_flags, render_markdown, run_comparison, run_tstr,
)

from conftest import encoded_ds

FAST = TrainConfig(max_epochs=4, batch_size=64, seeds=(1,))


def data(n=600, seed=0, **kw):
    ds = encoded_ds(n, seed=seed, **kw)
    perm = np.random.default_rng(seed).permutation(n)
    a, b = int(0.7 * n), int(0.85 * n)
    return ds, SplitSpec(perm[:a], perm[a:b], perm[b:])


def report(**values):
    return MetricReport(dict(values), {})


def result_of(averaged, label="t"):
    names = list(averaged)
    return ComparisonResult(label, names, [1], {n: {1: r} for n, r in averaged.items()}, averaged,
                            rank_flags(averaged, names))


def test_grid_counts_and_single_point():
    ds, sp = data()
    space = SearchSpace({"learning_rate": [0.01, 0.05], "embedding_dim": [3]})
    res = grid_search(space, "fm", ds, sp, FAST)
    assert len(res.trials) == 2
    assert [t.index for t in res.trials] == [0, 1]
    best = max(res.trials, key=lambda t: (t.auc, -t.logloss))
    assert res.best == best.params
    one = grid_search(SearchSpace({"learning_rate": [0.02]}), "lr", ds, sp, FAST)
    assert one.best == {"learning_rate": 0.02} and len(one.trials) == 1


def test_grid_is_deterministic_and_worker_independent():
    ds, sp = data(seed=1)
    space = SearchSpace({"learning_rate": [0.01, 0.03, 0.1]})
    a = grid_search(space, "lr", ds, sp, FAST)
    b = grid_search(space, "lr", ds, sp, FAST, workers=3)
    assert a.best == b.best and a.log_rows() == b.log_rows()


@given(st.lists(st.integers(1, 4), min_size=1, max_size=4))
def test_grid_size_is_cartesian_product(sizes):
    keys = ["learning_rate", "embedding_dim", "batch_size", "dropout"]
    space = SearchSpace({k: list(range(1, s + 1)) for k, s in zip(keys, sizes)})
    assert len(space.grid()) == int(np.prod(sizes))


def test_random_search_counts_and_seeding():
    ds, sp = data(seed=2)
    space = SearchSpace({"learning_rate": {"loguniform": [1e-3, 1e-1]}, "embedding_dim": {"randint": [2, 6]}})
    a = random_search(space, 5, 7, "fm", ds, sp, FAST)
    b = random_search(space, 5, 7, "fm", ds, sp, FAST)
    assert len(a.trials) == 5
    assert [t.params for t in a.trials] == [t.params for t in b.trials]
    for t in a.trials:
        assert 1e-3 <= t.params["learning_rate"] <= 1e-1 and 2 <= t.params["embedding_dim"] <= 6
    flat = SearchSpace({"learning_rate": {"choice": [0.02]}})
    c = random_search(flat, 3, 0, "lr", ds, sp, FAST)
    assert [t.params for t in c.trials] == [{"learning_rate": 0.02}] * 3
    assert c.best == {"learning_rate": 0.02}


def test_search_errors():
    with pytest.raises(ValueError):
        SearchSpace({})
    with pytest.raises(ValueError):
        SearchSpace({"warp_factor": [1]})
    ds, sp = data()
    with pytest.raises(TrialError, match="trial 1"):
        grid_search(SearchSpace({"embedding_dim": [2, 0]}), "fm", ds, sp, FAST)


def test_averaging_and_single_seed_identity():
    r1, r2 = report(**{"AUC-ROC": 0.7, "Logloss": 0.5}), report(**{"AUC-ROC": 0.8, "Logloss": 0.4})
    avg = average_reports([r1, r2])
    assert avg.values["AUC-ROC"] == pytest.approx(0.75, abs=1e-12)
    assert avg.values["Logloss"] == pytest.approx(0.45, abs=1e-12)
    ds, sp = data(seed=3)
    res = run_comparison([ModelSpec("lr")], ds, sp, FAST)
    assert res.averaged["LR"].values == res.per_seed["LR"][1].values | {"RIG": 0.0, "RelaImpr": 0.0}


def test_comparison_two_seeds_and_flags():
    ds, sp = data(seed=4)
    cfg = TrainConfig(max_epochs=4, batch_size=64, seeds=(1, 2))
    res = run_comparison([ModelSpec("lr"), ModelSpec("fm", embedding_dim=4)], ds, sp, cfg)
    for name in ("LR", "FM"):
        for k, v in res.averaged[name].values.items():
            if k in res.per_seed[name][1].values:
                mean = (res.per_seed[name][1].values[k] + res.per_seed[name][2].values[k]) / 2
                assert abs(v - mean) <= 1e-12
    for metric, flag in res.flags.items():
        vals = {n: res.averaged[n].values[metric] for n in ("LR", "FM")}
        pick = max(vals, key=vals.get) if DIRECTION[metric] else min(vals, key=vals.get)
        if vals["LR"] != vals["FM"]:
            assert flag["best"] == pick


def test_failed_cells_are_reported_and_others_complete():
    ds, sp = data(seed=5)
    single = SplitSpec(sp.train, sp.validation[ds.labels[sp.validation] == 1], sp.test)
    res = run_comparison([ModelSpec("lr")], ds, single, FAST)
    assert "LR" in res.errors and not res.averaged


class CountingDataset(Dataset):
    """Records every row index it hands out and forbids column reads outside ``take``."""

    def __post_init__(self):
        super().__post_init__()
        object.__setattr__(self, "taken", [])
        object.__setattr__(self, "columns", _Guarded(self.columns))

    def take(self, indices):
        self.taken.append(np.asarray(indices).copy())
        self.columns.open = True
        try:
            return super().take(indices)
        finally:
            self.columns.open = False


class _Guarded(dict):
    open = False

    def __getitem__(self, key):
        if not self.open:
            raise AssertionError(f"column {key!r} read outside take")
        return super().__getitem__(key)

    def items(self):
        if not self.open:
            raise AssertionError("columns iterated outside take")
        return super().items()


def test_tstr_reads_only_real_test_rows():
    ds, sp = data(seed=6)
    syn, _ = data(seed=7)
    real = CountingDataset(ds.schema, dict(ds.columns), provenance=ds.provenance)
    res = run_tstr(syn, real, sp, [ModelSpec("lr")], FAST)
    assert res.label == "TSTR" and not res.errors
    assert real.taken and all(np.isin(t, sp.test).all() for t in real.taken)


def test_degenerate_tstr_equals_ordinary_evaluation():
    ds, sp = data(seed=8)
    specs = [ModelSpec("lr"), ModelSpec("fm", embedding_dim=4)]
    a = run_comparison(specs, ds, sp, FAST)
    b = run_tstr(ds, ds, sp, specs, FAST, synthetic_split=sp)
    for name in a.models:
        assert a.per_seed[name][1].values == b.per_seed[name][1].values


def test_tstr_shuffled_labels_near_chance():
    ds, sp = data(4000, seed=9)
    syn = ds.replace(columns=dict(ds.columns, click=np.random.default_rng(1).permutation(ds.labels)))
    res = run_tstr(syn, ds, sp, [ModelSpec("lr")], TrainConfig(batch_size=256, seeds=(1,)))
    assert abs(res.averaged["LR"].values["AUC-ROC"] - 0.5) <= 0.05


def test_tstr_schema_mismatch():
    ds, sp = data()
    other, _ = data(cards=(5, 6, 3))
    with pytest.raises(DataError):
        run_tstr(other, ds, sp, [ModelSpec("lr")], FAST)


def test_json_round_trip(tmp_path):
    ds, sp = data(seed=10)
    res = run_comparison([ModelSpec("lr"), ModelSpec("poly2", pair_hash_buckets=64)], ds, sp, FAST)
    emit_report(res, "json", tmp_path / "r.json")
    back = load_result(tmp_path / "r.json")
    assert back.to_dict() == res.to_dict()
    assert json.loads(back.to_json()) == json.loads(res.to_json())


def test_markdown_bold_and_underline():
    res = result_of({"A": report(**{"AUC-ROC": 0.7, "Logloss": 0.40, "MSE": 0.2}),
                     "B": report(**{"AUC-ROC": 0.8, "Logloss": 0.45, "MSE": 0.2})})
    md = render_markdown(res, ["AUC-ROC", "Logloss", "MSE"])
    rows = [line for line in md.splitlines() if re.match(r"\| [AB] \|", line)]
    assert len(rows) == 2
    a, b = rows
    assert "<u>0.7000</u>" in a and "**0.8000**" in b
    assert "**0.4000**" in a and "<u>0.4500</u>" in b
    assert "**0.2000**" in a and "<u>0.2000</u>" in b


def test_radar_normalization(tmp_path):
    res = result_of({"A": report(**{"AUC-ROC": 0.7, "Logloss": 0.40}),
                     "B": report(**{"AUC-ROC": 0.8, "Logloss": 0.45}),
                     "C": report(**{"AUC-ROC": 0.75, "Logloss": 0.50})})
    norm = radar_normalize(res, ["AUC-ROC", "Logloss"])
    assert norm["B"]["AUC-ROC"] == 1.0 and norm["A"]["AUC-ROC"] == 0.0
    assert norm["C"]["AUC-ROC"] == pytest.approx(0.5)
    assert norm["A"]["Logloss"] == 1.0 and norm["C"]["Logloss"] == 0.0
    paths = emit_report(res, "radar_svg", tmp_path / "x.svg")
    assert sorted(p.name for p in paths) == ["radar_confusion.svg", "radar_probability.svg"]
    assert paths[0].read_text().startswith("<svg")
    with pytest.raises(ValueError):
        emit_report(res, "pdf", tmp_path / "x.pdf")
