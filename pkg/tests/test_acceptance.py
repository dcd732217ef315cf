"""Acceptance suite: one check per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` or directly with
``python tests/test_acceptance.py`` (add ``--fast`` to skip the two long
end-to-end runs).
"""
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from benchctr import nn  # noqa: E402
from benchctr.cli import run_command  # noqa: E402
from benchctr.data import PredictionSet, SplitSpec  # noqa: E402
from benchctr.metrics import (ConfusionCounts, auc_pr, auc_roc, confusion_counts, confusion_metrics,  # noqa: E402
                              copc, kld, probability_metrics)
from benchctr.models import (CTRModel, FeatureLayout, ModelSpec, TrainConfig, fm_score,  # noqa: E402
                             train_model)
from benchctr.pipeline import run_comparison, run_tstr  # noqa: E402
from benchctr.prep import PrepPolicy, prepare, split_holdout  # noqa: E402
from benchctr.synth_diffusion import (DiffusionBundle, DiffusionConfig, FeatureCodec, batch_loss,  # noqa: E402
                                      generate_synthetic, train_diffusion)
from benchctr.synth_rule import generate_rule_dataset, load_config  # noqa: E402

from conftest import encoded_ds  # noqa: E402
from oracles import fm_bruteforce, max_rel_error, numeric_grad, pairwise_auc  # noqa: E402

# pinned tolerances
AUC_ORACLE_TOL = 1e-12
METRIC_CASES = 1000
METRIC_BUDGET_S = 10.0
GRAD_TOL = 1e-4
GRAD_BUDGET_S = 30.0
FM_TOL = 1e-9
FM_CASES = 1000
RULE_N = 100_000
RULE_ZERO_RATE = 0.01
RULE_ZERO_BAND = 3 * math.sqrt(0.01 * 0.99 / RULE_N)
RULE_DEFAULT_RATE, RULE_DEFAULT_BAND, RULE_FIELDS = 0.25, 0.02, 10
RULE_BUDGET_S = 60.0
ORDER_ROWS, ORDER_MARGIN, ORDER_BUDGET_S = 200_000, 0.01, 15 * 60
TSTR_ROWS, TSTR_SYNTH_ROWS, TSTR_MIN_AUC, TSTR_NULL_BAND, TSTR_BUDGET_S = 100_000, 80_000, 0.55, 0.05, 30 * 60
TSTR_SHUFFLES = 3
STOP_SEQUENCE, STOP_PATIENCE, STOP_LAST, STOP_BEST = [0.70, 0.72, 0.71, 0.71], 2, 4, 2


def line(n, ok, detail):
    return f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"


# -- 1 ---------------------------------------------------------------------------------


def check_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(METRIC_CASES):
        n = int(rng.integers(2, 201))
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        p = rng.random(n)
        dup = rng.random(n) < 0.3
        p[dup] = rng.choice(p[~dup] if (~dup).any() else p, dup.sum())
        p = np.round(p, int(rng.integers(1, 4))) if rng.random() < 0.5 else p
        worst = max(worst, abs(auc_roc(PredictionSet(y, p)) - pairwise_auc(y.tolist(), p.tolist())))
    m = confusion_metrics(ConfusionCounts(2, 1, 3, 4))
    exact = (m["Precision"] == 2 / 3 and m["Recall"] == 1 / 3 and m["Accuracy"] == 0.5
             and math.isclose(m["F1"], 4 / 9, rel_tol=0, abs_tol=1e-15)
             and math.isclose(m["MCC"], 2 / math.sqrt(504), rel_tol=0, abs_tol=1e-15))
    elapsed = time.perf_counter() - t0
    ok = worst <= AUC_ORACLE_TOL and exact and elapsed < METRIC_BUDGET_S
    return ok, (f"max |auc - pairwise| = {worst:.2e} (tol {AUC_ORACLE_TOL:g}); (2,1,3,4) exact: {exact}; "
                f"{elapsed:.1f}s (< {METRIC_BUDGET_S:g}s)")


# -- 2 ---------------------------------------------------------------------------------


def check_metric_relationships():
    rng = np.random.default_rng(2)
    failures = []
    for case in range(METRIC_CASES):
        n = int(rng.integers(2, 200))
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        p = rng.random(n)
        ps = PredictionSet(y, p)
        pm = probability_metrics(ps)
        cm = confusion_metrics(confusion_counts(ps, float(rng.random())))
        P, R, F1 = cm["Precision"], cm["Recall"], cm["F1"]
        f1_ok = abs(F1 - (2 * P * R / (P + R) if P + R > 0 else 0.0)) <= 1e-12
        q = p**3
        mono_ok = auc_roc(PredictionSet(y, q)) == auc_roc(ps) and auc_pr(PredictionSet(y, q)) == auc_pr(ps)
        # dyadic mass moves keep sum(p) == sum(y) exactly
        c = y.astype(float)
        for _ in range(20):
            i, j = rng.integers(0, n, 2)
            d = float(rng.choice([0.5, 0.25, 0.125]))
            if c[i] >= d and c[j] <= 1 - d:
                c[i] -= d
                c[j] += d
        checks = {
            "rmse": abs(pm["RMSE"] - math.sqrt(pm["MSE"])) <= 1e-15,
            "f1": f1_ok,
            "mcc": -1.0 <= cm["MCC"] <= 1.0,
            "rank": mono_ok,
            "kld": kld(ps) >= 0.0,
            "copc": copc(PredictionSet(y, c)) == 1.0,
        }
        failures += [(case, k) for k, v in checks.items() if not v]
    ok = not failures
    return ok, f"{METRIC_CASES} cases x 6 relationships, failures: {failures[:5] if failures else 0}"


# -- 3 ---------------------------------------------------------------------------------


def check_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    ds = encoded_ds(24, seed=3)
    cfg = DiffusionConfig(latent_dim=4, hidden=10, code_width=3, T=100, lambda_kl=0.5, lambda_ctr=0.8)
    codec = FeatureCodec.fit(ds, cfg.code_width, rng)
    bundle = DiffusionBundle.create(codec, cfg, rng)
    for p in bundle.params:
        p[...] = rng.normal(0, 0.4, p.shape)
    x, y = codec.encode(ds), ds.labels.astype(float)
    noise = (rng.normal(size=(len(x), 4)), rng.integers(1, cfg.T + 1, len(x)), rng.normal(size=(len(x), 4)))
    _, grads = batch_loss(bundle, x, y, rng, noise=noise, train=False)
    num = numeric_grad(lambda: batch_loss(bundle, x, y, rng, noise=noise, train=False)[0].total, bundle.params)
    errors, start = {}, 0
    for name, net in bundle.nets.items():
        k = len(net.params)
        errors[name] = max_rel_error(grads[start:start + k], num[start:start + k])
        start += k

    layout = FeatureLayout.from_dataset(ds)
    spec = ModelSpec("mlp", embedding_dim=3, hidden_layers=(6, 5), l2_embedding_weight=1e-3)
    model = CTRModel.init(spec, layout, rng)
    for a in model.arrays:
        a[...] = rng.normal(0, 0.4, a.shape)
    idx, val = layout.encode(ds)

    def loss():
        logit, _ = model.logits(idx, val)
        p = nn.sigmoid(logit)
        return (-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
                + spec.l2_embedding_weight / len(y) * np.sum(model.params["E"][idx] ** 2))

    logit, cache = model.logits(idx, val)
    analytic = model.gradients(cache, nn.bce_with_logits(logit, y)[1], spec.l2_embedding_weight)
    errors["mlp_scorer"] = max_rel_error(analytic, numeric_grad(loss, model.arrays))
    elapsed = time.perf_counter() - t0
    ok = max(errors.values()) < GRAD_TOL and elapsed < GRAD_BUDGET_S
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    return ok, f"relative errors: {detail} (tol {GRAD_TOL:g}); {elapsed:.1f}s (< {GRAD_BUDGET_S:g}s)"


# -- 4 ---------------------------------------------------------------------------------


def check_fm_identity():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(FM_CASES):
        nf, k, m = 50, int(rng.integers(1, 17)), int(rng.integers(1, 12))
        params = {"w0": rng.normal(size=1), "w": rng.normal(size=nf), "V": rng.normal(size=(nf, k))}
        idx = rng.choice(nf, m, replace=False)
        val = np.where(rng.random(m) < 0.7, 1.0, rng.normal(size=m))
        ref = fm_bruteforce(params["w0"][0], params["w"], params["V"], idx, val)
        worst = max(worst, abs(fm_score(params, idx, val) - ref))
    return worst <= FM_TOL, f"max |linear-time - brute force| = {worst:.2e} over {FM_CASES} instances (tol {FM_TOL:g})"


# -- 5 ---------------------------------------------------------------------------------


def check_rule_generator():
    t0 = time.perf_counter()
    cfg = load_config()
    zero = generate_rule_dataset(replace(cfg, order_weights=[0.0] * cfg.K), RULE_N, seed=5)
    r0 = float(zero.labels.mean())
    ds = generate_rule_dataset(cfg, RULE_N, seed=6)
    r1, nf = float(ds.labels.mean()), len(ds.feature_fields)
    elapsed = time.perf_counter() - t0
    ok = (abs(r0 - RULE_ZERO_RATE) <= RULE_ZERO_BAND and abs(r1 - RULE_DEFAULT_RATE) <= RULE_DEFAULT_BAND
          and nf == RULE_FIELDS and elapsed < RULE_BUDGET_S)
    return ok, (f"alpha=0 rate {r0:.5f} (0.01 +- {RULE_ZERO_BAND:.5f}); default rate {r1:.4f} "
                f"(0.25 +- 0.02), {nf} fields; {elapsed:.1f}s (< {RULE_BUDGET_S:g}s)")


# -- 6 ---------------------------------------------------------------------------------


def check_ordering():
    t0 = time.perf_counter()
    raw = generate_rule_dataset(load_config(), ORDER_ROWS, seed=2019)
    split = split_holdout(raw, (0.8, 0.1, 0.1), seed=2019)
    ds = prepare(raw, PrepPolicy(), fit_indices=split.train)
    res = run_comparison([ModelSpec("lr"), ModelSpec("fm"), ModelSpec("mlp")], ds, split, TrainConfig())
    auc = {n: res.averaged[n].values["AUC-ROC"] for n in ("LR", "FM", "MLP")}
    elapsed = time.perf_counter() - t0
    ok = (auc["FM"] >= auc["LR"] + ORDER_MARGIN and auc["MLP"] >= auc["LR"] + ORDER_MARGIN
          and elapsed < ORDER_BUDGET_S and not res.errors)
    return ok, (f"seed-averaged test AUC LR {auc['LR']:.4f}, FM {auc['FM']:.4f}, MLP {auc['MLP']:.4f} "
                f"(margin {ORDER_MARGIN}); {elapsed / 60:.1f} min (< 15 min)")


# -- 7 ---------------------------------------------------------------------------------


def check_tstr():
    t0 = time.perf_counter()
    raw = generate_rule_dataset(load_config(), TSTR_ROWS, seed=11)
    split = split_holdout(raw, (0.8, 0.1, 0.1), seed=11)
    real = prepare(raw, PrepPolicy(), fit_indices=split.train)
    bundle, _ = train_diffusion(real, DiffusionConfig(), seed=3, rows=split.train)
    syn = generate_synthetic(bundle, TSTR_SYNTH_ROWS, seed=5)
    specs = [ModelSpec("lr"), ModelSpec("fm")]
    cfg = TrainConfig(seeds=(2019,))
    res = run_tstr(syn, real, split, specs, cfg, seed=7)
    auc = {n: res.averaged[n].values["AUC-ROC"] for n in ("LR", "FM")} if not res.errors else {}
    nulls = []
    for s in range(TSTR_SHUFFLES):
        perm = np.random.default_rng(100 + s).permutation(syn.labels)
        shuffled = syn.replace(columns=dict(syn.columns, **{syn.label_field.name: perm}))
        ctrl = run_tstr(shuffled, real, split, [ModelSpec("lr")], cfg, seed=7)
        nulls.append(ctrl.averaged["LR"].values["AUC-ROC"])
    null = float(np.mean(nulls))
    elapsed = time.perf_counter() - t0
    ok = (bool(auc) and min(auc.values()) >= TSTR_MIN_AUC and abs(null - 0.5) <= TSTR_NULL_BAND
          and elapsed < TSTR_BUDGET_S)
    detail = ", ".join(f"{k} {v:.4f}" for k, v in auc.items()) or f"errors {res.errors}"
    return ok, (f"TSTR AUC {detail} (>= {TSTR_MIN_AUC}); shuffled control {null:.4f} "
                f"(mean of {TSTR_SHUFFLES}, 0.5 +- {TSTR_NULL_BAND}); {elapsed / 60:.1f} min (< 30 min)")


# -- 8 ---------------------------------------------------------------------------------

DETERMINISM_MANIFEST = """
seed = 2019
[data.rule]
n = 8000
[train]
max_epochs = 5
batch_size = 512
seeds = [2019, 2020]
[[models]]
kind = "lr"
[[models]]
kind = "fm"
[[models]]
kind = "mlp"
dropout = 0.1
[[models]]
kind = "poly2"
"""


def check_determinism(tmp: Path):
    manifest = tmp / "det.toml"
    manifest.write_text(DETERMINISM_MANIFEST)
    blobs, codes = [], []
    for i, workers in enumerate((1, 1, 4)):
        out = tmp / f"run{i}"
        codes.append(run_command(["compare", "--manifest", str(manifest), "--out", str(out),
                                  "--workers", str(workers), "--format", "json"]))
        blobs.append((out / "report.json").read_bytes() if codes[-1] == 0 else b"")
    ok = codes == [0, 0, 0] and blobs[0] == blobs[1] == blobs[2]
    return ok, (f"exit codes {codes}; report.json identical across two runs: {blobs[0] == blobs[1]}, "
                f"workers 1 vs 4: {blobs[0] == blobs[2]}")


# -- 9 ---------------------------------------------------------------------------------


def check_early_stopping():
    ds = encoded_ds(300, seed=9)
    perm = np.random.default_rng(9).permutation(300)
    split = SplitSpec(perm[:200], perm[200:250], perm[250:])
    seq = STOP_SEQUENCE + [1.0] * 10
    snaps = {}

    def monitor(model, epoch):
        snaps[epoch] = model.snapshot()
        return seq[epoch - 1]

    tm = train_model(ModelSpec("lr"), ds, split, TrainConfig(early_stop_patience=STOP_PATIENCE, batch_size=50,
                                                             learning_rate=0.05), monitor_fn=monitor)
    last = tm.history[-1]["epoch"]
    same = all(np.array_equal(a, b) for a, b in zip(tm.model.arrays, snaps[STOP_BEST]))
    ok = last == STOP_LAST and tm.best_epoch == STOP_BEST and same
    return ok, f"halted after epoch {last}, best epoch {tm.best_epoch}, parameters equal epoch-2 snapshot: {same}"


# -- pytest entry points ----------------------------------------------------------------


def _record(capsys, n, result):
    ok, detail = result
    with capsys.disabled():
        print("\n" + line(n, ok, detail))
    assert ok, detail


def test_criterion_1_metric_oracles(capsys):
    _record(capsys, 1, check_metric_oracles())


def test_criterion_2_metric_relationships(capsys):
    _record(capsys, 2, check_metric_relationships())


def test_criterion_3_gradient_checks(capsys):
    _record(capsys, 3, check_gradients())


def test_criterion_4_fm_identity(capsys):
    _record(capsys, 4, check_fm_identity())


def test_criterion_5_rule_generator(capsys):
    _record(capsys, 5, check_rule_generator())


@pytest.mark.slow
def test_criterion_6_model_ordering(capsys):
    _record(capsys, 6, check_ordering())


@pytest.mark.slow
def test_criterion_7_tstr(capsys):
    _record(capsys, 7, check_tstr())


def test_criterion_8_determinism(capsys, tmp_path):
    _record(capsys, 8, check_determinism(tmp_path))


def test_criterion_9_early_stopping(capsys):
    _record(capsys, 9, check_early_stopping())


if __name__ == "__main__":
    import tempfile

    fast = "--fast" in sys.argv
    checks = [(1, check_metric_oracles), (2, check_metric_relationships), (3, check_gradients),
              (4, check_fm_identity), (5, check_rule_generator)]
    if not fast:
        checks += [(6, check_ordering), (7, check_tstr)]
    with tempfile.TemporaryDirectory() as tmp:
        checks += [(8, lambda: check_determinism(Path(tmp))), (9, check_early_stopping)]
        results = []
        for n, fn in sorted(checks):
            ok, detail = fn()
            print(line(n, ok, detail), flush=True)
            results.append(ok)
    sys.exit(0 if all(results) else 1)
