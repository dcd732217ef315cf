"""Rebuild the shipped default rule-generation config.

The cluster layout below is fixed by hand; the order weights are then
rescaled by bisection so the Monte Carlo mean click probability (after
clamping) hits the target positive rate.

    python scripts/tune_rule_default.py [--target 0.25] [--n 400000]
"""
import argparse
from pathlib import Path

from benchctr.synth_rule import (
    CategoricalSpec,
    Cluster,
    LogNormalSpec,
    RuleGenConfig,
    TruncNormalSpec,
    _shard,
    click_probabilities,
    save_config,
)

OUT = Path(__file__).resolve().parents[1] / "src" / "benchctr" / "resources" / "rule_default.json"

FIELDS = [
    ("device_type", 10, 0.8),
    ("site_category", 20, 0.9),
    ("app_category", 30, 1.0),
    ("ad_category", 50, 1.0),
    ("user_segment", 100, 1.0),
    ("region", 200, 1.05),
    ("publisher", 500, 1.1),
    ("advertiser", 1000, 1.1),
]


def v(name, i):
    return f"{name}_{i}"


def build(order_weights):
    cats = [CategoricalSpec.zipf(n, c, s) for n, c, s in FIELDS]
    first = [
        Cluster(1.0, {"device_type": v("device_type", 1)}),
        Cluster(1.0, {"age": 28.0}),
        Cluster(0.5, {"publisher": v("publisher", 0)}),
    ]
    # Diagonal pair patterns: a value of one field only pays off together with
    # the matching value of its partner, which no additive model can express.
    second = []
    for i in range(4):
        second.append(Cluster(1.0, {"site_category": v("site_category", i), "ad_category": v("ad_category", i)}))
        second.append(Cluster(1.0, {"app_category": v("app_category", i), "user_segment": v("user_segment", i)}))
    second.append(Cluster(1.0, {"age": 45.0, "ad_category": v("ad_category", 5)}))
    third = []
    for i in range(3):
        third.append(Cluster(1.0, {"device_type": v("device_type", i), "region": v("region", i),
                                   "advertiser": v("advertiser", i)}))
    third.append(Cluster(1.0, {"price": 60.0, "site_category": v("site_category", 1),
                               "user_segment": v("user_segment", 2)}))
    return RuleGenConfig(
        categorical=cats,
        age=TruncNormalSpec(),
        price=LogNormalSpec(),
        clusters={1: first, 2: second, 3: third},
        order_weights=list(order_weights),
        base_rate=0.01,
        similarity_scales={"age": 6.0, "price": 25.0},
        version="1",
    )


def mean_rate(config, cols):
    return float(click_probabilities(cols, config).mean())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--target", type=float, default=0.25)
    ap.add_argument("--n", type=int, default=400_000)
    ap.add_argument("--shape", type=float, nargs=3, default=(0.15, 0.6, 0.6),
                    help="relative order weights before rescaling")
    args = ap.parse_args()
    probe = build(args.shape)
    cols = _shard(probe, seed=12345, shard=0, n=args.n)
    lo, hi = 0.0, 10.0
    for _ in range(60):
        mid = (lo + hi) / 2
        rate = mean_rate(build([mid * a for a in args.shape]), cols)
        lo, hi = (mid, hi) if rate < args.target else (lo, mid)
    scale = (lo + hi) / 2
    weights = [round(scale * a, 6) for a in args.shape]
    config = build(weights)
    config.validate()
    print(f"order weights {weights}; mean click probability {mean_rate(config, cols):.4f}")
    save_config(config, OUT)
    print(f"wrote {OUT}")


if __name__ == "__main__":
    main()
