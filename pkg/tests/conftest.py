import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from benchctr.data import Dataset, FieldKind, FieldSchema

settings.register_profile("default", deadline=None, max_examples=100,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_raw(n=40, seed=0):
    """Raw dataset: two categoricals, one numeric, one timestamp, one label."""
    rng = np.random.default_rng(seed)
    schema = [
        FieldSchema("color", FieldKind.CATEGORICAL),
        FieldSchema("shape", FieldKind.CATEGORICAL),
        FieldSchema("price", FieldKind.NUMERIC),
        FieldSchema("ts", FieldKind.TEMPORAL),
        FieldSchema("click", FieldKind.LABEL),
    ]
    cols = {
        "color": np.array(rng.choice(["red", "green", "blue"], n, p=[0.5, 0.3, 0.2]), dtype=object),
        "shape": np.array(rng.choice(["sq", "tri"], n), dtype=object),
        "price": rng.lognormal(1.0, 1.0, n),
        "ts": rng.integers(0, 10 * 86400, n),
        "click": rng.integers(0, 2, n),
    }
    return Dataset(schema, cols, provenance="tiny")


@pytest.fixture
def raw_ds():
    return tiny_raw()


def encoded_ds(n=400, cards=(4, 6, 3), seed=0, signal=True):
    """Already-encoded categorical dataset with an optional learnable label rule."""
    rng = np.random.default_rng(seed)
    schema, cols = [], {}
    for j, c in enumerate(cards):
        vocab = {f"v{i}": i for i in range(c)}
        schema.append(FieldSchema(f"f{j}", FieldKind.CATEGORICAL, vocab, oov_id=c, cardinality=c + 1))
        cols[f"f{j}"] = rng.integers(0, c, n)
    if signal:
        logit = 2.0 * (cols["f0"] == 0) - 1.5 * (cols["f1"] == 1) + 1.0 * ((cols["f0"] == 1) & (cols["f2"] == 2)) - 0.5
        y = (rng.random(n) < 1 / (1 + np.exp(-logit))).astype(np.int64)
    else:
        y = rng.integers(0, 2, n)
    schema.append(FieldSchema("click", FieldKind.LABEL))
    cols["click"] = y
    return Dataset(schema, cols, provenance=f"encoded:{seed}")
