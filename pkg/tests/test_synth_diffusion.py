from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from benchctr import nn
from benchctr.data import FieldKind
from benchctr.prep import PrepPolicy, prepare, split_holdout
from benchctr.synth_diffusion import (
    DiffusionBundle, DiffusionConfig, FeatureCodec, add_noise, batch_loss, encode, generate_synthetic,
    linear_schedule, reparameterize, train_diffusion, train_epoch,
)
from benchctr.synth_rule import generate_rule_dataset, load_config

from conftest import encoded_ds
from oracles import max_rel_error, numeric_grad

SMALL = DiffusionConfig(latent_dim=3, hidden=8, code_width=2, T=50, num_steps=5, epochs=2, batch_size=64)


def small_bundle(seed=0, config=SMALL, zero=False, n=200):
    ds = encoded_ds(n, seed=seed)
    rng = np.random.default_rng(seed)
    codec = FeatureCodec.fit(ds, config.code_width, rng)
    return DiffusionBundle.create(codec, config, rng, zero=zero), codec.encode(ds), ds.labels.astype(float)


def test_zero_encoder_and_shapes():
    bundle, x, _ = small_bundle(zero=True)
    mu, lv = encode(bundle, x)
    assert np.all(mu == 0) and np.all(lv == 0)
    bundle, x, _ = small_bundle()
    mu, lv = encode(bundle, x)
    assert mu.shape == lv.shape == (len(x), SMALL.latent_dim)
    mu2, lv2 = encode(bundle, x)
    np.testing.assert_array_equal(mu, mu2)
    np.testing.assert_array_equal(lv, lv2)


def test_reparameterize():
    mu = np.array([[1.0, -2.0]])
    assert np.array_equal(reparameterize(mu, np.array([[0.3, 0.1]]), eps=np.zeros((1, 2))), mu)
    z = reparameterize(np.zeros(10_000), np.zeros(10_000), np.random.default_rng(0))
    n = len(z)
    assert abs(z.mean()) <= 3 / np.sqrt(n)
    assert abs(z.var() - 1) <= 3 * np.sqrt(2 / n)
    eps = np.random.default_rng(1).normal(size=(4, 2))
    h = 1e-6
    d = (reparameterize(mu + h, np.zeros((1, 2)), eps=eps) - reparameterize(mu - h, np.zeros((1, 2)), eps=eps)) / (2 * h)
    np.testing.assert_allclose(d, 1.0, atol=1e-8)


def test_add_noise_limits_and_variance():
    _, ab = linear_schedule(1000, 1e-4, 0.02)
    rng = np.random.default_rng(2)
    z, eps = rng.normal(size=(10_000, 2)), rng.normal(size=(10_000, 2))
    near = add_noise(z, 1, eps, ab)
    assert np.all(np.abs(near - z) <= np.sqrt(1 - ab[0]) * np.abs(eps) + np.abs(z) * (1 - np.sqrt(ab[0])) + 1e-12)
    far = add_noise(z, 1000, eps, ab)
    assert np.max(np.abs(far - eps)) < 0.1
    t = rng.integers(1, 1001, len(z))
    noisy = add_noise(z[:, 0], t, eps[:, 0], ab)
    assert abs(noisy.var() - 1) <= 3 * np.sqrt(2 / len(z))
    with pytest.raises(ValueError):
        add_noise(z, 0, eps, ab)
    with pytest.raises(ValueError):
        add_noise(z, 1001, eps, ab)


def test_joint_loss_gradients_per_network():
    cfg = replace(SMALL, lambda_kl=0.3, lambda_ctr=0.7)
    bundle, x, y = small_bundle(seed=3, config=cfg, n=16)
    rng = np.random.default_rng(4)
    for p in bundle.params:
        p[...] = rng.normal(0, 0.4, p.shape)
    noise = (rng.normal(size=(16, 3)), rng.integers(1, cfg.T + 1, 16), rng.normal(size=(16, 3)))
    record, grads = batch_loss(bundle, x, y, rng, noise=noise, train=False)
    num = numeric_grad(lambda: batch_loss(bundle, x, y, rng, noise=noise, train=False)[0].total, bundle.params)
    start = 0
    for name, net in bundle.nets.items():
        k = len(net.params)
        assert max_rel_error(grads[start : start + k], num[start : start + k]) < 1e-4, name
        start += k


def test_total_is_weighted_sum_every_batch():
    cfg = replace(SMALL, lambda_recon=0.7, lambda_kl=0.2, lambda_diff=1.3, lambda_ctr=0.4)
    bundle, x, y = small_bundle(config=cfg)
    batches = []
    train_epoch(bundle, x, y, 32, np.random.default_rng(5), batches)
    assert len(batches) == int(np.ceil(len(x) / 32))
    for r in batches:
        assert abs(r.total - (0.7 * r.recon + 0.2 * r.kl + 1.3 * r.diff + 0.4 * r.ctr)) <= 1e-12


def test_zero_weights_leave_parameters_unchanged():
    cfg = replace(SMALL, lambda_recon=0.0, lambda_kl=0.0, lambda_diff=0.0, lambda_ctr=0.0)
    bundle, x, y = small_bundle(config=cfg)
    before = [p.copy() for p in bundle.params]
    train_epoch(bundle, x, y, 32, np.random.default_rng(6))
    for a, b in zip(before, bundle.params):
        np.testing.assert_array_equal(a, b)


def test_autoencoder_only_reconstruction_decreases():
    ds = encoded_ds(1000, seed=7)
    cfg = replace(SMALL, lambda_kl=0.0, lambda_diff=0.0, lambda_ctr=0.0, epochs=20, dropout=0.0, hidden=16)
    _, hist = train_diffusion(ds, cfg, seed=7)
    recon = [h.recon for h in hist]
    assert recon[-1] < 0.5 * recon[0]
    assert sum(b < a for a, b in zip(recon, recon[1:])) >= 15


@pytest.mark.parametrize("threshold,label", [(1.0, 0), (0.0, 1)])
def test_threshold_extremes(threshold, label):
    ds = encoded_ds(300, seed=8)
    bundle, _ = train_diffusion(ds, replace(SMALL, threshold=threshold), seed=8)
    syn = generate_synthetic(bundle, 123, seed=1)
    assert len(syn) == 123 and syn.schema == ds.schema
    assert set(syn.labels.tolist()) == {label}


def test_generation_contract_and_determinism(tmp_path):
    ds = encoded_ds(300, seed=9)
    bundle, _ = train_diffusion(ds, SMALL, seed=9)
    a = generate_synthetic(bundle, 500, seed=3)
    b = generate_synthetic(bundle, 500, seed=3, workers=2)
    assert a.equals(b)
    assert set(np.unique(a.labels)) <= {0, 1}
    for f in a.feature_fields:
        col = a.column(f.name)
        assert col.min() >= 0 and col.max() < f.cardinality
    bundle.save(tmp_path / "b.npz")
    back = DiffusionBundle.load(tmp_path / "b.npz")
    assert generate_synthetic(back, 500, seed=3).equals(a)


@given(st.integers(0, 1000))
def test_nearest_code_decoding_inverts_encoding(seed):
    ds = encoded_ds(60, seed=seed)
    codec = FeatureCodec.fit(ds, 4, np.random.default_rng(seed))
    cols = codec.decode(codec.encode(ds))
    for f in ds.feature_fields:
        np.testing.assert_array_equal(cols[f.name], ds.column(f.name))


def test_calibrated_decoding_matches_frequencies():
    ds = encoded_ds(20_000, cards=(6, 6, 6), seed=10, signal=False)
    ds.columns["f0"] = np.random.default_rng(0).choice(7, 20_000, p=[0.4, 0.3, 0.1, 0.1, 0.05, 0.05, 0.0])
    rng = np.random.default_rng(1)
    codec = FeatureCodec.fit(ds, 3, rng)
    x = codec.encode(ds)
    codec.noise_var = {k: 0.8 for k in codec.codes}
    blocks = codec.blocks()
    raw = x * codec.std + codec.mean
    raw[:, blocks["f0"]] += rng.normal(0, np.sqrt(0.8), (len(x), 3))
    cols = codec.decode((raw - codec.mean) / codec.std, rng)
    freq = np.bincount(cols["f0"], minlength=7) / len(x)
    assert freq[6] == 0
    np.testing.assert_allclose(freq[:6], [0.4, 0.3, 0.1, 0.1, 0.05, 0.05], atol=0.01)


def test_marginal_means_after_training_on_rule_data():
    raw = generate_rule_dataset(load_config(), 20_000, seed=11)
    sp = split_holdout(raw, (0.8, 0.1, 0.1), seed=11)
    ds = prepare(raw, PrepPolicy(), fit_indices=sp.train)
    train = ds.take(sp.train)
    bundle, _ = train_diffusion(train, DiffusionConfig(epochs=10), seed=3)
    syn = generate_synthetic(bundle, 16_000, seed=5)
    for f in train.feature_fields:
        real = train.column(f.name).astype(float)
        gap = abs(syn.column(f.name).mean() - real.mean()) / real.std()
        assert gap < 0.1, (f.name, gap)
        if f.kind is FieldKind.CATEGORICAL:
            assert syn.column(f.name).max() < f.cardinality
    assert 0 < syn.labels.mean() < 1


def test_config_validation():
    with pytest.raises(ValueError):
        DiffusionConfig(beta_start=0.1, beta_end=0.01)
    with pytest.raises(ValueError):
        DiffusionConfig(lambda_kl=-1)
    with pytest.raises(ValueError):
        DiffusionConfig(threshold=1.5)
    with pytest.raises(ValueError):
        DiffusionConfig.from_mapping({"nope": 1})
    betas, ab = linear_schedule(10, 0.1, 0.5)
    np.testing.assert_allclose(ab, np.cumprod(1 - np.linspace(0.1, 0.5, 10)))
    assert nn.sigmoid(0.0) == 0.5
