"""Latent-diffusion synthetic click logs.

A VAE maps standardized rows into a Gaussian latent space, a noise
predictor learns the forward-noised latents under a linear beta schedule and
a click predictor is trained jointly on the reconstructions. Generation
starts from standard normal latents, applies ``z <- z - alpha_step * eps_pred``
for ``num_steps`` steps at ``t = max(1, step * T / num_steps)``, decodes, and
labels each row by thresholding the click predictor.

The update rule is deliberately the plain fixed-step rule above rather than
ancestral DDPM sampling: there is no noise re-injection and no
schedule-dependent step size.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import nn
from .data import DataError, Dataset, FieldKind, FieldSchema, content_hash

log = logging.getLogger(__name__)

SHARD_SIZE = 50_000
CALIBRATION_ITERS = 200
CALIBRATION_TOL = 1e-4


@dataclass(frozen=True)
class DiffusionConfig:
    latent_dim: int = 8
    hidden: int = 64
    code_width: int = 4
    dropout: float = 0.1
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    lambda_recon: float = 1.0
    lambda_kl: float = 0.1
    lambda_diff: float = 1.0
    lambda_ctr: float = 1.0
    alpha_step: float = 0.01
    num_steps: int = 50
    threshold: float = 0.5
    epochs: int = 20
    batch_size: int = 256
    learning_rate: float = 1e-3

    def __post_init__(self):
        if not 0.0 < self.beta_start < self.beta_end < 1.0:
            raise ValueError("need 0 < beta_start < beta_end < 1")
        if min(self.lambda_recon, self.lambda_kl, self.lambda_diff, self.lambda_ctr) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")
        if self.T < 2 or self.num_steps < 1:
            raise ValueError("T must be >= 2 and num_steps >= 1")

    @classmethod
    def from_mapping(cls, d) -> "DiffusionConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown diffusion key(s): {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def linear_schedule(T: int, beta_start: float, beta_end: float) -> tuple[np.ndarray, np.ndarray]:
    """betas for t = 1..T (index t-1) and their cumulative products alpha_bar."""
    betas = np.linspace(beta_start, beta_end, T)
    return betas, np.cumprod(1.0 - betas)


@dataclass
class FeatureCodec:
    """Maps prepared rows to standardized real vectors and back.

    Each categorical id becomes a fixed random code of ``code_width`` dims;
    numeric and temporal fields take one dim each. Decoding maps every
    categorical block back onto a valid id: without an rng it snaps to the
    nearest code; with one it samples from a Gaussian posterior over codes
    whose per-id biases are fitted so the decoded batch reproduces the
    training frequencies (see :meth:`decode`).
    """

    schema: tuple[FieldSchema, ...]
    codes: dict[str, np.ndarray]
    mean: np.ndarray
    std: np.ndarray
    log_prior: dict[str, np.ndarray] = field(default_factory=dict)
    noise_var: dict[str, float] = field(default_factory=dict)

    @classmethod
    def fit(cls, dataset: Dataset, code_width: int, rng: np.random.Generator) -> "FeatureCodec":
        codes = {}
        for f in dataset.feature_fields:
            if f.kind is FieldKind.CATEGORICAL:
                if not f.encoded:
                    raise DataError(f"field {f.name!r} must be vocabulary-encoded")
                codes[f.name] = rng.normal(size=(f.cardinality, code_width))
        priors = {}
        for name in codes:
            counts = np.bincount(dataset.columns[name], minlength=len(codes[name])).astype(np.float64)
            with np.errstate(divide="ignore"):
                priors[name] = np.log(counts / counts.sum())
        codec = cls(dataset.schema, codes, np.zeros(0), np.zeros(0), priors, {name: 1.0 for name in codes})
        raw = codec._raw(dataset)
        std = raw.std(axis=0)
        codec.mean, codec.std = raw.mean(axis=0), np.where(std > 0, std, 1.0)
        return codec

    @property
    def features(self) -> list[FieldSchema]:
        return [f for f in self.schema if f.kind is not FieldKind.LABEL]

    @property
    def width(self) -> int:
        return sum(self.codes[f.name].shape[1] if f.name in self.codes else 1 for f in self.features)

    def _raw(self, dataset: Dataset) -> np.ndarray:
        blocks = []
        for f in self.features:
            try:
                col = dataset.columns[f.name]
            except KeyError:
                raise DataError(f"dataset lacks field {f.name!r}") from None
            if f.name in self.codes:
                if dataset.field(f.name).cardinality != len(self.codes[f.name]):
                    raise DataError(f"field {f.name!r} vocabulary differs from the codec")
                blocks.append(self.codes[f.name][col])
            else:
                blocks.append(col.astype(np.float64)[:, None])
        return np.hstack(blocks)

    def encode(self, dataset: Dataset) -> np.ndarray:
        return (self._raw(dataset) - self.mean) / self.std

    def blocks(self) -> dict[str, slice]:
        out, j = {}, 0
        for f in self.features:
            w = self.codes[f.name].shape[1] if f.name in self.codes else 1
            out[f.name] = slice(j, j + w)
            j += w
        return out

    def fit_noise(self, x_recon: np.ndarray, dataset: Dataset) -> None:
        """Per-field residual variance of reconstructions around the true codes."""
        raw = x_recon * self.std + self.mean
        for name, sl in self.blocks().items():
            if name in self.codes:
                resid = raw[:, sl] - self.codes[name][dataset.columns[name]]
                self.noise_var[name] = max(float(np.mean(resid**2)), 1e-6)

    def _sample_ids(self, name: str, block: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        c, lp = self.codes[name], self.log_prior[name]
        d2 = (block**2).sum(1)[:, None] - 2.0 * block @ c.T + (c**2).sum(1)[None, :]
        live = np.isfinite(lp)
        logits = -d2[:, live] / (2.0 * self.noise_var[name])
        logits -= logits.max(axis=1, keepdims=True)
        lik = np.exp(logits)
        target = np.exp(lp[live])
        # Fixed point for w = exp(bias): mean_i lik_i * w / (lik_i . w) == target.
        w = target.copy()
        for _ in range(CALIBRATION_ITERS):
            q = w * (lik.T @ (1.0 / (lik @ w))) / len(lik)
            if np.max(np.abs(np.log(q / target))) < CALIBRATION_TOL:
                break
            w *= target / q
            w /= w.sum()
        pick = np.argmax(logits + np.log(w) + rng.gumbel(size=logits.shape), axis=1)
        return np.flatnonzero(live)[pick].astype(np.int64)

    def decode(self, x: np.ndarray, rng: np.random.Generator | None = None) -> dict[str, np.ndarray]:
        """Feature columns for standardized rows ``x``.

        With ``rng`` each categorical id is drawn from
        ``softmax(-|x_f - code|^2 / (2 s_f^2) + b)`` where ``s_f^2`` is the
        reconstruction noise and ``b`` is fitted on the batch so the mean
        posterior equals the training frequencies.
        """
        raw = x * self.std + self.mean
        cols, j = {}, 0
        for f in self.features:
            if f.name in self.codes:
                c = self.codes[f.name]
                block = raw[:, j : j + c.shape[1]]
                if rng is None:
                    d2 = (block**2).sum(1)[:, None] - 2.0 * block @ c.T + (c**2).sum(1)[None, :]
                    cols[f.name] = np.argmin(d2, axis=1).astype(np.int64)
                else:
                    cols[f.name] = self._sample_ids(f.name, block, rng)
                j += c.shape[1]
            else:
                v = raw[:, j]
                if f.kind is FieldKind.TEMPORAL:
                    v = np.maximum(np.rint(v), 0).astype(np.int64)
                cols[f.name] = v
                j += 1
        return cols


@dataclass
class DiffusionBundle:
    encoder: nn.DenseNet
    decoder: nn.DenseNet
    noise_net: nn.DenseNet
    ctr_net: nn.DenseNet
    codec: FeatureCodec
    config: DiffusionConfig
    betas: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)
    optimizer: nn.AdamState | None = None

    def __post_init__(self):
        self.betas, self.alpha_bar = linear_schedule(self.config.T, self.config.beta_start, self.config.beta_end)
        L = self.config.latent_dim
        if self.encoder.layer_sizes[-1] != 2 * L or self.decoder.layer_sizes[0] != L \
                or self.noise_net.layer_sizes[0] != L + 1 or self.noise_net.layer_sizes[-1] != L:
            raise ValueError("latent widths of encoder, decoder and noise network disagree")

    @classmethod
    def create(cls, codec: FeatureCodec, config: DiffusionConfig, rng: np.random.Generator,
               zero: bool = False) -> "DiffusionBundle":
        D, H, L = codec.width, config.hidden, config.latent_dim
        make = nn.DenseNet.create
        return cls(
            encoder=make([D, H, 2 * L], rng, dropout_rate=config.dropout, zero=zero),
            decoder=make([L, H, D], rng, zero=zero),
            noise_net=make([L + 1, H, H, L], rng, zero=zero),
            ctr_net=make([D, H, 1], rng, zero=zero),
            codec=codec,
            config=config,
        )

    @property
    def nets(self) -> dict[str, nn.DenseNet]:
        return {"encoder": self.encoder, "decoder": self.decoder, "noise_net": self.noise_net, "ctr_net": self.ctr_net}

    @property
    def params(self) -> list[np.ndarray]:
        return [p for net in self.nets.values() for p in net.params]

    def save(self, path) -> Path:
        arrays = {f"code:{k}": v for k, v in self.codec.codes.items()}
        arrays.update({f"prior:{k}": v for k, v in self.codec.log_prior.items()})
        arrays["noise_var"] = np.array([self.codec.noise_var[k] for k in self.codec.codes])
        arrays.update({"codec_mean": self.codec.mean, "codec_std": self.codec.std,
                       "betas": self.betas, "alpha_bar": self.alpha_bar})
        meta = {"config": self.config.to_dict(), "schema": [f.to_dict() for f in self.codec.schema],
                "config_hash": content_hash(self.config.to_dict())}
        return nn.save_checkpoint(path, self.nets, arrays, meta)

    @classmethod
    def load(cls, path) -> "DiffusionBundle":
        nets, arrays, meta = nn.load_checkpoint(path)
        schema = tuple(FieldSchema.from_dict(d) for d in meta["schema"])
        codes = {f.name: arrays[f"code:{f.name}"] for f in schema if f"code:{f.name}" in arrays}
        priors = {k: arrays[f"prior:{k}"] for k in codes}
        noise = dict(zip(codes, arrays["noise_var"].tolist()))
        codec = FeatureCodec(schema, codes, arrays["codec_mean"], arrays["codec_std"], priors, noise)
        return cls(codec=codec, config=DiffusionConfig.from_mapping(meta["config"]), **nets)


def encode(bundle: DiffusionBundle, x, mode: str = "eval", rng=None):
    """(mu, logvar) for standardized rows ``x``."""
    h, _ = bundle.encoder.forward(x, mode, rng)
    L = bundle.config.latent_dim
    return h[..., :L], h[..., L:]


def reparameterize(mu, logvar, rng=None, eps=None):
    """z = mu + exp(logvar / 2) * eps with eps ~ N(0, I) unless given."""
    mu = np.asarray(mu, dtype=np.float64)
    if eps is None:
        eps = rng.standard_normal(mu.shape)
    return mu + np.exp(0.5 * np.asarray(logvar)) * eps


def add_noise(z, t, eps, alpha_bar: np.ndarray):
    """sqrt(alpha_bar_t) z + sqrt(1 - alpha_bar_t) eps for integer t in 1..T (scalar or per row)."""
    t = np.asarray(t)
    T = len(alpha_bar)
    if np.any(t < 1) or np.any(t > T):
        raise ValueError(f"timestep outside 1..{T}")
    ab = alpha_bar[t.astype(np.int64) - 1]
    if ab.ndim:
        ab = ab[:, None]
    return np.sqrt(ab) * z + np.sqrt(1.0 - ab) * eps


@dataclass
class LossRecord:
    recon: float
    kl: float
    diff: float
    ctr: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


def batch_loss(bundle: DiffusionBundle, x, y, rng: np.random.Generator, noise=None, train: bool = True):
    """Joint loss on one batch and the gradient for every bundle parameter.

    ``noise`` may fix ``(eps_latent, t, eps_diffusion)`` for reproducible
    gradient checks; otherwise all three are drawn from ``rng``.
    """
    cfg = bundle.config
    L = cfg.latent_dim
    mode = "train" if train else "eval"
    n = len(x)
    h, enc_cache = bundle.encoder.forward(x, mode, rng)
    mu, logvar = h[:, :L], h[:, L:]
    if noise is None:
        eps1 = rng.standard_normal((n, L))
        t = rng.integers(1, cfg.T + 1, size=n)
        eps2 = rng.standard_normal((n, L))
    else:
        eps1, t, eps2 = noise
    sd = np.exp(0.5 * logvar)
    z = mu + sd * eps1
    x_recon, dec_cache = bundle.decoder.forward(z, mode, rng)
    ab = bundle.alpha_bar[t - 1][:, None]
    z_noisy = np.sqrt(ab) * z + np.sqrt(1.0 - ab) * eps2
    eps_pred, noise_cache = bundle.noise_net.forward(np.hstack([z_noisy, (t / cfg.T)[:, None]]), mode, rng)
    logit, ctr_cache = bundle.ctr_net.forward(x_recon, mode, rng)

    l_recon, g_recon = nn.mse(x_recon, x)
    l_kl, (g_mu_kl, g_lv_kl) = nn.kl_gaussian(mu, logvar)
    l_diff, g_eps = nn.mse(eps_pred, eps2)
    l_ctr, g_logit = nn.bce_with_logits(logit[:, 0], y)
    total = cfg.lambda_recon * l_recon + cfg.lambda_kl * l_kl + cfg.lambda_diff * l_diff + cfg.lambda_ctr * l_ctr

    ctr_grads, g_xr = bundle.ctr_net.backward(ctr_cache, cfg.lambda_ctr * g_logit[:, None])
    dec_grads, g_z = bundle.decoder.backward(dec_cache, cfg.lambda_recon * g_recon + g_xr)
    noise_grads, g_in = bundle.noise_net.backward(noise_cache, cfg.lambda_diff * g_eps)
    g_z = g_z + g_in[:, :L] * np.sqrt(ab)
    g_mu = g_z + cfg.lambda_kl * g_mu_kl
    g_lv = g_z * 0.5 * sd * eps1 + cfg.lambda_kl * g_lv_kl
    enc_grads, _ = bundle.encoder.backward(enc_cache, np.hstack([g_mu, g_lv]))
    record = LossRecord(l_recon, l_kl, l_diff, l_ctr, total)
    return record, enc_grads + dec_grads + noise_grads + ctr_grads


def train_epoch(bundle: DiffusionBundle, x: np.ndarray, y: np.ndarray, batch_size: int,
                rng: np.random.Generator, batches: list | None = None) -> LossRecord:
    """One shuffled pass with a joint Adam update per batch; returns row-weighted mean losses.

    Per-batch records are appended to ``batches`` when given.
    """
    if len(x) == 0:
        raise DataError("empty dataset")
    if x.shape[1] != bundle.encoder.layer_sizes[0]:
        raise ValueError(f"data width {x.shape[1]} != encoder input {bundle.encoder.layer_sizes[0]}")
    params = bundle.params
    if bundle.optimizer is None:
        bundle.optimizer = nn.AdamState.like(params, lr=bundle.config.learning_rate)
    order = rng.permutation(len(x))
    sums = np.zeros(5)
    for s in range(0, len(x), batch_size):
        b = order[s : s + batch_size]
        record, grads = batch_loss(bundle, x[b], y[b].astype(np.float64), rng)
        nn.adam_step(params, grads, bundle.optimizer)
        sums += len(b) * np.array([record.recon, record.kl, record.diff, record.ctr, record.total])
        if batches is not None:
            batches.append(record)
    return LossRecord(*(sums / len(x)).tolist())


def train_diffusion(dataset: Dataset, config: DiffusionConfig = DiffusionConfig(), seed: int = 0,
                    rows=None) -> tuple[DiffusionBundle, list[LossRecord]]:
    """Fit codec and all four networks on ``rows`` of a prepared dataset."""
    rng = np.random.default_rng(seed)
    data = dataset if rows is None else dataset.take(rows)
    codec = FeatureCodec.fit(data, config.code_width, rng)
    bundle = DiffusionBundle.create(codec, config, rng)
    x, y = codec.encode(data), data.labels
    history = []
    for epoch in range(1, config.epochs + 1):
        record = train_epoch(bundle, x, y, config.batch_size, rng)
        history.append(record)
        log.info("diffusion epoch %d: %s", epoch, record)
    mu, _ = encode(bundle, x)
    x_recon, _ = bundle.decoder.forward(mu)
    codec.fit_noise(x_recon, data)
    return bundle, history


def denoise(bundle: DiffusionBundle, z: np.ndarray) -> np.ndarray:
    cfg = bundle.config
    for step in range(1, cfg.num_steps + 1):
        t = max(1.0, step * (cfg.T / cfg.num_steps))
        inp = np.hstack([z, np.full((len(z), 1), t / cfg.T)])
        eps_pred, _ = bundle.noise_net.forward(inp)
        z = z - cfg.alpha_step * eps_pred
    return z


def _generate_shard(bundle: DiffusionBundle, seed: int, shard: int, m: int):
    rng = np.random.default_rng([seed, shard])
    z = denoise(bundle, rng.standard_normal((m, bundle.config.latent_dim)))
    x, _ = bundle.decoder.forward(z)
    logit, _ = bundle.ctr_net.forward(x)
    p = nn.sigmoid(logit[:, 0])
    return bundle.codec.decode(x, rng), (p > bundle.config.threshold).astype(np.int64)


def generate_synthetic(bundle: DiffusionBundle, M: int, seed: int, workers: int = 1) -> Dataset:
    """M rows in the training schema; shards of SHARD_SIZE use child seeds (seed, shard)."""
    if M < 1:
        raise DataError("M must be >= 1")
    sizes = [min(SHARD_SIZE, M - s) for s in range(0, M, SHARD_SIZE)]
    jobs = list(enumerate(sizes))
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda j: _generate_shard(bundle, seed, *j), jobs))
    else:
        parts = [_generate_shard(bundle, seed, i, m) for i, m in jobs]
    schema = bundle.codec.schema
    label = next(f.name for f in schema if f.kind is FieldKind.LABEL)
    columns = {f.name: np.concatenate([p[0][f.name] for p in parts]) for f in bundle.codec.features}
    columns[label] = np.concatenate([p[1] for p in parts])
    columns = {f.name: columns[f.name] for f in schema}
    prov = content_hash(bundle.config.to_dict(), [float(p.sum()) for p in bundle.params], M, seed)
    return Dataset(schema, columns, provenance=f"diffusion:{prov}")
