"""Small dense networks with hand-derived backward passes and Adam.

Everything is float64. Batched inputs have shape ``(batch, width)``; 1-D
inputs are treated as a batch of one.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

CHECKPOINT_VERSION = 1
BCE_CLAMP = 1e-7

HIDDEN_ACTIVATIONS = ("relu", "tanh", "sigmoid")
OUTPUT_ACTIVATIONS = ("identity", "sigmoid", "softmax")


def sigmoid(x):
    """Logistic function, branching on sign so large |x| never overflows."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else float(out)


def softmax(x, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("softmax of an empty vector")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _activate(name: str, x: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "tanh":
        return np.tanh(x)
    if name == "sigmoid":
        return sigmoid(x)
    if name == "softmax":
        return softmax(x, axis=-1)
    return x


def _activate_backward(name: str, pre: np.ndarray, out: np.ndarray, g: np.ndarray) -> np.ndarray:
    if name == "relu":
        return g * (pre > 0)
    if name == "tanh":
        return g * (1.0 - out**2)
    if name == "sigmoid":
        return g * out * (1.0 - out)
    if name == "softmax":
        return out * (g - np.sum(g * out, axis=-1, keepdims=True))
    return g


@dataclass
class DenseNet:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "relu"
    output_activation: str = "identity"
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("need one weight matrix and bias per layer transition")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_sizes[i], self.layer_sizes[i + 1]) or b.shape != (self.layer_sizes[i + 1],):
                raise ValueError(f"layer {i} shapes {w.shape}, {b.shape} do not match sizes {self.layer_sizes}")

    @classmethod
    def create(
        cls,
        layer_sizes: Sequence[int],
        rng: np.random.Generator | None = None,
        hidden_activation: str = "relu",
        output_activation: str = "identity",
        dropout_rate: float = 0.0,
        zero: bool = False,
    ) -> "DenseNet":
        """Glorot-uniform weights and zero biases (all zero with ``zero=True``)."""
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2:
            raise ValueError("need at least input and output widths")
        weights = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            if zero:
                weights.append(np.zeros((fan_in, fan_out)))
            else:
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases = [np.zeros(s) for s in sizes[1:]]
        return cls(sizes, weights, biases, hidden_activation, output_activation, dropout_rate)

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def _fingerprint(self) -> tuple:
        return (id(self),) + tuple(float(p.sum()) for p in self.params)

    def forward(self, x, mode: str = "eval", rng: np.random.Generator | None = None):
        """Return ``(output, cache)``; dropout is active only in train mode."""
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        a = x[None, :] if squeeze else x
        if a.shape[1] != self.layer_sizes[0]:
            raise ValueError(f"input width {a.shape[1]} != {self.layer_sizes[0]}")
        train = mode == "train" and self.dropout_rate > 0
        if train and rng is None:
            raise ValueError("train-mode dropout needs an rng")
        inputs, pres, outs, masks = [], [], [], []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(a)
            pre = a @ w + b
            act = self.output_activation if i == last else self.hidden_activation
            out = _activate(act, pre)
            pres.append(pre)
            outs.append(out)
            if i < last and train:
                keep = 1.0 - self.dropout_rate
                mask = (rng.random(out.shape) < keep) / keep
                masks.append(mask)
                a = out * mask
            else:
                masks.append(None)
                a = out
        cache = {"fp": self._fingerprint(), "inputs": inputs, "pres": pres, "outs": outs,
                 "masks": masks, "squeeze": squeeze}
        return (a[0] if squeeze else a), cache

    def backward(self, cache, grad_out) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients for ``params`` (same order) and for the network input."""
        if cache.get("fp") != self._fingerprint():
            raise ValueError("stale or mismatched forward cache")
        g = np.asarray(grad_out, dtype=np.float64)
        if cache["squeeze"]:
            g = g[None, :]
        n = len(self.weights)
        grads: list[np.ndarray] = [None] * (2 * n)  # type: ignore[list-item]
        for i in reversed(range(n)):
            if cache["masks"][i] is not None:
                g = g * cache["masks"][i]
            act = self.output_activation if i == n - 1 else self.hidden_activation
            g = _activate_backward(act, cache["pres"][i], cache["outs"][i], g)
            grads[2 * i] = cache["inputs"][i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return grads, (g[0] if cache["squeeze"] else g)

    def copy(self) -> "DenseNet":
        return DenseNet(list(self.layer_sizes), [w.copy() for w in self.weights],
                        [b.copy() for b in self.biases], self.hidden_activation,
                        self.output_activation, self.dropout_rate)

    def describe(self) -> dict:
        return {"layer_sizes": self.layer_sizes, "hidden_activation": self.hidden_activation,
                "output_activation": self.output_activation, "dropout_rate": self.dropout_rate}


def forward(net: DenseNet, x, mode: str = "eval", rng=None):
    return net.forward(x, mode, rng)


def backward_gradients(net: DenseNet, cache, loss_grad):
    return net.backward(cache, loss_grad)[0]


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, params: Sequence[np.ndarray], lr: float = 0.001, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], lr=lr, **kw)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state differ in length")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, state {m.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# -- losses -----------------------------------------------------------------
# Each returns (loss, gradient(s) w.r.t. the first argument(s)).


def bce(p, y):
    p = np.clip(np.asarray(p, dtype=np.float64), BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {y.shape}")
    loss = -np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    grad = (p - y) / (p * (1.0 - p)) / p.size
    return float(loss), grad


def bce_with_logits(logits, y):
    """BCE evaluated on sigmoid(logits), with the same probability clamp."""
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if logits.shape != y.shape:
        raise ValueError(f"shape mismatch {logits.shape} vs {y.shape}")
    p = sigmoid(logits)
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    loss = -np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    return float(loss), (p - y) / logits.size


def mse(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def kl_gaussian(mu, logvar):
    """KL(N(mu, exp(logvar)) || N(0, 1)) averaged over all elements."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    if mu.shape != logvar.shape:
        raise ValueError(f"shape mismatch {mu.shape} vs {logvar.shape}")
    var = np.exp(logvar)
    loss = 0.5 * np.mean(mu**2 + var - 1.0 - logvar)
    return float(loss), (mu / mu.size, 0.5 * (var - 1.0) / mu.size)


_LOSSES = {"bce": bce, "mse": mse, "kl_gaussian": kl_gaussian}


def losses(kind: str, *inputs):
    try:
        fn = _LOSSES[kind]
    except KeyError:
        raise ValueError(f"unknown loss {kind!r}") from None
    return fn(*inputs)


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path: str | os.PathLike, nets: Mapping[str, DenseNet],
                    arrays: Mapping[str, np.ndarray] | None = None, meta: Mapping | None = None) -> Path:
    """Versioned npz container: network shapes and parameters plus extra arrays."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {}
    header = {"version": CHECKPOINT_VERSION, "nets": {}, "arrays": sorted(arrays or {}), "meta": dict(meta or {})}
    for name, net in nets.items():
        header["nets"][name] = net.describe()
        for i, p in enumerate(net.params):
            blob[f"net:{name}:{i}"] = p
    for name, arr in (arrays or {}).items():
        blob[f"arr:{name}"] = arr
    blob["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}.npz")
    np.savez(tmp, **blob)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, DenseNet], dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(z["header"].tobytes().decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        nets = {}
        for name, desc in header["nets"].items():
            n_layers = len(desc["layer_sizes"]) - 1
            params = [z[f"net:{name}:{i}"] for i in range(2 * n_layers)]
            nets[name] = DenseNet(desc["layer_sizes"], params[0::2], params[1::2], desc["hidden_activation"],
                                  desc["output_activation"], desc["dropout_rate"])
        arrays = {name: z[f"arr:{name}"] for name in header["arrays"]}
    return nets, arrays, header["meta"]
