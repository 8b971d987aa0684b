"""Small dense networks with hand-written reverse mode, Beta policy-head math and Adam."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import betaln, digamma, expit, polygamma

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mevauction-checkpoint"
CHECKPOINT_VERSION = 1
X_CLAMP = 1e-6


class DenseNetwork:
    """Fully connected net: tanh on hidden layers, linear output layer."""

    def __init__(self, layer_sizes: Sequence[int], weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]):
        self.layer_sizes = [int(s) for s in layer_sizes]
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least an input and an output layer")
        if len(weights) != len(self.layer_sizes) - 1 or len(biases) != len(weights):
            raise ValueError("one weight matrix and one bias per layer transition")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != (self.layer_sizes[i], self.layer_sizes[i + 1]) or b.shape != (self.layer_sizes[i + 1],):
                raise ValueError(f"layer {i}: parameter shapes disagree with layer_sizes")
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        self._cache = None

    @classmethod
    def initialize(cls, layer_sizes: Sequence[int], rng: np.random.Generator, output_scale: float = 0.01):
        weights, biases = [], []
        n = len(layer_sizes) - 1
        for i in range(n):
            fan_in, fan_out = layer_sizes[i], layer_sizes[i + 1]
            scale = (1.0 / np.sqrt(fan_in)) * (output_scale if i == n - 1 else 1.0)
            weights.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(layer_sizes, weights, biases)

    @classmethod
    def zeros(cls, layer_sizes: Sequence[int]):
        return cls(layer_sizes,
                   [np.zeros((a, b)) for a, b in zip(layer_sizes[:-1], layer_sizes[1:])],
                   [np.zeros(b) for b in layer_sizes[1:]])

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "DenseNetwork":
        return DenseNetwork(self.layer_sizes, self.weights, self.biases)

    def forward(self, x: np.ndarray, record: bool = True) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[1] != self.layer_sizes[0]:
            raise ValueError(f"input has {h.shape[1]} features, network expects {self.layer_sizes[0]}")
        acts = [h]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.tanh(h)
            acts.append(h)
        if record:
            self._cache = (acts, single)
        return h[0] if single else h

    def backward(self, grad_out: np.ndarray) -> list[np.ndarray]:
        """Gradients of ``sum(grad_out * output)`` w.r.t. :meth:`params`, for the last recorded forward."""
        if self._cache is None:
            raise RuntimeError("backward() needs a recorded forward pass")
        acts, single = self._cache
        g = np.asarray(grad_out, dtype=np.float64)
        g = g[None, :] if single else g
        if g.shape != acts[-1].shape:
            raise ValueError(f"output gradient shape {g.shape} != output shape {acts[-1].shape}")
        grads: list[np.ndarray] = []
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            if i < last:
                g = g * (1.0 - acts[i + 1] ** 2)
            grads.append(g.sum(axis=0))
            grads.append(acts[i].T @ g)
            if i > 0:
                g = g @ self.weights[i].T
        grads.reverse()
        return grads


# ---------------------------------------------------------------------------
# Beta policy head
# ---------------------------------------------------------------------------

def softplus(x):
    return np.logaddexp(0.0, x)


def beta_params(raw_a, raw_b):
    """Map raw head outputs to Beta parameters, both strictly above 1."""
    return softplus(raw_a) + 1.0, softplus(raw_b) + 1.0


def beta_params_grad(raw_a, raw_b):
    return expit(raw_a), expit(raw_b)


def _clamp_x(x):
    x = np.asarray(x, dtype=np.float64)
    bad = (x <= 0.0) | (x >= 1.0)
    if np.any(bad):
        log.warning("Beta log-prob evaluated at %d point(s) on or outside [0, 1]; clamping", int(bad.sum()))
    return np.clip(x, X_CLAMP, 1.0 - X_CLAMP)


def beta_log_prob(a, b, x):
    x = _clamp_x(x)
    return (a - 1.0) * np.log(x) + (b - 1.0) * np.log1p(-x) - betaln(a, b)


def beta_log_prob_grad(a, b, x):
    """``(d/da, d/db)`` of :func:`beta_log_prob`."""
    x = _clamp_x(x)
    common = digamma(a + b)
    return np.log(x) - digamma(a) + common, np.log1p(-x) - digamma(b) + common


def beta_sample(a, b, rng: np.random.Generator):
    """Beta draw via two Gamma draws, kept inside the open unit interval."""
    g1 = rng.standard_gamma(a)
    g2 = rng.standard_gamma(b)
    return np.clip(g1 / (g1 + g2), X_CLAMP, 1.0 - X_CLAMP)


def beta_entropy(a, b):
    return (betaln(a, b) - (a - 1.0) * digamma(a) - (b - 1.0) * digamma(b)
            + (a + b - 2.0) * digamma(a + b))


def beta_entropy_grad(a, b):
    tri_ab = polygamma(1, a + b)
    da = -(a - 1.0) * polygamma(1, a) + (a + b - 2.0) * tri_ab
    db = -(b - 1.0) * polygamma(1, b) + (a + b - 2.0) * tri_ab
    return da, db


def beta_mean(a, b):
    return a / (a + b)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **kw)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> Sequence[np.ndarray]:
    """Bias-corrected Adam update applied in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer moments must line up")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ValueError(f"gradient {i} has shape {g.shape}, parameter has {params[i].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter array {i} at optimizer step {state.step + 1}")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _arr(a: np.ndarray):
    return {"shape": list(a.shape), "data": [float(x) for x in a.ravel()]}


def _unarr(d) -> np.ndarray:
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def dumps_checkpoint(net: DenseNetwork, adam: AdamState | None = None, meta: dict | None = None) -> str:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "layer_sizes": net.layer_sizes,
        "params": [_arr(p) for p in net.params()],
        "adam": None if adam is None else {
            "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "step": adam.step,
            "m": [_arr(x) for x in adam.m], "v": [_arr(x) for x in adam.v],
        },
        "meta": meta or {},
    }
    return json.dumps(doc, sort_keys=True, allow_nan=False) + "\n"


def loads_checkpoint(text: str):
    doc = json.loads(text)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a mevauction checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {doc.get('version')} unsupported (expected {CHECKPOINT_VERSION})")
    params = [_unarr(p) for p in doc["params"]]
    net = DenseNetwork(doc["layer_sizes"], params[0::2], params[1::2])
    adam = None
    if doc["adam"] is not None:
        a = doc["adam"]
        adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"],
                         m=[_unarr(x) for x in a["m"]], v=[_unarr(x) for x in a["v"]])
    return net, adam, doc["meta"]


def save_checkpoint(path, net: DenseNetwork, adam: AdamState | None = None, meta: dict | None = None) -> None:
    Path(path).write_text(dumps_checkpoint(net, adam, meta), encoding="utf-8")


def load_checkpoint(path):
    return loads_checkpoint(Path(path).read_text(encoding="utf-8"))
