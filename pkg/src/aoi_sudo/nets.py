"""Minimal dense-network stack: tanh MLP, reverse-mode gradients, Adam,
and diagonal-Gaussian policy-head math. Everything is float64 numpy and
deterministic given the RNG streams."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LOG_STD_MIN = math.log(1e-3)
LOG_STD_MAX = math.log(10.0)
LOG_2PI = math.log(2.0 * math.pi)


class ShapeMismatch(ValueError):
    pass


@dataclass
class Mlp:
    """Fully connected net, tanh hidden activations, linear output."""

    weights: list[np.ndarray]  # [out, in] per layer
    biases: list[np.ndarray]

    @classmethod
    def create(cls, sizes: list[int], rng: np.random.Generator) -> "Mlp":
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(weights=weights, biases=biases)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        """Returns (output, cache); accepts [B, in] or [in]."""
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.weights[0].shape[1]:
            raise ShapeMismatch(f"input dim {x.shape[1]} != {self.weights[0].shape[1]}")
        cache = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            h = z if i == last else np.tanh(z)
            cache.append(h)
        out = h[0] if squeeze else h
        return out, cache

    def backward(self, cache: list, gout: np.ndarray) -> list[np.ndarray]:
        """Exact gradients of sum_b <gout_b, out_b> w.r.t. the parameters.

        Returns grads in params() order. Also usable on [out]-shaped gout
        for single inputs.
        """
        gout = np.asarray(gout, dtype=float)
        if gout.ndim == 1:
            gout = gout[None, :]
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))
        g = gout
        for i in range(len(self.weights) - 1, -1, -1):
            h_in = cache[i]
            if i != len(self.weights) - 1:
                g = g * (1.0 - cache[i + 1] ** 2)  # tanh'
            grads[2 * i] = g.T @ h_in
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i]
        return grads

    def value(self, x: np.ndarray) -> np.ndarray:
        out, _ = self.forward(x)
        return out

    def assert_finite(self) -> None:
        for p in self.params():
            if not np.all(np.isfinite(p)):
                raise FloatingPointError("non-finite network parameter")

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, flat: np.ndarray) -> None:
        pos = 0
        for p in self.params():
            p[...] = flat[pos:pos + p.size].reshape(p.shape)
            pos += p.size
        if pos != len(flat):
            raise ShapeMismatch("flat vector length mismatch")

    def copy(self) -> "Mlp":
        return Mlp(weights=[w.copy() for w in self.weights],
                   biases=[b.copy() for b in self.biases])


@dataclass
class AdamState:
    """Per-network Adam accumulators with bias correction."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int
    lr: float
    decay: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_net(cls, net: Mlp, lr: float, decay: float = 0.0) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in net.params()],
                   v=[np.zeros_like(p) for p in net.params()],
                   step=0, lr=lr, decay=decay)

    def effective_lr(self, episode: int) -> float:
        return self.lr / (1.0 + self.decay * episode)


def adam_step(state: AdamState, params: list[np.ndarray],
              grads: list[np.ndarray], lr: float | None = None) -> None:
    """One in-place Adam update."""
    if lr is None:
        lr = state.lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def split_policy_output(out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(mean, clamped log-std, clamp pass-through mask) from a 2N output."""
    out = np.atleast_2d(out)
    n = out.shape[1] // 2
    mu = out[:, :n]
    raw = out[:, n:]
    log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    inside = ((raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)).astype(float)
    return mu, log_std, inside


def gaussian_log_prob(mu: np.ndarray, log_std: np.ndarray,
                      action: np.ndarray) -> np.ndarray:
    """Diagonal-Gaussian log density, summed over action dims, per row."""
    std = np.exp(log_std)
    z = (action - mu) / std
    return -0.5 * (z ** 2 + LOG_2PI).sum(axis=1) - log_std.sum(axis=1)


def gaussian_log_prob_grads(mu, log_std, action) -> tuple[np.ndarray, np.ndarray]:
    """(d logp / d mu, d logp / d log_std), per row and dim."""
    std = np.exp(log_std)
    z = (action - mu) / std
    return z / std, z ** 2 - 1.0


def gaussian_entropy(log_std: np.ndarray) -> np.ndarray:
    """Sum over dims of 0.5*ln(2*pi*e*sigma^2), per row."""
    return (0.5 * (LOG_2PI + 1.0) + log_std).sum(axis=1)


def sample_gaussian(mu: np.ndarray, log_std: np.ndarray,
                    rng: np.random.Generator) -> np.ndarray:
    return mu + np.exp(log_std) * rng.standard_normal(mu.shape)


def net_to_doc(net: Mlp) -> dict:
    return {"sizes": net.sizes,
            "params": [p.tolist() for p in net.params()]}


def net_from_doc(doc: dict) -> Mlp:
    net = Mlp.create(doc["sizes"], np.random.default_rng(0))
    for p, stored in zip(net.params(), doc["params"]):
        p[...] = np.asarray(stored, dtype=float).reshape(p.shape)
    return net


def adam_to_doc(state: AdamState) -> dict:
    return {"m": [a.tolist() for a in state.m],
            "v": [a.tolist() for a in state.v],
            "step": state.step, "lr": state.lr, "decay": state.decay,
            "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps}


def adam_from_doc(doc: dict, net: Mlp) -> AdamState:
    state = AdamState.for_net(net, lr=doc["lr"], decay=doc["decay"])
    state.step = int(doc["step"])
    state.beta1, state.beta2, state.eps = doc["beta1"], doc["beta2"], doc["eps"]
    for a, stored in zip(state.m, doc["m"]):
        a[...] = np.asarray(stored, dtype=float).reshape(a.shape)
    for a, stored in zip(state.v, doc["v"]):
        a[...] = np.asarray(stored, dtype=float).reshape(a.shape)
    return state
