"""Small dense networks with hand-written backpropagation and Adam."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "leaky_relu", "tanh", "softplus")
LEAKY_SLOPE = 0.01
INIT_SCHEME = "uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))"


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "leaky_relu":
        return np.maximum(z, LEAKY_SLOPE * z)
    if name == "tanh":
        return np.tanh(z)
    if name == "softplus":
        return np.logaddexp(0.0, z)
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "leaky_relu":
        return np.where(z > 0, 1.0, LEAKY_SLOPE)
    if name == "tanh":
        return 1.0 - a * a
    if name == "softplus":
        return 0.5 * (1.0 + np.tanh(0.5 * z))  # logistic sigmoid, overflow-free
    raise ValueError(f"unknown activation {name!r}")


class DenseNet:
    """Affine layers with a fixed nonlinearity between them (none on the output)."""

    def __init__(self, layer_dims, activation: str = "leaky_relu", rng=None, zero: bool = False):
        layer_dims = [int(d) for d in layer_dims]
        if len(layer_dims) < 2 or min(layer_dims) < 1:
            raise ValueError(f"bad layer dims {layer_dims}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; choose from {ACTIVATIONS}")
        self.layer_dims = layer_dims
        self.activation = activation
        self.version = 0
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        rng = np.random.default_rng() if rng is None else rng
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            if zero:
                self.weights.append(np.zeros((fan_in, fan_out)))
                self.biases.append(np.zeros(fan_out))
            else:
                bound = 1.0 / np.sqrt(fan_in)
                self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
                self.biases.append(rng.uniform(-bound, bound, size=fan_out))

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]


@dataclass
class Tape:
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    post: list[np.ndarray]
    version: int
    squeeze: bool


def net_forward(net: DenseNet, x, check: bool = True) -> tuple[np.ndarray, Tape]:
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ValueError(f"input has shape {x.shape}, network expects (*, {net.in_dim})")
    if check and not np.all(np.isfinite(x)):
        raise ValueError("non-finite network input")
    inputs, pre, post = [], [], []
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        z = h @ w + b
        if i < last:
            a = _act(net.activation, z)
            pre.append(z)
            post.append(a)
            h = a
        else:
            h = z
    out = h[0] if squeeze else h
    return out, Tape(inputs, pre, post, net.version, squeeze)


def net_backward(net: DenseNet, tape: Tape, out_grad, return_input_grad: bool = False):
    """Gradients of sum(output * out_grad) w.r.t. [W0, b0, W1, b1, ...]."""
    if tape.version != net.version:
        raise RuntimeError("stale tape: network parameters changed since the forward pass")
    g = np.asarray(out_grad, dtype=float)
    if tape.squeeze and g.ndim == 1:
        g = g[None, :]
    if g.ndim == 1:
        g = g[:, None]
    grads: list[np.ndarray] = [None] * (2 * len(net.weights))  # type: ignore[list-item]
    for i in range(len(net.weights) - 1, -1, -1):
        grads[2 * i] = tape.inputs[i].T @ g
        grads[2 * i + 1] = g.sum(0)
        if i > 0 or return_input_grad:
            g = g @ net.weights[i].T
            if i > 0:
                g = g * _act_grad(net.activation, tape.pre[i - 1], tape.post[i - 1])
    if return_input_grad:
        return grads, (g[0] if tape.squeeze else g)
    return grads


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    lrs: list[float]
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lrs, **kw) -> "AdamState":
        if isinstance(lrs, (int, float)):
            lrs = [float(lrs)] * len(params)
        if len(lrs) != len(params):
            raise ValueError("one learning rate per parameter array is required")
        return cls(
            lrs=list(lrs),
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            **kw,
        )


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_by_global_norm(grads, max_norm: float):
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads], norm
    return list(grads), norm


def adam_step(params, grads, state: AdamState, grad_clip: float | None = 10.0, context: str = ""):
    """In-place Adam update after clipping the global gradient norm."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            where = f" ({context})" if context else ""
            raise NonFiniteGradient(f"non-finite gradient at optimizer step {state.step + 1}{where}")
    if grad_clip is not None:
        grads, _ = clip_by_global_norm(grads, grad_clip)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v, lr in zip(params, grads, state.m, state.v, state.lrs):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write a self-describing .npz: named arrays plus a JSON metadata blob."""
    payload = {k: np.asarray(v) for k, v in arrays.items()}
    payload["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: data[k].copy() for k in data.files if k != "__meta__"}
        meta = json.loads(str(data["__meta__"]))
    return arrays, meta
