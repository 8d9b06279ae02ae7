"""Dense ReLU networks with hand-written backpropagation.

Weights are stored as ``(fan_in, fan_out)`` matrices so a batch ``X`` of
shape ``(B, fan_in)`` maps to ``X @ W + b``. Everything is float64.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

CHECKPOINT_SCHEMA = 1
HEADS = ("q", "logsoftmax")


class CheckpointError(ValueError):
    pass


@dataclass
class MlpParameters:
    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    head: str = "q"

    def __post_init__(self):
        self.layer_sizes = tuple(int(n) for n in self.layer_sizes)
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("one weight matrix and bias per layer transition expected")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_sizes[k], self.layer_sizes[k + 1])
            if W.shape != shape or b.shape != (shape[1],):
                raise ValueError(f"layer {k}: weight {W.shape} / bias {b.shape}, expected {shape}")

    @property
    def input_width(self) -> int:
        return self.layer_sizes[0]

    def arrays(self) -> list[np.ndarray]:
        """Parameters in gradient order ``[W0, b0, W1, b1, ...]``."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "MlpParameters":
        return MlpParameters(self.layer_sizes, [W.copy() for W in self.weights],
                             [b.copy() for b in self.biases], self.head)


def init_network(layer_sizes, seed, head="q") -> MlpParameters:
    """He-uniform weights (bound ``sqrt(6 / fan_in)``) and zero biases."""
    layer_sizes = tuple(int(n) for n in layer_sizes)
    if len(layer_sizes) < 3:
        raise ValueError("need input, at least one hidden layer, and output")
    if min(layer_sizes) < 1:
        raise ValueError(f"zero-width layer in {layer_sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParameters(layer_sizes, weights, biases, head)


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_width(params, x):
    if x.shape[-1] != params.input_width:
        raise ValueError(f"feature width {x.shape[-1]} != network input width {params.input_width}")


def forward(params: MlpParameters, features) -> np.ndarray:
    """Network outputs for one feature vector or a batch of them."""
    x = np.asarray(features, dtype=float)
    _check_width(params, x)
    last = len(params.weights) - 1
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        x = x @ W + b
        if k < last:
            np.maximum(x, 0.0, out=x)
    if params.head == "logsoftmax":
        x = _log_softmax(x)
    return x


def _forward_cached(params, X):
    """Pre-head outputs plus the layer inputs needed for backprop."""
    _check_width(params, X)
    acts = [X]
    last = len(params.weights) - 1
    a = X
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ W + b
        a = np.maximum(z, 0.0) if k < last else z
        acts.append(a)
    return a, acts


def _backward(params, acts, d_out) -> list[np.ndarray]:
    grads = [None] * (2 * len(params.weights))
    delta = d_out
    for k in range(len(params.weights) - 1, -1, -1):
        grads[2 * k] = acts[k].T @ delta
        grads[2 * k + 1] = delta.sum(axis=0)
        if k:
            delta = (delta @ params.weights[k].T) * (acts[k] > 0)
    return grads


def dqn_loss_and_gradient(params: MlpParameters, inputs, actions, targets):
    """Mean squared TD error on the chosen-action outputs.

    ``targets`` are held fixed; no gradient flows into them.
    """
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    actions = np.asarray(actions, dtype=int)
    y = np.asarray(targets, dtype=float)
    out, acts = _forward_cached(params, X)
    rows = np.arange(len(X))
    err = y - out[rows, actions]
    loss = float(np.mean(err ** 2))
    d_out = np.zeros_like(out)
    d_out[rows, actions] = -2.0 * err / len(X)
    return loss, _backward(params, acts, d_out)


def nll_loss_and_gradient(params: MlpParameters, inputs, labels):
    """Mean negative log-likelihood of ``labels`` under a log-softmax head."""
    if params.head != "logsoftmax":
        raise ValueError("NLL loss needs a log-softmax head")
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    labels = np.asarray(labels, dtype=int)
    z, acts = _forward_cached(params, X)
    logp = _log_softmax(z)
    rows = np.arange(len(X))
    loss = float(-np.mean(logp[rows, labels]))
    d_out = np.exp(logp)
    d_out[rows, labels] -= 1.0
    d_out /= len(X)
    return loss, _backward(params, acts, d_out)


def _check_finite(gradients):
    for g in gradients:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient; step aborted")


def sgd_step(params: MlpParameters, gradients, learning_rate) -> MlpParameters:
    """In-place ``theta -= lr * grad``; returns ``params``."""
    _check_finite(gradients)
    for p, g in zip(params.arrays(), gradients):
        p -= learning_rate * g
    return params


@dataclass
class Adam:
    """Adam update; the default optimizer for both trainers (``optimizer="sgd"`` opts out)."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: MlpParameters, gradients) -> MlpParameters:
        _check_finite(gradients)
        if not self.m:
            self.m = [np.zeros_like(g) for g in gradients]
            self.v = [np.zeros_like(g) for g in gradients]
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, g, m, v in zip(params.arrays(), gradients, self.m, self.v):
            _adam_update(p.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1),
                         self.learning_rate, self.beta1, self.beta2, c1, c2, self.eps)
        return params


# Moments of units with zero gradient decay geometrically and would spend
# thousands of steps as subnormal floats, which are ~10x slower to compute
# with. Below this they cannot move a parameter by even one ulp.
_MOMENT_FLOOR = 1e-250


@numba.njit(cache=True)
def _adam_update(p, g, m, v, lr, beta1, beta2, c1, c2, eps):
    for i in range(p.size):
        mi = m[i] * beta1 + (1 - beta1) * g[i]
        vi = v[i] * beta2 + (1 - beta2) * g[i] * g[i]
        if abs(mi) < _MOMENT_FLOOR:
            mi = 0.0
        if vi < _MOMENT_FLOOR:
            vi = 0.0
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)


class Optimizer:
    """Dispatches to plain SGD or :class:`Adam` by name."""

    def __init__(self, name: str, learning_rate: float):
        if name not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {name!r}")
        self.name = name
        self.learning_rate = learning_rate
        self._adam = Adam(learning_rate) if name == "adam" else None

    def step(self, params, gradients):
        if self._adam is not None:
            return self._adam.step(params, gradients)
        return sgd_step(params, gradients, self.learning_rate)


def copy_parameters(source: MlpParameters, destination: MlpParameters) -> MlpParameters:
    """Overwrite ``destination`` in place with the values of ``source``."""
    if source.layer_sizes != destination.layer_sizes:
        raise ValueError(f"layer sizes differ: {source.layer_sizes} vs {destination.layer_sizes}")
    for d, s in zip(destination.arrays(), source.arrays()):
        np.copyto(d, s)
    destination.head = source.head
    return destination


def save_checkpoint(path, params: MlpParameters, case: int, metadata: dict | None = None):
    doc = {
        "schema_version": CHECKPOINT_SCHEMA,
        "head": params.head,
        "case": int(case),
        "layer_sizes": list(params.layer_sizes),
        "weights": [W.tolist() for W in params.weights],
        "biases": [b.tolist() for b in params.biases],
        "metadata": metadata or {},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_checkpoint(path):
    """Returns ``(params, case, metadata)``."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: unreadable or truncated checkpoint ({exc})") from exc
    if doc.get("schema_version") != CHECKPOINT_SCHEMA:
        raise CheckpointError(f"{path}: schema_version {doc.get('schema_version')!r}, "
                              f"expected {CHECKPOINT_SCHEMA}")
    try:
        params = MlpParameters(doc["layer_sizes"],
                               [np.array(W, dtype=float) for W in doc["weights"]],
                               [np.array(b, dtype=float) for b in doc["biases"]],
                               doc["head"])
        return params, int(doc["case"]), doc.get("metadata", {})
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
