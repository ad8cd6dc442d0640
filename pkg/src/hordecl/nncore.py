"""Small dense-network core: parameters, MLP forward/backward, losses, SGD.

Everything runs in float64 so gradient checks against finite differences are
meaningful.  A linear layer is stored as one ``(out, in + 1)`` matrix whose last
column is the bias; freezing a row therefore freezes the bias for that output
as well.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh", "linear")


class ShapeError(ValueError):
    """Raised when an input width does not match a layer."""

    def __init__(self, layer: int, expected: int, actual: int):
        self.layer = layer
        self.expected = expected
        self.actual = actual
        super().__init__(f"layer {layer}: expected input width {expected}, got {actual}")


class FrozenParameterError(RuntimeError):
    """A frozen parameter container was asked to change."""


class ParamMatrix:
    """A trainable matrix with gradient, momentum buffer and freezing controls."""

    def __init__(self, values: np.ndarray, name: str = ""):
        self.name = name
        self.values = np.array(values, dtype=np.float64)
        self.gradient = np.zeros_like(self.values)
        self.velocity = np.zeros_like(self.values)
        self.frozen_rows: set[int] = set()
        self._frozen = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> None:
        """Make the parameter permanently immutable."""
        self._frozen = True
        self.values.flags.writeable = False
        self.gradient = np.zeros_like(self.values)
        self.velocity = np.zeros_like(self.values)

    def zero_grad(self) -> None:
        self.gradient.fill(0.0)

    def reset_velocity(self) -> None:
        self.velocity = np.zeros_like(self.values)

    def assign(self, values: np.ndarray) -> None:
        """Replace the values in place, keeping the object identity."""
        if self._frozen:
            raise FrozenParameterError(f"cannot assign to frozen parameter {self.name!r}")
        values = np.array(values, dtype=np.float64)
        self.values = values
        if self.gradient.shape != values.shape:
            self.gradient = np.zeros_like(values)
            self.velocity = np.zeros_like(values)

    def copy(self) -> "ParamMatrix":
        p = ParamMatrix(self.values.copy(), self.name)
        p.frozen_rows = set(self.frozen_rows)
        return p


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    embedding_dim: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not self.hidden_dims:
            raise ValueError("MlpSpec needs at least one hidden layer")
        if min((self.input_dim, self.embedding_dim) + self.hidden_dims) <= 0:
            raise ValueError("all MlpSpec dimensions must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def widths(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.embedding_dim]

    def num_params(self) -> int:
        w = self.widths
        return sum((a + 1) * b for a, b in zip(w[:-1], w[1:]))

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "embedding_dim": self.embedding_dim,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(int(d["input_dim"]), tuple(d["hidden_dims"]), int(d["embedding_dim"]),
                   d.get("activation", "relu"))


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) < 1:
            raise ValueError("a batch needs at least one sample")
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class ActivationTrace:
    """Layer inputs and pre-activations kept for the backward pass."""

    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)
    output: np.ndarray | None = None


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
    return np.hstack([w, np.zeros((fan_out, 1))])


def _act(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _act_grad(kind: str, z: np.ndarray, dout: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return dout * (z > 0)
    if kind == "tanh":
        return dout * (1.0 - np.tanh(z) ** 2)
    return dout


def linear_forward(param: ParamMatrix, x: np.ndarray) -> np.ndarray:
    w = param.values
    return x @ w[:, :-1].T + w[:, -1]


class MlpNet:
    """A stack of affine layers with one activation identifier per layer."""

    def __init__(self, layers: Sequence[ParamMatrix], activations: Sequence[str]):
        if len(layers) != len(activations):
            raise ValueError("one activation per layer is required")
        self.layers = list(layers)
        self.activations = list(activations)

    @classmethod
    def from_spec(cls, spec: MlpSpec, rng: np.random.Generator) -> "MlpNet":
        widths = spec.widths
        layers = [ParamMatrix(glorot_uniform(a, b, rng), name=f"layer{i}")
                  for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]
        acts = [spec.activation] * (len(layers) - 1) + ["linear"]
        return cls(layers, acts)

    @property
    def input_dim(self) -> int:
        return self.layers[0].shape[1] - 1

    @property
    def output_dim(self) -> int:
        return self.layers[-1].shape[0]

    def parameters(self) -> list[ParamMatrix]:
        return list(self.layers)

    def zero_grad(self) -> None:
        for p in self.layers:
            p.zero_grad()

    def freeze(self) -> None:
        for p in self.layers:
            p.freeze()

    @property
    def frozen(self) -> bool:
        return all(p.frozen for p in self.layers)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x).output

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.values.ravel() for p in self.layers])

    def load_flat(self, flat: np.ndarray) -> None:
        pos = 0
        for p in self.layers:
            n = p.values.size
            p.assign(np.asarray(flat[pos:pos + n]).reshape(p.shape))
            pos += n
        if pos != len(flat):
            raise ValueError("flat parameter vector has the wrong length")

    def state(self) -> list[np.ndarray]:
        return [p.values.copy() for p in self.layers]

    def load_state(self, state: Sequence[np.ndarray]) -> None:
        for p, v in zip(self.layers, state):
            p.assign(v.copy())

    def clone(self) -> "MlpNet":
        return MlpNet([p.copy() for p in self.layers], list(self.activations))


def forward(net: MlpNet, batch: Batch | np.ndarray) -> ActivationTrace:
    x = batch.inputs if isinstance(batch, Batch) else np.asarray(batch, dtype=np.float64)
    trace = ActivationTrace()
    for i, (p, act) in enumerate(zip(net.layers, net.activations)):
        expected = p.shape[1] - 1
        if x.ndim != 2 or x.shape[1] != expected:
            raise ShapeError(i, expected, x.shape[-1] if x.ndim else 0)
        trace.inputs.append(x)
        z = linear_forward(p, x)
        trace.preacts.append(z)
        x = _act(act, z)
    trace.output = x
    return trace


def layer_deltas(net: MlpNet, trace: ActivationTrace, dout: np.ndarray):
    """Per-layer ``(layer_input, delta)`` pairs plus the gradient w.r.t. the net input.

    ``delta`` is dL/dz for each sample; weight gradients are ``delta.T @ [x, 1]``.
    """
    pairs = []
    grad = dout
    for i in range(len(net.layers) - 1, -1, -1):
        delta = _act_grad(net.activations[i], trace.preacts[i], grad)
        pairs.append((trace.inputs[i], delta))
        grad = delta @ net.layers[i].values[:, :-1]
    pairs.reverse()
    return pairs, grad


def _augment(x: np.ndarray) -> np.ndarray:
    return np.hstack([x, np.ones((len(x), 1))])


def backward(net: MlpNet, trace: ActivationTrace, dout: np.ndarray) -> np.ndarray:
    """Accumulate parameter gradients for ``dout`` and return dL/dinput."""
    pairs, dx = layer_deltas(net, trace, dout)
    for p, (x, delta) in zip(net.layers, pairs):
        if p.frozen:
            continue
        p.gradient += delta.T @ _augment(x)
    return dx


def per_sample_grad_stats(net: MlpNet, trace: ActivationTrace, dout: np.ndarray,
                          kind: str) -> list[np.ndarray]:
    """Sum over samples of |g_i| (``kind='abs'``) or g_i**2 (``kind='sq'``).

    A per-sample weight gradient is an outer product, so both reductions factor
    into elementwise transforms of the two factors.
    """
    pairs, _ = layer_deltas(net, trace, dout)
    out = []
    for x, delta in pairs:
        xa = _augment(x)
        if kind == "abs":
            out.append(np.abs(delta).T @ np.abs(xa))
        elif kind == "sq":
            out.append((delta ** 2).T @ (xa ** 2))
        else:
            raise ValueError(kind)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range for {k} logits")
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return float(loss), d / n


def _normalize_rows(x: np.ndarray, eps: float = 1e-12):
    norm = np.sqrt((x ** 2).sum(axis=1, keepdims=True)) + eps
    return x / norm, norm


def contrastive_loss(embeddings: np.ndarray, labels: np.ndarray,
                     margin: float = 1.0) -> tuple[float, np.ndarray]:
    """Batch-hard contrastive loss on L2-normalised rows.

    Each anchor pulls its farthest positive in and pushes its nearest negative
    out to ``margin``.  Returns the loss and its gradient w.r.t. the raw rows.
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(x)
    if n < 2:
        raise ValueError("contrastive loss needs at least two samples")
    u, norm = _normalize_rows(x)
    diff = u[:, None, :] - u[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1) + 1e-24)
    same = labels[:, None] == labels[None, :]
    eye = np.eye(n, dtype=bool)
    pos_mask = same & ~eye
    neg_mask = ~same
    if not neg_mask.any():
        return 0.0, np.zeros_like(x)

    du = np.zeros_like(u)
    total = 0.0
    rows = np.arange(n)
    has_pos = pos_mask.any(1)
    has_neg = neg_mask.any(1)

    p_idx = np.where(pos_mask, dist, -np.inf).argmax(1)
    a = rows[has_pos]
    p = p_idx[has_pos]
    total += (dist[a, p] ** 2).sum()
    g = 2.0 * (u[a] - u[p])
    np.add.at(du, a, g)
    np.add.at(du, p, -g)

    n_idx = np.where(neg_mask, dist, np.inf).argmin(1)
    a = rows[has_neg]
    q = n_idx[has_neg]
    d = dist[a, q]
    slack = np.maximum(margin - d, 0.0)
    total += (slack ** 2).sum()
    coef = (-2.0 * slack / d)[:, None]
    g = coef * (u[a] - u[q])
    np.add.at(du, a, g)
    np.add.at(du, q, -g)

    valid = int((has_pos | has_neg).sum())
    loss = total / valid
    du /= valid
    # back through the row normalisation
    dx = (du - u * (du * u).sum(1, keepdims=True)) / norm
    return float(loss), dx


def clip_grad_norm(params: Iterable[ParamMatrix], max_norm: float | None) -> float:
    """Rescale gradients so their joint L2 norm is at most ``max_norm``."""
    params = list(params)
    norm = float(np.sqrt(sum(float(np.sum(p.gradient ** 2)) for p in params)))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.gradient *= scale
    return norm


def sgd_step(params: Iterable[ParamMatrix], lr: float, momentum: float = 0.0) -> None:
    """Heavy-ball SGD; frozen rows keep their values and momentum."""
    for p in params:
        if p.frozen:
            if np.any(p.gradient):
                raise FrozenParameterError(f"gradient reached frozen parameter {p.name!r}")
            continue
        g = p.gradient
        if p.frozen_rows:
            rows = np.fromiter(p.frozen_rows, dtype=np.int64)
            g = g.copy()
            g[rows] = 0.0
            v = momentum * p.velocity + g
            v[rows] = p.velocity[rows]
            update = lr * v
            update[rows] = 0.0
        else:
            v = momentum * p.velocity + g
            update = lr * v
        p.velocity = v
        new = p.values - update
        if p.frozen_rows:
            new[rows] = p.values[rows]
        p.values = new
        p.zero_grad()
