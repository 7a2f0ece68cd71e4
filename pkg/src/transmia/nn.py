"""Dense feedforward classifiers trained with mini-batch SGD.

A :class:`LayeredNet` is an immutable stack of :class:`DenseLayer` objects
followed by a softmax.  ``split_index`` marks the boundary between the
shallow stack (layers ``[0, split_index)``) and the deep stack (the rest),
so that ``forward(net, x) == forward(deep, transform(shallow, x))``.

Training never mutates its input; it returns a new net.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ParseError, RejectedInputError, VersionError
from .seeding import rng

logger = logging.getLogger(__name__)

PROB_EPS = 1e-12  # floor applied inside log terms only

ACTIVATIONS = ("relu", "tanh", "identity")
_ACT_TAGS = {name: i for i, name in enumerate(ACTIVATIONS)}

BLOB_MAGIC = b"TMIA"
BLOB_VERSION = 1


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DenseLayer:
    """Affine map ``act(W x + b)`` with ``W`` of shape (out_dim, in_dim)."""

    weights: np.ndarray
    biases: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        w = _frozen(self.weights)
        b = _frozen(self.biases)
        if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[0]:
            raise RejectedInputError(
                f"layer shapes do not agree: weights {w.shape}, biases {b.shape}")
        if self.activation not in _ACT_TAGS:
            raise RejectedInputError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def same_params(self, other: "DenseLayer") -> bool:
        """Bitwise parameter equality (NaN payloads included)."""
        return (self.activation == other.activation
                and self.weights.shape == other.weights.shape
                and self.weights.tobytes() == other.weights.tobytes()
                and self.biases.tobytes() == other.biases.tobytes())


@dataclass(frozen=True, eq=False)
class LayeredNet:
    layers: tuple[DenseLayer, ...]
    split_index: int = field(default=-1)

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise RejectedInputError("a net needs at least one layer")
        for i in range(len(layers) - 1):
            if layers[i].out_dim != layers[i + 1].in_dim:
                raise RejectedInputError(
                    f"layer {i} outputs {layers[i].out_dim} values but layer "
                    f"{i + 1} expects {layers[i + 1].in_dim}")
        split = len(layers) - 1 if self.split_index == -1 else self.split_index
        if not 0 <= split <= len(layers):
            raise RejectedInputError(
                f"split_index {split} outside [0, {len(layers)}]")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "split_index", int(split))

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.in_dim,) + tuple(layer.out_dim for layer in self.layers)

    def same_params(self, other: "LayeredNet") -> bool:
        return (self.split_index == other.split_index
                and self.num_layers == other.num_layers
                and all(a.same_params(b) for a, b in zip(self.layers, other.layers)))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        problems = []
        if int(self.epochs) != self.epochs or self.epochs < 0:
            problems.append(f"epochs must be a nonnegative integer, got {self.epochs}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            problems.append(f"batch_size must be a positive integer, got {self.batch_size}")
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            problems.append(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            problems.append(f"momentum must lie in [0, 1), got {self.momentum}")
        if not self.weight_decay >= 0:
            problems.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        if problems:
            raise RejectedInputError("; ".join(problems))

    def with_seed(self, seed: int) -> "TrainConfig":
        return TrainConfig(self.epochs, self.batch_size, self.learning_rate,
                           self.momentum, int(seed), self.weight_decay)


# -- construction -----------------------------------------------------------

def glorot_layer(in_dim: int, out_dim: int, activation: str,
                 generator: np.random.Generator) -> DenseLayer:
    limit = math.sqrt(6.0 / (in_dim + out_dim))
    w = generator.uniform(-limit, limit, size=(out_dim, in_dim))
    return DenseLayer(w, np.zeros(out_dim), activation)


def init_net(dims: Sequence[int], activation: str = "relu",
             split_index: int | None = None, seed: int = 0) -> LayeredNet:
    """Glorot-uniform net over ``dims = (in, hidden..., classes)``.

    Hidden layers use ``activation``; the output layer is linear and feeds
    the softmax.  ``split_index`` defaults to ``len(dims) - 2`` (everything
    but the last layer is shallow).
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2 or min(dims) < 1:
        raise RejectedInputError(f"invalid layer dims {dims}")
    gen = rng(seed)
    n = len(dims) - 1
    layers = [glorot_layer(dims[i], dims[i + 1],
                           activation if i < n - 1 else "identity", gen)
              for i in range(n)]
    return LayeredNet(tuple(layers), n - 1 if split_index is None else split_index)


# -- evaluation --------------------------------------------------------------

def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "tanh":
        return np.tanh(z)
    return z


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(net: LayeredNet, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise RejectedInputError(
            f"input has shape {np.shape(x)}, net expects feature dim {net.in_dim}")
    return x, single


def transform(net: LayeredNet, x) -> np.ndarray:
    """Run every layer (with its activation) but skip the final softmax."""
    a, single = _as_batch(net, x)
    for layer in net.layers:
        a = _activate(a @ layer.weights.T + layer.biases, layer.activation)
    return a[0] if single else a


def forward(net: LayeredNet, x) -> np.ndarray:
    """Prediction vector(s): softmax over the net's output classes.

    Accepts a single feature vector or a 2-D batch (one row per input).
    """
    return softmax(transform(net, x))


def predict(net: LayeredNet, x) -> np.ndarray:
    """Class decisions; ``np.argmax`` breaks ties towards the lowest index."""
    return np.argmax(forward(net, x), axis=-1)


def accuracy(net: LayeredNet, data) -> float:
    return float(np.mean(predict(net, data.X) == data.y))


def cross_entropy(v, y) -> float | np.ndarray:
    """``-log(v_y)`` with ``v_y`` floored at :data:`PROB_EPS`.

    Works on one prediction vector with an integer label, or on a batch of
    vectors with a label array (returning per-row losses).
    """
    v = np.asarray(v, dtype=np.float64)
    y_arr = np.asarray(y)
    n_classes = v.shape[-1]
    if not np.issubdtype(y_arr.dtype, np.integer) or np.any(y_arr < 0) or np.any(y_arr >= n_classes):
        raise RejectedInputError(f"label {y} out of range for {n_classes} classes")
    if v.ndim == 1:
        return float(-math.log(max(v[int(y)], PROB_EPS)))
    picked = v[np.arange(v.shape[0]), y_arr]
    return -np.log(np.maximum(picked, PROB_EPS))


def mean_loss(net: LayeredNet, data) -> float:
    return float(np.mean(cross_entropy(forward(net, data.X), data.y)))


# -- gradients ---------------------------------------------------------------

def _backprop(weights, biases, activations, x, y, start: int = 0):
    """Mean softmax cross-entropy gradients for layers ``start..``.

    ``x`` is the input to layer ``start``.  Returns (grads_w, grads_b) lists
    aligned with ``weights[start:]``.
    """
    inputs, outputs = [], []
    a = x
    for w, b, act in zip(weights[start:], biases[start:], activations[start:]):
        inputs.append(a)
        a = _activate(a @ w.T + b, act)
        outputs.append(a)
    p = softmax(a)
    n = x.shape[0]
    delta = p
    delta[np.arange(n), y] -= 1.0
    delta /= n
    gw, gb = [], []
    for k in range(len(inputs) - 1, -1, -1):
        act = activations[start + k]
        if act == "relu":
            delta = delta * (outputs[k] > 0)
        elif act == "tanh":
            delta = delta * (1.0 - outputs[k] ** 2)
        gw.append(delta.T @ inputs[k])
        gb.append(delta.sum(axis=0))
        if k > 0:
            delta = delta @ weights[start + k]
    gw.reverse()
    gb.reverse()
    return gw, gb


def gradients(net: LayeredNet, x, y) -> list[tuple[np.ndarray, np.ndarray]]:
    """Analytic gradients of the mean cross-entropy over a batch."""
    xb, _ = _as_batch(net, x)
    yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
    gw, gb = _backprop([l.weights for l in net.layers], [l.biases for l in net.layers],
                       [l.activation for l in net.layers], xb, yb)
    return list(zip(gw, gb))


def gradient_check(net: LayeredNet, sample, eps: float = 1e-5) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Relative error is ``|a - n| / max(|a|, |n|, 1e-8)``, taken over every
    weight and bias of every layer.
    """
    x, y = sample
    x = np.asarray(x, dtype=np.float64)
    y = int(y)
    analytic = gradients(net, x, y)
    params = [[np.array(l.weights), np.array(l.biases)] for l in net.layers]
    acts = [l.activation for l in net.layers]

    def loss() -> float:
        a = x[None, :]
        for (w, b), act in zip(params, acts):
            a = _activate(a @ w.T + b, act)
        return cross_entropy(softmax(a)[0], y)

    worst = 0.0
    for li, pair in enumerate(params):
        for pi, arr in enumerate(pair):
            grad = analytic[li][pi]
            flat = arr.reshape(-1)
            gflat = grad.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + eps
                up = loss()
                flat[j] = orig - eps
                down = loss()
                flat[j] = orig
                numeric = (up - down) / (2 * eps)
                a = gflat[j]
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst


# -- training ----------------------------------------------------------------

def train(net: LayeredNet, data, cfg: TrainConfig, mask: Sequence[bool] | None = None,
          select_on=None) -> LayeredNet:
    """Mini-batch SGD (optional momentum and L2 weight decay) on cross-entropy.

    ``mask[i]`` False freezes layer ``i``; frozen layers come back
    bit-identical.  The data order for each epoch is a permutation drawn
    from a PCG64 generator seeded with ``cfg.seed``.

    When ``select_on`` is given, the returned parameters are those of the
    epoch with the best accuracy on that dataset (earliest epoch on ties).
    """
    n = len(data.y)
    if n == 0:
        raise RejectedInputError("cannot train on an empty dataset")
    mask = [True] * net.num_layers if mask is None else [bool(m) for m in mask]
    if len(mask) != net.num_layers:
        raise RejectedInputError(
            f"mask has {len(mask)} entries for a {net.num_layers}-layer net")
    X = np.asarray(data.X, dtype=np.float64)
    y = np.asarray(data.y, dtype=np.int64)
    if X.ndim != 2 or X.shape[1] != net.in_dim:
        raise RejectedInputError(
            f"dataset feature dim {X.shape[-1]} != net input dim {net.in_dim}")
    if y.min() < 0 or y.max() >= net.out_dim:
        raise RejectedInputError(
            f"dataset labels span [{y.min()}, {y.max()}] but the net has {net.out_dim} outputs")
    if cfg.epochs == 0 or not any(mask):
        return net

    start = mask.index(True)
    weights = [np.array(l.weights) for l in net.layers]
    biases = [np.array(l.biases) for l in net.layers]
    acts = [l.activation for l in net.layers]
    vel_w = [np.zeros_like(w) for w in weights]
    vel_b = [np.zeros_like(b) for b in biases]

    # The frozen prefix is constant, so its output is computed once.
    feats = X
    for w, b, act in zip(weights[:start], biases[:start], acts[:start]):
        feats = _activate(feats @ w.T + b, act)

    gen = rng(cfg.seed)
    batch = min(cfg.batch_size, n)
    lr, mu, wd = cfg.learning_rate, cfg.momentum, cfg.weight_decay
    best, best_acc = None, -1.0
    for _ in range(cfg.epochs):
        order = gen.permutation(n)
        for lo in range(0, n, batch):
            idx = order[lo:lo + batch]
            gw, gb = _backprop(weights, biases, acts, feats[idx], y[idx], start)
            for k, (dw, db) in enumerate(zip(gw, gb)):
                li = start + k
                if not mask[li]:
                    continue
                if wd:
                    dw = dw + wd * weights[li]
                vel_w[li] = mu * vel_w[li] - lr * dw
                vel_b[li] = mu * vel_b[li] - lr * db
                weights[li] += vel_w[li]
                biases[li] += vel_b[li]
        if select_on is not None:
            candidate = _assemble(net, weights, biases, mask)
            acc = accuracy(candidate, select_on)
            if acc > best_acc:
                best, best_acc = candidate, acc
    trained = best if best is not None else _assemble(net, weights, biases, mask)
    for layer in trained.layers:
        if not (np.all(np.isfinite(layer.weights)) and np.all(np.isfinite(layer.biases))):
            logger.warning("training produced non-finite parameters; lower the learning rate")
            break
    return trained


def _assemble(net: LayeredNet, weights, biases, mask) -> LayeredNet:
    layers = tuple(
        DenseLayer(w, b, old.activation) if m else old
        for old, w, b, m in zip(net.layers, weights, biases, mask))
    return LayeredNet(layers, net.split_index)


# -- serialization ------------------------------------------------------------

def save_params(net: LayeredNet) -> bytes:
    """Versioned little-endian blob: magic, version, layers, split index."""
    parts = [struct.pack("<4sII", BLOB_MAGIC, BLOB_VERSION, net.num_layers)]
    for layer in net.layers:
        parts.append(struct.pack("<IIB", layer.in_dim, layer.out_dim,
                                 _ACT_TAGS[layer.activation]))
        parts.append(layer.weights.astype("<f8").tobytes(order="C"))
        parts.append(layer.biases.astype("<f8").tobytes())
    parts.append(struct.pack("<I", net.split_index))
    return b"".join(parts)


def _take(blob: bytes, pos: int, n: int, what: str) -> tuple[bytes, int]:
    if pos + n > len(blob):
        raise ParseError(f"blob truncated while reading {what} at byte {pos}")
    return blob[pos:pos + n], pos + n


def load_params(blob: bytes) -> LayeredNet:
    blob = bytes(blob)
    head, pos = _take(blob, 0, 12, "header")
    magic, version, count = struct.unpack("<4sII", head)
    if magic != BLOB_MAGIC:
        raise ParseError(f"bad magic {magic!r}")
    if version != BLOB_VERSION:
        raise VersionError(f"unsupported blob version {version} (expected {BLOB_VERSION})")
    if count == 0:
        raise ParseError("blob declares zero layers")
    layers = []
    for i in range(count):
        raw, pos = _take(blob, pos, 9, f"layer {i} header")
        in_dim, out_dim, tag = struct.unpack("<IIB", raw)
        if tag >= len(ACTIVATIONS):
            raise ParseError(f"layer {i} has unknown activation tag {tag}")
        raw_w, pos = _take(blob, pos, 8 * in_dim * out_dim, f"layer {i} weights")
        raw_b, pos = _take(blob, pos, 8 * out_dim, f"layer {i} biases")
        w = np.frombuffer(raw_w, dtype="<f8").reshape(out_dim, in_dim)
        b = np.frombuffer(raw_b, dtype="<f8")
        layers.append(DenseLayer(w, b, ACTIVATIONS[tag]))
    raw, pos = _take(blob, pos, 4, "split index")
    if pos != len(blob):
        raise ParseError(f"{len(blob) - pos} trailing bytes after blob")
    (split,) = struct.unpack("<I", raw)
    try:
        return LayeredNet(tuple(layers), split)
    except RejectedInputError as exc:
        raise ParseError(str(exc)) from exc
