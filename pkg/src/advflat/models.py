"""Small softmax classifiers with analytic input gradients.

All evaluation methods accept a single input ``(d,)`` or a batch ``(B, d)``.
Labels follow the same convention (an int or an int array of length ``B``).

Model file layout (little-endian throughout)::

    magic            8 bytes   b"ADVFLMLP"
    format version   u16       MODEL_FORMAT_VERSION
    activation       u8 length + ASCII tag ("tanh" | "softplus" | "relu")
    model id         u16 length + UTF-8 bytes
    epochs trained   u32
    layer count      u32
    shape table      (u32 fan_in, u32 fan_out) per layer
    parameters       per layer: W as fan_out*fan_in f64 (row-major), then b as fan_out f64

Nothing may follow the last parameter; trailing or missing bytes are errors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import SeededRng

ACTIVATIONS = ("tanh", "softplus", "relu")
SMOOTH_ACTIVATIONS = ("tanh", "softplus")
MODEL_MAGIC = b"ADVFLMLP"
MODEL_FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """Raised when a model file is malformed; ``field`` names the offending part."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _activate(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "softplus":
        return np.logaddexp(0.0, z)
    if name == "relu":
        return np.maximum(z, 0.0)
    raise ValueError(f"unknown activation {name!r}")


def _activation_grad(name, z, a):
    if name == "tanh":
        return 1.0 - a * a
    if name == "softplus":
        # sigmoid(z), written to avoid overflow for large |z|
        return np.exp(-np.logaddexp(0.0, -z))
    if name == "relu":
        return (z > 0).astype(np.float64)
    raise ValueError(f"unknown activation {name!r}")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = np.max(logits, axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    m = np.max(logits, axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, y) -> np.ndarray | float:
    """Softmax cross-entropy ``logsumexp(z) - z_y``.

    The largest logit contributes exp(0) = 1 exactly, so the loss is
    evaluated as ``(max - z_y) + log1p(sum of the others)``; this keeps tiny
    losses such as ``log(1 + e^-20)`` accurate and never negative.
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    z = np.atleast_2d(logits)
    y = np.atleast_1d(np.asarray(y))
    rows = np.arange(z.shape[0])
    top = np.argmax(z, axis=1)
    m = z[rows, top]
    e = np.exp(z - m[:, None])
    e[rows, top] = 0.0
    out = (m - z[rows, y]) + np.log1p(np.sum(e, axis=1))
    return float(out[0]) if single else out


class Classifier:
    """Shared loss/gradient/prediction logic on top of ``forward`` and ``_backprop``.

    Subclasses implement ``forward(x)`` and ``_backprop(x, dlogits)`` which maps
    a logit cotangent back to an input cotangent.
    """

    n_classes: int
    input_dim: int

    def _check_label(self, y):
        y = np.atleast_1d(np.asarray(y))
        if not np.issubdtype(y.dtype, np.integer):
            if np.any(y != np.round(y)):
                raise ValueError("labels must be integers")
            y = y.astype(np.int64)
        if np.any(y < 0) or np.any(y >= self.n_classes):
            raise ValueError(f"label out of range [0, {self.n_classes})")
        return y

    def loss(self, x, y):
        y = self._check_label(y)
        return cross_entropy(self.forward(x), y if np.ndim(x) > 1 else y[0])

    def input_gradient(self, x, y) -> np.ndarray:
        """Exact gradient of the cross-entropy w.r.t. the input."""
        y = self._check_label(y)
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = np.atleast_2d(x)
        logits = self.forward(xb)
        dz = softmax(logits)
        dz[np.arange(xb.shape[0]), np.broadcast_to(y, (xb.shape[0],))] -= 1.0
        grad = self._backprop(xb, dz)
        return grad[0] if single else grad

    def predict(self, x):
        """Argmax of the logits; ``np.argmax`` already resolves ties to the lowest index."""
        pred = np.argmax(self.forward(x), axis=-1)
        return int(pred) if np.ndim(pred) == 0 else pred

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim or x.ndim not in (1, 2):
            raise ValueError(f"dimension mismatch: model expects d={self.input_dim}, got shape {x.shape}")
        return x


@dataclass
class MlpClassifier(Classifier):
    """Feedforward classifier: affine layers with a shared hidden activation.

    ``weights[k]`` has shape ``(fan_out, fan_in)``; the last layer is linear
    and produces the logits.
    """

    weights: list
    biases: list
    activation: str = "tanh"
    model_id: str = "model"
    epochs_trained: int = 0

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not self.weights or len(self.weights) != len(self.biases):
            raise ValueError("need one bias per weight matrix and at least one layer")
        self.weights = [np.array(w, dtype=np.float64, ndmin=2) for w in self.weights]
        self.biases = [np.array(b, dtype=np.float64, ndmin=1) for b in self.biases]
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[0],):
                raise ValueError(f"layer {k}: bias shape {b.shape} does not match W {w.shape}")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ValueError(f"layer {k}: fan_in {w.shape[1]} != previous fan_out")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {k}: non-finite parameters")

    @classmethod
    def initialize(cls, layer_sizes, activation="tanh", rng: SeededRng | None = None, model_id="model"):
        """Glorot-uniform weights, zero biases."""
        rng = rng or SeededRng(0)
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, (fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, activation=activation, model_id=model_id)

    @property
    def input_dim(self):
        return self.weights[0].shape[1]

    @property
    def n_classes(self):
        return self.weights[-1].shape[0]

    @property
    def layer_sizes(self):
        return [self.input_dim] + [w.shape[0] for w in self.weights]

    @property
    def is_smooth(self):
        return self.activation in SMOOTH_ACTIVATIONS or len(self.weights) == 1

    def copy(self, **changes):
        kwargs = dict(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            activation=self.activation,
            model_id=self.model_id,
            epochs_trained=self.epochs_trained,
        )
        kwargs.update(changes)
        return MlpClassifier(**kwargs)

    def _layers(self, x):
        """Forward pass keeping pre-activations and activations for backprop."""
        pre, post = [], [x]
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            pre.append(z)
            h = z if k == last else _activate(self.activation, z)
            post.append(h)
        return pre, post

    def forward(self, x) -> np.ndarray:
        x = self._check_input(x)
        return self._layers(x)[1][-1]

    def _backprop(self, x, dlogits):
        pre, post = self._layers(x)
        delta = dlogits
        for k in range(len(self.weights) - 1, -1, -1):
            if k < len(self.weights) - 1:
                delta = delta * _activation_grad(self.activation, pre[k], post[k + 1])
            delta = delta @ self.weights[k]
        return delta

    def parameter_gradients(self, x, y, l2=0.0):
        """Mean cross-entropy over the batch and its parameter gradients."""
        pre, post = self._layers(x)
        logits = post[-1]
        n = x.shape[0]
        loss = float(np.mean(cross_entropy(logits, y)))
        delta = softmax(logits)
        delta[np.arange(n), y] -= 1.0
        delta /= n
        grads_w, grads_b = [None] * len(self.weights), [None] * len(self.weights)
        for k in range(len(self.weights) - 1, -1, -1):
            if k < len(self.weights) - 1:
                delta = delta * _activation_grad(self.activation, pre[k], post[k + 1])
            grads_w[k] = delta.T @ post[k] + l2 * self.weights[k]
            grads_b[k] = delta.sum(axis=0)
            delta = delta @ self.weights[k]
        return loss, grads_w, grads_b


class Ensemble(Classifier):
    """Logit-averaging ensemble; behaves like a single classifier."""

    def __init__(self, members):
        members = list(members)
        if not members:
            raise ValueError("ensemble needs at least one member")
        d, c = members[0].input_dim, members[0].n_classes
        for m in members[1:]:
            if (m.input_dim, m.n_classes) != (d, c):
                raise ValueError(
                    f"shape mismatch: {m.model_id} has (d={m.input_dim}, C={m.n_classes}), expected (d={d}, C={c})"
                )
        self.members = members
        self.input_dim, self.n_classes = d, c
        self.model_id = "+".join(getattr(m, "model_id", "?") for m in members)

    @property
    def is_smooth(self):
        return all(m.is_smooth for m in self.members)

    def forward(self, x):
        if len(self.members) == 1:
            return self.members[0].forward(x)
        return sum(m.forward(x) for m in self.members) / len(self.members)

    def _backprop(self, x, dlogits):
        if len(self.members) == 1:
            return self.members[0]._backprop(x, dlogits)
        scaled = dlogits / len(self.members)
        return sum(m._backprop(x, scaled) for m in self.members)


def ensemble_logits(models, x):
    return Ensemble(models).forward(x)


def fd_gradient_oracle(model, x, y, h=1e-5) -> np.ndarray:
    """Central-difference gradient of ``model.loss`` at a single point."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        grad[i] = (model.loss(x + e, y) - model.loss(x - e, y)) / (2 * h)
    return grad


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 60
    batch_size: int = 32
    init_seed: int = 0
    l2: float = 1e-4
    standardize: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.epochs < 0 or self.l2 < 0:
            raise ValueError(f"invalid training config: {self}")


@dataclass
class TrainResult:
    model: MlpClassifier
    train_accuracy: float
    losses: list = field(default_factory=list)


def accuracy(model, inputs, labels) -> float:
    return float(np.mean(model.predict(inputs) == labels))


def train(model: MlpClassifier, inputs, labels, cfg: TrainConfig, rng: SeededRng) -> TrainResult:
    """Mini-batch SGD on mean cross-entropy plus an L2 penalty.

    With ``standardize`` the network is trained on per-feature standardized
    inputs and the affine map is folded back into the first layer afterwards,
    so the returned model still consumes raw features. The input model is
    never modified.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if inputs.shape[0] == 0:
        raise ValueError("cannot train on an empty dataset")
    if inputs.shape[1] != model.input_dim:
        raise ValueError(f"dataset d={inputs.shape[1]} but model expects d={model.input_dim}")
    if cfg.epochs == 0:
        trained = model.copy()
        return TrainResult(trained, accuracy(trained, inputs, labels))

    if cfg.standardize:
        shift = inputs.mean(axis=0)
        scale = inputs.std(axis=0)
        scale[scale == 0] = 1.0
    else:
        shift, scale = np.zeros(model.input_dim), np.ones(model.input_dim)
    xs = (inputs - shift) / scale

    # train in standardized coordinates: W x + b == (W * scale)((x - shift)/scale) + (b + W shift)
    net = model.copy()
    net.biases[0] = net.biases[0] + net.weights[0] @ shift
    net.weights[0] = net.weights[0] * scale

    n = xs.shape[0]
    losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, gw, gb = net.parameter_gradients(xs[idx], labels[idx], cfg.l2)
            for k in range(len(net.weights)):
                net.weights[k] -= cfg.learning_rate * gw[k]
                net.biases[k] -= cfg.learning_rate * gb[k]
            epoch_loss += loss * len(idx)
        losses.append(epoch_loss / n)

    net.weights[0] = net.weights[0] / scale
    net.biases[0] = net.biases[0] - net.weights[0] @ shift
    net.epochs_trained = model.epochs_trained + cfg.epochs
    if not all(np.all(np.isfinite(w)) for w in net.weights):
        raise FloatingPointError("training diverged (non-finite weights); lower the learning rate")
    return TrainResult(net, accuracy(net, inputs, labels), losses)


def model_to_bytes(model: MlpClassifier) -> bytes:
    act = model.activation.encode("ascii")
    mid = model.model_id.encode("utf-8")
    parts = [
        MODEL_MAGIC,
        struct.pack("<H", MODEL_FORMAT_VERSION),
        struct.pack("<B", len(act)),
        act,
        struct.pack("<H", len(mid)),
        mid,
        struct.pack("<I", model.epochs_trained),
        struct.pack("<I", len(model.weights)),
    ]
    for w in model.weights:
        parts.append(struct.pack("<II", w.shape[1], w.shape[0]))
    for w, b in zip(model.weights, model.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def model_from_bytes(data: bytes) -> MlpClassifier:
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise ModelFormatError(what, f"file truncated (need {n} bytes at offset {pos}, have {len(data) - pos})")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(len(MODEL_MAGIC), "magic") != MODEL_MAGIC:
        raise ModelFormatError("magic", "not a model file")
    (version,) = struct.unpack("<H", take(2, "format_version"))
    if version != MODEL_FORMAT_VERSION:
        raise ModelFormatError("format_version", f"unsupported version {version}")
    (alen,) = struct.unpack("<B", take(1, "activation"))
    try:
        activation = take(alen, "activation").decode("ascii")
    except UnicodeDecodeError as exc:
        raise ModelFormatError("activation", "tag is not ASCII") from exc
    if activation not in ACTIVATIONS:
        raise ModelFormatError("activation", f"unknown tag {activation!r}")
    (mlen,) = struct.unpack("<H", take(2, "model_id"))
    try:
        model_id = take(mlen, "model_id").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ModelFormatError("model_id", "not valid UTF-8") from exc
    (epochs,) = struct.unpack("<I", take(4, "epochs_trained"))
    (n_layers,) = struct.unpack("<I", take(4, "layer_count"))
    if n_layers == 0 or n_layers > 64:
        raise ModelFormatError("layer_count", f"implausible layer count {n_layers}")
    shapes = [struct.unpack("<II", take(8, f"shape_table[{k}]")) for k in range(n_layers)]
    for k in range(1, n_layers):
        if shapes[k][0] != shapes[k - 1][1]:
            raise ModelFormatError(f"shape_table[{k}]", "fan_in does not chain from previous fan_out")
    weights, biases = [], []
    for k, (fan_in, fan_out) in enumerate(shapes):
        w = np.frombuffer(take(8 * fan_in * fan_out, f"weights[{k}]"), dtype="<f8").reshape(fan_out, fan_in)
        b = np.frombuffer(take(8 * fan_out, f"biases[{k}]"), dtype="<f8")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ModelFormatError(f"weights[{k}]", "non-finite parameter")
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    if pos != len(data):
        raise ModelFormatError("trailer", f"{len(data) - pos} unexpected trailing bytes")
    return MlpClassifier(weights, biases, activation=activation, model_id=model_id, epochs_trained=epochs)


def save_model(model: MlpClassifier, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> MlpClassifier:
    return model_from_bytes(Path(path).read_bytes())
