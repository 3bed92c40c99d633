"""Multi-layer perceptron on the tape, with per-layer activation records.

Layer ``l`` maps the augmented input ``[z~_{l-1}, 1]`` to ``z_l`` through a
single matrix whose last row is the bias, so the per-example parameter
gradient is exactly the outer product ``[z~_{l-1}, 1] g_l^T``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tape as T
from .tape import Node, Tape

ACTIVATIONS = ("sigmoid", "relu")


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray
    ids: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ValueError(f"batch: features {self.features.shape} vs labels {self.labels.shape}")
        if self.features.shape[0] < 1:
            raise ValueError("batch: empty")
        if self.ids is None:
            self.ids = np.arange(self.features.shape[0])
        self.ids = np.asarray(self.ids, dtype=np.int64)

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class MlpModel:
    """Weights ``[(d_in + 1) x d_out]`` per layer; hidden layers use ``activation``."""

    weights: list[np.ndarray]
    activation: str = "sigmoid"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not self.weights:
            raise ValueError("model needs at least one layer")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        for prev, nxt in zip(self.weights, self.weights[1:]):
            if nxt.shape[0] != prev.shape[1] + 1:
                raise ValueError(f"layer shapes do not chain: {prev.shape} -> {nxt.shape}")
        if self.num_classes < 2:
            raise ValueError("need at least 2 output classes")

    @classmethod
    def init(cls, sizes, activation="sigmoid", seed=0) -> MlpModel:
        """Glorot-uniform weights, zero biases; ``sizes`` = [d_in, hidden..., K]."""
        rng = np.random.default_rng(seed)
        weights = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = np.zeros((fan_in + 1, fan_out))
            w[:-1] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            weights.append(w)
        return cls(weights, activation)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0] - 1

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim] + [w.shape[1] for w in self.weights]

    def with_weights(self, weights) -> MlpModel:
        return MlpModel([np.array(w, dtype=np.float64) for w in weights], self.activation)

    def copy(self) -> MlpModel:
        return self.with_weights(self.weights)

    def bind(self, tape: Tape) -> list[Node]:
        return [tape.leaf(w) for w in self.weights]

    def predict(self, features) -> np.ndarray:
        """Argmax class; ties go to the lowest id."""
        return np.argmax(_logits_np(self, np.asarray(features, dtype=np.float64)), axis=1)

    def to_dict(self) -> dict:
        return {
            "activation": self.activation,
            "layers": [{"shape": list(w.shape), "values": w.ravel().tolist()} for w in self.weights],
        }

    @classmethod
    def from_dict(cls, d: dict) -> MlpModel:
        weights = [np.asarray(layer["values"], dtype=np.float64).reshape(layer["shape"]) for layer in d["layers"]]
        return cls(weights, d["activation"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> MlpModel:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _act_np(name, z):
    return T.sigmoid(z) if name == "sigmoid" else np.maximum(z, 0.0)


def _logits_np(model, h):
    last = len(model.weights) - 1
    for i, w in enumerate(model.weights):
        z = h @ w[:-1] + w[-1]
        h = _act_np(model.activation, z) if i < last else z
    return h


@dataclass
class ActivationRecord:
    """Per-layer quantities for one forward pass.

    ``inputs[l]`` is the augmented layer input ``[z~_{l-1}, 1]`` (rows are
    examples), ``pre[l]`` the pre-activation node ``z_l`` and ``grads[l]`` the
    per-example ``dJ_i/dz_l`` once :func:`capture_layer_gradients` has run.
    """

    tape: Tape
    logp: Node
    inputs: list[np.ndarray]
    pre: list[Node]
    post: list[np.ndarray]
    grads: list[np.ndarray] | None = None
    params: list[Node] = field(default_factory=list)


def mlp_forward(model: MlpModel, batch: Batch, record: bool = False, tape: Tape | None = None,
                params: list[Node] | None = None):
    """Log-softmax outputs ``[n, K]`` as a node, plus an optional activation record.

    ``params`` lets the caller run the network on parameter nodes that are
    themselves functions of other nodes (the unrolled lookahead).
    """
    if batch.features.shape[1] != model.input_dim:
        raise T.ShapeError("mlp_forward", [batch.features.shape, (model.input_dim,)],
                           "feature width differs from model input")
    if tape is None:
        tape = params[0].tape if params else Tape()
    if params is None:
        params = model.bind(tape)
    h = tape.constant(batch.features)
    inputs, pre, post = [], [], []
    last = len(params) - 1
    for i, w in enumerate(params):
        h_aug = T.pad_col(h, 1.0)
        z = T.matmul(h_aug, w)
        if record:
            inputs.append(h_aug.value)
            pre.append(z)
        if i < last:
            h = T.sigmoid(z) if model.activation == "sigmoid" else T.relu(z)
            if record:
                post.append(h.value)
    logp = T.log_softmax(z)
    rec = ActivationRecord(tape, logp, inputs, pre, post, params=list(params)) if record else None
    return logp, rec


def per_example_loss(logp: Node, labels) -> Node:
    """Cross-entropy per example, unreduced."""
    labels = np.asarray(labels, dtype=np.int64)
    k = logp.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    return T.scale(T.index_select(logp, labels), -1.0)


def capture_layer_gradients(model: MlpModel, batch: Batch, record: ActivationRecord | None) -> ActivationRecord:
    if record is None or not record.pre:
        raise ValueError("capture_layer_gradients: forward pass was not recorded")
    losses = per_example_loss(record.logp, batch.labels)
    # n * mean = sum: row i of dL/dz_l is then dJ_i/dz_l
    loss = T.scale(T.mean(losses), float(len(batch)))
    record.grads = record.tape.backward(loss, record.pre)
    return record


def loss_and_grads(model: MlpModel, batch: Batch, weights=None):
    """Loss and parameter gradients; mean loss, or ``sum_n w_n J_n`` if weights are given."""
    tape = Tape()
    params = model.bind(tape)
    logp, _ = mlp_forward(model, batch, tape=tape, params=params)
    losses = per_example_loss(logp, batch.labels)
    if weights is None:
        loss = T.mean(losses)
    else:
        loss = T.total(T.mul(losses, np.asarray(weights, dtype=np.float64)))
    grads = tape.backward(loss, params)
    return float(loss.value), grads


def evaluate(model: MlpModel, batch: Batch) -> tuple[float, float]:
    """Mean cross-entropy and accuracy, computed without a tape."""
    h = _logits_np(model, batch.features)
    logp = T._log_softmax(h)
    loss = -float(logp[np.arange(len(batch)), batch.labels].mean())
    acc = float((np.argmax(h, axis=1) == batch.labels).mean())
    return loss, acc
