"""SGD with momentum and the three training schemes: plain, class-balanced sampler, reweighted."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import DataError, Dataset
from .nn import Batch, MlpModel, evaluate, loss_and_grads
from .reweight import MetaStepConfig, check_weights, example_weights, meta_step, weighted_gradient
from .tape import NonFiniteError, ShapeError

# n * w bins, relative to the uniform weight 1/n
WEIGHT_HIST_EDGES = (0.0, 1e-12, 0.5, 1.0, 2.0, 4.0, math.inf)


@dataclass
class SgdMomentum:
    lr: float = 0.001
    momentum: float = 0.9
    velocity: list[np.ndarray] | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def sgd_step(model: MlpModel, grads, state: SgdMomentum) -> MlpModel:
    """v <- momentum * v + g;  theta <- theta - lr * v."""
    if len(grads) != len(model.weights):
        raise ShapeError("sgd_step", [(len(grads),), (len(model.weights),)], "layer count differs")
    for g, w in zip(grads, model.weights):
        if g.shape != w.shape:
            raise ShapeError("sgd_step", [g.shape, w.shape])
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("sgd_step")
    if state.velocity is None:
        state.velocity = [np.zeros_like(w) for w in model.weights]
    new = []
    for i, (w, g) in enumerate(zip(model.weights, grads)):
        v = state.momentum * state.velocity[i] + g
        state.velocity[i] = v
        new.append(w - state.lr * v)
    return model.with_weights(new)


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    lr: float = 0.001
    momentum: float = 0.9
    seed: int = 0
    # reweighting only
    meta: bool = True
    alpha: float | None = None  # lookahead step; defaults to lr
    eta: float = 1.0
    track_val_grad: bool = False


@dataclass
class History:
    records: list[dict] = field(default_factory=list)

    @property
    def epochs(self) -> list[dict]:
        return [r for r in self.records if isinstance(r, dict) and r.get("kind") == "epoch"]

    @property
    def steps(self) -> list[dict]:
        return [r for r in self.records if isinstance(r, dict) and r.get("kind") == "step"]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> History:
        return cls([json.loads(line) for line in text.splitlines() if line.strip()])


def sampler_weights(labels, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class and per-example draw probabilities, inverse to class frequency."""
    counts = np.bincount(np.asarray(labels), minlength=k)
    if np.any(counts == 0):
        raise DataError(f"classes {np.flatnonzero(counts == 0).tolist()} have no examples")
    per_example = 1.0 / counts[labels]
    per_example /= per_example.sum()
    per_class = np.bincount(labels, weights=per_example, minlength=k)
    return per_class, per_example


def _shuffled(n, batch_size):
    def batches(rng):
        perm = rng.permutation(n)
        for i in range(0, n, batch_size):
            yield perm[i:i + batch_size]
    return batches


def _sampled(p, batch_size):
    n = len(p)

    def batches(rng):
        for _ in range(math.ceil(n / batch_size)):
            yield rng.choice(n, size=batch_size, replace=True, p=p)
    return batches


def _val_grad_sq(model, val_batch):
    _, grads = loss_and_grads(model, val_batch)
    return float(sum(np.vdot(g, g) for g in grads))


def _fit(model, dataset, val_set, config, batches, step):
    if len(dataset) == 0:
        raise DataError("training set is empty")
    state = SgdMomentum(config.lr, config.momentum)
    history = History()
    rng = np.random.default_rng(config.seed)
    train_batch = dataset.batch()
    val_batch = val_set.batch() if val_set is not None and len(val_set) else None
    t = 0
    for epoch in range(config.epochs):
        step_losses = []
        for idx in batches(rng):
            batch = dataset.batch(idx)
            model, loss, extra = step(model, batch, state)
            step_losses.append(loss)
            if extra is not None:
                history.records.append({"kind": "step", "step": t, "epoch": epoch, "loss": loss, **extra})
            t += 1
        rec = {"kind": "epoch", "epoch": epoch, "steps": t, "batch_loss": float(np.mean(step_losses))}
        rec["train_loss"], rec["train_acc"] = evaluate(model, train_batch)
        if val_batch is not None:
            rec["val_loss"], rec["val_acc"] = evaluate(model, val_batch)
            rec["val_grad_sq"] = _val_grad_sq(model, val_batch)
        history.records.append(rec)
    return model, history


def _plain_step(model, batch, state):
    loss, grads = loss_and_grads(model, batch)
    return sgd_step(model, grads, state), loss, None


def train_baseline(model: MlpModel, dataset: Dataset, config: TrainConfig, val_set: Dataset | None = None):
    """Mini-batch SGD with momentum on the mean loss; shuffled batches without replacement."""
    return _fit(model, dataset, val_set, config, _shuffled(len(dataset), config.batch_size), _plain_step)


def train_weighted_sampler(model: MlpModel, dataset: Dataset, config: TrainConfig, val_set: Dataset | None = None):
    """Like :func:`train_baseline`, but batches are drawn with replacement so each
    class is equally likely to be drawn."""
    _, p = sampler_weights(dataset.labels, dataset.class_count)
    return _fit(model, dataset, val_set, config, _sampled(p, config.batch_size), _plain_step)


def weight_stats(w, x=None) -> dict:
    n = len(w)
    hist, _ = np.histogram(np.asarray(w) * n, bins=WEIGHT_HIST_EDGES)
    out = {
        "weight_sum": float(np.sum(w)),
        "zero_frac": float(np.mean(np.asarray(w) == 0)),
        "weight_hist": hist.tolist(),
        "weight_dev": float(np.mean(np.abs(np.asarray(w) - 1.0 / n))),
    }
    if x is not None:
        out["meta_grad_norm"] = float(np.linalg.norm(x))
    return out


def train_reweighted(model: MlpModel, dataset: Dataset, val_set: Dataset, config: TrainConfig):
    """SGD with momentum where every batch is reweighted from the meta-validation set.

    With ``config.meta`` off the weights are uniform, which reproduces
    :func:`train_baseline`.
    """
    if val_set is None or len(val_set) == 0:
        raise DataError("reweighting needs a non-empty meta-validation set")
    cfg = MetaStepConfig(alpha=config.alpha if config.alpha is not None else config.lr, eta=config.eta)
    val_batch = val_set.batch()

    def step(model, batch: Batch, state):
        if not config.meta:
            w = np.full(len(batch), 1.0 / len(batch))
            grads = weighted_gradient(model, batch, w)
            loss = float(evaluate(model, batch)[0])
            return sgd_step(model, grads, state), loss, weight_stats(w)
        meta = meta_step(model, batch, val_batch, cfg, val_grad=config.track_val_grad)
        w = example_weights(meta, cfg)
        check_weights(w)
        grads = weighted_gradient(model, batch, w, meta.lookahead)
        extra = weight_stats(w, meta.x)
        extra["val_loss"] = meta.val_loss
        if meta.val_grad is not None:
            extra["val_grad_sq"] = float(sum(np.vdot(g, g) for g in meta.val_grad))
        loss = float(meta.lookahead.losses.value.mean())
        return sgd_step(model, grads, state), loss, extra

    return _fit(model, dataset, val_set, config, _shuffled(len(dataset), config.batch_size), step)
