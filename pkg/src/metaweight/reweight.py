"""Online example reweighting by a one-step unrolled meta-gradient.

Each training example ``n`` gets a loss perturbation ``eps_n`` (zero at the
evaluation point).  One SGD step on the perturbed loss gives parameters
``theta'(eps)``; the derivative of the validation loss at ``theta'(eps)`` with
respect to ``eps`` says which examples pull the model toward the validation
set.  Those derivatives are clipped at zero and L1-normalized into weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as T
from .nn import Batch, MlpModel, capture_layer_gradients, mlp_forward, per_example_loss
from .tape import Node, NonFiniteError, Tape


@dataclass(frozen=True)
class MetaStepConfig:
    alpha: float = 0.001
    eta: float = 1.0
    delta_threshold: float = 0.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if not self.delta_threshold >= 0:
            raise ValueError("delta_threshold must be non-negative")


@dataclass
class Lookahead:
    """Tape state after the differentiable lookahead step."""

    tape: Tape
    params: list[Node]
    eps: Node
    losses: Node
    next_params: list[Node]


@dataclass
class MetaResult:
    x: np.ndarray  # -eta * dG/deps
    descent: np.ndarray  # -dG/deps, before eta is applied
    val_loss: float
    lookahead: Lookahead
    val_grad: list[np.ndarray] | None = None


def unrolled_step(model: MlpModel, batch: Batch, eps, alpha: float) -> Lookahead:
    """theta - alpha/|B| * sum_n grad(eps_n J_n), kept differentiable in eps."""
    eps = np.asarray(eps, dtype=np.float64)
    n = len(batch)
    if eps.shape != (n,):
        raise ValueError(f"eps has shape {eps.shape}, batch has {n} examples")
    tape = Tape()
    params = model.bind(tape)
    eps_node = tape.leaf(eps)
    logp, _ = mlp_forward(model, batch, tape=tape, params=params)
    losses = per_example_loss(logp, batch.labels)
    objective = T.scale(T.total(T.mul(eps_node, losses)), 1.0 / n)
    grads = tape.backward(objective, params, build_graph=True)
    for g in grads:
        if not np.all(np.isfinite(g.value)):
            raise NonFiniteError("unrolled_step")
    next_params = [T.sub(p, T.scale(g, alpha)) for p, g in zip(params, grads)]
    return Lookahead(tape, params, eps_node, losses, next_params)


def meta_step(model: MlpModel, batch: Batch, val_batch: Batch, cfg: MetaStepConfig,
              val_grad: bool = False) -> MetaResult:
    """Meta-gradient at eps = 0, keeping the tape for reuse by the outer update.

    With ``val_grad`` the gradient of the validation loss at the current
    parameters is returned too; at eps = 0 the lookahead parameters equal the
    current ones, so it falls out of the same backward pass.
    """
    if len(val_batch) < 1:
        raise ValueError("validation batch is empty")
    la = unrolled_step(model, batch, np.zeros(len(batch)), cfg.alpha)
    vlogp, _ = mlp_forward(model, val_batch, tape=la.tape, params=la.next_params)
    val_loss = T.mean(per_example_loss(vlogp, val_batch.labels))
    wrt = [la.eps] + (la.next_params if val_grad else [])
    grads = la.tape.backward(val_loss, wrt)
    descent = -grads[0]
    return MetaResult(
        x=cfg.eta * descent,
        descent=descent,
        val_loss=float(val_loss.value),
        lookahead=la,
        val_grad=grads[1:] if val_grad else None,
    )


def meta_gradient_autodiff(model: MlpModel, batch: Batch, val_batch: Batch, cfg: MetaStepConfig) -> np.ndarray:
    """x_n = -eta * d/d eps_n of the mean validation loss after the lookahead step."""
    return meta_step(model, batch, val_batch, cfg).x


def meta_gradient_layerwise(model: MlpModel, batch: Batch, val_batch: Batch) -> np.ndarray:
    """Closed form of the same quantity from per-layer dot products.

    raw_i = 1/M sum_j sum_l (z~v_{j,l-1} . z~_{i,l-1}) (gv_{j,l} . g_{i,l}),
    which equals the autodiff meta-gradient divided by eta * alpha / |B|.
    """
    if not isinstance(model, MlpModel):
        raise TypeError("layerwise meta-gradient is defined for MlpModel only")
    _, rec = mlp_forward(model, batch, record=True)
    capture_layer_gradients(model, batch, rec)
    _, vrec = mlp_forward(model, val_batch, record=True)
    capture_layer_gradients(model, val_batch, vrec)
    return layerwise_from_records(rec, vrec)


def layerwise_from_records(rec, vrec) -> np.ndarray:
    if rec.grads is None or vrec.grads is None:
        raise ValueError("activation records lack layer gradients")
    m = vrec.inputs[0].shape[0]
    raw = np.zeros(rec.inputs[0].shape[0])
    for zt, g, zv, gv in zip(rec.inputs, rec.grads, vrec.inputs, vrec.grads):
        raw += ((zt @ zv.T) * (g @ gv.T)).sum(axis=1)
    return raw / m


def rectify(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def normalize(w_tilde, cfg: MetaStepConfig | None = None) -> np.ndarray:
    """w / (|w|_1 + delta(|w|_1)); the guard returns all zeros instead of 0/0."""
    w = np.asarray(w_tilde, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("normalize: negative entries; rectify first")
    threshold = 0.0 if cfg is None else cfg.delta_threshold
    norm = float(w.sum())
    if norm <= threshold:
        # guard fires: remaining mass counts as zero, denominator is 0 + 1
        return np.zeros_like(w)
    return w / norm


def check_weights(w, tol: float = 1e-9) -> None:
    w = np.asarray(w)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    s = w.sum()
    if not (abs(s - 1.0) <= tol or np.all(w == 0)):
        raise ValueError(f"weights sum to {s}, expected 1 or all-zero")


def example_weights(meta: MetaResult, cfg: MetaStepConfig | None = None) -> np.ndarray:
    """Weights for the outer update.

    rectify and normalize together are invariant to positive rescaling, so
    eta is factored out before rounding and the weights are bit-identical for
    every eta > 0.
    """
    return normalize(rectify(meta.descent), cfg)


def weighted_gradient(model: MlpModel, batch: Batch, w, lookahead: Lookahead | None = None):
    """Gradient of sum_n w_n J_n at the current parameters.

    A lookahead from the same parameters and batch already holds the forward
    pass; reusing it saves one forward.
    """
    w = np.asarray(w, dtype=np.float64)
    if lookahead is None:
        tape = Tape()
        params = model.bind(tape)
        logp, _ = mlp_forward(model, batch, tape=tape, params=params)
        losses = per_example_loss(logp, batch.labels)
    else:
        tape, params, losses = lookahead.tape, lookahead.params, lookahead.losses
    loss = T.total(T.mul(losses, w))
    return tape.backward(loss, params)


def reweighted_step(model: MlpModel, batch: Batch, w, state, lookahead: Lookahead | None = None) -> MlpModel:
    """One SGD-with-momentum step on the weighted training loss."""
    from .optim import sgd_step

    check_weights(w)
    grads = weighted_gradient(model, batch, w, lookahead)
    return sgd_step(model, grads, state)
