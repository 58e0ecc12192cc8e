"""Attack losses: cross-entropy, fast-feature-fool terms, their combined
non-targeted/targeted forms, and the FGSM baseline.

The combined objectives are minimized by the generator trainer:
nontargeted = alpha * (-ce) + (1 - alpha) * fff_1, targeted =
alpha * ce_target + (1 - alpha) * fff_1. The feature-fool term is
-log of the L2 norm of the first layer's channel-mean feature map, so
minimizing it drives adversarial energy into that layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractViolation, Tensor

PROB_FLOOR = 1e-7  # bounds -log before the CE optimum; keeps -CE finite


class DegenerateActivation(ArithmeticError):
    """A feature map collapsed to exactly zero norm (log of zero)."""


def one_hot(labels, num_classes):
    """1-based integer labels -> one-hot rows."""
    labels = np.asarray(labels)
    if labels.min() < 1 or labels.max() > num_classes:
        raise ContractViolation(
            f"one_hot: labels must lie in 1..{num_classes}")
    out = np.zeros((len(labels), num_classes), dtype=T._default_dtype())
    out[np.arange(len(labels)), labels - 1] = 1.0
    return Tensor(out)


def _as_tensor(v):
    return v if isinstance(v, Tensor) else Tensor(np.asarray(v))


def cross_entropy(probs, onehot):
    """Mean over the batch of -sum(onehot * log(probs)), probabilities
    floored at PROB_FLOOR before the log."""
    probs = _as_tensor(probs)
    onehot = _as_tensor(onehot)
    if probs.data.shape != onehot.data.shape:
        raise ContractViolation(
            f"cross_entropy: probs {probs.data.shape} vs onehot {onehot.data.shape}")
    rows = probs.data.sum(axis=-1)
    if np.abs(rows - 1.0).max() > 1e-5:
        raise ContractViolation("cross_entropy: probability rows must sum to 1")
    oh = onehot.data
    if not np.all((oh == 0) | (oh == 1)) or not np.all(oh.sum(axis=-1) == 1):
        raise ContractViolation("cross_entropy: rows must be exactly one-hot")
    floored = T.clamp(probs, PROB_FLOOR, 1.0)
    per_sample = T.neg(T.sum_reduce(T.mul(onehot, T.log(floored)), axis=-1))
    return T.mean(per_sample)


def fff_layer_loss(mean_map):
    """-log of the Euclidean norm of the flattened mean feature map;
    batches average the per-sample losses."""
    mean_map = _as_tensor(mean_map)
    if mean_map.data.ndim <= 2:
        norms = T.l2_norm(mean_map)
        if float(norms.data) == 0.0:
            raise DegenerateActivation("fff_layer_loss: all-zero feature map")
        return T.neg(T.log(norms))
    norms = T.l2_norm(mean_map, per_sample=True)
    if np.any(norms.data == 0.0):
        raise DegenerateActivation("fff_layer_loss: all-zero feature map in batch")
    return T.mean(T.neg(T.log(norms)))


def fff_from_activations(acts):
    """Feature-fool loss straight from a rank-4 activation tensor: the
    channel mean is taken first."""
    return fff_layer_loss(T.mean(acts, axis=1))


def fff_total_loss(maps):
    """Sum of per-layer feature-fool losses (the all-layer variant)."""
    if not maps:
        raise ContractViolation("fff_total_loss: empty layer list")
    total = fff_layer_loss(maps[0])
    for m in maps[1:]:
        total = T.add(total, fff_layer_loss(m))
    return total


@dataclass
class LossBreakdown:
    ce: float
    fff_1: float
    combined: float
    alpha: float
    mode: str                    # "targeted" | "nontargeted"
    target_class: int | None = None
    dtype: str = "float32"       # precision the parts were stored in
    tensor: Tensor | None = None  # graph-connected combined loss

    def recompute(self):
        """Re-evaluate the combination identity in the stored precision;
        bit-equal to ``combined`` by construction."""
        dt = np.dtype(self.dtype).type
        ce_term = dt(-dt(self.ce)) if self.mode == "nontargeted" else dt(self.ce)
        return float(dt(ce_term * dt(self.alpha)) +
                     dt(dt(self.fff_1) * dt(1.0 - self.alpha)))


def _combine(ce, fff_1, alpha, sign_ce):
    ce_term = T.neg(ce) if sign_ce < 0 else ce
    return T.add(T.scale(ce_term, alpha), T.scale(fff_1, 1.0 - alpha))


def nontargeted_loss(ce, fff_1, alpha):
    """alpha * (-ce) + (1 - alpha) * fff_1, to be minimized."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractViolation(f"alpha must lie in [0,1], got {alpha}")
    ce, fff_1 = _as_tensor(ce), _as_tensor(fff_1)
    combined = _combine(ce, fff_1, alpha, -1)
    return LossBreakdown(ce=float(ce.data), fff_1=float(fff_1.data),
                         combined=float(combined.data), alpha=alpha,
                         mode="nontargeted", dtype=str(combined.data.dtype),
                         tensor=combined)


def targeted_loss(ce_target, fff_1, alpha, target_class=None, num_classes=None):
    """alpha * ce_target + (1 - alpha) * fff_1, to be minimized."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractViolation(f"alpha must lie in [0,1], got {alpha}")
    if target_class is not None and num_classes is not None:
        if not 1 <= target_class <= num_classes:
            raise ContractViolation(
                f"target class {target_class} out of range 1..{num_classes}")
    ce, fff_1 = _as_tensor(ce_target), _as_tensor(fff_1)
    combined = _combine(ce, fff_1, alpha, +1)
    return LossBreakdown(ce=float(ce.data), fff_1=float(fff_1.data),
                         combined=float(combined.data), alpha=alpha,
                         mode="targeted", target_class=target_class,
                         dtype=str(combined.data.dtype), tensor=combined)


def fgsm(model, images, labels, beta):
    """One-step sign-gradient attack on a frozen model; output in [0,1]."""
    if not model.frozen:
        raise ContractViolation("fgsm: model must be frozen")
    x = Tensor(np.asarray(images), requires_grad=True)
    logits, _ = model.forward(x)
    probs = T.softmax(logits)
    loss = cross_entropy(probs, one_hot(labels, model.num_classes))
    T.backward(loss)
    step = beta * np.sign(x.grad.data)
    return np.clip(np.asarray(images) + step, 0.0, 1.0).astype(images.dtype)
