"""Loss terms for confidence-aware cross pseudo supervision.

Naming convention, for one training image X and its amplitude-mixed variant
Z: network k produces p_ok on X and p_fk on Z. Each network's per-pixel
ensemble p_ek = (p_ok + p_fk)/2 yields a detached one-hot pseudo label yk,
and its prediction variance vk is the per-pixel KL divergence of p_fk from
p_ok. Pseudo labels cross over: y1 (with weight e^{-v1}) supervises network
2's ensemble, and vice versa. Labeled images additionally get a Dice loss
against ground truth on the un-augmented predictions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

DICE_EPS = 1e-5


class LossError(Exception):
    pass


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise T.ShapeMismatch(op, a.shape, b.shape)


def dice_loss(probs: Tensor, target: Tensor) -> Tensor:
    """1 - mean soft Dice over classes; sums run over the whole batch.

    target is one-hot [N,C,H,W] and is treated as a constant.
    """
    _check_same_shape("dice_loss", probs, target)
    if probs.ndim != 4:
        raise T.ShapeMismatch("dice_loss", probs.shape)
    inter = (probs * target).sum(axes=(0, 2, 3))        # [C]
    denom = probs.sum(axes=(0, 2, 3)) + target.sum(axes=(0, 2, 3))
    dice_per_class = (inter * 2.0 + DICE_EPS) / (denom + DICE_EPS)
    return 1.0 - dice_per_class.mean()


def ensemble(p_o: Tensor, p_f: Tensor) -> Tensor:
    _check_same_shape("ensemble", p_o, p_f)
    return (p_o + p_f) * 0.5


def kl_variance(p_f: Tensor, p_o: Tensor) -> Tensor:
    """Per-pixel KL(p_f || p_o) as a [N,1,H,W] map; p_f is the reference.

    Gradient flows through both arguments; logs clamp at 1e-12.
    """
    _check_same_shape("kl_variance", p_f, p_o)
    per_class = p_f * (p_f.log() - p_o.log())
    return per_class.sum(axes=(1,), keepdims=True)


@dataclass
class PredictionSet:
    """Everything the cross-supervision loss needs, for both networks."""

    p_o1: Tensor
    p_f1: Tensor
    p_o2: Tensor
    p_f2: Tensor
    p_e1: Tensor
    p_e2: Tensor
    v1: Tensor
    v2: Tensor
    y1: Tensor
    y2: Tensor


def build_prediction_set(p_o1: Tensor, p_f1: Tensor, p_o2: Tensor, p_f2: Tensor) -> PredictionSet:
    p_e1 = ensemble(p_o1, p_f1)
    p_e2 = ensemble(p_o2, p_f2)
    return PredictionSet(
        p_o1=p_o1,
        p_f1=p_f1,
        p_o2=p_o2,
        p_f2=p_f2,
        p_e1=p_e1,
        p_e2=p_e2,
        v1=kl_variance(p_f1, p_o1),
        v2=kl_variance(p_f2, p_o2),
        y1=T.one_hot_argmax_channels(p_e1),
        y2=T.one_hot_argmax_channels(p_e2),
    )


def _cross_entropy_map(probs: Tensor, onehot: Tensor) -> Tensor:
    """Per-pixel -sum_c y_c log p_c as [N,1,H,W]; y is constant."""
    _check_same_shape("cross_entropy", probs, onehot)
    return -((onehot * probs.log()).sum(axes=(1,), keepdims=True))


def cacps_loss(
    preds: PredictionSet,
    confidence_weighting: bool = True,
    detach_weight: bool = False,
) -> tuple[Tensor, Tensor]:
    """The two cross-supervision terms (l_a, l_b), each a pixel mean.

    l_a supervises network 2's ensemble with network 1's pseudo label,
    down-weighted by e^{-v1} and penalized by an additive v1 (and l_b the
    mirror image). With confidence_weighting off this is plain cross pseudo
    supervision: unit weight, no variance penalty. detach_weight stops
    gradient through the exponential weight only; the additive term always
    keeps its gradient.
    """
    for name in ("p_e1", "p_e2", "v1", "v2", "y1", "y2"):
        if getattr(preds, name, None) is None:
            raise LossError(f"prediction set is missing field {name}")

    def one_direction(p_e_other: Tensor, y_own: Tensor, v_own: Tensor) -> Tensor:
        ce = _cross_entropy_map(p_e_other, y_own)
        if not confidence_weighting:
            return ce.mean()
        v_w = v_own.detach() if detach_weight else v_own
        weight = T.exp(-v_w)
        _check_same_shape("cacps_loss", ce, v_own)
        return (weight * ce + v_own).mean()

    l_a = one_direction(preds.p_e2, preds.y1, preds.v1)
    l_b = one_direction(preds.p_e1, preds.y2, preds.v2)
    return l_a, l_b


def supervised_loss(p_o1: Tensor, p_o2: Tensor, target: Tensor) -> tuple[Tensor, bool]:
    """Dice of both networks' clean predictions vs ground truth.

    Returns (loss, present). With an empty labeled sub-batch (batch axis 0)
    the loss is a constant zero and present is False.
    """
    if p_o1.shape[0] == 0:
        return Tensor(0.0), False
    return dice_loss(p_o1, target) + dice_loss(p_o2, target), True


def total_loss(l_s: Tensor, l_cacps: Tensor, beta: float) -> Tensor:
    if beta < 0:
        raise LossError(f"beta must be nonnegative, got {beta}")
    return l_s + l_cacps * beta


@dataclass(frozen=True)
class LossBreakdown:
    """Float snapshot of one step's loss terms (total = l_s + beta*l_cacps)."""

    l_s: float
    l_a: float
    l_b: float
    l_cacps: float
    total: float
    beta: float
    mean_v: float = 0.0

    def __post_init__(self):
        if abs(self.total - (self.l_s + self.beta * self.l_cacps)) > 1e-12:
            raise LossError("loss breakdown is inconsistent with its own total")


def one_hot_mask(mask: np.ndarray, num_classes: int) -> np.ndarray:
    """Class-index [N,H,W] -> one-hot float [N,C,H,W]."""
    m = np.asarray(mask)
    if m.ndim != 3:
        raise LossError(f"expected [N,H,W] class indices, got shape {m.shape}")
    if m.min() < 0 or m.max() >= num_classes:
        raise LossError(f"mask holds class ids outside [0, {num_classes})")
    out = np.zeros((m.shape[0], num_classes, m.shape[1], m.shape[2]))
    np.put_along_axis(out, m[:, None].astype(np.intp), 1.0, axis=1)
    return out
