"""Dual-network semi-supervised training loop.

One step: every batch image X gets one amplitude-mixed variant Z (partner
drawn from the training pool), both networks run on X and Z, the labeled
sub-batch contributes a Dice loss on the clean predictions, and the full
(or unlabeled) sub-batch contributes the confidence-weighted cross pseudo
supervision terms. A single backward pass feeds one AdamW update covering
both parameter sets.

All randomness is drawn from generators derived from (seed, epoch), so any
epoch can be replayed in isolation; resume exploits this.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import AugmentFlags, Sample, SegBatch, TrainItem, iterate_batches
from .fourier import MixConfig, augment
from .losses import (
    LossBreakdown,
    build_prediction_set,
    cacps_loss,
    one_hot_mask,
    supervised_loss,
    total_loss,
)
from .metrics import AggregateReport, MetricRow, aggregate, dice_score, hausdorff
from .network import NetworkPair, forward
from .optim import AdamW
from .tensor import Tensor


class TrainerError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 3.0
    lam: float = 1.0
    alpha: float = 0.1
    mix_mode: str = "rectified"
    lr: float = 1e-4
    weight_decay: float = 0.1
    epochs: int = 20
    batch_size: int = 32
    labeled_fraction: float = 0.05
    seed_data: int = 0
    seed_net1: int = 1
    seed_net2: int = 2
    crop: int = 64
    cacps_on_labeled: bool = True
    detach_weight: bool = False
    confidence_weighting: bool = True
    aug_flip: bool = True
    aug_rotation: bool = True
    aug_scaling: bool = True
    aug_random_crop: bool = True

    def __post_init__(self):
        problems = []
        if self.lr <= 0:
            problems.append(f"lr must be positive, got {self.lr}")
        if not 0 < self.labeled_fraction <= 1:
            problems.append(f"labeled_fraction must lie in (0, 1], got {self.labeled_fraction}")
        if self.beta < 0:
            problems.append(f"beta must be nonnegative, got {self.beta}")
        if not 0 <= self.lam <= 1:
            problems.append(f"lambda must lie in [0, 1], got {self.lam}")
        if not 0 <= self.alpha <= 0.5:
            problems.append(f"alpha must lie in [0, 0.5], got {self.alpha}")
        if self.mix_mode not in ("strict", "rectified"):
            problems.append(f"mix_mode must be strict or rectified, got {self.mix_mode!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.crop < 1:
            problems.append(f"invalid epochs/batch_size/crop: {self.epochs}/{self.batch_size}/{self.crop}")
        if self.seed_net1 == self.seed_net2:
            problems.append("seed_net1 and seed_net2 must differ")
        if problems:
            raise TrainerError("; ".join(problems))

    @property
    def seeds(self) -> tuple[int, int, int]:
        return (self.seed_data, self.seed_net1, self.seed_net2)

    def augment_flags(self) -> AugmentFlags:
        return AugmentFlags(flip=self.aug_flip, rotation=self.aug_rotation,
                            scaling=self.aug_scaling, random_crop=self.aug_random_crop)

    def mix_config(self) -> MixConfig:
        return MixConfig(lam=self.lam, alpha=self.alpha, mode=self.mix_mode)


@dataclass(frozen=True)
class EpochRow:
    epoch: int
    l_s: float
    l_a: float
    l_b: float
    total: float
    mean_v: float
    n_labeled: int
    n_unlabeled: int


@dataclass
class TrainReport:
    rows: list[EpochRow] = field(default_factory=list)
    eval_reports: list[tuple[int, AggregateReport]] = field(default_factory=list)


def train_step(
    pair: NetworkPair,
    batch: SegBatch,
    cfg: TrainConfig,
    rng: np.random.Generator,
    opt: AdamW,
    partner_pool: np.ndarray | None = None,
) -> LossBreakdown:
    """One optimization step over one batch; returns the loss breakdown.

    partner_pool is an [M,1,h,w] array of candidate X' images; when absent
    the batch serves as its own pool. rng drives only the partner draw.
    """
    n = batch.images.shape[0]
    if n == 0:
        raise TrainerError("empty batch")
    labeled_idx = np.flatnonzero(batch.labeled)
    unlabeled_idx = np.flatnonzero(~batch.labeled)

    def supervised_on(p1: Tensor, p2: Tensor, idx: np.ndarray):
        if idx.size == 0:
            return Tensor(0.0), False
        target = Tensor(one_hot_mask(batch.masks[idx], pair.spec.num_classes))
        return supervised_loss(T.take_batch(p1, idx), T.take_batch(p2, idx), target)

    if cfg.beta == 0.0:
        # pure supervised training: unlabeled items cannot contribute
        if labeled_idx.size == 0:
            return LossBreakdown(0.0, 0.0, 0.0, 0.0, 0.0, cfg.beta, 0.0)
        x = Tensor(batch.images[labeled_idx])
        p1 = forward(pair.spec, pair.params_1, x)
        p2 = forward(pair.spec, pair.params_2, x)
        target = Tensor(one_hot_mask(batch.masks[labeled_idx], pair.spec.num_classes))
        l_s, _ = supervised_loss(p1, p2, target)
        opt.zero_grad()
        l_s.backward()
        opt.step()
        v = l_s.item()
        return LossBreakdown(v, 0.0, 0.0, 0.0, v, cfg.beta, 0.0)

    x = Tensor(batch.images)
    shortcut = cfg.lam == 0.0 and cfg.mix_mode == "rectified"
    if shortcut:
        # rectified lambda=0 makes Z == X exactly; reuse the X graph so the
        # variance is zero by construction and the Z forwards are free
        p_o1 = forward(pair.spec, pair.params_1, x)
        p_o2 = forward(pair.spec, pair.params_2, x)
        p_f1, p_f2 = p_o1, p_o2
    else:
        pool = batch.images if partner_pool is None else partner_pool
        partner_idx = rng.integers(0, pool.shape[0], size=n)
        mix = cfg.mix_config()
        z_np = np.stack([augment(batch.images[i, 0], pool[partner_idx[i], 0], mix) for i in range(n)])
        z = Tensor(z_np[:, None])
        # one joint pass per network covers X and Z with larger matmuls
        joint1 = forward(pair.spec, pair.params_1, T.concat_batch(x, z))
        joint2 = forward(pair.spec, pair.params_2, T.concat_batch(x, z))
        idx_x = np.arange(n)
        idx_z = np.arange(n, 2 * n)
        p_o1, p_f1 = T.take_batch(joint1, idx_x), T.take_batch(joint1, idx_z)
        p_o2, p_f2 = T.take_batch(joint2, idx_x), T.take_batch(joint2, idx_z)

    cacps_idx = np.arange(n) if cfg.cacps_on_labeled else unlabeled_idx
    if cacps_idx.size:
        if cacps_idx.size == n:
            preds = build_prediction_set(p_o1, p_f1, p_o2, p_f2)
        else:
            preds = build_prediction_set(
                T.take_batch(p_o1, cacps_idx), T.take_batch(p_f1, cacps_idx),
                T.take_batch(p_o2, cacps_idx), T.take_batch(p_f2, cacps_idx),
            )
        l_a, l_b = cacps_loss(preds, confidence_weighting=cfg.confidence_weighting,
                              detach_weight=cfg.detach_weight)
        mean_v = float((preds.v1.data.mean() + preds.v2.data.mean()) / 2.0)
    else:
        l_a, l_b = Tensor(0.0), Tensor(0.0)
        mean_v = 0.0

    l_s, present = supervised_on(p_o1, p_o2, labeled_idx)
    l_cacps = l_a + l_b
    total = total_loss(l_s, l_cacps, cfg.beta)

    opt.zero_grad()
    total.backward()
    opt.step()
    return LossBreakdown(
        l_s=l_s.item() if present else 0.0,
        l_a=l_a.item(),
        l_b=l_b.item(),
        l_cacps=l_cacps.item(),
        total=total.item(),
        beta=cfg.beta,
        mean_v=mean_v,
    )


def center_crop_pool(items: list[TrainItem], crop: int) -> np.ndarray:
    """Partner-image pool: center crops of every training image."""
    out = []
    for it in items:
        h, w = it.image.shape[-2], it.image.shape[-1]
        if crop > h or crop > w:
            raise TrainerError(f"crop {crop} larger than image {(h, w)}")
        top, left = (h - crop) // 2, (w - crop) // 2
        out.append(it.image[:, top : top + crop, left : left + crop])
    return np.stack(out)


def make_optimizer(pair: NetworkPair, cfg: TrainConfig) -> AdamW:
    return AdamW(dict(pair.all_params()), lr=cfg.lr, weight_decay=cfg.weight_decay)


def train_run(
    pair: NetworkPair,
    items: list[TrainItem],
    cfg: TrainConfig,
    opt: AdamW | None = None,
    start_epoch: int = 0,
    report: TrainReport | None = None,
    epoch_callback=None,
) -> TrainReport:
    """Run epochs [start_epoch, cfg.epochs); append one report row per epoch.

    Passing the optimizer, start_epoch and the partial report resumes a run
    and reproduces the uninterrupted sequence bit for bit.
    """
    div = 1 << pair.spec.depth
    if cfg.crop % div:
        raise TrainerError(f"crop {cfg.crop} not divisible by 2^depth = {div}")
    if not items:
        raise TrainerError("empty training set")
    opt = opt if opt is not None else make_optimizer(pair, cfg)
    report = report if report is not None else TrainReport()
    flags = cfg.augment_flags()
    pool = center_crop_pool(items, cfg.crop)
    n_labeled = sum(1 for it in items if it.labeled)
    n_unlabeled = len(items) - n_labeled

    for epoch in range(start_epoch, cfg.epochs):
        partner_rng = np.random.default_rng([cfg.seed_data, 104729, epoch])
        sums = np.zeros(5)
        steps = 0
        for batch in iterate_batches(items, cfg.batch_size, cfg.seed_data, epoch, cfg.crop, flags):
            bd = train_step(pair, batch, cfg, partner_rng, opt, pool)
            sums += (bd.l_s, bd.l_a, bd.l_b, bd.total, bd.mean_v)
            steps += 1
        means = [float(v) for v in sums / max(steps, 1)]
        report.rows.append(
            EpochRow(epoch=epoch, l_s=means[0], l_a=means[1], l_b=means[2], total=means[3],
                     mean_v=means[4], n_labeled=n_labeled, n_unlabeled=n_unlabeled)
        )
        if epoch_callback is not None:
            epoch_callback(epoch, pair, opt, report)
    return report


def infer_ensemble(pair: NetworkPair, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean of the two networks' probabilities on the clean image, plus the
    per-pixel argmax labels (ties to the lowest class index)."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise TrainerError(f"expected [1,H,W] or [N,1,H,W] image, got {arr.shape}")
    x = Tensor(arr)
    p1 = forward(pair.spec, pair.params_1, x).data
    p2 = forward(pair.spec, pair.params_2, x).data
    probs = (p1 + p2) / 2.0
    return probs, probs.argmax(axis=1)


def evaluate(
    pair: NetworkPair,
    samples: list[Sample],
    hd_percentile: float | None = None,
) -> tuple[list[MetricRow], AggregateReport]:
    """Per-subject, per-foreground-class Dice and Hausdorff plus aggregate."""
    if not samples:
        raise TrainerError("evaluate: empty dataset")
    rows: list[MetricRow] = []
    for s in samples:
        if s.mask is None:
            raise TrainerError(f"subject {s.subject_id} has no ground truth")
        _, labels = infer_ensemble(pair, s.image)
        pred = labels[0]
        for class_id in range(1, pair.spec.num_classes):
            rows.append(
                MetricRow(
                    subject_id=s.subject_id,
                    class_id=class_id,
                    dice=dice_score(pred == class_id, s.mask == class_id),
                    hausdorff=hausdorff(pred == class_id, s.mask == class_id,
                                        percentile=hd_percentile),
                )
            )
    return rows, aggregate(rows)
