"""Segmentation evaluation: Dice overlap and boundary Hausdorff distance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MetricError(Exception):
    pass


def _check_binary_pair(op: str, pred: np.ndarray, gt: np.ndarray):
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise MetricError(f"{op}: shape mismatch {p.shape} vs {g.shape}")
    return p, g


def dice_score(pred, gt) -> float:
    """2|P∩G| / (|P|+|G|); two empty masks agree perfectly (1.0)."""
    p, g = _check_binary_pair("dice_score", pred, gt)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Coordinates [K,2] of mask pixels with a 4-neighbor outside the mask.

    Pixels on the array border count as boundary (outside the array is
    outside the mask).
    """
    m = np.asarray(mask).astype(bool)
    if not m.any():
        return np.zeros((0, 2), dtype=np.int64)
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return np.argwhere(m & ~interior)


def hausdorff(pred, gt, percentile: float | None = None, boundary: bool = True) -> float | None:
    """Symmetric Hausdorff distance in pixels over boundary point sets.

    Returns None (undefined, excluded from aggregation) when exactly one
    mask is empty; 0.0 when both are. percentile (e.g. 95) switches each
    directed distance from its max to that percentile; boundary=False uses
    every mask pixel instead of boundary pixels.
    """
    p, g = _check_binary_pair("hausdorff", pred, gt)
    if not p.any() and not g.any():
        return 0.0
    if not p.any() or not g.any():
        return None
    if boundary:
        pa, ga = boundary_pixels(p), boundary_pixels(g)
    else:
        pa, ga = np.argwhere(p), np.argwhere(g)
    diff = pa[:, None, :] - ga[None, :, :]
    d = np.sqrt((diff.astype(np.float64) ** 2).sum(axis=2))
    if percentile is None:
        h_pg = d.min(axis=1).max()
        h_gp = d.min(axis=0).max()
    else:
        h_pg = np.percentile(d.min(axis=1), percentile)
        h_gp = np.percentile(d.min(axis=0), percentile)
    return float(max(h_pg, h_gp))


@dataclass(frozen=True)
class MetricRow:
    subject_id: int
    class_id: int
    dice: float
    hausdorff: float | None

    def __post_init__(self):
        if not 0.0 <= self.dice <= 1.0:
            raise MetricError(f"dice out of range: {self.dice}")
        if self.hausdorff is not None and self.hausdorff < 0:
            raise MetricError(f"negative hausdorff: {self.hausdorff}")


@dataclass(frozen=True)
class ClassSummary:
    class_id: int
    dice_mean: float
    dice_std: float
    hausdorff_mean: float | None
    hausdorff_std: float | None
    n_subjects: int
    n_hausdorff_defined: int


@dataclass(frozen=True)
class AggregateReport:
    per_class: list[ClassSummary]
    overall_dice_mean: float
    overall_hausdorff_mean: float | None


def aggregate(rows: list[MetricRow]) -> AggregateReport:
    """Mean and population std per class across subjects; overall = class mean.

    Undefined Hausdorff rows are excluded from the Hausdorff statistics but
    still count toward Dice.
    """
    if not rows:
        raise MetricError("aggregate: no rows")
    summaries = []
    for class_id in sorted({r.class_id for r in rows}):
        cls = [r for r in rows if r.class_id == class_id]
        dices = np.array([r.dice for r in cls])
        hds = np.array([r.hausdorff for r in cls if r.hausdorff is not None])
        summaries.append(
            ClassSummary(
                class_id=class_id,
                dice_mean=float(dices.mean()),
                dice_std=float(dices.std()),
                hausdorff_mean=float(hds.mean()) if hds.size else None,
                hausdorff_std=float(hds.std()) if hds.size else None,
                n_subjects=len(cls),
                n_hausdorff_defined=int(hds.size),
            )
        )
    hd_means = [s.hausdorff_mean for s in summaries if s.hausdorff_mean is not None]
    return AggregateReport(
        per_class=summaries,
        overall_dice_mean=float(np.mean([s.dice_mean for s in summaries])),
        overall_hausdorff_mean=float(np.mean(hd_means)) if hd_means else None,
    )
