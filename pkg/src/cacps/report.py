"""CSV reports and rendered figures for training and evaluation runs."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")  # file output only; no display in batch runs

import matplotlib.pyplot as plt
import numpy as np

from .fourier import MixConfig, decompose, fft2d, mix_amplitudes
from .metrics import AggregateReport, MetricRow
from .trainer import EpochRow

TRAIN_HEADER = ["epoch", "l_s", "l_a", "l_b", "total", "mean_v", "n_labeled", "n_unlabeled"]
METRIC_HEADER = ["subject_id", "class_id", "dice", "hausdorff"]


class ReportError(Exception):
    pass


def append_train_rows(path, rows: Sequence[EpochRow]) -> None:
    """Append per-epoch rows, writing the header only on first creation."""
    p = Path(path)
    fresh = not p.exists()
    with p.open("a", newline="") as fh:
        w = csv.writer(fh)
        if fresh:
            w.writerow(TRAIN_HEADER)
        for r in rows:
            w.writerow([r.epoch, repr(float(r.l_s)), repr(float(r.l_a)),
                        repr(float(r.l_b)), repr(float(r.total)),
                        repr(float(r.mean_v)), r.n_labeled, r.n_unlabeled])


def read_train_rows(path) -> list[EpochRow]:
    p = Path(path)
    if not p.is_file():
        raise ReportError(f"train report not found: {p}")
    rows = []
    with p.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRAIN_HEADER:
            raise ReportError(f"unexpected train report header: {header}")
        for rec in reader:
            rows.append(EpochRow(
                epoch=int(rec[0]), l_s=float(rec[1]), l_a=float(rec[2]),
                l_b=float(rec[3]), total=float(rec[4]), mean_v=float(rec[5]),
                n_labeled=int(rec[6]), n_unlabeled=int(rec[7]),
            ))
    return rows


def write_metric_rows(path, rows: Sequence[MetricRow]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_HEADER)
        for r in rows:
            hd = "" if r.hausdorff is None else repr(r.hausdorff)
            w.writerow([r.subject_id, r.class_id, repr(r.dice), hd])


def format_summary(agg: AggregateReport) -> str:
    lines = ["class  dice_mean  dice_std  hausdorff_mean  hausdorff_std  hd_defined"]
    for cs in agg.per_class:
        hd_m = "undefined" if cs.hausdorff_mean is None else f"{cs.hausdorff_mean:.4f}"
        hd_s = "undefined" if cs.hausdorff_std is None else f"{cs.hausdorff_std:.4f}"
        defined = f"{cs.n_hausdorff_defined}/{cs.n_subjects}"
        lines.append(
            f"{cs.class_id:>5}  {cs.dice_mean:>9.4f}  {cs.dice_std:>8.4f}"
            f"  {hd_m:>14}  {hd_s:>13}  {defined:>10}"
        )
    overall_hd = ("undefined" if agg.overall_hausdorff_mean is None
                  else f"{agg.overall_hausdorff_mean:.4f}")
    lines.append(f"overall dice {agg.overall_dice_mean:.4f}  hausdorff {overall_hd}")
    return "\n".join(lines) + "\n"


def plot_training_curves(rows: Sequence[EpochRow], path) -> None:
    if not rows:
        raise ReportError("no epochs to plot")
    epochs = [r.epoch for r in rows]
    fig, (ax_loss, ax_v) = plt.subplots(1, 2, figsize=(10, 4))
    for field, label in (("l_s", "supervised"), ("l_a", "cross 1→2"),
                         ("l_b", "cross 2→1"), ("total", "total")):
        ax_loss.plot(epochs, [getattr(r, field) for r in rows], label=label)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_loss.set_title("training losses")
    ax_v.plot(epochs, [r.mean_v for r in rows], color="tab:red")
    ax_v.set_xlabel("epoch")
    ax_v.set_ylabel("mean prediction variance")
    ax_v.set_title("confidence signal")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_dice_bars(agg: AggregateReport, path) -> None:
    classes = [str(cs.class_id) for cs in agg.per_class]
    means = [cs.dice_mean for cs in agg.per_class]
    stds = [cs.dice_std for cs in agg.per_class]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.bar(classes, means, yerr=stds, capsize=4, color="tab:blue")
    ax.set_ylim(0.0, 1.0)
    ax.set_xlabel("class")
    ax.set_ylabel("Dice")
    ax.set_title(f"held-out Dice (overall {agg.overall_dice_mean:.3f})")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _log_amp(a: np.ndarray) -> np.ndarray:
    return np.log1p(a)


def plot_augment_panels(x: np.ndarray, x_prime: np.ndarray, z: np.ndarray,
                        cfg: MixConfig, path) -> None:
    """Images and spectra side by side: input, partner, output."""
    spec_x = decompose(fft2d(x))
    spec_p = decompose(fft2d(x_prime))
    amp_x, amp_p = spec_x.amplitude, spec_p.amplitude
    amp_mix = mix_amplitudes(spec_x, spec_p, cfg)
    fig, axes = plt.subplots(2, 3, figsize=(9, 6))
    top = [("input", x), ("partner", x_prime), ("augmented", z)]
    bottom = [("input amplitude", amp_x), ("partner amplitude", amp_p),
              ("mixed amplitude", amp_mix)]
    for ax, (title, img) in zip(axes[0], top):
        ax.imshow(img, cmap="gray", vmin=0.0, vmax=1.0)
        ax.set_title(title)
        ax.axis("off")
    for ax, (title, amp) in zip(axes[1], bottom):
        ax.imshow(_log_amp(amp), cmap="magma")
        ax.set_title(title)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
