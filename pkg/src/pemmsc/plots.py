"""Figures for sweep CSVs. Rendered headless (Agg) next to the CSV they plot."""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .objectives import MetricsRecord  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.6),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
}
MARKERS = "osD^vP*Xh"


def _series(records: Sequence[MetricsRecord], key) -> dict:
    groups = defaultdict(list)
    for r in records:
        groups[key(r)].append(r)
    return {k: sorted(v, key=lambda r: r.snr_db) for k, v in groups.items()}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def accuracy_vs_snr(records: Sequence[MetricsRecord], path, label_by: str = "variant") -> Path:
    """One accuracy curve per variant (or per K with ``label_by='K'``)."""
    key = (lambda r: r.variant) if label_by == "variant" else (lambda r: f"K={r.K}")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for i, (name, rs) in enumerate(_series(records, key).items()):
            ax.plot([r.snr_db for r in rs], [100 * r.accuracy for r in rs],
                    marker=MARKERS[i % len(MARKERS)], ms=4, label=name)
        ax.set_xlabel("SNR (dB)")
        ax.set_ylabel("Accuracy (%)")
        ax.legend()
        return _save(fig, path)


def nmse_vs_snr(records: Sequence[MetricsRecord], path, label_by: str = "variant") -> Path:
    """Side-by-side HSI and LiDAR reconstruction NMSE against SNR."""
    key = (lambda r: r.variant) if label_by == "variant" else (lambda r: f"K={r.K}")
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(8.0, 3.4), sharey=True)
        for ax, field, title in zip(axes, ("nmse_hsi", "nmse_lidar"), ("HSI", "LiDAR")):
            for i, (name, rs) in enumerate(_series(records, key).items()):
                pts = [(r.snr_db, getattr(r, field)) for r in rs if getattr(r, field) is not None]
                if pts:
                    xs, ys = zip(*pts)
                    ax.plot(xs, ys, marker=MARKERS[i % len(MARKERS)], ms=4, label=name)
            ax.set_title(title)
            ax.set_xlabel("SNR (dB)")
        axes[0].set_ylabel("NMSE")
        axes[0].legend()
        return _save(fig, path)


def training_curve(epochs: Sequence[int], losses: Sequence[float], accs: Sequence[float],
                   path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(epochs, losses, color="C0", label="train loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("joint loss", color="C0")
        twin = ax.twinx()
        twin.plot(epochs, [100 * a for a in accs], color="C1", label="test accuracy")
        twin.set_ylabel("accuracy (%)", color="C1")
        twin.grid(False)
        return _save(fig, path)


def sweep_figures(records: Sequence[MetricsRecord], csv_path, label_by: str = "variant") -> list[Path]:
    """Write ``<stem>_accuracy.png`` and ``<stem>_nmse.png`` beside ``csv_path``."""
    csv_path = Path(csv_path)
    stem = csv_path.with_suffix("")
    return [accuracy_vs_snr(records, f"{stem}_accuracy.png", label_by),
            nmse_vs_snr(records, f"{stem}_nmse.png", label_by)]
