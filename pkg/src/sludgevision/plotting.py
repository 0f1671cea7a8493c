"""Matplotlib figures written to files, each with a sidecar JSON of drawn elements."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.dates as mdates  # noqa: E402
import matplotlib.pyplot as plt  # noqa: E402

from .errors import ValidationError  # noqa: E402
from .monitor import BULKING_THRESHOLD, DailyPrediction, WarningEvent, write_atomic  # noqa: E402

STYLE = {
    "figure.figsize": (9, 4),
    "figure.dpi": 100,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 10,
    "svg.hashsalt": "sludgevision",
}

WARNING_COLORS = {"threshold_crossing": "darkred", "rising_trend": "darkorange"}


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".elements.json")


def _save(fig, path: Path) -> None:
    fmt = path.suffix.lstrip(".").lower()
    if fmt not in ("png", "svg"):
        raise ValidationError(f"plot path must end in .png or .svg, got {path.name}")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    metadata = {"Software": None} if fmt == "png" else {"Date": None}
    fig.savefig(tmp, format=fmt, metadata=metadata, bbox_inches="tight")
    tmp.replace(path)


def emit_plot(
    series: Sequence[DailyPrediction],
    warnings: Sequence[WarningEvent],
    path,
    threshold: float = BULKING_THRESHOLD,
    title: str = "Predicted SVI",
) -> Path:
    """Daily mean line with a ±1 std band, measured SVI, threshold line and warning onsets."""
    if not series:
        raise ValidationError("cannot plot an empty series")
    path = Path(path)
    days = [p.day for p in series]
    mean = [p.mean_svi for p in series]
    lo = [p.mean_svi - p.std_svi for p in series]
    hi = [p.mean_svi + p.std_svi for p in series]
    measured = [(p.day, p.measured_svi) for p in series if p.measured_svi is not None]
    elements = []

    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        try:
            ax.fill_between(days, lo, hi, color="red", alpha=0.2, linewidth=0, label="±1 std")
            elements.append({"type": "band", "label": "std", "n_points": len(days)})
            ax.plot(days, mean, color="red", linewidth=1.5, label="mean prediction")
            elements.append({"type": "line", "label": "mean_svi", "n_points": len(days)})
            if measured:
                ax.plot([d for d, _ in measured], [v for _, v in measured], "o", color="black",
                        markersize=3.5, label="measured")
                elements.append({"type": "markers", "label": "measured_svi", "n_points": len(measured)})
            ax.axhline(threshold, color="gray", linestyle="--", linewidth=1, label=f"threshold {threshold:g}")
            elements.append({"type": "hline", "label": "threshold", "value": threshold})
            for w in warnings:
                ax.axvline(w.onset_day, color=WARNING_COLORS.get(w.kind, "purple"), linestyle=":", linewidth=1.2)
                ax.plot([w.onset_day], [w.trigger_value], marker="v", color=WARNING_COLORS.get(w.kind, "purple"))
                elements.append({"type": "warning_marker", "kind": w.kind, "day": w.onset_day.isoformat(),
                                 "value": w.trigger_value})
            ax.set_ylabel("SVI (mL/g)")
            ax.set_title(title)
            ax.xaxis.set_major_formatter(mdates.DateFormatter("%Y-%m-%d"))
            fig.autofmt_xdate()
            ax.legend(loc="upper left", fontsize=8, frameon=False)
            _save(fig, path)
        finally:
            plt.close(fig)

    write_atomic(sidecar_path(path), json.dumps({"figure": path.name, "elements": elements}, indent=2) + "\n")
    return path


def plot_history(rows: Sequence[dict], path, title: str = "Training history") -> Path:
    """Train/validation MSE per epoch (rows as produced by ``TrainHistory.rows``)."""
    if not rows:
        raise ValidationError("empty history")
    path = Path(path)
    epochs = [r["epoch"] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        try:
            ax.plot(epochs, [r["train_mse"] for r in rows], label="train MSE")
            ax.plot(epochs, [r["val_mse"] for r in rows], label="validation MSE")
            ax.set_yscale("log")
            ax.set_xlabel("epoch")
            ax.set_ylabel("MSE (mL/g)²")
            ax.set_title(title)
            ax.legend(frameon=False)
            _save(fig, path)
        finally:
            plt.close(fig)
    elements = [{"type": "line", "label": k, "n_points": len(rows)} for k in ("train_mse", "val_mse")]
    write_atomic(sidecar_path(path), json.dumps({"figure": path.name, "elements": elements}, indent=2) + "\n")
    return path
