"""Daily aggregation of image predictions and bulking early-warning rules."""

from __future__ import annotations

import csv
import datetime as dt
import io
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data_ingest import ImageSample
from .errors import ValidationError

BULKING_THRESHOLD = 150.0  # mL/g
WARNING_KINDS = ("threshold_crossing", "rising_trend")


@dataclass(frozen=True)
class DailyPrediction:
    day: dt.date
    mean_svi: float
    std_svi: float
    n_images: int
    measured_svi: float | None = None

    def __post_init__(self):
        # numbers are stored as floats so reports serialize the same after a round trip
        for name in ("mean_svi", "std_svi"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.measured_svi is not None:
            object.__setattr__(self, "measured_svi", float(self.measured_svi))
        if self.n_images < 1:
            raise ValidationError("n_images must be >= 1")
        if self.std_svi < 0 or (self.n_images == 1 and self.std_svi != 0):
            raise ValidationError("std_svi must be >= 0 and 0 for a single image")

    def to_dict(self) -> dict:
        return {
            "day": self.day.isoformat(),
            "mean_svi": self.mean_svi,
            "std_svi": self.std_svi,
            "n_images": self.n_images,
            "measured_svi": self.measured_svi,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DailyPrediction":
        m = d.get("measured_svi")
        return cls(dt.date.fromisoformat(d["day"]), float(d["mean_svi"]), float(d["std_svi"]),
                   int(d["n_images"]), None if m is None else float(m))


@dataclass(frozen=True)
class WarningEvent:
    onset_day: dt.date
    trigger_value: float
    threshold: float
    persistence_days: int
    kind: str  # threshold_crossing | rising_trend

    def __post_init__(self):
        object.__setattr__(self, "trigger_value", float(self.trigger_value))
        object.__setattr__(self, "threshold", float(self.threshold))
        if self.kind not in WARNING_KINDS:
            raise ValidationError(f"unknown warning kind {self.kind!r}")
        if self.persistence_days < 1:
            raise ValidationError("persistence_days must be >= 1")
        if self.kind == "threshold_crossing" and not self.trigger_value > self.threshold:
            raise ValidationError("a threshold crossing must trigger above the threshold")

    def to_dict(self) -> dict:
        return {
            "onset_day": self.onset_day.isoformat(),
            "kind": self.kind,
            "trigger_value": self.trigger_value,
            "threshold": self.threshold,
            "persistence_days": self.persistence_days,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WarningEvent":
        return cls(dt.date.fromisoformat(d["onset_day"]), float(d["trigger_value"]), float(d["threshold"]),
                   int(d["persistence_days"]), d["kind"])


def aggregate_daily(predictions: Iterable[tuple[ImageSample, float]]) -> list[DailyPrediction]:
    """Per-day mean and sample standard deviation of replicate predictions."""
    by_day: dict[dt.date, list[float]] = {}
    measured: dict[dt.date, float | None] = {}
    for sample, value in predictions:
        by_day.setdefault(sample.day, []).append(float(value))
        measured.setdefault(sample.day, sample.svi)
    if not by_day:
        raise ValidationError("no predictions to aggregate")
    out = []
    for day in sorted(by_day):
        vals = np.array(by_day[day])
        std = float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0
        out.append(DailyPrediction(day, float(vals.mean()), std, int(vals.size), measured[day]))
    return out


def _runs(flags: Sequence[bool]):
    """(start, length) of maximal runs of True."""
    start = None
    for i, f in enumerate(list(flags) + [False]):
        if f and start is None:
            start = i
        elif not f and start is not None:
            yield start, i - start
            start = None


def trailing_slope(series: Sequence[DailyPrediction], end: int, window: int) -> float:
    """Least-squares slope (mL/g per day) of mean_svi over entries end-window+1..end."""
    pts = series[end - window + 1:end + 1]
    x = np.array([p.day.toordinal() for p in pts], dtype=np.float64)
    y = np.array([p.mean_svi for p in pts], dtype=np.float64)
    x -= x.mean()
    return float(np.dot(x, y - y.mean()) / np.dot(x, x))


def detect_warnings(
    series: Sequence[DailyPrediction],
    threshold: float = BULKING_THRESHOLD,
    persistence: int = 2,
    trend_window: int = 4,
    trend_slope_min: float = 5.0,
) -> list[WarningEvent]:
    """Threshold-crossing and rising-trend events for a date-ordered daily series.

    A threshold_crossing fires on the first day of every run of at least
    ``persistence`` consecutive entries above ``threshold``. A rising_trend
    fires on the first day of every run where the trailing least-squares
    slope exceeds ``trend_slope_min`` while the day is still at or below the
    threshold.
    """
    if persistence < 1:
        raise ValidationError("persistence must be >= 1")
    if trend_window < 2:
        raise ValidationError("trend_window must be >= 2")
    days = [p.day for p in series]
    if any(b <= a for a, b in zip(days, days[1:])):
        raise ValidationError("series must be strictly date-ordered")

    events = []
    above = [p.mean_svi > threshold for p in series]
    for start, length in _runs(above):
        if length >= persistence:
            events.append(WarningEvent(series[start].day, series[start].mean_svi, threshold, length,
                                       "threshold_crossing"))

    rising = [
        i >= trend_window - 1 and not above[i] and trailing_slope(series, i, trend_window) > trend_slope_min
        for i in range(len(series))
    ]
    for start, length in _runs(rising):
        events.append(WarningEvent(series[start].day, series[start].mean_svi, threshold, length, "rising_trend"))

    events.sort(key=lambda e: (e.onset_day, e.kind))
    return events


# -- reports -----------------------------------------------------------------

def monitor_report(series, warnings, config: dict) -> dict:
    return {
        "series": [p.to_dict() for p in series],
        "warnings": [w.to_dict() for w in warnings],
        "config": dict(config),
    }


def parse_monitor_report(text: str) -> tuple[list[DailyPrediction], list[WarningEvent], dict]:
    doc = json.loads(text)
    return ([DailyPrediction.from_dict(d) for d in doc["series"]],
            [WarningEvent.from_dict(w) for w in doc["warnings"]],
            doc.get("config", {}))


def dumps(doc) -> str:
    return json.dumps(doc, indent=2, ensure_ascii=False, allow_nan=True) + "\n"


def write_atomic(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)
    return path


def emit_report(results, path, summary: bool = True) -> Path:
    """Write ``results`` as JSON plus a ``.txt`` summary next to it.

    ``results`` is a monitor report dict (see :func:`monitor_report`), a
    :class:`~sludgevision.evalcv.CVResult`, or any object with ``to_dict``.
    """
    doc = results.to_dict() if hasattr(results, "to_dict") else results
    path = write_atomic(path, dumps(doc))
    if summary:
        write_atomic(path.with_suffix(".txt"), summarize(doc))
    return path


def summarize(doc: dict) -> str:
    lines = []
    if "series" in doc:
        s = doc["series"]
        lines.append(f"{len(s)} days" + (f" from {s[0]['day']} to {s[-1]['day']}" if s else ""))
        if s:
            peak = max(s, key=lambda p: p["mean_svi"])
            lines.append(f"peak predicted SVI {peak['mean_svi']:.1f} mL/g on {peak['day']}")
        warns = doc.get("warnings", [])
        lines.append(f"{len(warns)} warning(s)")
        for w in warns:
            lines.append(f"  {w['onset_day']}  {w['kind']:<18} {w['trigger_value']:.1f} mL/g "
                         f"(threshold {w['threshold']:g}, {w['persistence_days']} day(s))")
    if "rows" in doc:
        lines.append(f"{len(doc['rows'])} fold(s)")
        for m, a in doc.get("aggregate", {}).items():
            lines.append(f"  {m:<5} {a['mean']:.4g} ± {a['std']:.4g}")
    return "\n".join(lines) + "\n"


def series_csv(series: Sequence[DailyPrediction]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["day", "mean_svi", "std_svi", "n_images", "measured_svi"])
    for p in series:
        w.writerow([p.day.isoformat(), repr(p.mean_svi), repr(p.std_svi), p.n_images,
                    "" if p.measured_svi is None else repr(p.measured_svi)])
    return buf.getvalue()


PREDICTION_COLUMNS = ("sample_id", "day", "replicate", "predicted_svi", "measured_svi")


def write_predictions(rows: Sequence[tuple[ImageSample, float]], path) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PREDICTION_COLUMNS)
    for s, pred in rows:
        w.writerow([s.sample_id, s.day.isoformat(), s.replicate_index, repr(float(pred)), repr(float(s.svi))])
    return write_atomic(path, buf.getvalue())


def read_predictions(path) -> list[tuple[ImageSample, float]]:
    """Per-image predictions CSV; ``measured_svi`` may be blank."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(PREDICTION_COLUMNS[:4]) - set(reader.fieldnames or [])
        if missing:
            raise ValidationError(f"{path}: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                measured = row.get("measured_svi") or ""
                sample = _PredictedSample(row["sample_id"], dt.date.fromisoformat(row["day"]),
                                          int(row["replicate"]), Path(""),
                                          float(measured) if measured.strip() else None)
                out.append((sample, float(row["predicted_svi"])))
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"{path}:{lineno}: malformed row ({exc})") from None
    return out


@dataclass(frozen=True)
class _PredictedSample:
    """Sample record from a predictions file, where the measured SVI is optional."""

    sample_id: str
    day: dt.date
    replicate_index: int
    image_path: Path
    svi: float | None
