import datetime as dt
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sludgevision.errors import ValidationError
from sludgevision.evalcv import EvalBatch, MetricsReport, aggregate, CVResult
from sludgevision.monitor import (
    DailyPrediction,
    aggregate_daily,
    detect_warnings,
    dumps,
    emit_report,
    monitor_report,
    parse_monitor_report,
    read_predictions,
    series_csv,
    trailing_slope,
    write_predictions,
)
from sludgevision.plotting import emit_plot, plot_history, sidecar_path

from conftest import make_samples

START = dt.date(2023, 3, 1)


def series_of(values, start=START, std=0.0):
    return [DailyPrediction(start + dt.timedelta(days=i), float(v), std, 3) for i, v in enumerate(values)]


def test_aggregate_examples():
    samples = make_samples([100, 210], per_day=3)
    preds = [140, 150, 160, 200, 200, 200]
    series = aggregate_daily(list(zip(samples, preds)))
    assert [p.day for p in series] == sorted(p.day for p in series)
    assert series[0].mean_svi == 150 and series[0].std_svi == pytest.approx(10)
    assert series[0].measured_svi == 100 and series[1].std_svi == 0
    single = aggregate_daily([(make_samples([90])[0], 200.0)])
    assert single[0].mean_svi == 200 and single[0].std_svi == 0 and single[0].n_images == 1


def test_aggregate_sorts_and_rejects_empty():
    samples = make_samples([100, 120, 140])
    series = aggregate_daily(list(zip(reversed(samples), [1.0, 2.0, 3.0])))
    assert [p.mean_svi for p in series] == [3.0, 2.0, 1.0]
    with pytest.raises(ValidationError):
        aggregate_daily([])


def test_daily_prediction_invariants():
    with pytest.raises(ValidationError):
        DailyPrediction(START, 100, -1, 3)
    with pytest.raises(ValidationError):
        DailyPrediction(START, 100, 2, 1)
    with pytest.raises(ValidationError):
        DailyPrediction(START, 100, 0, 0)


def test_warning_event_invariants():
    from sludgevision.monitor import WarningEvent

    with pytest.raises(ValidationError):
        WarningEvent(START, 140.0, 150.0, 2, "threshold_crossing")
    with pytest.raises(ValidationError):
        WarningEvent(START, 160.0, 150.0, 0, "threshold_crossing")
    with pytest.raises(ValidationError):
        WarningEvent(START, 160.0, 150.0, 2, "spike")
    assert WarningEvent(START, 160, 150, 2, "threshold_crossing").threshold == 150.0


def test_detect_examples():
    ev = detect_warnings(series_of([120, 130, 155, 160, 140]), 150, 2)
    assert [(e.kind, e.onset_day, e.trigger_value) for e in ev] == [
        ("threshold_crossing", START + dt.timedelta(days=2), 155.0)]
    assert detect_warnings(series_of([100] * 10)) == []
    assert [e for e in detect_warnings(series_of([100, 130, 160]), 150, 2) if e.kind == "threshold_crossing"] == []
    assert detect_warnings(series_of([160, 170]), persistence=5) == []


def test_detect_multiple_runs_and_persistence_length():
    ev = detect_warnings(series_of([160, 170, 100, 100, 100, 100, 155, 158, 159]), trend_slope_min=1e9)
    assert [e.onset_day.day for e in ev] == [1, 7]
    assert [e.persistence_days for e in ev] == [2, 3]
    assert all(e.trigger_value > e.threshold for e in ev)


def test_rising_trend_fires_below_threshold_once_per_run():
    ev = detect_warnings(series_of([80, 90, 100, 110, 120, 130, 140]), trend_window=4, trend_slope_min=5)
    assert [(e.kind, e.onset_day) for e in ev] == [("rising_trend", START + dt.timedelta(days=3))]
    assert ev[0].persistence_days == 4


def test_trailing_slope_uses_calendar_days():
    s = [DailyPrediction(START + dt.timedelta(days=7 * i), 100.0 + 14 * i, 0.0, 1) for i in range(4)]
    assert trailing_slope(s, 3, 4) == pytest.approx(2.0)


def test_detect_errors():
    with pytest.raises(ValidationError):
        detect_warnings(series_of([100, 120]), persistence=0)
    with pytest.raises(ValidationError):
        detect_warnings(series_of([100, 120]), trend_window=1)
    with pytest.raises(ValidationError):
        detect_warnings(list(reversed(series_of([100, 120]))))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(50, 300), min_size=1, max_size=30), st.integers(-400, 400), st.integers(1, 4))
def test_detect_translation_equivariant(values, shift, persistence):
    a = detect_warnings(series_of(values), persistence=persistence)
    b = detect_warnings(series_of(values, START + dt.timedelta(days=shift)), persistence=persistence)
    assert [(e.onset_day + dt.timedelta(days=shift), e.kind, e.trigger_value) for e in a] == \
           [(e.onset_day, e.kind, e.trigger_value) for e in b]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(50, 300), min_size=1, max_size=30), st.floats(60, 290), st.floats(0, 50))
def test_raising_threshold_never_adds_crossing_days(values, t, dt_):
    def crossing_days(thr):
        ev = detect_warnings(series_of(values), thr, 2, trend_slope_min=1e9)
        days = set()
        for e in ev:
            i = (e.onset_day - START).days
            days.update(range(i, i + e.persistence_days))
        return days

    assert crossing_days(t + dt_) <= crossing_days(t)


def test_report_roundtrip_byte_identical(tmp_path):
    series = series_of([120] * 9 + [165] * 5, std=4.5)
    warnings = detect_warnings(series)
    doc = monitor_report(series, warnings, {"threshold": 150.0, "persistence": 2})
    text = dumps(doc)
    s2, w2, cfg = parse_monitor_report(text)
    assert s2 == series and w2 == warnings
    assert dumps(monitor_report(s2, w2, cfg)) == text
    path = emit_report(doc, tmp_path / "r.json")
    assert path.read_text() == text
    assert "1 warning(s)" in (tmp_path / "r.txt").read_text()


def test_empty_warnings_serialize_as_list():
    doc = json.loads(dumps(monitor_report(series_of([100, 100]), [], {})))
    assert doc["warnings"] == []


def test_cv_report_has_k_rows(tmp_path):
    reps = [MetricsReport.from_batch(EvalBatch([100, 200, 300], [110 + i, 190, 300])) for i in range(4)]
    res = CVResult("tiny_cnn", "tfs", reps, aggregate(reps))
    path = emit_report(res, tmp_path / "cv.json")
    doc = json.loads(path.read_text())
    assert len(doc["rows"]) == 4 and set(doc["aggregate"]) == {"mae", "mape", "r2", "mtd", "mse"}
    assert "4 fold(s)" in (tmp_path / "cv.txt").read_text()
    emit_report(res, tmp_path / "cv2.json")
    assert (tmp_path / "cv2.json").read_bytes() == path.read_bytes()


def test_series_csv():
    text = series_csv([DailyPrediction(START, 150.5, 2.0, 3, None)])
    assert text.splitlines() == ["day,mean_svi,std_svi,n_images,measured_svi", "2023-03-01,150.5,2.0,3,"]


def test_predictions_roundtrip(tmp_path):
    samples = make_samples([100, 200], per_day=2)
    preds = [101.25, 99.5, 210.0, 190.125]
    path = write_predictions(list(zip(samples, preds)), tmp_path / "p.csv")
    rows = read_predictions(path)
    assert [p for _, p in rows] == preds
    assert [(s.sample_id, s.day, s.replicate_index, s.svi) for s, _ in rows] == \
           [(s.sample_id, s.day, s.replicate_index, s.svi) for s in samples]
    (tmp_path / "bad.csv").write_text("sample_id,day\nx,2020-01-01\n")
    with pytest.raises(ValidationError):
        read_predictions(tmp_path / "bad.csv")
    (tmp_path / "bad2.csv").write_text("sample_id,day,replicate,predicted_svi\nx,notaday,0,1\n")
    with pytest.raises(ValidationError, match=":2:"):
        read_predictions(tmp_path / "bad2.csv")


def test_blank_measured_allowed(tmp_path):
    (tmp_path / "p.csv").write_text("sample_id,day,replicate,predicted_svi,measured_svi\na,2020-01-01,0,120,\n"
                                    "b,2020-01-01,1,130,\n")
    series = aggregate_daily(read_predictions(tmp_path / "p.csv"))
    assert series[0].measured_svi is None and series[0].mean_svi == 125


@pytest.mark.parametrize("ext", ["png", "svg"])
def test_emit_plot_writes_file_and_sidecar(tmp_path, ext):
    series = series_of(list(np.linspace(100, 180, 12)), std=6.0)
    series[3] = DailyPrediction(series[3].day, series[3].mean_svi, 6.0, 3, 118.0)
    warnings = detect_warnings(series)
    path = emit_plot(series, warnings, tmp_path / f"plot.{ext}")
    assert path.stat().st_size > 1000
    side = json.loads(sidecar_path(path).read_text())
    kinds = [e["type"] for e in side["elements"]]
    assert kinds.count("warning_marker") == len(warnings) > 0
    assert {"band", "line", "markers", "hline"} <= set(kinds)


def test_emit_plot_is_byte_stable(tmp_path):
    series = series_of([100, 120, 160, 170])
    a = emit_plot(series, detect_warnings(series), tmp_path / "a.png").read_bytes()
    b = emit_plot(series, detect_warnings(series), tmp_path / "b.png").read_bytes()
    assert a == b


def test_emit_plot_zero_std_and_errors(tmp_path):
    emit_plot(series_of([100.0]), [], tmp_path / "one.png")
    with pytest.raises(ValidationError):
        emit_plot([], [], tmp_path / "empty.png")
    with pytest.raises(ValidationError):
        emit_plot(series_of([100.0]), [], tmp_path / "x.pdf")


def test_plot_history(tmp_path):
    rows = [{"epoch": i, "train_mse": 100.0 / (i + 1), "val_mse": 120.0 / (i + 1), "lr": 1e-3} for i in range(5)]
    path = plot_history(rows, tmp_path / "h.png")
    assert path.exists() and sidecar_path(path).exists()
