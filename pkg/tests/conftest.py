import datetime as dt
from pathlib import Path

import numpy as np
import pytest

from sludgevision.data_ingest import ImageDataset, ImageSample, load_manifest
from sludgevision.synth import SynthParams, generate_dataset

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _offline(monkeypatch):
    monkeypatch.setenv("SLUDGEVISION_OFFLINE", "1")


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """12 days x 3 images at 64x48, written to disk."""
    out = tmp_path_factory.mktemp("synth_small")
    params = SynthParams.for_resolution(64, 48)
    generate_dataset(12, 3, 7, out, params)
    manifest = load_manifest(out / "manifest.csv", (64, 48))
    return manifest, ImageDataset.from_manifest(manifest)


def make_samples(days_svi, per_day=1, start=dt.date(2022, 1, 1)):
    samples = []
    for d, svi in enumerate(days_svi):
        day = start + dt.timedelta(days=d)
        for r in range(per_day):
            samples.append(ImageSample(f"{day}_{r}", day, r, Path(f"/nonexistent/{day}_{r}.png"), float(svi)))
    return samples


def random_dataset(n_days, per_day=2, hw=(32, 32), seed=0):
    rng = np.random.default_rng(seed)
    samples = make_samples(rng.uniform(60, 400, n_days), per_day)
    images = rng.uniform(0, 1, (len(samples), *hw, 3)).astype(np.float32)
    return ImageDataset(samples, images)
