"""Regression metrics, day-grouped k-fold splitting, cross-validation and leaderboards."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .augment import AugmentPolicy
from .data_ingest import DatasetManifest, ImageDataset
from .errors import TrainingError, ValidationError

log = logging.getLogger(__name__)

MTD_EPSILON = 1e-6
METRICS = ("mae", "mape", "r2", "mtd", "mse")


@dataclass(frozen=True)
class EvalBatch:
    ground_truth: np.ndarray
    predictions: np.ndarray

    def __init__(self, ground_truth, predictions):
        x = np.asarray(ground_truth, dtype=np.float64).ravel()
        y = np.asarray(predictions, dtype=np.float64).ravel()
        if x.shape != y.shape:
            raise ValidationError(f"length mismatch: {x.size} ground truth vs {y.size} predictions")
        if x.size == 0:
            raise ValidationError("empty evaluation batch")
        if not np.all(x > 0):
            raise ValidationError("ground-truth SVI must be strictly positive")
        object.__setattr__(self, "ground_truth", x)
        object.__setattr__(self, "predictions", y)

    def __len__(self):
        return self.ground_truth.size


def _batch(batch_or_x, y=None) -> EvalBatch:
    return batch_or_x if y is None else EvalBatch(batch_or_x, y)


def mae(batch, y=None) -> float:
    b = _batch(batch, y)
    return float(np.mean(np.abs(b.ground_truth - b.predictions)))


def mape(batch, y=None) -> float:
    """Mean absolute percentage error as a fraction (0.18, not 18 %)."""
    b = _batch(batch, y)
    return float(np.mean(np.abs(b.ground_truth - b.predictions) / b.ground_truth))


def mse(batch, y=None) -> float:
    b = _batch(batch, y)
    return float(np.mean((b.ground_truth - b.predictions) ** 2))


def r2(batch, y=None) -> float:
    b = _batch(batch, y)
    x = b.ground_truth
    denom = np.sum((x - x.mean()) ** 2)
    if len(x) < 2 or denom == 0:
        raise ValidationError("R^2 is undefined for constant ground truth")
    return float(1.0 - np.sum((x - b.predictions) ** 2) / denom)


def mtd_poisson(batch, y=None, epsilon: float = MTD_EPSILON) -> float:
    """Mean Poisson deviance; predictions are clamped to ``epsilon`` first."""
    b = _batch(batch, y)
    x = b.ground_truth
    pred = b.predictions
    clamped = int(np.sum(pred < epsilon))
    if clamped:
        log.warning("mtd_poisson: clamped %d non-positive predictions to %g", clamped, epsilon)
        pred = np.maximum(pred, epsilon)
    if not (np.all(pred > 0) and np.all(np.isfinite(pred))):
        raise ValidationError("predictions must be positive and finite for the Poisson deviance")
    return float(np.mean(2.0 * (x * np.log(x / pred) + pred - x)))


@dataclass
class MetricsReport:
    mae: float
    mape: float
    r2: float
    mtd: float
    mse: float
    n: int

    @classmethod
    def from_batch(cls, batch: EvalBatch) -> "MetricsReport":
        try:
            r2_value = r2(batch)
        except ValidationError:
            r2_value = math.nan
        return cls(mae(batch), mape(batch), r2_value, mtd_poisson(batch), mse(batch), len(batch))

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    fold_of_day: dict  # date -> fold, or sample_id -> fold in per_image mode
    per_image: bool = False

    def fold_of(self, sample) -> int:
        return self.fold_of_day[sample.sample_id if self.per_image else sample.day]

    def test_indices(self, samples: Sequence, fold: int) -> list[int]:
        return [i for i, s in enumerate(samples) if self.fold_of(s) == fold]


def kfold_split(manifest: DatasetManifest, k: int = 10, seed: int = 0, per_image: bool = False) -> FoldAssignment:
    """Shuffle day groups with ``seed`` and deal them round-robin into ``k`` folds.

    ``per_image`` deals individual images instead, letting replicates of one
    day land in different folds.
    """
    if k < 2:
        raise ValidationError("k must be >= 2")
    keys = sorted({s.sample_id for s in manifest.samples}) if per_image else manifest.days
    if len(keys) < k:
        unit = "images" if per_image else "day groups"
        raise ValidationError(f"{len(keys)} {unit} cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(keys))
    return FoldAssignment(k, {keys[j]: pos % k for pos, j in enumerate(order)}, per_image)


@dataclass
class Aggregate:
    mean: float
    std: float


@dataclass
class CVResult:
    model: str
    mode: str
    folds: list[MetricsReport]
    aggregate: dict = field(default_factory=dict)  # metric -> Aggregate

    def rows(self) -> list[dict]:
        return [{"model": self.model, "mode": self.mode, "fold": i, **r.as_dict()} for i, r in enumerate(self.folds)]

    def to_dict(self) -> dict:
        return {
            "rows": self.rows(),
            "aggregate": {m: {"mean": a.mean, "std": a.std} for m, a in self.aggregate.items()},
        }


def aggregate(reports: Sequence[MetricsReport]) -> dict:
    """Mean and sample (n-1) standard deviation of each metric across folds."""
    out = {}
    for m in METRICS:
        vals = np.array([getattr(r, m) for r in reports], dtype=np.float64)
        std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        out[m] = Aggregate(float(np.mean(vals)), std)
    return out


class Learner(Protocol):
    def __call__(self, train: ImageDataset, test: ImageDataset, fold: int) -> np.ndarray: ...


def torch_learner(spec, train_config, augment_policy: AugmentPolicy | None, manifest: DatasetManifest,
                  seed: int = 0, checkpoint_dir=None, weights_dir=None) -> Learner:
    """Train ``spec`` on each fold (with a day-group validation carve-out) and predict its test set."""
    from .model_zoo import build_model
    from .trainer import carve_validation, checkpoint_name, predict_dataset, save_checkpoint, train

    def fit_predict(train_set: ImageDataset, test_set: ImageDataset, fold: int) -> np.ndarray:
        fold_seed = int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])
        tr, val = carve_validation(train_set, train_config.validation_fraction, np.random.default_rng(fold_seed))
        model = build_model(spec, fold_seed, weights_dir)
        eval_set = test_set if train_config.checkpoint_rule == "paper_faithful_best_eval_mse" else None
        model, history = train(model, tr, val, augment_policy, train_config, fold_seed,
                               eval_set=eval_set, normalization=manifest.normalization)
        if checkpoint_dir is not None:
            name = checkpoint_name(spec.architecture, mode_label(spec), fold, history.selected_checkpoint_epoch)
            save_checkpoint(f"{checkpoint_dir}/{name}", model, train_config, fold_seed,
                            manifest.source_hash, manifest.normalization, manifest.resolution)
        return predict_dataset(model, test_set, manifest.normalization)

    return fit_predict


def mode_label(spec) -> str:
    return "tl" if spec.transfer else "tfs"


def cross_validate(
    spec,
    manifest: DatasetManifest,
    train_config=None,
    augment_policy: AugmentPolicy | None = None,
    k: int = 10,
    seed: int = 0,
    *,
    dataset: ImageDataset | None = None,
    learner: Learner | None = None,
    folds: FoldAssignment | None = None,
    checkpoint_dir=None,
    weights_dir=None,
) -> CVResult:
    """Train on k-1 folds, test on the remaining one, for every fold.

    ``learner`` replaces the default train-and-predict step (used for stub
    predictors). ``dataset`` supplies pre-decoded images for ``manifest``.
    """
    folds = folds or kfold_split(manifest, k, seed)
    if dataset is None:
        dataset = ImageDataset.from_manifest(manifest)
    if learner is None:
        learner = torch_learner(spec, train_config, augment_policy, manifest, seed, checkpoint_dir, weights_dir)

    reports = []
    for fold in range(folds.k):
        test_idx = folds.test_indices(dataset.samples, fold)
        test_set = dataset.take(test_idx)
        held = set(test_idx)
        train_set = dataset.take(i for i in range(len(dataset)) if i not in held)
        try:
            preds = learner(train_set, test_set, fold)
        except TrainingError as exc:
            raise TrainingError(str(exc), fold=fold) from exc
        reports.append(MetricsReport.from_batch(EvalBatch(test_set.labels, preds)))
        log.info("fold %d: MAE %.2f R2 %.3f", fold, reports[-1].mae, reports[-1].r2)

    name = spec.architecture if spec is not None else "stub"
    mode = mode_label(spec) if spec is not None else "stub"
    return CVResult(name, mode, reports, aggregate(reports))


@dataclass
class LeaderboardRow:
    model: str
    mode: str
    aggregate: dict

    def to_dict(self) -> dict:
        return {"model": self.model, "mode": self.mode,
                **{m: {"mean": a.mean, "std": a.std} for m, a in self.aggregate.items()}}


def compare_models(
    entries: Sequence,
    manifest: DatasetManifest,
    train_config,
    augment_policy: AugmentPolicy | None = None,
    k: int = 10,
    seed: int = 0,
    *,
    dataset: ImageDataset | None = None,
    learner_factory: Callable | None = None,
    weights_dir=None,
) -> tuple[list[LeaderboardRow], list[CVResult]]:
    """Cross-validate every ``ModelSpec`` on one shared fold assignment; rows sorted by MAE."""
    if len(entries) < 2:
        raise ValidationError("compare_models needs at least two entries")
    folds = kfold_split(manifest, k, seed)
    if dataset is None:
        dataset = ImageDataset.from_manifest(manifest)
    results = []
    for spec in entries:
        learner = learner_factory(spec) if learner_factory else None
        results.append(cross_validate(spec, manifest, train_config, augment_policy, k, seed, dataset=dataset,
                                      learner=learner, folds=folds, weights_dir=weights_dir))
    rows = [LeaderboardRow(r.model, r.mode, r.aggregate) for r in results]
    rows.sort(key=lambda r: r.aggregate["mae"].mean)
    return rows, results


def format_leaderboard(rows: Sequence[LeaderboardRow]) -> str:
    header = ["model", "mode", "MAE", "MTD", "R2", "MAPE"]
    body = []
    for r in rows:
        a = r.aggregate
        body.append([r.model, r.mode] + [f"{a[m].mean:.2f} ± {a[m].std:.2f}" for m in ("mae", "mtd", "r2", "mape")])
    widths = [max(len(str(c)) for c in col) for col in zip(header, *body)]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(row, widths)).rstrip() for row in [header, *body]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
