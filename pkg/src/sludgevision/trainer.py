"""Fine-tuning / from-scratch training loop for the regression models."""

from __future__ import annotations

import copy
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentPolicy, apply_policy, sample_rng
from .data_ingest import ImageDataset, NormalizationStats, normalize
from .errors import TrainingError, ValidationError
from .model_zoo import ModelSpec, RegressionModel, build_model, layer_groups

log = logging.getLogger(__name__)

MODES = ("transfer_learning", "from_scratch")
CHECKPOINT_RULES = ("best_validation_mse", "paper_faithful_best_eval_mse")
DEFAULT_EPOCHS = {"transfer_learning": 30, "from_scratch": 95}


@dataclass
class TrainConfig:
    mode: str = "transfer_learning"
    epochs: int | None = None
    batch_size: int = 32
    initial_lr: float = 1e-4
    min_lr: float = 0.0
    weight_decay: float = 0.05
    layerwise_lr_decay: float | None = None
    checkpoint_rule: str = "best_validation_mse"
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    standardize_targets: bool = True
    warm_start_bias: bool = True
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.mode in ("tl", "tfs"):
            self.mode = "transfer_learning" if self.mode == "tl" else "from_scratch"
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs is None:
            self.epochs = DEFAULT_EPOCHS[self.mode]
        if self.checkpoint_rule not in CHECKPOINT_RULES:
            raise ValidationError(f"checkpoint_rule must be one of {CHECKPOINT_RULES}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")
        if not self.initial_lr > self.min_lr >= 0 and not (self.initial_lr == self.min_lr == 0):
            raise ValidationError(f"need initial_lr > min_lr >= 0, got {self.initial_lr}, {self.min_lr}")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")
        if self.layerwise_lr_decay is not None and not 0 < self.layerwise_lr_decay <= 1:
            raise ValidationError("layerwise_lr_decay must lie in (0, 1]")
        if not 0 <= self.validation_fraction < 1:
            raise ValidationError("validation_fraction must lie in [0, 1)")
        self.betas = tuple(self.betas)


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float
    lr: float
    eval_mse: float | None = None


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    selected_checkpoint_epoch: int = 0

    def rows(self) -> list[dict]:
        out = []
        for r in self.epochs:
            row = {"epoch": r.epoch, "train_mse": r.train_mse, "val_mse": r.val_mse, "lr": r.lr}
            if r.eval_mse is not None:
                row["eval_mse"] = r.eval_mse
            out.append(row)
        return out

    def to_json(self) -> str:
        return json.dumps({"epochs": self.rows(), "selected_checkpoint_epoch": self.selected_checkpoint_epoch}, indent=2)


def mse(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ValidationError(f"length mismatch: {p.size} predictions vs {t.size} targets")
    if p.size == 0:
        raise ValidationError("mse of an empty batch")
    return float(np.mean((p - t) ** 2))


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Cosine annealing from ``initial_lr`` (epoch 0) to ``min_lr`` (epoch == epochs)."""
    if not 0 <= epoch <= config.epochs:
        raise ValidationError(f"epoch {epoch} outside [0, {config.epochs}]")
    amp = config.initial_lr - config.min_lr
    return config.min_lr + 0.5 * amp * (1.0 + math.cos(math.pi * epoch / config.epochs))


def carve_validation(dataset: ImageDataset, fraction: float, rng: np.random.Generator):
    """Split off ``fraction`` of the day groups (at least one) as a validation set."""
    days = sorted(dataset.days)
    if len(days) < 2:
        raise TrainingError("need at least two day groups to carve a validation split")
    n_val = min(len(days) - 1, max(1, int(round(fraction * len(days)))))
    val_days = set(rng.permutation(np.array(days, dtype=object))[:n_val])
    train_days = set(days) - val_days
    return dataset.select_days(train_days), dataset.select_days(val_days)


def to_tensor(images: np.ndarray, stats: NormalizationStats, dtype=torch.float32) -> torch.Tensor:
    x = normalize(images, stats) if images.ndim == 3 else np.stack([normalize(im, stats) for im in images])
    if x.ndim == 3:
        x = x[None]
    return torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2))).to(dtype)


def evaluate_mse(model: RegressionModel, dataset: ImageDataset, stats: NormalizationStats, batch_size: int = 32):
    return mse(predict_dataset(model, dataset, stats, batch_size), dataset.labels)


def predict_dataset(model: RegressionModel, dataset: ImageDataset, stats: NormalizationStats, batch_size: int = 32):
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    with torch.no_grad():
        for i in range(0, len(dataset), batch_size):
            out.append(model(to_tensor(dataset.images[i:i + batch_size], stats, dtype)).reshape(-1).double().numpy())
    return np.concatenate(out) if out else np.zeros(0)


def _optimizer(model: RegressionModel, config: TrainConfig) -> tuple[torch.optim.Optimizer, list[float]]:
    if config.layerwise_lr_decay is None:
        groups, scales = [{"params": [p for p in model.parameters() if p.requires_grad]}], [1.0]
    else:
        layers = layer_groups(model)
        n = len(layers)
        scales = [config.layerwise_lr_decay ** (n - 1 - i) for i in range(n)]
        groups = [{"params": ps} for ps in layers]
    opt = torch.optim.AdamW(
        groups, lr=config.initial_lr, betas=config.betas, eps=config.eps, weight_decay=config.weight_decay
    )
    return opt, scales


def train(
    model: RegressionModel,
    train_set: ImageDataset,
    validation_set: ImageDataset,
    augment_policy: AugmentPolicy | None,
    config: TrainConfig,
    rng: int | None = None,
    *,
    eval_set: ImageDataset | None = None,
    normalization: NormalizationStats | None = None,
    augment_fn=apply_policy,
) -> tuple[RegressionModel, TrainHistory]:
    """Optimise ``model`` on ``train_set`` with AdamW and a per-epoch cosine schedule.

    Training images go through ``augment_fn`` with a generator derived from
    (seed, sample_id, epoch); validation and eval images are never
    augmented. The returned model carries the weights of the epoch chosen by
    ``config.checkpoint_rule``; ``paper_faithful_best_eval_mse`` needs
    ``eval_set`` and selects on its MSE.
    """
    seed = config.seed if rng is None else int(rng)
    stats = normalization or NormalizationStats()
    policy = augment_policy if augment_policy is not None else AugmentPolicy.identity()

    if len(train_set) == 0 or len(validation_set) == 0:
        raise TrainingError("training and validation splits must be non-empty")
    overlap = train_set.days & validation_set.days
    if overlap:
        raise TrainingError(f"day groups in both train and validation: {sorted(overlap)[:3]}")
    if config.checkpoint_rule == "paper_faithful_best_eval_mse" and eval_set is None:
        raise ValidationError("paper_faithful_best_eval_mse needs an eval_set")
    if model.head.out_features != 1:
        raise ValidationError("model head must have a single output")

    labels = train_set.labels
    if config.standardize_targets:
        model.set_target_scaling(labels.mean(), labels.std())
    if config.warm_start_bias:
        with torch.no_grad():
            model.head.bias.fill_((labels.mean() - float(model.target_mean)) / float(model.target_std))

    torch.manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
    shuffler = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 0x5EED])
    opt, scales = _optimizer(model, config)
    dtype = next(model.parameters()).dtype
    targets_all = torch.from_numpy(labels).to(dtype)

    history = TrainHistory()
    best_score, best_state = math.inf, None
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        for group, scale in zip(opt.param_groups, scales):
            group["lr"] = lr * scale
        model.train()
        order = shuffler.permutation(len(train_set))
        sq_err, seen = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = np.stack([
                augment_fn(train_set.images[i], policy, sample_rng(seed, train_set.samples[i].sample_id, epoch))
                for i in idx
            ])
            x = to_tensor(batch, stats, dtype)
            y = targets_all[idx]
            pred = model(x).reshape(-1)
            loss = torch.mean((pred - y) ** 2)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {start // config.batch_size} (lr={lr:.3g})"
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sq_err += float(loss.detach()) * len(idx)
            seen += len(idx)

        record = EpochRecord(epoch, sq_err / seen, evaluate_mse(model, validation_set, stats), lr)
        if eval_set is not None:
            record.eval_mse = evaluate_mse(model, eval_set, stats)
        history.epochs.append(record)
        score = record.val_mse if config.checkpoint_rule == "best_validation_mse" else record.eval_mse
        if score < best_score:
            best_score, best_state = score, copy.deepcopy(model.state_dict())
            history.selected_checkpoint_epoch = epoch
        log.debug("epoch %d lr=%.3g train=%.2f val=%.2f", epoch, lr, record.train_mse, record.val_mse)

    if best_state is not None:
        model.load_state_dict(best_state)
    return model, history


# -- checkpoints -------------------------------------------------------------

def checkpoint_name(arch: str, mode: str, fold: int, epoch: int) -> str:
    return f"{arch}_{mode}_fold{fold}_epoch{epoch}.ckpt"


def save_checkpoint(path, model: RegressionModel, config: TrainConfig, seed: int, manifest_hash: str = "",
                    normalization: NormalizationStats | None = None, resolution=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "state_dict": model.state_dict(),
        "model_spec": asdict(model.spec),
        "train_config": asdict(config),
        "seed": seed,
        "manifest_hash": manifest_hash,
        "normalization": asdict(normalization or NormalizationStats()),
        "resolution": list(resolution) if resolution else None,
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[RegressionModel, dict]:
    """Rebuild the model stored in ``path``; returns it with the raw payload."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    spec_fields = dict(payload["model_spec"])
    # weights come from the checkpoint itself
    spec = ModelSpec(spec_fields["architecture"], "none", spec_fields.get("stochastic_depth_rate"))
    model = build_model(spec, 0)
    model.spec = ModelSpec(**spec_fields)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
