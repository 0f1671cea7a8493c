"""Backbones with a scalar regression head, pretrained-weight cache, complexity counts."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import PretrainedUnavailableError, ValidationError

log = logging.getLogger(__name__)

PRETRAINED_SOURCES = ("none", "imagenet_1k", "imagenet_21k")
CACHE_ENV = "SLUDGEVISION_CACHE"
OFFLINE_ENV = "SLUDGEVISION_OFFLINE"
LOCKFILE = "weights.lock.json"

# Published comparison convention: multiply-accumulates of the classifier network at
# 224x224, parameters of the feature extractor without its classifier.
FLOP_RESOLUTION = (224, 224)


@dataclass(frozen=True)
class ArchInfo:
    timm_name: str | None
    pretrained_tags: dict
    default_drop_path: float = 0.0
    supports_drop_path: bool = True
    input_size: tuple[int, int] | None = None  # (height, width) forced resize


ARCHITECTURES = {
    "inception_v3": ArchInfo(
        "inception_v3", {"imagenet_1k": "inception_v3.tv_in1k"}, supports_drop_path=False, input_size=(299, 299)
    ),
    "resnet18": ArchInfo("resnet18", {"imagenet_1k": "resnet18.tv_in1k"}),
    "resnet152": ArchInfo("resnet152", {"imagenet_1k": "resnet152.tv_in1k"}),
    "convnext_nano": ArchInfo("convnext_nano", {"imagenet_1k": "convnext_nano.d1h_in1k"}, default_drop_path=0.1),
    "convnext_s": ArchInfo("convnext_small", {"imagenet_21k": "convnext_small.fb_in22k"}, default_drop_path=0.1),
    "tiny_cnn": ArchInfo(None, {}, supports_drop_path=False),
}
BENCHMARK_ARCHITECTURES = ("inception_v3", "resnet18", "resnet152", "convnext_nano", "convnext_s")


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    pretrained: str = "none"
    stochastic_depth_rate: float | None = None
    # local regression-model weights to start from (desk-scale transfer)
    init_weights: str | None = None

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValidationError(f"unknown architecture {self.architecture!r}; choose from {sorted(ARCHITECTURES)}")
        if self.pretrained not in PRETRAINED_SOURCES:
            raise ValidationError(f"unknown pretrained source {self.pretrained!r}")
        info = ARCHITECTURES[self.architecture]
        if self.pretrained != "none" and self.pretrained not in info.pretrained_tags:
            raise ValidationError(
                f"{self.architecture} cannot be pretrained on {self.pretrained}; "
                f"valid: {['none', *info.pretrained_tags]}"
            )
        rate = self.drop_path
        if not 0.0 <= rate < 1.0:
            raise ValidationError(f"stochastic_depth_rate must lie in [0, 1), got {rate}")
        if rate > 0 and not info.supports_drop_path:
            raise ValidationError(f"{self.architecture} has no residual blocks to drop")

    @property
    def drop_path(self) -> float:
        if self.stochastic_depth_rate is None:
            return ARCHITECTURES[self.architecture].default_drop_path
        return self.stochastic_depth_rate

    @property
    def transfer(self) -> bool:
        return self.pretrained != "none" or self.init_weights is not None

    @classmethod
    def for_mode(cls, architecture: str, mode: str, **kw) -> "ModelSpec":
        """``mode`` is ``tl`` (default pretrained source) or ``tfs``."""
        if mode not in ("tl", "tfs"):
            raise ValidationError(f"mode must be 'tl' or 'tfs', got {mode!r}")
        tags = ARCHITECTURES.get(architecture, ArchInfo(None, {})).pretrained_tags
        source = next(iter(tags), "none") if mode == "tl" else "none"
        if mode == "tl" and source == "none" and kw.get("init_weights") is None:
            raise ValidationError(f"{architecture} has no pretrained source; pass init weights for TL")
        return cls(architecture, source, **kw)


@dataclass(frozen=True)
class ComplexityReport:
    gflops: float
    parameter_count: int
    parameters_with_classifier: int = 0
    regression_gflops: float = 0.0
    regression_parameter_count: int = 0

    def __post_init__(self):
        if not (self.gflops > 0 and self.parameter_count > 0):
            raise ValidationError("complexity counts must be positive")


class TinyCNN(nn.Module):
    """Four conv-BN-ReLU-maxpool blocks and global average pooling (~0.1 M params)."""

    def __init__(self, widths=(16, 32, 64, 128), num_classes: int = 0):
        super().__init__()
        layers, cin = [], 3
        for cout in widths:
            layers.append(
                nn.Sequential(
                    nn.Conv2d(cin, cout, 3, padding=1, bias=False),
                    nn.BatchNorm2d(cout),
                    nn.ReLU(inplace=True),
                    nn.MaxPool2d(2),
                )
            )
            cin = cout
        self.stages = nn.Sequential(*layers)
        self.num_features = cin
        self.fc = nn.Linear(cin, num_classes) if num_classes else nn.Identity()

    def forward(self, x):
        return self.fc(self.stages(x).mean(dim=(2, 3)))


class RegressionModel(nn.Module):
    """Backbone feature extractor followed by one affine output.

    Predictions are ``target_mean + target_std * head(features)``; the two
    buffers default to 0 and 1 and are set from training labels so the head
    works on a unit scale.
    """

    def __init__(self, backbone: nn.Module, num_features: int, spec: ModelSpec, input_size=None):
        super().__init__()
        self.spec = spec
        self.backbone = backbone
        self.head = nn.Linear(num_features, 1)
        self.input_size = input_size
        self.register_buffer("target_mean", torch.zeros(()))
        self.register_buffer("target_std", torch.ones(()))

    def features(self, x):
        if self.input_size is not None and tuple(x.shape[-2:]) != tuple(self.input_size):
            x = F.interpolate(x, size=self.input_size, mode="bilinear", align_corners=False)
        return self.backbone(x)

    def forward(self, x):
        return self.target_mean + self.target_std * self.head(self.features(x))

    def set_target_scaling(self, mean: float, std: float) -> None:
        if not std > 0:
            std = 1.0
        self.target_mean.fill_(float(mean))
        self.target_std.fill_(float(std))

    def head_state(self) -> dict:
        return {k: v.clone() for k, v in self.head.state_dict().items()}


def _create_backbone(arch: str, drop_path: float, num_classes: int = 0) -> tuple[nn.Module, int]:
    info = ARCHITECTURES[arch]
    if info.timm_name is None:
        net = TinyCNN(num_classes=num_classes)
        return net, net.num_features
    import timm

    kwargs = {"num_classes": num_classes}
    if info.supports_drop_path:
        kwargs["drop_path_rate"] = drop_path
    net = timm.create_model(info.timm_name, pretrained=False, **kwargs)
    return net, net.num_features


def build_model(spec: ModelSpec, rng: int | torch.Generator | None = 0, weights_dir=None) -> RegressionModel:
    """Build ``spec`` with a fresh single-output head.

    ``rng`` is a seed (or torch generator) for every randomly initialised
    weight. With a pretrained source the backbone comes from the cache
    checkpoint and only the head is random.
    """
    gen = _generator(rng)
    with _seeded(gen):
        backbone, nf = _create_backbone(spec.architecture, spec.drop_path)
    model = RegressionModel(backbone, nf, spec, ARCHITECTURES[spec.architecture].input_size)
    if spec.pretrained != "none":
        state = load_pretrained_state(spec.architecture, spec.pretrained, weights_dir)
        model.backbone.load_state_dict(state, strict=True)
    if spec.init_weights is not None:
        payload = torch.load(spec.init_weights, map_location="cpu", weights_only=False)
        state = payload.get("state_dict", payload)
        backbone_state = {k[len("backbone."):]: v for k, v in state.items() if k.startswith("backbone.")}
        model.backbone.load_state_dict(backbone_state, strict=True)
    reinit_head(model, gen)
    return model


def reinit_head(model: RegressionModel, rng=0, bias: float | None = None, weight_std: float = 0.01) -> RegressionModel:
    """Redraw head weights from N(0, weight_std^2); backbone untouched.

    ``bias`` warm-starts the head so that a zero-feature input predicts that
    value (typically the training-set mean SVI).
    """
    gen = _generator(rng)
    with torch.no_grad():
        w = torch.randn(model.head.weight.shape, generator=gen, dtype=torch.float64) * weight_std
        model.head.weight.copy_(w.to(model.head.weight.dtype))
        b = 0.0 if bias is None else (bias - float(model.target_mean)) / float(model.target_std)
        model.head.bias.fill_(b)
    return model


def _generator(rng) -> torch.Generator:
    if isinstance(rng, torch.Generator):
        return rng
    g = torch.Generator()
    g.manual_seed(int(rng or 0) & 0x7FFFFFFFFFFFFFFF)
    return g


class _seeded:
    """Route torch's global RNG through a seed drawn from ``gen`` for module init."""

    def __init__(self, gen: torch.Generator):
        self.seed = int(torch.randint(0, 2**62, (1,), generator=gen))

    def __enter__(self):
        self._state = torch.random.get_rng_state()
        torch.manual_seed(self.seed)

    def __exit__(self, *exc):
        torch.random.set_rng_state(self._state)


def state_checksum(state: dict) -> str:
    h = hashlib.sha256()
    for key in sorted(state):
        t = state[key].detach().cpu().contiguous()
        h.update(key.encode())
        h.update(str(t.dtype).encode())
        h.update(t.numpy().tobytes() if t.dtype != torch.bfloat16 else t.float().numpy().tobytes())
    return h.hexdigest()


# -- pretrained cache --------------------------------------------------------

def cache_dir(path=None) -> Path:
    if path is not None:
        return Path(path)
    env = os.environ.get(CACHE_ENV)
    return Path(env) if env else Path.home() / ".cache" / "sludgevision"


def checkpoint_path(arch: str, source: str, directory=None) -> Path:
    return cache_dir(directory) / f"{arch}_{source}.pth"


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def read_lockfile(directory=None) -> dict:
    p = cache_dir(directory) / LOCKFILE
    return json.loads(p.read_text()) if p.exists() else {}


def record_checkpoint(path, directory=None) -> str:
    """Hash ``path`` into the cache lockfile; returns the digest."""
    d = cache_dir(directory)
    lock = read_lockfile(d)
    digest = file_sha256(path)
    lock[Path(path).name] = digest
    tmp = d / (LOCKFILE + ".tmp")
    tmp.write_text(json.dumps(lock, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, d / LOCKFILE)
    return digest


def _classifier_keys(arch: str) -> tuple[str, ...]:
    info = ARCHITECTURES[arch]
    if info.timm_name is None:
        return ("fc.",)
    import timm

    cfg = timm.models.get_pretrained_cfg(info.pretrained_tags and next(iter(info.pretrained_tags.values())))
    names = cfg.classifier if cfg is not None else "fc"
    names = (names,) if isinstance(names, str) else tuple(names)
    return tuple(n + "." for n in names)


def strip_classifier(arch: str, state: dict) -> dict:
    prefixes = _classifier_keys(arch)
    return {k: v for k, v in state.items() if not k.startswith(prefixes)}


def fetch_pretrained(arch: str, source: str, directory=None) -> Path:
    """Download published weights through timm and store them in the cache."""
    tag = ARCHITECTURES[arch].pretrained_tags[source]
    log.info("fetching pretrained weights %s", tag)
    try:
        import timm

        net = timm.create_model(tag, pretrained=True)
    except Exception as exc:  # network, hub or format failures all mean "unavailable"
        raise PretrainedUnavailableError(f"could not fetch {tag}: {exc}") from exc
    d = cache_dir(directory)
    d.mkdir(parents=True, exist_ok=True)
    path = checkpoint_path(arch, source, d)
    tmp = path.with_suffix(".tmp")
    torch.save(net.state_dict(), tmp)
    os.replace(tmp, path)
    record_checkpoint(path, d)
    return path


def load_pretrained_state(arch: str, source: str, directory=None, allow_download: bool | None = None) -> dict:
    """Backbone weights (classifier removed) from the cache, verified against the lockfile.

    Missing checkpoints are downloaded unless ``allow_download`` is False or
    ``SLUDGEVISION_OFFLINE`` is set.
    """
    if allow_download is None:
        allow_download = not os.environ.get(OFFLINE_ENV)
    path = checkpoint_path(arch, source, directory)
    if not path.exists():
        if not allow_download:
            raise PretrainedUnavailableError(f"no cached checkpoint at {path}")
        path = fetch_pretrained(arch, source, directory)
    expected = read_lockfile(path.parent).get(path.name)
    if expected is None:
        raise PretrainedUnavailableError(f"{path.name} is not recorded in {path.parent / LOCKFILE}")
    actual = file_sha256(path)
    if actual != expected:
        raise PretrainedUnavailableError(f"hash mismatch for {path}: lockfile {expected[:12]}, file {actual[:12]}")
    state = torch.load(path, map_location="cpu", weights_only=True)
    return strip_classifier(arch, state)


# -- complexity --------------------------------------------------------------

def count_macs(model: nn.Module, input_shape: tuple[int, int, int]) -> int:
    """Multiply-accumulates of one forward pass over conv and linear layers."""
    total = 0

    def hook(mod, inp, out):
        nonlocal total
        per_out = out.numel() // out.shape[0]
        if isinstance(mod, nn.Conv2d):
            total += per_out * (mod.in_channels // mod.groups) * mod.kernel_size[0] * mod.kernel_size[1]
        elif isinstance(mod, nn.Linear):
            total += per_out * mod.in_features

    handles = [m.register_forward_hook(hook) for m in model.modules() if isinstance(m, (nn.Conv2d, nn.Linear))]
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(torch.zeros(1, *input_shape))
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    return total


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def complexity_report(spec: ModelSpec, reference_resolution=(512, 384)) -> ComplexityReport:
    """GFLOPs (counted as multiply-accumulates) and parameter counts.

    ``gflops`` is the 1000-class network at 224x224 and ``parameter_count``
    its feature extractor without the classifier, which is how the published
    comparison tables count them. The ``regression_*`` fields describe the
    actual regression model at ``reference_resolution`` (width, height).
    """
    with _seeded(_generator(0)):
        clf, _ = _create_backbone(spec.architecture, 0.0, num_classes=1000)
    h, w = FLOP_RESOLUTION
    gmacs = count_macs(clf, (3, h, w)) / 1e9
    with_clf = count_parameters(clf)
    if hasattr(clf, "reset_classifier"):
        clf.reset_classifier(0)
    else:
        clf.fc = nn.Identity()
    headless = count_parameters(clf)
    del clf

    reg = build_model(ModelSpec(spec.architecture, "none", spec.stochastic_depth_rate), 0)
    rw, rh = reference_resolution
    return ComplexityReport(
        gflops=gmacs,
        parameter_count=headless,
        parameters_with_classifier=with_clf,
        regression_gflops=count_macs(reg, (3, rh, rw)) / 1e9,
        regression_parameter_count=count_parameters(reg),
    )


def layer_groups(model: RegressionModel) -> list[list[nn.Parameter]]:
    """Parameter groups ordered input -> output: backbone children, then the head."""
    groups = []
    for child in model.backbone.children():
        params = [p for p in child.parameters() if p.requires_grad]
        if params:
            groups.append(params)
    groups.append(list(model.head.parameters()))
    return groups


def model_checksums(model: RegressionModel) -> tuple[str, str]:
    """(backbone, head) content hashes."""
    return state_checksum(model.backbone.state_dict()), state_checksum(model.head.state_dict())


def predict(model: RegressionModel, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Predictions for already normalised ``(N, H, W, 3)`` images."""
    model.eval()
    out = []
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = torch.from_numpy(np.ascontiguousarray(images[i:i + batch_size].transpose(0, 3, 1, 2))).to(dtype)
            out.append(model(x).reshape(-1).double().numpy())
    return np.concatenate(out) if out else np.zeros(0)
