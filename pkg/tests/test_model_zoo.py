import numpy as np
import pytest
import torch

from sludgevision.errors import PretrainedUnavailableError, ValidationError
from sludgevision.model_zoo import (
    ModelSpec,
    _create_backbone,
    build_model,
    checkpoint_path,
    complexity_report,
    count_macs,
    load_pretrained_state,
    model_checksums,
    record_checkpoint,
    reinit_head,
    state_checksum,
    strip_classifier,
)


def seed_cache(cache, arch, source, seed=123):
    """Write a stand-in 'published' checkpoint (with classifier) and lock it."""
    torch.manual_seed(seed)
    net, _ = _create_backbone(arch, 0.0, num_classes=1000)
    cache.mkdir(parents=True, exist_ok=True)
    path = checkpoint_path(arch, source, cache)
    torch.save(net.state_dict(), path)
    record_checkpoint(path, cache)
    return net.state_dict()


@pytest.fixture
def cache(tmp_path, monkeypatch):
    d = tmp_path / "cache"
    monkeypatch.setenv("SLUDGEVISION_CACHE", str(d))
    return d


def test_resnet18_pretrained_forward(cache):
    published = seed_cache(cache, "resnet18", "imagenet_1k")
    model = build_model(ModelSpec("resnet18", "imagenet_1k"), 0)
    expected = strip_classifier("resnet18", published)
    assert state_checksum(model.backbone.state_dict()) == state_checksum(expected)
    model.eval()
    with torch.no_grad():
        out = model(torch.randn(4, 3, 384, 512))
    assert out.shape == (4, 1)
    assert torch.isfinite(out).all()


def test_convnext_nano_pretrained_deterministic(cache):
    seed_cache(cache, "convnext_nano", "imagenet_1k")
    a = build_model(ModelSpec("convnext_nano", "imagenet_1k"), 5)
    b = build_model(ModelSpec("convnext_nano", "imagenet_1k"), 5)
    assert model_checksums(a) == model_checksums(b)
    c = build_model(ModelSpec("convnext_nano", "imagenet_1k"), 6)
    assert model_checksums(a)[0] == model_checksums(c)[0]
    assert model_checksums(a)[1] != model_checksums(c)[1]


def test_tiny_cnn_forward():
    model = build_model(ModelSpec("tiny_cnn"), 0).eval()
    with torch.no_grad():
        out = model(torch.randn(3, 3, 96, 128))
    assert out.shape == (3, 1) and torch.isfinite(out).all()


def test_tfs_build_deterministic():
    assert model_checksums(build_model(ModelSpec("tiny_cnn"), 1)) == model_checksums(build_model(ModelSpec("tiny_cnn"), 1))
    assert model_checksums(build_model(ModelSpec("tiny_cnn"), 1)) != model_checksums(build_model(ModelSpec("tiny_cnn"), 2))


def test_inception_resizes_input():
    model = build_model(ModelSpec("inception_v3"), 0).eval()
    with torch.no_grad():
        out = model(torch.randn(2, 3, 96, 128))
    assert out.shape == (2, 1)


@pytest.mark.parametrize("arch", ["resnet18", "tiny_cnn"])
def test_head_is_single_output(arch):
    assert build_model(ModelSpec(arch), 0).head.out_features == 1


def test_lockfile_mismatch(cache):
    seed_cache(cache, "resnet18", "imagenet_1k")
    path = checkpoint_path("resnet18", "imagenet_1k", cache)
    with open(path, "ab") as fh:
        fh.write(b"tamper")
    with pytest.raises(PretrainedUnavailableError, match="hash mismatch"):
        load_pretrained_state("resnet18", "imagenet_1k")


def test_missing_checkpoint_offline(cache):
    with pytest.raises(PretrainedUnavailableError):
        build_model(ModelSpec("resnet18", "imagenet_1k"), 0)
    with pytest.raises(PretrainedUnavailableError):
        load_pretrained_state("resnet18", "imagenet_1k", allow_download=False)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(architecture="vit_b16"),
        dict(architecture="resnet18", pretrained="imagenet_21k"),
        dict(architecture="convnext_s", pretrained="imagenet_1k"),
        dict(architecture="tiny_cnn", pretrained="imagenet_1k"),
        dict(architecture="resnet18", stochastic_depth_rate=1.0),
        dict(architecture="inception_v3", stochastic_depth_rate=0.1),
    ],
)
def test_spec_invariants(kwargs):
    with pytest.raises(ValidationError):
        ModelSpec(**kwargs)


def test_spec_defaults():
    assert ModelSpec("convnext_s", "imagenet_21k").drop_path == 0.1
    assert ModelSpec("convnext_nano").drop_path == 0.1
    assert ModelSpec("resnet152").drop_path == 0.0
    assert ModelSpec.for_mode("convnext_s", "tl").pretrained == "imagenet_21k"
    assert ModelSpec.for_mode("resnet18", "tfs").pretrained == "none"
    with pytest.raises(ValidationError):
        ModelSpec.for_mode("tiny_cnn", "tl")


def test_reinit_head_isolated_and_deterministic():
    model = build_model(ModelSpec("tiny_cnn"), 0)
    backbone_before, head_before = model_checksums(model)
    reinit_head(model, 77)
    h1 = model.head_state()
    reinit_head(model, 77)
    h2 = model.head_state()
    assert all(torch.equal(h1[k], h2[k]) for k in h1)
    backbone_after, head_after = model_checksums(model)
    assert backbone_after == backbone_before
    assert head_after != head_before


def test_warm_start_bias_predicts_mean():
    model = build_model(ModelSpec("tiny_cnn"), 0).eval()
    model.set_target_scaling(200.0, 80.0)
    reinit_head(model, 0, bias=231.5, weight_std=0.0)
    with torch.no_grad():
        out = model(torch.randn(5, 3, 48, 64))
    np.testing.assert_allclose(out.numpy(), 231.5, rtol=1e-6)


def test_no_stochastic_depth_is_deterministic_in_train_mode():
    model = build_model(ModelSpec("resnet18", stochastic_depth_rate=0.0), 0).train()
    x = torch.randn(2, 3, 64, 64)
    assert torch.equal(model(x), model(x))


def test_stochastic_depth_active_in_train_mode():
    model = build_model(ModelSpec("convnext_nano", stochastic_depth_rate=0.5), 0).train()
    x = torch.randn(2, 3, 64, 64)
    torch.manual_seed(0)
    a = model(x)
    b = model(x)
    assert not torch.equal(a, b)
    model.eval()
    assert torch.equal(model(x), model(x))


def test_count_macs_by_hand():
    net = torch.nn.Sequential(torch.nn.Conv2d(3, 8, 3, padding=1), torch.nn.Flatten(), torch.nn.Linear(8 * 4 * 4, 2))
    # conv: 8*4*4 outputs x 3*3*3 MACs; linear: 2 x 128
    assert count_macs(net, (3, 4, 4)) == 8 * 16 * 27 + 2 * 128


def test_complexity_tiny_cnn():
    r = complexity_report(ModelSpec("tiny_cnn"), (128, 96))
    assert 0.05e6 < r.parameter_count < 0.2e6
    assert r.regression_parameter_count == r.parameter_count + 129
    assert r.gflops > 0 and r.regression_gflops > 0
