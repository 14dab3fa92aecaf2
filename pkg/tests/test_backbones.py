import numpy as np
import pytest
import torch

from perceptlab.backbones import (
    ARCHITECTURES,
    REGISTRY,
    BackboneRegistry,
    BackboneSpec,
    build_backbone,
    extract_features,
    load_weights,
    register_backbone,
    save_weights,
    weights_hash,
)
from perceptlab.core import DTYPE, ConfigurationError, DimensionError, RegistryError
from perceptlab.perceptual import MetricSchedule, PerceptualMetric, train_metric

from conftest import random_image, random_pair


def test_tiny_pyramid_shapes(tiny_spec, rng):
    img = random_image(rng, 64)
    pyr = extract_features(tiny_spec, img)
    assert pyr.depth == 3
    assert pyr.channel_counts == [3, 16, 32, 64]
    assert [tuple(s.shape[-2:]) for s in pyr.stages] == [(64, 64), (64, 64), (32, 32), (16, 16)]
    assert tiny_spec.channel_counts == pyr.channel_counts


def test_stage_zero_is_the_input(tiny_spec, rng):
    img = random_image(rng, 32)
    assert torch.equal(extract_features(tiny_spec, img).stages[0], img)


def test_extraction_is_deterministic(tiny_spec, rng):
    img = random_image(rng, 32)
    a = extract_features(tiny_spec, img)
    b = extract_features(BackboneSpec("tiny"), img.clone())
    assert all(torch.equal(x, y) for x, y in zip(a.stages, b.stages))


def test_random_fixed_seeds_differ(rng):
    img = random_image(rng, 32)
    s0 = BackboneSpec("r0", weight_source="builtin-random-fixed", seed=0)
    s1 = BackboneSpec("r1", weight_source="builtin-random-fixed", seed=1)
    assert not torch.equal(extract_features(s0, img).stages[1], extract_features(s1, img).stages[1])


def test_random_fixed_is_truncated_normal():
    module = build_backbone(BackboneSpec("r", weight_source="builtin-random-fixed"))
    w = torch.cat([p.flatten() for n, p in module.named_parameters() if n.endswith("weight")])
    assert w.abs().max() <= 0.04 + 1e-12
    assert abs(float(w.std()) - 0.02) < 0.005


def test_undersized_input_raises(tiny_spec):
    with pytest.raises(DimensionError):
        extract_features(tiny_spec, torch.rand(3, 4, 4, dtype=DTYPE))


def test_grayscale_input_keeps_raw_stage_zero(tiny_spec, rng):
    img = random_image(rng, 16, channels=1)
    pyr = extract_features(tiny_spec, img)
    assert pyr.stages[0].shape[0] == 1 and pyr.channel_counts[1:] == [16, 32, 64]


def test_registry_builtins_and_duplicates():
    reg = BackboneRegistry()
    assert "tiny" in reg and "tiny-random" in reg
    assert reg.get("tiny") == BackboneSpec("tiny")
    with pytest.raises(RegistryError):
        reg.register(BackboneSpec("tiny"))
    with pytest.raises(RegistryError):
        reg.get("missing")


def test_register_into_explicit_registry():
    reg = BackboneRegistry()
    spec = register_backbone(BackboneSpec("mine", weight_source="builtin-random-fixed", seed=5), reg)
    assert reg.get("mine") is spec
    assert "mine" not in REGISTRY


def test_missing_file_surfaces_at_extract_time(tmp_path, rng):
    reg = BackboneRegistry()
    spec = BackboneSpec("ghost", weight_source="file", weight_path=str(tmp_path / "absent.npz"))
    reg.register(spec)
    with pytest.raises(ConfigurationError):
        extract_features(spec, random_image(rng, 32))


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        BackboneSpec("x", arch="nope")
    with pytest.raises(ConfigurationError):
        BackboneSpec("x", weight_source="file")
    with pytest.raises(ConfigurationError):
        BackboneSpec("x", stage_layout=((8, 1),))
    with pytest.raises(ConfigurationError):
        BackboneSpec("x", arch="vgg16", weight_source="builtin-tiny")


def test_spec_dict_round_trip():
    spec = BackboneSpec("a", weight_source="builtin-random-fixed", seed=3, frozen=False)
    assert BackboneSpec.from_dict(spec.to_dict()) == spec


def test_weight_container_round_trip_is_bit_exact(tmp_path, tiny_spec):
    module = build_backbone(tiny_spec)
    state = module.state_dict()
    save_weights(tmp_path / "w.npz", state)
    back = load_weights(tmp_path / "w.npz")
    assert set(back) == set(state)
    assert all(torch.equal(back[k], state[k]) and back[k].dtype == state[k].dtype for k in state)


def test_file_backed_spec_reproduces_features(tmp_path, tiny_spec, rng):
    save_weights(tmp_path / "w.npz", build_backbone(tiny_spec).state_dict())
    file_spec = BackboneSpec("f", weight_source="file", weight_path=str(tmp_path / "w.npz"))
    img = random_image(rng, 32)
    a = extract_features(tiny_spec, img)
    b = extract_features(file_spec, img)
    assert all(torch.equal(x, y) for x, y in zip(a.stages, b.stages))


def test_container_accepts_torchvision_names():
    from torchvision.models.vgg import cfgs, make_layers

    ref = make_layers(cfgs["D"]).to(DTYPE)
    tensors = {f"features.{k}": v for k, v in ref.state_dict().items()}
    module = ARCHITECTURES["vgg16"].build().to(DTYPE)
    module.load_container(tensors)
    conv = next(m for m in module.modules() if isinstance(m, torch.nn.Conv2d))
    assert torch.equal(conv.weight, ref[0].weight)


def test_container_rejects_wrong_architecture(tmp_path, tiny_spec):
    module = ARCHITECTURES["tiny"].build().to(DTYPE)
    state = {k: v for k, v in module.state_dict().items()}
    state.pop(next(iter(state)))
    with pytest.raises(ConfigurationError):
        module.load_container(state)


def test_vgg16_layout():
    spec = BackboneSpec("v", arch="vgg16", weight_source="builtin-random-fixed")
    assert spec.channel_counts == [3, 64, 128, 256, 512, 512]


def test_frozen_backbone_unchanged_by_metric_training(tiny_spec, rng):
    metric = PerceptualMetric(tiny_spec)
    before = weights_hash(metric.backbone)
    data = [(random_pair(rng, 16), float(rng.uniform(0, 1))) for _ in range(12)]
    train_metric(metric, data, MetricSchedule(iterations=100, lr=1e-3, batch_size=8))
    assert weights_hash(metric.backbone) == before
    assert all(not p.requires_grad for p in metric.backbone.parameters())


def test_weights_hash_changes_with_weights(tiny_spec):
    a = build_backbone(tiny_spec)
    b = build_backbone(BackboneSpec("t2", seed=1))
    assert weights_hash(a) != weights_hash(b)
    assert np.isscalar(weights_hash(a)) or isinstance(weights_hash(a), str)
