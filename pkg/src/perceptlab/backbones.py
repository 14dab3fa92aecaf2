"""Feature extractors that turn an image into a stage-indexed feature pyramid.

Every backbone returns ``[x, h1, ..., hm]``: stage 0 is the raw input and
stages 1..m are the tapped activations listed in :data:`ARCHITECTURES`.

Tap points per architecture:

* ``tiny``: two 3x3 conv + ReLU per stage, stride-2 entry for stages 2-3.
  Channels 16/32/64 at strides 1/2/4.
* ``vgg16``: relu1_2, relu2_2, relu3_3, relu4_3, relu5_3 with the max pools
  replaced by Hanning-windowed L2 pooling.
* ``resnet50``: stem ReLU, layer1, layer2, layer3, layer4.

Weight containers are ``.npz`` archives holding one little-endian array per
parameter name (``<f4`` or ``<f8``; see :func:`save_weights`).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (
    DTYPE,
    ConfigurationError,
    DimensionError,
    FeaturePyramid,
    RegistryError,
    RngSeed,
    as_tensor,
)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

WEIGHT_SOURCES = ("builtin-tiny", "builtin-random-fixed", "file")
RANDOM_FIXED_STD = 0.02


# --------------------------------------------------------------------------
# Weight container
# --------------------------------------------------------------------------


def save_weights(path, tensors: Mapping[str, object]) -> Path:
    """Write a flat name -> array container.

    Floating arrays keep their precision (``<f4`` or ``<f8``) so a save/load
    round trip is bit-exact; everything is stored little-endian.
    """
    path = Path(path)
    arrays = {}
    for name, value in tensors.items():
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        if arr.dtype.kind == "f":
            arr = arr.astype("<f8" if arr.dtype.itemsize == 8 else "<f4")
        elif arr.dtype.kind in "iub":
            arr = arr.astype("<i8")
        else:
            raise TypeError(f"unsupported dtype {arr.dtype} for {name!r}")
        arrays[name] = arr
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_weights(path) -> dict[str, torch.Tensor]:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"weight file not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        return {k: torch.from_numpy(np.array(data[k])) for k in data.files}


def weights_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# Architectures
# --------------------------------------------------------------------------


class L2Pool(nn.Module):
    """Hanning-windowed L2 pooling with stride 2."""

    def __init__(self, channels: int):
        super().__init__()
        a = torch.hann_window(5, periodic=False, dtype=DTYPE)[1:-1]
        g = a[:, None] * a[None, :]
        g = g / g.sum()
        self.register_buffer("filter", g[None, None].repeat(channels, 1, 1, 1), persistent=False)

    def forward(self, x):
        out = F.conv2d(x**2, self.filter.to(x.dtype), stride=2, padding=1, groups=x.shape[1])
        return (out + 1e-12).sqrt()


class FeatureExtractor(nn.Module):
    """Runs the stages and returns the list of taps, stage 0 first."""

    def __init__(self, stages, layout, min_size, key_prefixes=None, strip=()):
        super().__init__()
        self.stages = nn.ModuleList(stages)
        self.layout = tuple(layout)
        self.min_size = min_size
        self._key_prefixes = dict(key_prefixes or {})
        self._strip = tuple(strip)
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN, dtype=DTYPE).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(IMAGENET_STD, dtype=DTYPE).view(1, 3, 1, 1), persistent=False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.ndim != 4:
            raise DimensionError(f"expected (N, C, H, W), got {tuple(x.shape)}")
        if min(x.shape[-2:]) < self.min_size:
            raise DimensionError(
                f"input {x.shape[-2]}x{x.shape[-1]} is below the minimum size {self.min_size}"
            )
        h = x if x.shape[1] == 3 else x.expand(-1, 3, -1, -1)
        h = (h - self.mean) / self.std
        taps = [x]
        for stage in self.stages:
            h = stage(h)
            taps.append(h)
        return taps

    def load_container(self, tensors: Mapping[str, torch.Tensor]):
        """Load weights, accepting either native keys or the upstream
        torchvision naming for the VGG/ResNet builds."""
        own = self.state_dict()
        mapped = {}
        for key, value in tensors.items():
            k = key
            for prefix in self._strip:
                if k.startswith(prefix):
                    k = k[len(prefix):]
            if key in own:
                k = key
            elif k.split(".")[0] in self._key_prefixes:
                k = f"stages.{self._key_prefixes[k.split('.')[0]]}.{k}"
            if k in own:
                mapped[k] = value
        missing = sorted(set(own) - set(mapped))
        if missing:
            raise ConfigurationError(
                f"weight container does not match the architecture; missing {missing[:5]}"
                + (" ..." if len(missing) > 5 else "")
            )
        for k, v in mapped.items():
            if tuple(v.shape) != tuple(own[k].shape):
                raise ConfigurationError(
                    f"shape mismatch for {k}: {tuple(v.shape)} vs {tuple(own[k].shape)}"
                )
        self.load_state_dict({k: v.to(own[k].dtype) for k, v in mapped.items()})
        return self


def _conv(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


def _build_tiny():
    widths = (16, 32, 64)
    stages, cin = [], 3
    for i, c in enumerate(widths):
        stages.append(
            nn.Sequential(_conv(cin, c, 1 if i == 0 else 2), nn.ReLU(), _conv(c, c), nn.ReLU())
        )
        cin = c
    return FeatureExtractor(stages, [(16, 1), (32, 2), (64, 4)], min_size=8)


def _build_vgg16():
    from torchvision.models.vgg import cfgs, make_layers

    features = make_layers(cfgs["D"])
    bounds = [(0, 4), (4, 9), (9, 16), (16, 23), (23, 30)]
    channels = (64, 128, 256, 512, 512)
    stages, prefixes = [], {}
    for s, (lo, hi) in enumerate(bounds):
        seq = nn.Sequential()
        for i in range(lo, hi):
            layer = features[i]
            if isinstance(layer, nn.MaxPool2d):
                layer = L2Pool(channels[s - 1])
            seq.add_module(str(i), layer)
            prefixes[str(i)] = s
        stages.append(seq)
    layout = [(c, 2**s) for s, c in enumerate(channels)]
    return FeatureExtractor(stages, layout, min_size=32, key_prefixes=prefixes, strip=("features.",))


def _build_resnet50():
    from torchvision.models import resnet50

    net = resnet50(weights=None)
    groups = [("conv1", "bn1", "relu"), ("maxpool", "layer1"), ("layer2",), ("layer3",), ("layer4",)]
    stages, prefixes = [], {}
    for s, names in enumerate(groups):
        seq = nn.Sequential()
        for n in names:
            seq.add_module(n, getattr(net, n))
            prefixes[n] = s
        stages.append(seq)
    layout = [(64, 2), (256, 4), (512, 8), (1024, 16), (2048, 32)]
    return FeatureExtractor(stages, layout, min_size=64, key_prefixes=prefixes)


@dataclass(frozen=True)
class Architecture:
    build: Callable[[], FeatureExtractor]
    layout: tuple
    min_size: int


ARCHITECTURES = {
    "tiny": Architecture(_build_tiny, ((16, 1), (32, 2), (64, 4)), 8),
    "vgg16": Architecture(
        _build_vgg16, ((64, 1), (128, 2), (256, 4), (512, 8), (512, 16)), 32
    ),
    "resnet50": Architecture(
        _build_resnet50, ((64, 2), (256, 4), (512, 8), (1024, 16), (2048, 32)), 64
    ),
}


# --------------------------------------------------------------------------
# Specs and registry
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BackboneSpec:
    """How to build a backbone: architecture, where its weights come from,
    and whether it is frozen.

    ``stage_layout`` lists ``(channels, stride)`` for stages 1..m and is
    derived from the architecture when omitted.
    """

    name: str
    arch: str = "tiny"
    weight_source: str = "builtin-tiny"
    weight_path: str | None = None
    seed: int = 0
    frozen: bool = True
    stage_layout: tuple | None = None

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ConfigurationError(f"unknown architecture {self.arch!r}")
        if self.weight_source not in WEIGHT_SOURCES:
            raise ConfigurationError(f"unknown weight source {self.weight_source!r}")
        if self.weight_source == "file" and not self.weight_path:
            raise ConfigurationError(f"backbone {self.name!r}: file source needs weight_path")
        if self.weight_source == "builtin-tiny" and self.arch != "tiny":
            raise ConfigurationError("builtin-tiny weights only exist for the tiny architecture")
        expected = ARCHITECTURES[self.arch].layout
        if self.stage_layout is None:
            object.__setattr__(self, "stage_layout", expected)
        else:
            layout = tuple(tuple(int(v) for v in s) for s in self.stage_layout)
            if layout != expected:
                raise ConfigurationError(
                    f"stage_layout {layout} does not match {self.arch} layout {expected}"
                )
            object.__setattr__(self, "stage_layout", layout)

    @property
    def min_size(self) -> int:
        return ARCHITECTURES[self.arch].min_size

    @property
    def channel_counts(self) -> list[int]:
        """Channels for stages 0..m, assuming an RGB input."""
        return [3] + [c for c, _ in self.stage_layout]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "arch": self.arch,
            "weight_source": self.weight_source,
            "weight_path": self.weight_path,
            "seed": self.seed,
            "frozen": self.frozen,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "BackboneSpec":
        return cls(
            name=d["name"],
            arch=d.get("arch", "tiny"),
            weight_source=d.get("weight_source", "builtin-tiny"),
            weight_path=d.get("weight_path"),
            seed=int(d.get("seed", 0)),
            frozen=bool(d.get("frozen", True)),
        )


def _init_builtin_tiny(module: nn.Module, seed: int):
    gen = RngSeed(seed).torch("builtin-tiny")
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu", generator=gen)
            nn.init.zeros_(m.bias)


def _init_random_fixed(module: nn.Module, seed: int):
    gen = RngSeed(seed).torch("random-fixed")
    s = RANDOM_FIXED_STD
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.trunc_normal_(m.weight, 0.0, s, -2 * s, 2 * s, generator=gen)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_backbone(spec: BackboneSpec) -> FeatureExtractor:
    """Instantiate a fresh backbone module for ``spec``.

    File-backed weights are read here, so a missing file surfaces at
    extraction time rather than at registration.
    """
    module = ARCHITECTURES[spec.arch].build().to(DTYPE)
    if spec.weight_source == "builtin-tiny":
        _init_builtin_tiny(module, spec.seed)
    elif spec.weight_source == "builtin-random-fixed":
        _init_random_fixed(module, spec.seed)
    else:
        module.load_container(load_weights(spec.weight_path))
    if spec.frozen:
        module.eval()
        module.requires_grad_(False)
    return module


_FROZEN_CACHE: dict = {}


def _cached(spec: BackboneSpec) -> FeatureExtractor:
    if spec not in _FROZEN_CACHE:
        if len(_FROZEN_CACHE) > 16:
            _FROZEN_CACHE.clear()
        _FROZEN_CACHE[spec] = build_backbone(replace(spec, frozen=True))
    return _FROZEN_CACHE[spec]


def extract_features(spec: BackboneSpec, img) -> FeaturePyramid:
    """Feature pyramid of a single (C, H, W) image under ``spec``."""
    x = as_tensor(img)
    if x.ndim != 3:
        raise DimensionError(f"expected a (C, H, W) image, got {tuple(x.shape)}")
    with torch.no_grad():
        taps = _cached(spec)(x[None])
    return FeaturePyramid(tuple(t[0] for t in taps))


@dataclass
class BackboneRegistry:
    """Name -> spec mapping. ``tiny`` and ``tiny-random`` are always present."""

    _specs: dict = field(default_factory=dict)

    def __post_init__(self):
        for spec in builtin_specs():
            self._specs.setdefault(spec.name, spec)

    def register(self, spec: BackboneSpec) -> BackboneSpec:
        if spec.name in self._specs:
            raise RegistryError(f"backbone {spec.name!r} is already registered")
        self._specs[spec.name] = spec
        return spec

    def get(self, name: str) -> BackboneSpec:
        try:
            return self._specs[name]
        except KeyError:
            raise RegistryError(f"unknown backbone {name!r}") from None

    def __contains__(self, name) -> bool:
        return name in self._specs

    def names(self) -> list[str]:
        return sorted(self._specs)


def builtin_specs() -> list[BackboneSpec]:
    return [
        BackboneSpec("tiny"),
        BackboneSpec("tiny-random", weight_source="builtin-random-fixed"),
        BackboneSpec("vgg16-r", arch="vgg16", weight_source="builtin-random-fixed"),
    ]


REGISTRY = BackboneRegistry()


def register_backbone(spec: BackboneSpec, registry: BackboneRegistry | None = None) -> BackboneSpec:
    return (registry or REGISTRY).register(spec)
