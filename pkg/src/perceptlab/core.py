"""Shared data model, errors and deterministic numeric helpers."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image

DTYPE = torch.float64
BICUBIC_A = -0.5


class PerceptLabError(Exception):
    """Base class for all library errors."""


class DimensionError(PerceptLabError, ValueError):
    pass


class DomainError(PerceptLabError, ValueError):
    pass


class ConfigurationError(PerceptLabError, ValueError):
    pass


class RegistryError(PerceptLabError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class DegenerateWeightsError(PerceptLabError, ValueError):
    pass


class DivergenceError(PerceptLabError, RuntimeError):
    """Raised when a loss becomes NaN or explodes during training.

    ``last_good`` carries whatever state the caller can resume from.
    """

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class DataIOError(PerceptLabError, OSError):
    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = list(missing)

    def __str__(self):
        return self.args[0]


# --------------------------------------------------------------------------
# Domain types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ImageTensor:
    """A channel-major image with values in [0, 1]."""

    data: torch.Tensor
    value_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        data = torch.as_tensor(self.data, dtype=DTYPE)
        if data.ndim != 3:
            raise DimensionError(f"expected (C, H, W), got shape {tuple(data.shape)}")
        if data.shape[0] not in (1, 3):
            raise DimensionError(f"channels must be 1 or 3, got {data.shape[0]}")
        if not torch.isfinite(data).all():
            raise DomainError("image contains non-finite values")
        if data.numel() and (data.min() < 0 or data.max() > 1):
            raise DomainError("image values must lie in [0, 1]")
        object.__setattr__(self, "data", data)

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class PairedSample:
    generated: ImageTensor
    reference: ImageTensor

    def __post_init__(self):
        if self.generated.shape != self.reference.shape:
            raise DimensionError(
                f"pair shapes differ: {self.generated.shape} vs {self.reference.shape}"
            )


@dataclass(frozen=True)
class FeaturePyramid:
    """Per-stage feature maps; stage 0 is the raw image."""

    stages: tuple

    def __post_init__(self):
        stages = tuple(self.stages)
        if not stages:
            raise DimensionError("a feature pyramid needs at least stage 0")
        for prev, cur in zip(stages, stages[1:]):
            if cur.shape[-2] > prev.shape[-2] or cur.shape[-1] > prev.shape[-1]:
                raise DimensionError("stage spatial size must not grow")
        object.__setattr__(self, "stages", stages)

    @property
    def depth(self) -> int:
        """Number of backbone stages m (stage 0 excluded)."""
        return len(self.stages) - 1

    @property
    def channel_counts(self) -> list[int]:
        return [s.shape[-3] for s in self.stages]


@dataclass(frozen=True)
class ScoreRecord:
    item_id: str
    raw_score: float
    mos: float | None = None

    def __post_init__(self):
        if not math.isfinite(self.raw_score):
            raise DomainError(f"raw_score for {self.item_id!r} is not finite")


@dataclass(frozen=True)
class RngSeed:
    """Experiment seed; every stochastic component draws a named substream."""

    seed: int = 0

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise DomainError("seed must be a 64-bit unsigned integer")

    def _entropy(self, name: str) -> list[int]:
        digest = hashlib.sha256(name.encode("utf-8")).digest()
        return [int(self.seed), int.from_bytes(digest[:8], "little")]

    def numpy(self, name: str, *extra: int) -> np.random.Generator:
        return np.random.default_rng(self._entropy(name) + [int(e) for e in extra])

    def torch(self, name: str, *extra: int) -> torch.Generator:
        seed = int(self.numpy(name, *extra).integers(0, 2**63 - 1))
        return torch.Generator().manual_seed(seed)


def as_tensor(img) -> torch.Tensor:
    """Return the underlying float64 tensor of an image-like input."""
    if isinstance(img, ImageTensor):
        return img.data
    return torch.as_tensor(img, dtype=DTYPE)


# --------------------------------------------------------------------------
# Bicubic resampling
# --------------------------------------------------------------------------


def cubic_kernel(x, a: float = BICUBIC_A):
    """Keys cubic convolution kernel."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    inner = (a + 2) * x3 - (a + 3) * x2 + 1
    outer = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, inner, np.where(x < 2, outer, 0.0))


def bicubic_weights(in_size: int, factor: int, a: float = BICUBIC_A) -> np.ndarray:
    """(in_size // factor, in_size) resampling matrix for antialiased downscaling.

    The kernel is stretched by ``factor``; out-of-range taps are replicated
    from the nearest edge sample.
    """
    out_size = in_size // factor
    support = 2 * factor
    weights = np.zeros((out_size, in_size))
    for o in range(out_size):
        center = (o + 0.5) * factor - 0.5
        taps = np.arange(math.floor(center - support) + 1, math.ceil(center + support))
        w = cubic_kernel((center - taps) / factor, a)
        w /= w.sum()
        np.add.at(weights[o], np.clip(taps, 0, in_size - 1), w)
    return weights


def bicubic_downsample(img, factor: int):
    """Downscale an image by an integer factor with an a = -0.5 bicubic kernel.

    Accepts an :class:`ImageTensor` or a tensor of shape (..., H, W); the
    result has the same kind and is clamped to [0, 1].
    """
    if int(factor) != factor or factor < 1:
        raise DomainError(f"factor must be a positive integer, got {factor}")
    factor = int(factor)
    data = as_tensor(img)
    h, w = data.shape[-2:]
    if h % factor or w % factor:
        raise DimensionError(f"image size {h}x{w} is not divisible by {factor}")
    wh = torch.from_numpy(bicubic_weights(h, factor)).to(data)
    ww = torch.from_numpy(bicubic_weights(w, factor)).to(data)
    out = (wh @ data @ ww.T).clamp(0.0, 1.0)
    if isinstance(img, ImageTensor):
        return ImageTensor(out)
    return out


# --------------------------------------------------------------------------
# Channel moments
# --------------------------------------------------------------------------


def _channel(stage, j: int) -> torch.Tensor:
    stage = torch.as_tensor(stage, dtype=DTYPE)
    if stage.ndim < 1 or not 0 <= j < stage.shape[0]:
        raise DomainError(f"channel {j} does not exist")
    return stage[j].reshape(-1)


def channel_stats(stage, j: int) -> tuple[float, float]:
    """Mean and population variance of channel ``j`` over all positions."""
    c = _channel(stage, j)
    if c.numel() == 0:
        raise DomainError("empty channel")
    mean = c.mean()
    return float(mean), float(((c - mean) ** 2).mean())


def channel_cov(a, b) -> float:
    a = torch.as_tensor(a, dtype=DTYPE)
    b = torch.as_tensor(b, dtype=DTYPE)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.numel() == 0:
        raise DomainError("empty channel")
    a, b = a.reshape(-1), b.reshape(-1)
    return float(((a - a.mean()) * (b - b.mean())).mean())


# --------------------------------------------------------------------------
# I/O
# --------------------------------------------------------------------------


def read_png(path) -> ImageTensor:
    path = Path(path)
    try:
        with Image.open(path) as im:
            mode = "L" if im.mode in ("L", "I", "I;16", "1") else "RGB"
            arr = np.asarray(im.convert(mode), dtype=np.float64) / 255.0
    except (FileNotFoundError, OSError) as exc:
        raise DataIOError(f"cannot read image {path}: {exc}", missing=[str(path)]) from exc
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return ImageTensor(torch.from_numpy(np.ascontiguousarray(arr)))


def write_png(path, img) -> Path:
    path = Path(path)
    data = as_tensor(img).detach().clamp(0, 1).cpu().numpy()
    arr = np.rint(data * 255.0).astype(np.uint8)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path)
    else:
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)
    return path


SCORE_FIELDS = ("item_id", "raw_score", "mos")


def read_score_manifest(path) -> list[ScoreRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SCORE_FIELDS:
            raise DataIOError(f"{path}: expected header {','.join(SCORE_FIELDS)}")
        for row in reader:
            mos = row["mos"].strip()
            records.append(
                ScoreRecord(row["item_id"], float(row["raw_score"]), float(mos) if mos else None)
            )
    return records


def write_score_manifest(path, records: Iterable[ScoreRecord]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SCORE_FIELDS)
        for r in records:
            writer.writerow([r.item_id, repr(float(r.raw_score)), "" if r.mos is None else repr(float(r.mos))])
    return path


def stack_images(images: Sequence) -> torch.Tensor:
    """Stack images into an (N, C, H, W) batch."""
    tensors = [as_tensor(im) for im in images]
    if not tensors:
        raise DimensionError("cannot stack an empty image list")
    shapes = {tuple(t.shape) for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"images have differing shapes: {sorted(shapes)}")
    return torch.stack(tensors)
