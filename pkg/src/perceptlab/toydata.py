"""Synthetic image sets for smoke runs: SR references, FR and NR IQA manifests."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .core import DTYPE, RngSeed, write_png


def toy_image(rng: np.random.Generator, size: int = 32) -> torch.Tensor:
    """Smooth colour field plus a few oriented gratings and a hard edge."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.empty((3, size, size))
    for c in range(3):
        field = rng.uniform(0.3, 0.7) + rng.uniform(-0.2, 0.2) * xx + rng.uniform(-0.2, 0.2) * yy
        for _ in range(3):
            theta = rng.uniform(0, np.pi)
            freq = rng.uniform(1.0, 6.0)
            phase = rng.uniform(0, 2 * np.pi)
            field += rng.uniform(0.03, 0.12) * np.sin(
                2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase
            )
        img[c] = field
    angle = rng.uniform(0, np.pi)
    mask = (np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5)) > rng.uniform(-0.2, 0.2)
    img += rng.uniform(-0.15, 0.15, size=(3, 1, 1)) * mask
    return torch.from_numpy(np.clip(img, 0.0, 1.0)).to(DTYPE)


def distort(img: torch.Tensor, kind: str, level: float, rng: np.random.Generator) -> torch.Tensor:
    """Apply ``noise``, ``blur`` or ``contrast`` degradation at ``level`` in [0, 1]."""
    if kind == "noise":
        out = img + torch.from_numpy(rng.normal(0, 0.25 * level, size=img.shape)).to(img)
    elif kind == "blur":
        sigma = 0.3 + 2.5 * level
        r = int(np.ceil(3 * sigma))
        k = torch.exp(-(torch.arange(-r, r + 1, dtype=DTYPE) ** 2) / (2 * sigma**2))
        k = (k / k.sum()).to(img)
        c = img.shape[0]
        x = F.pad(img[None], (r, r, r, r), mode="replicate")
        x = F.conv2d(x, k.view(1, 1, 1, -1).repeat(c, 1, 1, 1), groups=c)
        out = F.conv2d(x, k.view(1, 1, -1, 1).repeat(c, 1, 1, 1), groups=c)[0]
    elif kind == "contrast":
        mean = img.mean(dim=(-2, -1), keepdim=True)
        out = mean + (1 - 0.8 * level) * (img - mean)
    else:
        raise ValueError(f"unknown distortion {kind!r}")
    return out.clamp(0.0, 1.0)


DISTORTIONS = ("noise", "blur", "contrast")


def make_sr_toy(out_dir, n_train: int = 8, n_val: int = 4, size: int = 32, seed: int = 0) -> Path:
    """Write ``train/`` and ``val/`` PNG references."""
    out = Path(out_dir)
    rng = RngSeed(seed).numpy("toy-sr")
    for split, n in (("train", n_train), ("val", n_val)):
        (out / split).mkdir(parents=True, exist_ok=True)
        for i in range(n):
            write_png(out / split / f"{i:04d}.png", toy_image(rng, size))
    return out


def _mos(level: float, rng) -> float:
    return float(np.clip(90.0 - 70.0 * level + rng.normal(0, 2.0), 1.0, 100.0))


def make_fr_toy(out_dir, n_refs: int = 4, levels=(0.15, 0.4, 0.7, 1.0), size: int = 32, seed: int = 0) -> Path:
    """References plus distortions and a ``distorted_path,reference_path,mos`` manifest."""
    out = Path(out_dir)
    (out / "ref").mkdir(parents=True, exist_ok=True)
    (out / "dist").mkdir(parents=True, exist_ok=True)
    rng = RngSeed(seed).numpy("toy-fr")
    rows = []
    for i in range(n_refs):
        ref = toy_image(rng, size)
        ref_path = Path("ref") / f"{i:03d}.png"
        write_png(out / ref_path, ref)
        for kind in DISTORTIONS:
            for j, level in enumerate(levels):
                dist_path = Path("dist") / f"{i:03d}_{kind}_{j}.png"
                write_png(out / dist_path, distort(ref, kind, level, rng))
                rows.append((dist_path.as_posix(), ref_path.as_posix(), _mos(level, rng)))
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("distorted_path", "reference_path", "mos"))
        writer.writerows((d, r, f"{m:.4f}") for d, r, m in rows)
    return manifest


def make_nr_toy(out_dir, n: int = 60, size: int = 32, seed: int = 0) -> Path:
    """Distorted images and an ``image_path,mos`` manifest."""
    out = Path(out_dir)
    (out / "img").mkdir(parents=True, exist_ok=True)
    rng = RngSeed(seed).numpy("toy-nr")
    rows = []
    for i in range(n):
        level = float(rng.uniform(0, 1))
        kind = DISTORTIONS[i % len(DISTORTIONS)]
        img = distort(toy_image(rng, size), kind, level, rng)
        path = Path("img") / f"{i:04d}.png"
        write_png(out / path, img)
        rows.append((path.as_posix(), _mos(level, rng)))
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("image_path", "mos"))
        writer.writerows((p, f"{m:.4f}") for p, m in rows)
    return manifest
