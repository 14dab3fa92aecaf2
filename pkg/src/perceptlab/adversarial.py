"""Relativistic adversarial losses and vanilla / patch-level discriminators."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbones import (
    ARCHITECTURES,
    BackboneSpec,
    FeatureExtractor,
    build_backbone,
    load_weights,
    save_weights,
)
from .core import (
    DTYPE,
    ConfigurationError,
    DimensionError,
    DivergenceError,
    RngSeed,
    as_tensor,
    stack_images,
)

LOG_EPS = 1e-12
DIVERGENCE_LIMIT = 1e4
HEADS = ("vanilla", "patch")


@dataclass(frozen=True)
class DiscriminatorSpec:
    backbone: BackboneSpec
    head: str = "vanilla"
    patch_grid: tuple | None = None

    def __post_init__(self):
        if self.head not in HEADS:
            raise ConfigurationError(f"unknown discriminator head {self.head!r}")
        if self.head == "patch":
            grid = tuple(int(g) for g in (self.patch_grid or ()))
            if len(grid) != 2 or min(grid) < 1:
                raise ConfigurationError("patch head needs a positive (rows, cols) grid")
            object.__setattr__(self, "patch_grid", grid)
        else:
            object.__setattr__(self, "patch_grid", None)
        if self.backbone.frozen:
            object.__setattr__(self, "backbone", replace(self.backbone, frozen=False))

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone.to_dict(),
            "head": self.head,
            "patch_grid": list(self.patch_grid) if self.patch_grid else None,
        }

    @classmethod
    def from_dict(cls, d) -> "DiscriminatorSpec":
        grid = d.get("patch_grid")
        return cls(BackboneSpec.from_dict(d["backbone"]), d.get("head", "vanilla"),
                   tuple(grid) if grid else None)


@dataclass(frozen=True)
class DiscriminatorOutput:
    logits: torch.Tensor

    def __post_init__(self):
        if not torch.isfinite(self.logits).all():
            raise DivergenceError("discriminator produced non-finite logits")


class Discriminator(nn.Module):
    """Backbone plus a global (vanilla) or per-patch logit head on the last stage."""

    def __init__(self, spec: DiscriminatorSpec, seed: int = 0, backbone: FeatureExtractor | None = None):
        super().__init__()
        self.spec = spec
        self.backbone = backbone if backbone is not None else build_backbone(spec.backbone)
        self.backbone.train()
        self.backbone.requires_grad_(True)
        width = spec.backbone.stage_layout[-1][0]
        if spec.head == "vanilla":
            self.head = nn.Linear(width, 1)
        else:
            self.head = nn.Conv2d(width, 1, 1)
        gen = RngSeed(seed).torch("disc-head")
        bound = 1 / math.sqrt(width)
        with torch.no_grad():
            self.head.weight.uniform_(-bound, bound, generator=gen)
            self.head.bias.zero_()
        self.head.to(DTYPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        final = self.backbone(x)[-1]
        if self.spec.head == "vanilla":
            return self.head(final.mean(dim=(-2, -1))).squeeze(-1)
        rows, cols = self.spec.patch_grid
        if final.shape[-2] < rows or final.shape[-1] < cols:
            raise DimensionError(
                f"final stage {tuple(final.shape[-2:])} is smaller than patch grid {(rows, cols)}"
            )
        return F.adaptive_avg_pool2d(self.head(final), (rows, cols)).squeeze(1)


def build_discriminator(spec: DiscriminatorSpec, seed: int = 0) -> Discriminator:
    return Discriminator(spec, seed)


def discriminate(disc: Discriminator, img) -> DiscriminatorOutput:
    x = as_tensor(img)
    if x.ndim != 3:
        raise DimensionError(f"expected a (C, H, W) image, got {tuple(x.shape)}")
    return DiscriminatorOutput(disc(x[None])[0])


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AdvBatch:
    """Generated images x and real images y, each (N, C, H, W)."""

    generated: torch.Tensor
    real: torch.Tensor

    def __post_init__(self):
        gen, real = self.generated, self.real
        if not isinstance(gen, torch.Tensor):
            gen = stack_images(gen)
        if not isinstance(real, torch.Tensor):
            real = stack_images(real)
        if gen.shape[0] == 0 or real.shape[0] == 0:
            raise DimensionError("adversarial batches must be nonempty")
        if gen.shape[0] != real.shape[0]:
            raise DimensionError(f"batch sizes differ: {gen.shape[0]} vs {real.shape[0]}")
        object.__setattr__(self, "generated", gen)
        object.__setattr__(self, "real", real)


def relativistic_discrepancy(logits_x: torch.Tensor, mean_logit_y) -> torch.Tensor:
    """sigmoid(d(x) - E[d(y)])."""
    return torch.sigmoid(logits_x - mean_logit_y)


def _safe_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp_min(LOG_EPS))


def _check(fake: torch.Tensor, real: torch.Tensor):
    if fake.shape[1:] != real.shape[1:]:
        raise DimensionError(f"logit shapes differ: {tuple(fake.shape)} vs {tuple(real.shape)}")
    if not (torch.isfinite(fake).all() and torch.isfinite(real).all()):
        raise DivergenceError("NaN or infinite discriminator logits")


def generator_loss_from_logits(fake: torch.Tensor, real: torch.Tensor) -> torch.Tensor:
    """-E_y log(1 - D(y, x)) - E_x log D(x, y), averaged over patch locations.

    The opposing-batch mean is taken per location, so a patch map behaves
    like independent vanilla losses averaged over the grid.
    """
    _check(fake, real)
    real_gap = real - fake.mean(0)
    fake_gap = fake - real.mean(0)
    return -_safe_log(torch.sigmoid(-real_gap)).mean() - _safe_log(torch.sigmoid(fake_gap)).mean()


def discriminator_loss_from_logits(fake: torch.Tensor, real: torch.Tensor) -> torch.Tensor:
    """-E_y log D(y, x) - E_x log(1 - D(x, y))."""
    _check(fake, real)
    real_gap = real - fake.mean(0)
    fake_gap = fake - real.mean(0)
    return -_safe_log(torch.sigmoid(real_gap)).mean() - _safe_log(torch.sigmoid(-fake_gap)).mean()


def generator_loss(batch: AdvBatch, disc: nn.Module) -> torch.Tensor:
    return generator_loss_from_logits(disc(batch.generated), disc(batch.real))


def discriminator_loss(batch: AdvBatch, disc: nn.Module) -> torch.Tensor:
    return discriminator_loss_from_logits(disc(batch.generated), disc(batch.real))


# --------------------------------------------------------------------------
# Alternating updates
# --------------------------------------------------------------------------


@dataclass
class TrainState:
    module: nn.Module
    optimizer: torch.optim.Optimizer


@dataclass(frozen=True)
class StepResult:
    adv: float | None
    disc: float
    total: float
    breakdown: object


def _guard(name: str, value: torch.Tensor, limit: float):
    v = value.item() if isinstance(value, torch.Tensor) else float(value)
    if not math.isfinite(v) or abs(v) > limit:
        raise DivergenceError(f"{name} diverged ({v})")
    return v


def alternating_step(
    gen: TrainState,
    disc: TrainState,
    low_res: torch.Tensor,
    reference: torch.Tensor,
    objective,
    update_generator: bool = True,
    limit: float = DIVERGENCE_LIMIT,
) -> StepResult:
    """One discriminator update on detached outputs, then one generator update
    on the full composite objective."""
    from .objective import composite_loss

    if objective.discriminator is not disc.module:
        raise ConfigurationError("objective and discriminator state refer to different modules")
    fake = gen.module(low_res)

    disc.module.train()
    disc.optimizer.zero_grad()
    l_d = discriminator_loss(AdvBatch(fake.detach(), reference), disc.module)
    l_d_value = _guard("discriminator loss", l_d, limit)
    l_d.backward()
    disc.optimizer.step()

    disc.module.requires_grad_(False)
    try:
        parts = composite_loss(objective, fake, reference, AdvBatch(fake, reference))
    finally:
        disc.module.requires_grad_(True)
    total = _guard("generator objective", parts.total, limit)
    if update_generator:
        gen.optimizer.zero_grad()
        parts.total.backward()
        gen.optimizer.step()
    adv = parts.raw["adv"].item() if parts.raw.get("adv") is not None else None
    return StepResult(adv=adv, disc=l_d_value, total=total, breakdown=parts)


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_discriminator(path, disc: Discriminator, step: int = 0, seed: int = 0) -> Path:
    path = Path(path)
    save_weights(path, disc.state_dict())
    meta = {"kind": "discriminator", **disc.spec.to_dict(), "step": int(step), "seed": int(seed)}
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def _read_sidecar(path) -> dict:
    meta_path = sidecar_path(path)
    if not meta_path.is_file():
        raise ConfigurationError(f"checkpoint sidecar not found: {meta_path}")
    return json.loads(meta_path.read_text())


def load_discriminator(path) -> Discriminator:
    meta = _read_sidecar(path)
    spec = DiscriminatorSpec.from_dict(meta)
    disc = Discriminator(spec, seed=meta.get("seed", 0))
    tensors = load_weights(path)
    own = disc.state_dict()
    if set(own) != set(tensors):
        raise ConfigurationError(f"discriminator checkpoint {path} does not match its sidecar")
    disc.load_state_dict({k: v.to(own[k].dtype) for k, v in tensors.items()})
    return disc


def extract_disc_backbone(checkpoint, out=None, expected_arch: str | None = None) -> dict:
    """Strip the head from a discriminator and return its backbone weights.

    ``checkpoint`` is a saved discriminator path or a live
    :class:`Discriminator`. When ``out`` is given the weights are written as a
    standard backbone container (plus a JSON sidecar naming the architecture).
    """
    if isinstance(checkpoint, Discriminator):
        arch = checkpoint.spec.backbone.arch
        tensors = {k: v.detach().clone() for k, v in checkpoint.state_dict().items()}
    else:
        meta = _read_sidecar(checkpoint)
        if meta.get("kind") != "discriminator":
            raise ConfigurationError(f"{checkpoint} is not a discriminator checkpoint")
        arch = meta["backbone"]["arch"]
        tensors = load_weights(checkpoint)
    if expected_arch is not None and expected_arch != arch:
        raise ConfigurationError(f"checkpoint backbone is {arch!r}, expected {expected_arch!r}")
    backbone = {k[len("backbone."):]: v for k, v in tensors.items() if k.startswith("backbone.")}
    probe = ARCHITECTURES[arch].build().to(DTYPE)
    probe.load_container(backbone)
    if set(backbone) != set(probe.state_dict()):
        raise ConfigurationError("discriminator backbone does not match its declared architecture")
    if out is not None:
        save_weights(out, backbone)
        sidecar_path(out).write_text(
            json.dumps({"kind": "backbone", "arch": arch}, indent=2, sort_keys=True) + "\n"
        )
    return backbone


def backbone_from_discriminator(checkpoint, out, name: str = "gan") -> BackboneSpec:
    """Extract a discriminator backbone to ``out`` and describe it as a spec."""
    extract_disc_backbone(checkpoint, out)
    arch = json.loads(sidecar_path(out).read_text())["arch"]
    return BackboneSpec(name, arch=arch, weight_source="file", weight_path=str(out))
