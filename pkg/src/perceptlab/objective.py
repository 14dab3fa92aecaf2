"""Weighted reconstruction + perceptual + adversarial objective."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .adversarial import AdvBatch, generator_loss
from .core import ConfigurationError, PairedSample, as_tensor

# (lambda1, lambda2, lambda3) for the four second-stage settings.
SETTING_WEIGHTS = {
    "P": (0.0, 1.0, 0.0),
    "RP": (1e-2, 1.0, 0.0),
    "PA": (0.0, 1.0, 5e-3),
    "RPA": (1e-2, 1.0, 5e-3),
}
SETTINGS = tuple(SETTING_WEIGHTS)

# adversarial weights for the stability sweep, geometric around the default
LAMBDA3_SWEEP = (1e-3, 5e-3, 2.5e-2, 1.25e-1)


@dataclass
class ObjectiveConfig:
    lambda1: float
    lambda2: float
    lambda3: float
    perceptual_metric: object = None
    discriminator: object = None
    setting: str | None = None

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if self.lambda3 > 0 and self.discriminator is None:
            raise ConfigurationError("lambda3 > 0 requires a discriminator")
        if self.lambda2 > 0 and self.perceptual_metric is None:
            raise ConfigurationError("lambda2 > 0 requires a perceptual metric")

    @property
    def lambdas(self) -> tuple:
        return (self.lambda1, self.lambda2, self.lambda3)

    def scaled(self, k: float) -> "ObjectiveConfig":
        return ObjectiveConfig(
            self.lambda1 * k, self.lambda2 * k, self.lambda3 * k,
            self.perceptual_metric, self.discriminator, self.setting,
        )


def make_setting(name: str, metric, disc=None, **overrides) -> ObjectiveConfig:
    """Objective for one of P, RP, PA, RPA, with optional lambda overrides.

    Overrides may not switch on a term the setting leaves out.
    """
    try:
        l1, l2, l3 = SETTING_WEIGHTS[name]
    except KeyError:
        raise ConfigurationError(f"unknown setting {name!r}; choose from {SETTINGS}") from None
    if name in ("PA", "RPA") and disc is None:
        raise ConfigurationError(f"setting {name} needs a discriminator")
    lambdas = {"lambda1": l1, "lambda2": l2, "lambda3": l3}
    for key, value in overrides.items():
        if key not in lambdas:
            raise ConfigurationError(f"unknown objective override {key!r}")
        if value is None:
            continue
        if lambdas[key] == 0 and value != 0:
            raise ConfigurationError(f"setting {name} fixes {key} = 0")
        lambdas[key] = float(value)
    return ObjectiveConfig(**lambdas, perceptual_metric=metric, discriminator=disc, setting=name)


@dataclass
class LossBreakdown:
    """Weighted terms (``rec``, ``per``, ``adv``) and their unweighted values in ``raw``."""

    total: torch.Tensor
    rec: torch.Tensor
    per: torch.Tensor
    adv: torch.Tensor
    raw: dict = field(default_factory=dict)

    def as_floats(self) -> dict:
        return {k: getattr(self, k).item() for k in ("total", "rec", "per", "adv")}


def reconstruction_loss(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean absolute error."""
    return (x - y).abs().mean()


def _batched(t: torch.Tensor) -> torch.Tensor:
    return t[None] if t.ndim == 3 else t


def composite_loss(cfg: ObjectiveConfig, generated, reference=None, adv_context: AdvBatch | None = None) -> LossBreakdown:
    if isinstance(generated, PairedSample):
        generated, reference = generated.generated.data, generated.reference.data
    x = _batched(as_tensor(generated))
    y = _batched(as_tensor(reference))
    if cfg.lambda3 > 0 and adv_context is None:
        raise ConfigurationError("lambda3 > 0 requires an adversarial batch")
    zero = x.new_zeros(())
    raw = {"rec": reconstruction_loss(x, y), "per": None, "adv": None}
    per = adv = zero
    if cfg.lambda2 > 0:
        raw["per"] = cfg.perceptual_metric(x, y).mean()
        per = cfg.lambda2 * raw["per"]
    elif cfg.perceptual_metric is not None:
        raw["per"] = cfg.perceptual_metric(x, y).mean().detach()
    if cfg.lambda3 > 0:
        raw["adv"] = generator_loss(adv_context, cfg.discriminator)
        adv = cfg.lambda3 * raw["adv"]
    rec = cfg.lambda1 * raw["rec"]
    return LossBreakdown(total=rec + per + adv, rec=rec, per=per, adv=adv, raw=raw)
