"""DISTS-style texture/structure metric with learnable per-channel weights."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
from scipy.optimize import brentq

from .backbones import (
    REGISTRY,
    BackboneRegistry,
    BackboneSpec,
    FeatureExtractor,
    build_backbone,
    load_weights,
    save_weights,
)
from .core import (
    DTYPE,
    ConfigurationError,
    DegenerateWeightsError,
    DimensionError,
    DivergenceError,
    DomainError,
    PairedSample,
    RngSeed,
    as_tensor,
)

log = logging.getLogger(__name__)

STAGE0_BOUNDS = (0.02, 1.0)


@dataclass(frozen=True)
class StabilityConstants:
    c1: float = 1e-6
    c2: float = 1e-6

    def __post_init__(self):
        if not (self.c1 > 0 and self.c2 > 0):
            raise DomainError("stability constants must be strictly positive")


def texture_similarity(mean_x, mean_y, c1: float = 1e-6):
    """Mean-based similarity (2 mx my + c1) / (mx^2 + my^2 + c1).

    Evaluated as 1 - (mx - my)^2 / (mx^2 + my^2 + c1) so the upper bound of 1
    also holds in floating point.
    """
    return 1 - (mean_x - mean_y) ** 2 / (mean_x**2 + mean_y**2 + c1)


def structure_similarity(var_x, var_y, cov_xy, c2: float = 1e-6, var_diff=None):
    """Covariance-based similarity (2 cov + c2) / (vx + vy + c2).

    ``var_diff`` is the variance of x - y, which equals vx + vy - 2 cov; passing
    it directly keeps the result <= 1 under rounding.
    """
    if var_diff is None:
        var_diff = var_x + var_y - 2 * cov_xy
    return 1 - var_diff / (var_x + var_y + c2)


# --------------------------------------------------------------------------
# Weights
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricWeights:
    """Per-stage alpha (texture) and beta (structure) weights; stage 0 first."""

    alpha: tuple
    beta: tuple

    def __post_init__(self):
        alpha = tuple(np.asarray(a, dtype=np.float64).reshape(-1) for a in self.alpha)
        beta = tuple(np.asarray(b, dtype=np.float64).reshape(-1) for b in self.beta)
        if [a.size for a in alpha] != [b.size for b in beta]:
            raise DimensionError("alpha and beta layouts differ")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)

    @property
    def channel_counts(self) -> list[int]:
        return [a.size for a in self.alpha]

    def total(self) -> float:
        return float(sum(a.sum() + b.sum() for a, b in zip(self.alpha, self.beta)))

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate(self.alpha), np.concatenate(self.beta)])

    @classmethod
    def from_flat(cls, flat, channel_counts) -> "MetricWeights":
        flat = np.asarray(flat, dtype=np.float64)
        k = sum(channel_counts)
        if flat.size != 2 * k:
            raise DimensionError(f"expected {2 * k} weights, got {flat.size}")
        cuts = np.cumsum(channel_counts)[:-1]
        return cls(tuple(np.split(flat[:k], cuts)), tuple(np.split(flat[k:], cuts)))

    @classmethod
    def uniform(cls, channel_counts) -> "MetricWeights":
        v = 1.0 / (2 * sum(channel_counts))
        return cls(
            tuple(np.full(n, v) for n in channel_counts),
            tuple(np.full(n, v) for n in channel_counts),
        )

    @classmethod
    def random(cls, channel_counts, rng: np.random.Generator) -> "MetricWeights":
        flat = rng.uniform(0.0, 1.0, size=2 * sum(channel_counts))
        return cls.from_flat(flat / flat.sum(), channel_counts)

    def allclose(self, other: "MetricWeights", atol=0.0, rtol=0.0) -> bool:
        return self.channel_counts == other.channel_counts and np.allclose(
            self.flat(), other.flat(), atol=atol, rtol=rtol
        )


def clamp_weights(weights: MetricWeights, bounds=STAGE0_BOUNDS) -> MetricWeights:
    """Clamp stage-0 entries to ``bounds`` and the rest to >= 0 (no renormalization)."""
    lo, hi = bounds
    alpha = [np.clip(weights.alpha[0], lo, hi)] + [np.maximum(a, 0) for a in weights.alpha[1:]]
    beta = [np.clip(weights.beta[0], lo, hi)] + [np.maximum(b, 0) for b in weights.beta[1:]]
    return MetricWeights(tuple(alpha), tuple(beta))


def project_weights(weights: MetricWeights, bounds=STAGE0_BOUNDS) -> MetricWeights:
    """Project onto {stage-0 in bounds, all >= 0, total = 1}.

    The result is the fixed point of repeatedly clamping and globally
    renormalizing: every entry is scaled by a common factor t, with stage-0
    entries re-clamped into ``bounds``. Solving for t directly makes the
    projection idempotent.
    """
    lo, hi = bounds
    flat = weights.flat()
    if not np.all(np.isfinite(flat)):
        raise DegenerateWeightsError("weights contain non-finite entries")
    counts = weights.channel_counts
    clamped = clamp_weights(weights, bounds)
    s0 = np.concatenate([clamped.alpha[0], clamped.beta[0]])
    rest = np.concatenate([np.concatenate(clamped.alpha[1:] or [np.zeros(0)]),
                           np.concatenate(clamped.beta[1:] or [np.zeros(0)])])
    r_sum = rest.sum()
    if s0.size * lo > 1.0:
        raise DegenerateWeightsError(
            f"{s0.size} stage-0 entries cannot all be >= {lo} with unit total"
        )
    if s0.size == 0 and r_sum <= 0:
        raise DegenerateWeightsError("all weights are zero after clamping")

    def excess(t):
        return np.clip(t * s0, lo, hi).sum() + t * r_sum - 1.0

    if excess(0.0) >= 0.0:
        t = 0.0
    else:
        t_hi = 1.0
        while excess(t_hi) < 0.0:
            t_hi *= 2.0
            if t_hi > 1e300:
                raise DegenerateWeightsError("cannot normalize weights")
        t = brentq(excess, 0.0, t_hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    new_s0 = np.clip(t * s0, lo, hi)
    if r_sum > 0:
        new_rest = rest * ((1.0 - new_s0.sum()) / r_sum)
    else:
        new_s0 = new_s0 / new_s0.sum()
        new_rest = rest
    n0 = counts[0]
    k_rest = sum(counts[1:])
    flat_alpha = np.concatenate([new_s0[:n0], new_rest[:k_rest]])
    flat_beta = np.concatenate([new_s0[n0:], new_rest[k_rest:]])
    return MetricWeights.from_flat(np.concatenate([flat_alpha, flat_beta]), counts)


# --------------------------------------------------------------------------
# Metric
# --------------------------------------------------------------------------


def _batch(img) -> torch.Tensor:
    x = as_tensor(img)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise DimensionError(f"expected (C, H, W) or (N, C, H, W), got {tuple(x.shape)}")
    if x.shape[1] == 1:
        x = x.expand(-1, 3, -1, -1)
    return x


def stage_moments(fx: torch.Tensor, fy: torch.Tensor):
    """Per-channel means, population variances, covariance and variance of
    the difference for two (N, C, H, W) feature maps."""
    fx = fx.flatten(2)
    fy = fy.flatten(2)
    mx, my = fx.mean(-1), fy.mean(-1)
    dx, dy = fx - mx[..., None], fy - my[..., None]
    diff = dx - dy
    return mx, my, (dx * dx).mean(-1), (dy * dy).mean(-1), (dx * dy).mean(-1), (diff * diff).mean(-1)


class PerceptualMetric(nn.Module):
    """``1 - sum_ij (alpha_ij l_ij + beta_ij s_ij)`` over a frozen backbone."""

    def __init__(
        self,
        backbone: BackboneSpec,
        weights: MetricWeights | None = None,
        constants: StabilityConstants = StabilityConstants(),
        module: FeatureExtractor | None = None,
    ):
        super().__init__()
        if not backbone.frozen:
            raise ConfigurationError(
                f"backbone {backbone.name!r} must be frozen inside a perceptual metric"
            )
        self.spec = backbone
        self.constants = constants
        self.backbone = module if module is not None else build_backbone(backbone)
        self.backbone.eval()
        self.backbone.requires_grad_(False)
        counts = backbone.channel_counts
        weights = weights if weights is not None else MetricWeights.uniform(counts)
        if weights.channel_counts != counts:
            raise DimensionError(
                f"weights layout {weights.channel_counts} does not match backbone {counts}"
            )
        self.alpha = nn.ParameterList(nn.Parameter(torch.from_numpy(a.copy())) for a in weights.alpha)
        self.beta = nn.ParameterList(nn.Parameter(torch.from_numpy(b.copy())) for b in weights.beta)

    def train(self, mode: bool = True):
        super().train(mode)
        self.backbone.eval()
        return self

    @property
    def weights(self) -> MetricWeights:
        return MetricWeights(
            tuple(a.detach().numpy().copy() for a in self.alpha),
            tuple(b.detach().numpy().copy() for b in self.beta),
        )

    @weights.setter
    def weights(self, value: MetricWeights):
        if value.channel_counts != self.spec.channel_counts:
            raise DimensionError("weights layout does not match backbone")
        with torch.no_grad():
            for p, a in zip(self.alpha, value.alpha):
                p.copy_(torch.from_numpy(a))
            for p, b in zip(self.beta, value.beta):
                p.copy_(torch.from_numpy(b))

    def similarity_terms(self, x, y):
        """Per-stage texture and structure similarities, each (N, n_i)."""
        x, y = _batch(x), _batch(y)
        if x.shape != y.shape:
            raise DimensionError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
        n = x.shape[0]
        feats = self.backbone(torch.cat([x, y]))
        c1, c2 = self.constants.c1, self.constants.c2
        tex, struct = [], []
        for f in feats:
            mx, my, vx, vy, cov, vd = stage_moments(f[:n], f[n:])
            tex.append(texture_similarity(mx, my, c1))
            struct.append(structure_similarity(vx, vy, cov, c2, vd))
        return tex, struct

    def flat_terms(self, x, y):
        """Concatenated (N, K) texture and structure terms, K = total channels."""
        tex, struct = self.similarity_terms(x, y)
        return torch.cat(tex, dim=1), torch.cat(struct, dim=1)

    def forward(self, x, y) -> torch.Tensor:
        tex, struct = self.similarity_terms(x, y)
        score = 0
        for a, b, l, s in zip(self.alpha, self.beta, tex, struct):
            score = score + (l * a).sum(-1) + (s * b).sum(-1)
        return 1 - score


def make_metric(
    spec: BackboneSpec,
    init: str = "uniform",
    seed: int = 0,
    constants: StabilityConstants = StabilityConstants(),
) -> PerceptualMetric:
    """Metric with uniform weights, or random fixed weights (``init="random"``)."""
    counts = spec.channel_counts
    if init == "uniform":
        weights = MetricWeights.uniform(counts)
    elif init == "random":
        weights = MetricWeights.random(counts, RngSeed(seed).numpy("metric-weights"))
    else:
        raise ConfigurationError(f"unknown weight init {init!r}")
    metric = PerceptualMetric(spec, weights, constants)
    if init == "random":
        metric.requires_grad_(False)
    return metric


def _pair(pair, reference=None):
    if isinstance(pair, PairedSample):
        return pair.generated.data, pair.reference.data
    if reference is None:
        raise TypeError("pass a PairedSample or two images")
    return as_tensor(pair), as_tensor(reference)


def perceptual_distance(metric: PerceptualMetric, pair, reference=None) -> float:
    x, y = _pair(pair, reference)
    with torch.no_grad():
        return float(metric(x, y)[0]) if x.ndim == 3 else metric(x, y)


def weight_gradients(metric: PerceptualMetric, pair, reference=None) -> MetricWeights:
    """Gradient of the distance with respect to every alpha and beta."""
    x, y = _pair(pair, reference)
    params = list(metric.alpha) + list(metric.beta)
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(True)
    try:
        d = metric(x, y).sum()
        grads = torch.autograd.grad(d, params)
    finally:
        for p, f in zip(params, flags):
            p.requires_grad_(f)
    m = len(metric.alpha)
    return MetricWeights(
        tuple(g.numpy().copy() for g in grads[:m]), tuple(g.numpy().copy() for g in grads[m:])
    )


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricSchedule:
    """Adam, lr halved every ``halve_every`` steps, margin ranking objective."""

    iterations: int = 5000
    lr: float = 1e-4
    halve_every: int = 1000
    batch_size: int = 32
    margin: float = 0.025

    def lr_at(self, step: int) -> float:
        return self.lr * 0.5 ** (step // self.halve_every)


@dataclass
class MetricTrainingLog:
    steps: list = field(default_factory=list)

    def append(self, **row):
        self.steps.append(row)

    @property
    def objective(self) -> list[float]:
        return [r["objective"] for r in self.steps]


def ranking_loss(dist: torch.Tensor, mos: torch.Tensor, margin: float) -> torch.Tensor | None:
    """Hinge on every ordered pair: higher MOS must have smaller distance by ``margin``."""
    better = mos[:, None] > mos[None, :]
    if not better.any():
        return None
    gaps = dist[:, None] - dist[None, :] + margin
    return torch.relu(gaps[better]).mean()


def _dataset_terms(metric: PerceptualMetric, dataset, chunk: int = 16):
    """Texture/structure terms for every item; the backbone is frozen so these
    are constants for the whole run."""
    tex, struct, mos = [], [], []
    items = list(dataset)
    with torch.no_grad():
        for start in range(0, len(items), chunk):
            block = items[start:start + chunk]
            xs, ys = [], []
            for pair, score in block:
                x, y = _pair(pair) if isinstance(pair, PairedSample) else map(as_tensor, pair)
                xs.append(x)
                ys.append(y)
                mos.append(float(score))
            try:
                l, s = metric.flat_terms(torch.stack(xs), torch.stack(ys))
            except RuntimeError:
                parts = [metric.flat_terms(a, b) for a, b in zip(xs, ys)]
                l = torch.cat([p[0] for p in parts])
                s = torch.cat([p[1] for p in parts])
            tex.append(l)
            struct.append(s)
    return torch.cat(tex), torch.cat(struct), torch.tensor(mos, dtype=DTYPE)


def train_metric(
    metric: PerceptualMetric,
    dataset: Sequence,
    schedule: MetricSchedule = MetricSchedule(),
    seed: RngSeed | int = 0,
):
    """Fit alpha/beta to MOS with projected Adam; the backbone never changes.

    ``dataset`` is a sequence of ``(pair, mos)`` where ``pair`` is a
    :class:`PairedSample` or a ``(distorted, reference)`` tuple.
    Returns ``(metric, log)``.
    """
    if not dataset:
        raise DomainError("metric training needs a nonempty dataset")
    seed = seed if isinstance(seed, RngSeed) else RngSeed(seed)
    tex, struct, mos = _dataset_terms(metric, dataset)
    span = float(mos.max() - mos.min())
    mos = (mos - mos.min()) / span if span > 0 else torch.zeros_like(mos)

    counts = metric.spec.channel_counts
    k = sum(counts)
    start = project_weights(metric.weights)
    flat = torch.from_numpy(start.flat()).requires_grad_(True)
    opt = torch.optim.Adam([flat], lr=schedule.lr)
    log = MetricTrainingLog()
    n = tex.shape[0]
    for step in range(schedule.iterations):
        lr = schedule.lr_at(step)
        for group in opt.param_groups:
            group["lr"] = lr
        rng = seed.numpy("metric-batches", step)
        idx = torch.from_numpy(rng.choice(n, size=min(schedule.batch_size, n), replace=False))
        dist = 1 - tex[idx] @ flat[:k] - struct[idx] @ flat[k:]
        loss = ranking_loss(dist, mos[idx], schedule.margin)
        if loss is not None:
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"metric objective became {loss.item()} at step {step} (lr={lr:g})",
                    last_good=MetricWeights.from_flat(flat.detach().numpy(), counts),
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
        projected = project_weights(MetricWeights.from_flat(flat.detach().numpy(), counts))
        with torch.no_grad():
            flat.copy_(torch.from_numpy(projected.flat()))
        log.append(
            step=step,
            lr=lr,
            objective=loss.item() if loss is not None else 0.0,
            residual=abs(projected.total() - 1.0),
        )
    metric.weights = MetricWeights.from_flat(flat.detach().numpy(), counts)
    return metric, log


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_metric(path, metric: PerceptualMetric, schedule: MetricSchedule | None = None) -> Path:
    path = Path(path)
    tensors = {}
    for i, (a, b) in enumerate(zip(metric.alpha, metric.beta)):
        tensors[f"alpha.{i}"] = a.detach()
        tensors[f"beta.{i}"] = b.detach()
    save_weights(path, tensors)
    meta = {
        "kind": "perceptual-metric",
        "backbone": metric.spec.to_dict(),
        "constants": asdict(metric.constants),
        "schedule": asdict(schedule) if schedule else None,
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_metric(path, registry: BackboneRegistry | None = None) -> PerceptualMetric:
    path = Path(path)
    meta_path = sidecar_path(path)
    if not meta_path.is_file():
        raise ConfigurationError(f"metric sidecar not found: {meta_path}")
    meta = json.loads(meta_path.read_text())
    spec = BackboneSpec.from_dict(meta["backbone"])
    registry = registry or REGISTRY
    if spec.name in registry and registry.get(spec.name) != spec:
        log.warning("checkpoint backbone %r differs from the registered spec", spec.name)
    tensors = load_weights(path)
    m = len(spec.channel_counts)
    try:
        weights = MetricWeights(
            tuple(tensors[f"alpha.{i}"].numpy() for i in range(m)),
            tuple(tensors[f"beta.{i}"].numpy() for i in range(m)),
        )
    except KeyError as exc:
        raise ConfigurationError(f"metric checkpoint {path} lacks {exc}") from None
    return PerceptualMetric(spec, weights, StabilityConstants(**meta["constants"]))
