"""Two-stage super-resolution training: l1 pretraining, then perceptual /
adversarial fine-tuning under any :class:`ObjectiveConfig`."""

from __future__ import annotations

import bisect
import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .adversarial import Discriminator, DiscriminatorSpec, TrainState, alternating_step
from .backbones import load_weights, save_weights
from .core import (
    DTYPE,
    ConfigurationError,
    DataIOError,
    DimensionError,
    DivergenceError,
    DomainError,
    ImageTensor,
    RngSeed,
    as_tensor,
    bicubic_downsample,
    read_png,
)
from .objective import ObjectiveConfig, composite_loss, reconstruction_loss

log = logging.getLogger(__name__)

FULL_LR = 2e-4
FULL_BATCH = 32
FULL_STAGE1_ITERS = 100_000
FULL_STAGE2_ITERS = 400_000
FULL_STAGE2_DECAY = (150_000, 300_000, 350_000, 375_000)
DECAY_FRACTIONS = tuple(d / FULL_STAGE2_ITERS for d in FULL_STAGE2_DECAY)
LOG_FIELDS = ("iter", "lr", "l_rec", "l_per", "l_adv", "l_d", "total")


# --------------------------------------------------------------------------
# Model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SRModelSpec:
    name: str = "tiny-sr"
    scale: int = 4
    weight_source: str = "builtin-tiny-sr"
    weight_path: str | None = None
    channels: int = 32
    blocks: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.scale < 1:
            raise ConfigurationError("scale must be >= 1")
        if self.weight_source not in ("builtin-tiny-sr", "file"):
            raise ConfigurationError(f"unknown SR weight source {self.weight_source!r}")
        if self.weight_source == "file" and not self.weight_path:
            raise ConfigurationError("file-backed SR model needs weight_path")


class ResBlock(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.body = nn.Sequential(nn.Conv2d(c, c, 3, padding=1), nn.ReLU(), nn.Conv2d(c, c, 3, padding=1))

    def forward(self, x):
        return x + self.body(x)


class TinySR(nn.Module):
    """Residual conv trunk, pixel-shuffle upsampler and a bicubic global skip."""

    def __init__(self, scale: int = 4, channels: int = 32, blocks: int = 4):
        super().__init__()
        self.scale = scale
        self.head = nn.Conv2d(3, channels, 3, padding=1)
        self.body = nn.Sequential(*[ResBlock(channels) for _ in range(blocks)])
        self.body_tail = nn.Conv2d(channels, channels, 3, padding=1)
        up = []
        if scale > 1 and scale & (scale - 1) == 0:
            for _ in range(int(math.log2(scale))):
                up += [nn.Conv2d(channels, 4 * channels, 3, padding=1), nn.PixelShuffle(2), nn.ReLU()]
        elif scale > 1:
            up += [nn.Conv2d(channels, scale * scale * channels, 3, padding=1), nn.PixelShuffle(scale), nn.ReLU()]
        self.upsample = nn.Sequential(*up)
        self.tail = nn.Conv2d(channels, 3, 3, padding=1)

    def forward(self, x):
        h = self.head(x)
        h = h + self.body_tail(self.body(h))
        out = self.tail(self.upsample(h))
        if self.scale == 1:
            return out + x
        base = F.interpolate(x, scale_factor=self.scale, mode="bicubic", align_corners=False)
        return out + base


def build_sr_model(spec: SRModelSpec) -> TinySR:
    with torch.random.fork_rng():
        torch.manual_seed(int(RngSeed(spec.seed).numpy("sr-init").integers(0, 2**31)))
        model = TinySR(spec.scale, spec.channels, spec.blocks).to(DTYPE)
    if spec.weight_source == "file":
        _load_state(model, load_weights(spec.weight_path), "SR weights")
    return model


def _load_state(module: nn.Module, tensors: dict, what: str):
    own = module.state_dict()
    if set(own) != set(tensors):
        raise ConfigurationError(f"{what} do not match the model architecture")
    for k, v in tensors.items():
        if tuple(v.shape) != tuple(own[k].shape):
            raise ConfigurationError(f"{what}: shape mismatch for {k}")
    module.load_state_dict({k: v.to(own[k].dtype) for k, v in tensors.items()})


# --------------------------------------------------------------------------
# Schedules
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainSchedule:
    stage: int
    total_iters: int
    initial_lr: float = FULL_LR
    decay_steps: tuple = ()
    batch_size: int = FULL_BATCH

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigurationError("stage must be 1 or 2")
        steps = tuple(int(d) for d in self.decay_steps)
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ConfigurationError("decay_steps must be strictly increasing")
        if steps and steps[-1] >= self.total_iters:
            raise ConfigurationError("decay_steps must lie below total_iters")
        if self.total_iters < 1 or self.batch_size < 1:
            raise ConfigurationError("total_iters and batch_size must be positive")
        object.__setattr__(self, "decay_steps", steps)

    def lr_at(self, iteration: int) -> float:
        """Initial lr halved once for every decay point <= ``iteration``."""
        return self.initial_lr * 0.5 ** bisect.bisect_right(self.decay_steps, iteration)

    @classmethod
    def full(cls, stage: int) -> "TrainSchedule":
        if stage == 1:
            return cls(1, FULL_STAGE1_ITERS)
        return cls(2, FULL_STAGE2_ITERS, decay_steps=FULL_STAGE2_DECAY)

    @classmethod
    def desk(cls, stage: int, total_iters: int | None = None, batch_size: int = 8) -> "TrainSchedule":
        """Short CPU schedule; stage-2 decay points keep the full schedule's fractions."""
        total = total_iters or (2000 if stage == 1 else 3000)
        decay = ()
        if stage == 2:
            decay = tuple(sorted({int(round(f * total)) for f in DECAY_FRACTIONS} - {0, total}))
        return cls(stage, total, decay_steps=decay, batch_size=batch_size)


# --------------------------------------------------------------------------
# Data
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SRDatasetSpec:
    """PNG references; ``reference_dir/<split>`` is used when it exists."""

    reference_dir: str
    scale: int = 4
    split: str = "train"

    def __post_init__(self):
        if self.split not in ("train", "val"):
            raise ConfigurationError(f"unknown split {self.split!r}")

    @property
    def directory(self) -> Path:
        root = Path(self.reference_dir)
        return root / self.split if (root / self.split).is_dir() else root


def _rgb(img: ImageTensor) -> torch.Tensor:
    return img.data.expand(3, -1, -1).clone() if img.channels == 1 else img.data


def make_pairs(dataset: SRDatasetSpec, seed: RngSeed | int = 0) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """(low_res, reference) pairs in a seed-determined order."""
    seed = seed if isinstance(seed, RngSeed) else RngSeed(seed)
    directory = dataset.directory
    if not directory.is_dir():
        raise DataIOError(f"reference directory not readable: {directory}")
    files = sorted(directory.glob("*.png"))
    pairs = []
    for f in files:
        ref = _rgb(read_png(f))
        h, w = ref.shape[-2:]
        if h % dataset.scale or w % dataset.scale:
            log.warning("skipping %s: %dx%d not divisible by %d", f.name, h, w, dataset.scale)
            continue
        pairs.append((bicubic_downsample(ref, dataset.scale), ref))
    if not pairs:
        raise DataIOError(f"no usable PNG references in {directory}")
    order = seed.numpy("pair-order").permutation(len(pairs))
    return [pairs[i] for i in order]


def _batch(pairs, indices):
    lr = torch.stack([pairs[i][0] for i in indices])
    hr = torch.stack([pairs[i][1] for i in indices])
    return lr, hr


def _indices(seed: RngSeed, stage: int, iteration: int, n: int, batch_size: int):
    rng = seed.numpy("sr-batches", stage, iteration)
    return rng.choice(n, size=batch_size, replace=batch_size > n).tolist()


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def _unflatten_optimizer(prefix: str, tensors: dict, groups: list) -> dict:
    state: dict = {}
    for key, value in tensors.items():
        if key.startswith(prefix + "."):
            _, idx, name = key.split(".", 2)
            state.setdefault(int(idx), {})[name] = value.clone()
    return {"state": state, "param_groups": groups}


@dataclass
class SRCheckpoint:
    spec: SRModelSpec
    stage: int
    iteration: int
    model_state: dict
    optimizer_state: dict | None = None
    disc_spec: DiscriminatorSpec | None = None
    disc_state: dict | None = None
    disc_optimizer_state: dict | None = None
    meta: dict = field(default_factory=dict)

    def model(self) -> TinySR:
        model = TinySR(self.spec.scale, self.spec.channels, self.spec.blocks).to(DTYPE)
        _load_state(model, self.model_state, "checkpoint weights")
        return model

    def save(self, path) -> Path:
        path = Path(path)
        tensors = {f"model.{k}": v for k, v in self.model_state.items()}
        groups = {}
        if self.optimizer_state:
            groups["optim"] = self.optimizer_state["param_groups"]
            for idx, st in self.optimizer_state["state"].items():
                for key, value in st.items():
                    tensors[f"optim.{idx}.{key}"] = torch.as_tensor(value)
        if self.disc_state is not None:
            tensors.update({f"disc.{k}": v for k, v in self.disc_state.items()})
        if self.disc_optimizer_state:
            groups["disc_optim"] = self.disc_optimizer_state["param_groups"]
            for idx, st in self.disc_optimizer_state["state"].items():
                for key, value in st.items():
                    tensors[f"disc_optim.{idx}.{key}"] = torch.as_tensor(value)
        save_weights(path, tensors)
        meta = {
            "kind": "sr-checkpoint",
            "spec": asdict(self.spec),
            "stage": self.stage,
            "iteration": self.iteration,
            "param_groups": groups,
            "discriminator": self.disc_spec.to_dict() if self.disc_spec else None,
            **self.meta,
        }
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "SRCheckpoint":
        path = Path(path)
        meta_path = path.with_suffix(".json")
        if not meta_path.is_file():
            raise ConfigurationError(f"checkpoint sidecar not found: {meta_path}")
        meta = json.loads(meta_path.read_text())
        if meta.get("kind") != "sr-checkpoint":
            raise ConfigurationError(f"{path} is not an SR checkpoint")
        tensors = load_weights(path)
        groups = meta.get("param_groups", {})

        def strip(prefix):
            return {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}

        extra = {k: v for k, v in meta.items()
                 if k not in ("kind", "spec", "stage", "iteration", "param_groups", "discriminator")}
        disc_meta = meta.get("discriminator")
        return cls(
            spec=SRModelSpec(**meta["spec"]),
            stage=meta["stage"],
            iteration=meta["iteration"],
            model_state=strip("model"),
            optimizer_state=_unflatten_optimizer("optim", tensors, groups["optim"]) if "optim" in groups else None,
            disc_spec=DiscriminatorSpec.from_dict(disc_meta) if disc_meta else None,
            disc_state=strip("disc") or None,
            disc_optimizer_state=(
                _unflatten_optimizer("disc_optim", tensors, groups["disc_optim"]) if "disc_optim" in groups else None
            ),
            meta=extra,
        )


def _snapshot(spec, stage, iteration, model, opt, disc=None, disc_opt=None) -> SRCheckpoint:
    return SRCheckpoint(
        spec=spec,
        stage=stage,
        iteration=iteration,
        model_state={k: v.detach().clone() for k, v in model.state_dict().items()},
        optimizer_state=copy.deepcopy(opt.state_dict()) if opt is not None else None,
        disc_spec=disc.spec if disc is not None else None,
        disc_state={k: v.detach().clone() for k, v in disc.state_dict().items()} if disc is not None else None,
        disc_optimizer_state=copy.deepcopy(disc_opt.state_dict()) if disc_opt is not None else None,
    )


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: SRCheckpoint
    log: list

    @property
    def totals(self) -> list[float]:
        return [row["total"] for row in self.log]


def write_training_log(path, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
        for row in rows:
            writer.writerow(["" if row.get(k) is None else repr(row[k]) for k in LOG_FIELDS])
    return path


def read_training_log(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            {k: (int(v) if k == "iter" else float(v)) if v != "" else None for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def _check_pairs(pairs):
    if not pairs:
        raise DataIOError("training needs at least one pair")


def train_stage1(
    model_spec: SRModelSpec,
    pairs,
    schedule: TrainSchedule,
    seed: RngSeed | int = 0,
    resume: SRCheckpoint | None = None,
    snapshot_every: int = 100,
) -> TrainResult:
    """l1-only pretraining."""
    if schedule.stage != 1:
        raise ConfigurationError("train_stage1 needs a stage-1 schedule")
    _check_pairs(pairs)
    seed = seed if isinstance(seed, RngSeed) else RngSeed(seed)
    model = build_sr_model(model_spec)
    opt = torch.optim.Adam(model.parameters(), lr=schedule.initial_lr)
    start = 0
    if resume is not None:
        _load_state(model, resume.model_state, "checkpoint weights")
        if resume.optimizer_state:
            opt.load_state_dict(resume.optimizer_state)
        start = resume.iteration
    last_good = _snapshot(model_spec, 1, start, model, opt)
    rows = []
    model.train()
    for it in range(start, schedule.total_iters):
        lr = schedule.lr_at(it)
        _set_lr(opt, lr)
        lr_b, hr_b = _batch(pairs, _indices(seed, 1, it, len(pairs), schedule.batch_size))
        loss = reconstruction_loss(model(lr_b), hr_b)
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(f"stage-1 loss is {value} at iteration {it}", last_good=last_good)
        opt.zero_grad()
        loss.backward()
        opt.step()
        rows.append({"iter": it, "lr": lr, "l_rec": value, "l_per": None, "l_adv": None, "l_d": None, "total": value})
        if (it + 1) % snapshot_every == 0:
            last_good = _snapshot(model_spec, 1, it + 1, model, opt)
    ckpt = _snapshot(model_spec, 1, schedule.total_iters, model, opt)
    return TrainResult(ckpt, rows)


def train_stage2(
    checkpoint: SRCheckpoint,
    objective: ObjectiveConfig,
    pairs,
    schedule: TrainSchedule,
    seed: RngSeed | int = 0,
    disc_lr: float | None = None,
    resume: SRCheckpoint | None = None,
    snapshot_every: int = 100,
) -> TrainResult:
    """Fine-tune from a stage-1 checkpoint under ``objective``.

    With a discriminator attached, each iteration is one discriminator update
    followed by one generator update. The discriminator shares the
    generator's lr schedule unless ``disc_lr`` sets its initial value.
    """
    if schedule.stage != 2:
        raise ConfigurationError("train_stage2 needs a stage-2 schedule")
    if checkpoint.stage != 1 and resume is None:
        raise ConfigurationError("train_stage2 starts from a stage-1 checkpoint")
    _check_pairs(pairs)
    seed = seed if isinstance(seed, RngSeed) else RngSeed(seed)
    spec = checkpoint.spec
    model = checkpoint.model()
    opt = torch.optim.Adam(model.parameters(), lr=schedule.initial_lr)
    disc: Discriminator | None = objective.discriminator
    disc_opt = None
    disc_scale = (disc_lr / schedule.initial_lr) if disc_lr else 1.0
    if disc is not None:
        disc_opt = torch.optim.Adam(disc.parameters(), lr=schedule.initial_lr * disc_scale)
    start = 0
    if resume is not None:
        _load_state(model, resume.model_state, "checkpoint weights")
        if resume.optimizer_state:
            opt.load_state_dict(resume.optimizer_state)
        if disc is not None and resume.disc_state is not None:
            _load_state(disc, resume.disc_state, "discriminator weights")
            if resume.disc_optimizer_state:
                disc_opt.load_state_dict(resume.disc_optimizer_state)
        start = resume.iteration
    last_good = _snapshot(spec, 2, start, model, opt, disc, disc_opt)
    rows = []
    model.train()
    for it in range(start, schedule.total_iters):
        lr = schedule.lr_at(it)
        _set_lr(opt, lr)
        lr_b, hr_b = _batch(pairs, _indices(seed, 2, it, len(pairs), schedule.batch_size))
        try:
            if disc is not None:
                _set_lr(disc_opt, lr * disc_scale)
                step = alternating_step(TrainState(model, opt), TrainState(disc, disc_opt), lr_b, hr_b, objective)
                parts, l_d = step.breakdown, step.disc
            else:
                parts = composite_loss(objective, model(lr_b), hr_b)
                l_d = None
                total = parts.total.item()
                if not math.isfinite(total) or abs(total) > 1e4:
                    raise DivergenceError(f"stage-2 objective diverged ({total})")
                opt.zero_grad()
                parts.total.backward()
                opt.step()
        except DivergenceError as exc:
            raise DivergenceError(f"iteration {it}: {exc}", last_good=last_good) from exc
        raw = parts.raw
        rows.append({
            "iter": it,
            "lr": lr,
            "l_rec": raw["rec"].item(),
            "l_per": None if raw["per"] is None else raw["per"].item(),
            "l_adv": None if raw["adv"] is None else raw["adv"].item(),
            "l_d": l_d,
            "total": parts.total.item(),
        })
        if (it + 1) % snapshot_every == 0:
            last_good = _snapshot(spec, 2, it + 1, model, opt, disc, disc_opt)
    ckpt = _snapshot(spec, 2, schedule.total_iters, model, opt, disc, disc_opt)
    ckpt.meta["setting"] = objective.setting
    ckpt.meta["lambdas"] = list(objective.lambdas)
    return TrainResult(ckpt, rows)


# --------------------------------------------------------------------------
# Inference
# --------------------------------------------------------------------------


def infer(checkpoint, low_res, spec: SRModelSpec | None = None) -> ImageTensor:
    """Upscale one image; ``checkpoint`` is an SRCheckpoint, a path, or a model."""
    if isinstance(checkpoint, (str, Path)):
        checkpoint = SRCheckpoint.load(checkpoint)
    if isinstance(checkpoint, SRCheckpoint):
        if spec is not None and spec != checkpoint.spec:
            raise ConfigurationError("checkpoint was trained with a different model spec")
        model = checkpoint.model()
    else:
        model = checkpoint
    x = as_tensor(low_res)
    if x.ndim != 3:
        raise DimensionError(f"expected a (C, H, W) image, got {tuple(x.shape)}")
    if x.shape[0] == 1:
        x = x.expand(3, -1, -1)
    model.eval()
    with torch.no_grad():
        out = model(x[None])[0]
    return ImageTensor(out.clamp(0.0, 1.0))


def psnr(x, y) -> float:
    mse = float(((as_tensor(x) - as_tensor(y)) ** 2).mean())
    if mse == 0:
        return math.inf
    if mse < 0:
        raise DomainError("negative mse")
    return 10 * math.log10(1.0 / mse)
