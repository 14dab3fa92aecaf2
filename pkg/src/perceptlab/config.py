"""YAML experiment configuration: parsing, validation, defaults, serialization."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .adversarial import HEADS, DiscriminatorSpec
from .backbones import BackboneRegistry, BackboneSpec
from .core import ConfigurationError, PerceptLabError
from .evaluation import InitMode, SplitSpec, TransferSchedule
from .objective import LAMBDA3_SWEEP, SETTING_WEIGHTS, SETTINGS
from .perceptual import MetricSchedule
from .srharness import DECAY_FRACTIONS, SRDatasetSpec, SRModelSpec, TrainSchedule

PROFILES = ("desk", "full")


class ConfigValidationError(ConfigurationError):
    """Carries every problem found, one string per item."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid config:\n" + "\n".join(f"  - {e}" for e in self.errors))


def _metric_defaults(profile: str) -> MetricSchedule:
    if profile == "full":
        return MetricSchedule()
    return MetricSchedule(iterations=1000, halve_every=200)


def _stage_defaults(profile: str, stage: int) -> dict:
    s = TrainSchedule.full(stage) if profile == "full" else TrainSchedule.desk(stage)
    return {"total_iters": s.total_iters, "initial_lr": s.initial_lr, "batch_size": s.batch_size}


def _transfer_defaults(profile: str) -> TransferSchedule:
    if profile == "full":
        m = MetricSchedule()
        return TransferSchedule(fr_iterations=m.iterations, fr_lr=m.lr)
    return TransferSchedule()


@dataclass(frozen=True)
class DiscriminatorRef:
    backbone: str = "tiny"
    head: str = "vanilla"
    patch_grid: tuple | None = None


@dataclass(frozen=True)
class MetricBlock:
    backbone: str = "tiny"
    manifest: str | None = None
    checkpoint: str | None = None
    schedule: MetricSchedule = field(default_factory=MetricSchedule)


@dataclass(frozen=True)
class SRBlock:
    model: SRModelSpec = field(default_factory=SRModelSpec)
    dataset: SRDatasetSpec | None = None
    setting: str = "RPA"
    lambdas: dict = field(default_factory=dict)
    stage1: TrainSchedule = field(default_factory=lambda: TrainSchedule.desk(1))
    stage2: TrainSchedule = field(default_factory=lambda: TrainSchedule.desk(2))
    checkpoint: str | None = None


@dataclass(frozen=True)
class AdversarialBlock:
    discriminator: DiscriminatorRef | None = field(default_factory=DiscriminatorRef)
    lr: float | None = None
    sweep_lambda3: tuple = LAMBDA3_SWEEP
    sweep_backbones: tuple = ()


@dataclass(frozen=True)
class EvalBlock:
    benchmarks: dict = field(default_factory=dict)
    split: SplitSpec = field(default_factory=SplitSpec)
    task: str = "nr"
    manifest: str | None = None
    backbones: tuple = ("tiny",)
    inits: tuple = (InitMode("random"),)
    schedule: TransferSchedule = field(default_factory=TransferSchedule)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    profile: str = "desk"
    output_dir: str | None = None
    backbones: tuple = ()
    metric: MetricBlock = field(default_factory=MetricBlock)
    sr: SRBlock = field(default_factory=SRBlock)
    adversarial: AdversarialBlock = field(default_factory=AdversarialBlock)
    eval: EvalBlock = field(default_factory=EvalBlock)

    @property
    def registry(self) -> BackboneRegistry:
        reg = BackboneRegistry()
        for spec in self.backbones:
            reg.register(spec)
        return reg

    @property
    def lambdas(self) -> tuple:
        base = dict(zip(("lambda1", "lambda2", "lambda3"), SETTING_WEIGHTS[self.sr.setting]))
        base.update({k: v for k, v in self.sr.lambdas.items() if v is not None})
        return (base["lambda1"], base["lambda2"], base["lambda3"])

    def discriminator_spec(self, backbone: str | None = None) -> DiscriminatorSpec | None:
        ref = self.adversarial.discriminator
        if ref is None:
            return None
        name = backbone or ref.backbone
        return DiscriminatorSpec(self.registry.get(name), ref.head, ref.patch_grid)

    def to_dict(self) -> dict:
        return to_dict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------


def _schedule_dict(s: TrainSchedule) -> dict:
    return {"total_iters": s.total_iters, "initial_lr": s.initial_lr,
            "decay_steps": list(s.decay_steps), "batch_size": s.batch_size}


def to_dict(cfg: ExperimentConfig) -> dict:
    disc = cfg.adversarial.discriminator
    return {
        "seed": cfg.seed,
        "profile": cfg.profile,
        "output_dir": cfg.output_dir,
        "backbones": [b.to_dict() for b in cfg.backbones],
        "metric": {
            "backbone": cfg.metric.backbone,
            "manifest": cfg.metric.manifest,
            "checkpoint": cfg.metric.checkpoint,
            "schedule": asdict(cfg.metric.schedule),
        },
        "sr": {
            "model": asdict(cfg.sr.model),
            "dataset": None if cfg.sr.dataset is None else {
                "reference_dir": cfg.sr.dataset.reference_dir, "scale": cfg.sr.dataset.scale},
            "setting": cfg.sr.setting,
            "lambdas": dict(cfg.sr.lambdas),
            "stage1": _schedule_dict(cfg.sr.stage1),
            "stage2": _schedule_dict(cfg.sr.stage2),
            "checkpoint": cfg.sr.checkpoint,
        },
        "adversarial": {
            "discriminator": None if disc is None else {
                "backbone": disc.backbone, "head": disc.head,
                "patch_grid": list(disc.patch_grid) if disc.patch_grid else None},
            "lr": cfg.adversarial.lr,
            "sweep": {"lambda3": list(cfg.adversarial.sweep_lambda3),
                      "backbones": list(cfg.adversarial.sweep_backbones)},
        },
        "eval": {
            "benchmarks": dict(cfg.eval.benchmarks),
            "split": {"ratios": list(cfg.eval.split.ratios), "seed": cfg.eval.split.seed,
                      "group_by_content": cfg.eval.split.group_by_content},
            "transfer": {
                "task": cfg.eval.task,
                "manifest": cfg.eval.manifest,
                "backbones": list(cfg.eval.backbones),
                "inits": [{"kind": i.kind, "path": i.path} for i in cfg.eval.inits],
                "schedule": asdict(cfg.eval.schedule),
            },
        },
    }


def dump_config(cfg: ExperimentConfig, path=None) -> str:
    text = yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=False)
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


# --------------------------------------------------------------------------
# Parsing
# --------------------------------------------------------------------------


class _Parser:
    def __init__(self, base_dir: Path):
        self.base = base_dir
        self.errors: list[str] = []

    def error(self, where: str, msg: str):
        self.errors.append(f"{where}: {msg}" if where else msg)

    def section(self, raw, where: str, allowed) -> dict:
        if raw is None:
            return {}
        if not isinstance(raw, dict):
            self.error(where, f"expected a mapping, got {type(raw).__name__}")
            return {}
        for key in raw:
            if key not in allowed:
                self.error(f"{where}.{key}" if where else str(key), "unknown key")
        return {k: v for k, v in raw.items() if k in allowed}

    def path(self, value, where: str) -> str | None:
        if value is None:
            return None
        if not isinstance(value, (str, Path)):
            self.error(where, "expected a path string")
            return None
        p = Path(value).expanduser()
        return str(p if p.is_absolute() else (self.base / p).resolve())

    def build(self, where: str, factory, *args, **kwargs):
        try:
            return factory(*args, **kwargs)
        except (PerceptLabError, TypeError, ValueError) as exc:
            self.error(where, str(exc))
            return None

    def number(self, raw: dict, key: str, where: str, kind=float, default=None):
        if key not in raw or raw[key] is None:
            return default
        try:
            if isinstance(raw[key], bool):
                raise ValueError
            return kind(raw[key])
        except (TypeError, ValueError):
            self.error(f"{where}.{key}", f"expected {kind.__name__}, got {raw[key]!r}")
            return default


def _field_names(cls) -> set:
    return {f.name for f in fields(cls)}


def _schedule(p: _Parser, raw, where: str, profile: str, stage: int) -> TrainSchedule | None:
    raw = p.section(raw, where, ("total_iters", "initial_lr", "decay_steps", "batch_size"))
    d = _stage_defaults(profile, stage)
    total = p.number(raw, "total_iters", where, int, d["total_iters"])
    lr = p.number(raw, "initial_lr", where, float, d["initial_lr"])
    batch = p.number(raw, "batch_size", where, int, d["batch_size"])
    if raw.get("decay_steps") is not None:
        decay = raw["decay_steps"]
        if not isinstance(decay, (list, tuple)):
            p.error(f"{where}.decay_steps", "expected a list")
            decay = ()
    elif stage == 2:
        decay = sorted({int(round(f * total)) for f in DECAY_FRACTIONS} - {0, total})
    else:
        decay = ()
    return p.build(where, TrainSchedule, stage, total, lr, tuple(decay), batch)


def parse_config_dict(raw: dict | None, base_dir=".") -> ExperimentConfig:
    """Validate a config mapping; relative paths resolve against ``base_dir``."""
    p = _Parser(Path(base_dir).resolve())
    top = p.section(raw or {}, "", ("seed", "profile", "output_dir", "backbones", "metric", "sr",
                                    "adversarial", "eval"))
    seed = p.number(top, "seed", "seed", int, 0)
    if seed is not None and seed < 0:
        p.error("seed", "must be nonnegative")
    profile = top.get("profile", "desk")
    if profile not in PROFILES:
        p.error("profile", f"must be one of {PROFILES}")
        profile = "desk"

    # backbones registered by the config, resolved before anything names them
    registry = BackboneRegistry()
    specs = []
    for i, b in enumerate(top.get("backbones") or []):
        where = f"backbones[{i}]"
        b = p.section(b, where, ("name", "arch", "weight_source", "weight_path", "seed", "frozen"))
        if "weight_path" in b:
            b["weight_path"] = p.path(b["weight_path"], f"{where}.weight_path")
        if "name" not in b:
            p.error(where, "missing name")
            continue
        spec = p.build(where, BackboneSpec.from_dict, b)
        if spec is not None and p.build(where, registry.register, spec) is not None:
            specs.append(spec)

    def resolve(name, where):
        if not isinstance(name, str):
            p.error(where, f"expected a backbone name, got {name!r}")
        elif name not in registry:
            p.error(where, f"unknown backbone {name!r}; known: {', '.join(registry.names())}")

    # metric
    m = p.section(top.get("metric"), "metric", ("backbone", "manifest", "checkpoint", "schedule"))
    m_backbone = m.get("backbone", "tiny")
    resolve(m_backbone, "metric.backbone")
    ms_raw = p.section(m.get("schedule"), "metric.schedule", _field_names(MetricSchedule))
    ms_default = _metric_defaults(profile)
    ms = p.build("metric.schedule", replace, ms_default, **{
        k: p.number(ms_raw, k, "metric.schedule", type(getattr(ms_default, k)), getattr(ms_default, k))
        for k in ms_raw
    })
    metric = MetricBlock(m_backbone, p.path(m.get("manifest"), "metric.manifest"),
                         p.path(m.get("checkpoint"), "metric.checkpoint"), ms or ms_default)

    # sr
    s = p.section(top.get("sr"), "sr", ("model", "dataset", "setting", "lambdas", "stage1", "stage2",
                                        "checkpoint"))
    model_raw = p.section(s.get("model"), "sr.model", _field_names(SRModelSpec))
    if "weight_path" in model_raw:
        model_raw["weight_path"] = p.path(model_raw["weight_path"], "sr.model.weight_path")
    model = p.build("sr.model", SRModelSpec, **model_raw) or SRModelSpec()
    dataset = None
    if s.get("dataset") is not None:
        ds = p.section(s["dataset"], "sr.dataset", ("reference_dir", "scale"))
        if "reference_dir" not in ds:
            p.error("sr.dataset", "missing reference_dir")
        else:
            dataset = p.build("sr.dataset", SRDatasetSpec, p.path(ds["reference_dir"], "sr.dataset.reference_dir"),
                              p.number(ds, "scale", "sr.dataset", int, model.scale))
            if dataset is not None and dataset.scale != model.scale:
                p.error("sr.dataset.scale", f"{dataset.scale} differs from model scale {model.scale}")
    setting = s.get("setting", "RPA")
    if setting not in SETTINGS:
        p.error("sr.setting", f"unknown setting {setting!r}; choose from {SETTINGS}")
        setting = "RPA"
    lam_raw = p.section(s.get("lambdas"), "sr.lambdas", ("lambda1", "lambda2", "lambda3"))
    lambdas = {k: p.number(lam_raw, k, "sr.lambdas") for k in lam_raw}
    for k, v in lambdas.items():
        idx = ("lambda1", "lambda2", "lambda3").index(k)
        if v is not None and v < 0:
            p.error(f"sr.lambdas.{k}", "must be >= 0")
        elif v and SETTING_WEIGHTS[setting][idx] == 0:
            p.error(f"sr.lambdas.{k}", f"setting {setting} fixes {k} = 0")
    stage1 = _schedule(p, s.get("stage1"), "sr.stage1", profile, 1)
    stage2 = _schedule(p, s.get("stage2"), "sr.stage2", profile, 2)
    sr = SRBlock(model, dataset, setting, lambdas, stage1 or TrainSchedule.desk(1),
                 stage2 or TrainSchedule.desk(2), p.path(s.get("checkpoint"), "sr.checkpoint"))

    # adversarial
    a = p.section(top.get("adversarial"), "adversarial", ("discriminator", "lr", "sweep"))
    disc = DiscriminatorRef()
    if "discriminator" in a:
        if a["discriminator"] is None:
            disc = None
        else:
            d = p.section(a["discriminator"], "adversarial.discriminator", ("backbone", "head", "patch_grid"))
            grid = d.get("patch_grid")
            disc = DiscriminatorRef(d.get("backbone", "tiny"), d.get("head", "vanilla"),
                                    tuple(grid) if grid else None)
            if disc.head not in HEADS:
                p.error("adversarial.discriminator.head", f"must be one of {HEADS}")
    if disc is not None:
        resolve(disc.backbone, "adversarial.discriminator.backbone")
        if disc.head in HEADS and disc.backbone in registry:
            p.build("adversarial.discriminator", DiscriminatorSpec, registry.get(disc.backbone),
                    disc.head, disc.patch_grid)
    sw = p.section(a.get("sweep"), "adversarial.sweep", ("lambda3", "backbones"))
    sweep_l3 = tuple(sw.get("lambda3") or LAMBDA3_SWEEP)
    try:
        sweep_l3 = tuple(float(v) for v in sweep_l3)
        if any(v <= 0 for v in sweep_l3):
            p.error("adversarial.sweep.lambda3", "values must be > 0")
    except (TypeError, ValueError):
        p.error("adversarial.sweep.lambda3", "expected a list of numbers")
        sweep_l3 = LAMBDA3_SWEEP
    sweep_bb = tuple(sw.get("backbones") or ())
    for i, name in enumerate(sweep_bb):
        resolve(name, f"adversarial.sweep.backbones[{i}]")
    adversarial = AdversarialBlock(disc, p.number(a, "lr", "adversarial"), sweep_l3, sweep_bb)

    # the objective this config implies
    lam3 = lambdas.get("lambda3")
    if lam3 is None:
        lam3 = SETTING_WEIGHTS[setting][2]
    if lam3 > 0 and disc is None:
        p.error("adversarial.discriminator", f"setting {setting} has lambda3 > 0 but no discriminator is configured")

    # eval
    e = p.section(top.get("eval"), "eval", ("benchmarks", "split", "transfer"))
    bm = e.get("benchmarks") or {}
    if isinstance(bm, list):
        bm = {Path(str(v)).parent.name or f"set{i}": v for i, v in enumerate(bm)}
    if not isinstance(bm, dict):
        p.error("eval.benchmarks", "expected a mapping of name -> manifest path")
        bm = {}
    benchmarks = {str(k): p.path(v, f"eval.benchmarks.{k}") for k, v in bm.items()}
    sp = p.section(e.get("split"), "eval.split", ("ratios", "seed", "group_by_content"))
    split = p.build("eval.split", SplitSpec, tuple(sp.get("ratios", (0.6, 0.2, 0.2))),
                    p.number(sp, "seed", "eval.split", int, seed or 0),
                    bool(sp.get("group_by_content", True))) or SplitSpec()
    t = p.section(e.get("transfer"), "eval.transfer", ("task", "manifest", "backbones", "inits", "schedule"))
    task = t.get("task", "nr")
    if task not in ("fr", "nr"):
        p.error("eval.transfer.task", "must be fr or nr")
    t_backbones = tuple(t.get("backbones") or ("tiny",))
    for i, name in enumerate(t_backbones):
        resolve(name, f"eval.transfer.backbones[{i}]")
    inits = []
    for i, init in enumerate(t.get("inits") or [{"kind": "random"}]):
        where = f"eval.transfer.inits[{i}]"
        if isinstance(init, str):
            init = {"kind": init}
        init = p.section(init, where, ("kind", "path"))
        mode = p.build(where, InitMode, init.get("kind", ""), p.path(init.get("path"), f"{where}.path"))
        if mode is not None:
            inits.append(mode)
    ts_raw = p.section(t.get("schedule"), "eval.transfer.schedule", _field_names(TransferSchedule))
    ts_default = _transfer_defaults(profile)
    ts = p.build("eval.transfer.schedule", replace, ts_default, **{
        k: p.number(ts_raw, k, "eval.transfer.schedule", type(getattr(ts_default, k)), getattr(ts_default, k))
        for k in ts_raw
    })
    evaluation = EvalBlock(benchmarks, split, task, p.path(t.get("manifest"), "eval.transfer.manifest"),
                           t_backbones, tuple(inits), ts or ts_default)

    if p.errors:
        raise ConfigValidationError(p.errors)
    return ExperimentConfig(seed, profile, p.path(top.get("output_dir"), "output_dir"), tuple(specs),
                            metric, sr, adversarial, evaluation)


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigValidationError([f"YAML syntax: {exc}"]) from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigValidationError(["top level must be a mapping"])
    return parse_config_dict(raw, base_dir=path.parent)

