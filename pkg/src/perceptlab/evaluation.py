"""Rank/linear correlation, logistic rescaling, FR benchmarks and the
backbone-initialization transfer protocol."""

from __future__ import annotations

import csv
import logging
import math
import tempfile
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
from scipy.optimize import least_squares
from scipy.special import expit
from scipy.stats import rankdata

from .backbones import BackboneSpec, build_backbone
from .core import (
    DTYPE,
    ConfigurationError,
    DataIOError,
    DivergenceError,
    DomainError,
    PerceptLabError,
    RngSeed,
    ScoreRecord,
    read_png,
)

log = logging.getLogger(__name__)

ETA1 = 100.0
ETA2 = 1.0
FIT_MAX_ITER = 500


class UndefinedCorrelationError(DomainError):
    """Correlation requested for a constant vector."""


class FitError(PerceptLabError, RuntimeError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


# --------------------------------------------------------------------------
# Correlation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CorrelationReport:
    srcc: float
    plcc: float
    n: int
    calibrated: bool = False

    def __post_init__(self):
        if self.n < 3:
            raise DomainError("a correlation report needs at least 3 samples")

    def as_dict(self) -> dict:
        return {"srcc": self.srcc, "plcc": self.plcc, "n": self.n, "calibrated": self.calibrated}


def _vectors(a, b) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(a, dtype=np.float64).ravel()
    y = np.asarray(b, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise DomainError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 3:
        raise DomainError("correlation needs at least 3 samples")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise DomainError("non-finite values in correlation input")
    return x, y


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation is undefined for a constant vector")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def srcc(scores, mos) -> float:
    """Spearman correlation with average ranks for ties."""
    x, y = _vectors(scores, mos)
    return _pearson(rankdata(x, method="average"), rankdata(y, method="average"))


def plcc(scores, mos, calibration: "LogisticParams | None" = None) -> float:
    x, y = _vectors(scores, mos)
    if calibration is not None:
        x = np.asarray(apply_rescale(calibration, x), dtype=np.float64)
    return _pearson(x, y)


# --------------------------------------------------------------------------
# Logistic rescaling
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LogisticParams:
    eta3: float
    eta4: float
    eta1: float = ETA1
    eta2: float = ETA2

    def __post_init__(self):
        if not self.eta1 > self.eta2:
            raise DomainError("eta1 must exceed eta2")
        if not (math.isfinite(self.eta3) and math.isfinite(self.eta4)) or self.eta4 == 0:
            raise DomainError("eta3 must be finite and eta4 finite and nonzero")


def apply_rescale(params: LogisticParams, raw):
    """Map raw scores onto (eta2, eta1); scalars in, scalar out."""
    z = (np.asarray(raw, dtype=np.float64) - params.eta3) / abs(params.eta4)
    out = (params.eta1 - params.eta2) * expit(z) + params.eta2
    return float(out) if np.ndim(out) == 0 else out


def fit_logistic(records: Sequence[ScoreRecord], mos_scale: float = 1.0,
                 max_iter: int = FIT_MAX_ITER) -> LogisticParams:
    """Least-squares fit of eta3, eta4 with eta1 = 100 and eta2 = 1 held fixed."""
    usable = [r for r in records if r.mos is not None]
    if len(usable) < 4:
        raise DomainError(f"logistic fit needs >= 4 records with MOS, got {len(usable)}")
    raw = np.array([r.raw_score for r in usable], dtype=np.float64)
    target = np.array([r.mos for r in usable], dtype=np.float64) * mos_scale
    spread = float(raw.std())
    if spread == 0.0:
        raise FitError("raw scores are constant", residual=float(np.sum((target - target.mean()) ** 2)))

    def residuals(p):
        z = (raw - p[0]) / abs(p[1])
        return (ETA1 - ETA2) * expit(z) + ETA2 - target

    # max_nfev counts residual evaluations, which bounds the LM iterations
    result = least_squares(
        residuals, x0=[float(np.median(raw)), spread], method="lm",
        max_nfev=max_iter, xtol=1e-12, ftol=1e-12, gtol=1e-12,
    )
    rss = float(np.sum(result.fun**2))
    if result.status <= 0 or not np.all(np.isfinite(result.x)) or result.x[1] == 0:
        raise FitError(f"logistic fit did not converge ({result.message}); residual {rss:.6g}", residual=rss)
    return LogisticParams(float(result.x[0]), float(result.x[1]))


def minmax_to_mos_range(mos) -> np.ndarray:
    """Linearly map MOS onto [eta2, eta1] so it shares the logistic's range."""
    m = np.asarray(mos, dtype=np.float64)
    lo, hi = float(m.min()), float(m.max())
    if hi == lo:
        return np.full_like(m, (ETA1 + ETA2) / 2)
    return ETA2 + (m - lo) * (ETA1 - ETA2) / (hi - lo)


def correlation_report(quality, mos) -> CorrelationReport:
    """SRCC on raw quality; PLCC after a logistic fit when one is possible."""
    q, m = _vectors(quality, mos)
    rho = srcc(q, m)
    if q.size >= 4:
        target = minmax_to_mos_range(m)
        records = [ScoreRecord(str(i), float(a), float(b)) for i, (a, b) in enumerate(zip(q, target))]
        try:
            params = fit_logistic(records)
            return CorrelationReport(rho, plcc(q, m, params), int(q.size), calibrated=True)
        except (FitError, UndefinedCorrelationError) as exc:
            log.warning("logistic calibration skipped: %s", exc)
    return CorrelationReport(rho, plcc(q, m), int(q.size), calibrated=False)


# --------------------------------------------------------------------------
# Manifests
# --------------------------------------------------------------------------


FR_FIELDS = ("distorted_path", "reference_path", "mos")
NR_FIELDS = ("image_path", "mos")
EVALUATOR_FIELDS = ("image_path", "evaluator", "raw_score")


@dataclass(frozen=True)
class FRItem:
    distorted: Path
    reference: Path
    mos: float


@dataclass(frozen=True)
class NRItem:
    image: Path
    mos: float


def _read_rows(path, fields) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise DataIOError(f"manifest not found: {path}", missing=[str(path)])
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != fields:
            raise DataIOError(f"{path}: expected header {','.join(fields)}, got {reader.fieldnames}")
        return list(reader)


def _number(row: dict, key: str, manifest) -> float:
    try:
        return float(row[key])
    except (TypeError, ValueError):
        raise DataIOError(f"{manifest}: {key} {row[key]!r} is not a number") from None


def _resolve(base: Path, p: str) -> Path:
    q = Path(p.strip())
    return q if q.is_absolute() else base / q


def _require_files(paths: Iterable[Path], manifest):
    missing = sorted({str(p) for p in paths if not p.is_file()})
    if missing:
        raise DataIOError(f"{manifest}: {len(missing)} missing file(s)", missing=missing)


def read_fr_manifest(path) -> list[FRItem]:
    base = Path(path).parent
    items = [
        FRItem(_resolve(base, r["distorted_path"]), _resolve(base, r["reference_path"]), _number(r, "mos", path))
        for r in _read_rows(path, FR_FIELDS)
    ]
    _require_files([p for it in items for p in (it.distorted, it.reference)], path)
    return items


def read_nr_manifest(path) -> list[NRItem]:
    base = Path(path).parent
    items = [NRItem(_resolve(base, r["image_path"]), _number(r, "mos", path)) for r in _read_rows(path, NR_FIELDS)]
    _require_files([it.image for it in items], path)
    return items


def read_evaluator_manifest(path) -> list[tuple[str, str, float]]:
    return [
        (r["image_path"].strip(), r["evaluator"].strip(), _number(r, "raw_score", path))
        for r in _read_rows(path, EVALUATOR_FIELDS)
    ]


def load_rgb(path) -> torch.Tensor:
    x = read_png(path).data
    return x.expand(3, -1, -1) if x.shape[0] == 1 else x


# --------------------------------------------------------------------------
# Full-reference benchmark
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkReport:
    datasets: dict
    average: dict

    def rows(self) -> list[dict]:
        out = [{"dataset": k, **v.as_dict()} for k, v in self.datasets.items()]
        out.append({"dataset": "average", **self.average})
        return out


def fr_distances(metric, items: Sequence[FRItem], workers: int = 1, chunk: int = 16) -> np.ndarray:
    """Distances for every manifest item, computed in chunks across threads."""
    blocks = [items[i:i + chunk] for i in range(0, len(items), chunk)]

    def score(block):
        out = []
        with torch.no_grad():
            for it in block:
                x, y = load_rgb(it.distorted), load_rgb(it.reference)
                if x.shape != y.shape:
                    raise DataIOError(f"{it.distorted} and {it.reference} differ in size")
                out.append(float(metric(x[None], y[None])[0]))
        return out

    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(score, blocks))
    else:
        parts = [score(b) for b in blocks]
    return np.array([d for p in parts for d in p], dtype=np.float64)


def run_fr_benchmark(metric, manifests, workers: int = 1) -> BenchmarkReport:
    """Per-dataset SRCC/PLCC of quality = -distance, plus their macro average.

    ``manifests`` maps dataset names to manifest paths, or is a list of paths
    (named by their parent directory).
    """
    if not isinstance(manifests, Mapping):
        paths = [Path(p) for p in ([manifests] if isinstance(manifests, (str, Path)) else manifests)]
        manifests = {p.parent.name or p.stem: p for p in paths}
    if not manifests:
        raise DomainError("no benchmark manifests given")
    loaded = {name: read_fr_manifest(path) for name, path in manifests.items()}
    reports = {}
    for name, items in loaded.items():
        quality = -fr_distances(metric, items, workers)
        reports[name] = correlation_report(quality, [it.mos for it in items])
    average = {
        "srcc": float(np.mean([r.srcc for r in reports.values()])),
        "plcc": float(np.mean([r.plcc for r in reports.values()])),
        "n": int(sum(r.n for r in reports.values())),
        "calibrated": all(r.calibrated for r in reports.values()),
    }
    return BenchmarkReport(reports, average)


# --------------------------------------------------------------------------
# Transfer protocol
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple = (0.6, 0.2, 0.2)
    seed: int = 0
    group_by_content: bool = True

    def __post_init__(self):
        r = tuple(float(v) for v in self.ratios)
        if len(r) != 3 or min(r) < 0 or abs(sum(r) - 1.0) > 1e-9:
            raise DomainError(f"split ratios must be three nonnegative values summing to 1, got {r}")
        object.__setattr__(self, "ratios", r)

    def split(self, groups: Sequence[str]) -> tuple[list[int], list[int], list[int]]:
        """Index lists for train/val/test. With grouping, items sharing a
        group key (e.g. the same reference content) land in one split."""
        keys = list(groups) if self.group_by_content else [str(i) for i in range(len(groups))]
        unique = sorted(set(keys))
        order = RngSeed(self.seed).numpy("split").permutation(len(unique))
        n = len(unique)
        n_train = int(round(self.ratios[0] * n))
        n_val = int(round(self.ratios[1] * n))
        which = {}
        for rank, g in enumerate(order):
            which[unique[g]] = 0 if rank < n_train else (1 if rank < n_train + n_val else 2)
        parts = ([], [], [])
        for i, k in enumerate(keys):
            parts[which[k]].append(i)
        return parts


INIT_KINDS = ("random", "gan", "imagenet-file")


@dataclass(frozen=True)
class InitMode:
    kind: str
    path: str | None = None

    def __post_init__(self):
        if self.kind not in INIT_KINDS:
            raise ConfigurationError(f"unknown init mode {self.kind!r}; choose from {INIT_KINDS}")
        if self.kind != "random" and not self.path:
            need = "a discriminator checkpoint" if self.kind == "gan" else "a weight file"
            raise ConfigurationError(f"init mode {self.kind} requires {need}")


def initialized_spec(base: BackboneSpec, init: InitMode, work_dir, frozen: bool) -> BackboneSpec:
    """Backbone spec with weights from ``init``; gan checkpoints are unpacked into ``work_dir``."""
    from .adversarial import extract_disc_backbone, sidecar_path

    name = f"{base.name}-{init.kind}"
    if init.kind == "random":
        return replace(base, name=name, weight_source="builtin-random-fixed", weight_path=None, frozen=frozen)
    path = Path(init.path)
    if not path.is_file():
        raise ConfigurationError(f"{init.kind} init: file not found: {path}")
    if init.kind == "gan":
        if not sidecar_path(path).is_file():
            raise ConfigurationError(f"gan init: {path} has no discriminator sidecar")
        out = Path(work_dir) / f"{name}.npz"
        extract_disc_backbone(path, out, expected_arch=base.arch)
        path = out
    return replace(base, name=name, weight_source="file", weight_path=str(path), frozen=frozen)


@dataclass(frozen=True)
class TransferSchedule:
    """Desk-scale defaults; FR reuses the metric schedule, NR trains a head."""

    fr_iterations: int = 200
    fr_lr: float = 1e-3
    nr_iterations: int = 150
    nr_lr: float = 1e-3
    nr_batch: int = 16
    eval_every: int = 25


@dataclass(frozen=True)
class TransferResult:
    backbone: str
    init: str
    task: str
    test: CorrelationReport
    val: CorrelationReport | None = None
    meta: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {"backbone": self.backbone, "init": self.init, "task": self.task,
                "srcc": self.test.srcc, "plcc": self.test.plcc, "n": self.test.n}


class NRRegressor(nn.Module):
    """Backbone, global average pooling of the last stage, one linear output."""

    def __init__(self, backbone: nn.Module, width: int, seed: int = 0):
        super().__init__()
        self.backbone = backbone
        self.head = nn.Linear(width, 1).to(DTYPE)
        gen = RngSeed(seed).torch("nr-head")
        with torch.no_grad():
            self.head.weight.normal_(0, 1 / math.sqrt(width), generator=gen)
            self.head.bias.zero_()

    def forward(self, x):
        return self.head(self.backbone(x)[-1].mean(dim=(-2, -1))).squeeze(-1)


def _safe_report(pred, mos) -> CorrelationReport:
    try:
        return correlation_report(pred, mos)
    except UndefinedCorrelationError:
        raise DivergenceError("predictions collapsed to a constant") from None


def _transfer_fr(spec, items, split, schedule, seed):
    from .perceptual import MetricSchedule, PerceptualMetric, MetricWeights, train_metric

    groups = [it.reference.as_posix() for it in items]
    train, val, test = split.split(groups)
    if min(len(train), len(test)) < 3:
        raise DomainError("split leaves fewer than 3 items in train or test")
    metric = PerceptualMetric(spec, MetricWeights.uniform(spec.channel_counts))
    data = [((load_rgb(items[i].distorted), load_rgb(items[i].reference)), items[i].mos) for i in train]
    sched = MetricSchedule(iterations=schedule.fr_iterations, lr=schedule.fr_lr)
    train_metric(metric, data, sched, seed)

    def report(idx):
        if len(idx) < 3:
            return None
        return _safe_report(-fr_distances(metric, [items[i] for i in idx]), [items[i].mos for i in idx])

    return report(test), report(val)


def _transfer_nr(spec, items, split, schedule, seed):
    train, val, test = split.split([it.image.as_posix() for it in items])
    if min(len(train), len(test)) < 3 or len(val) < 3:
        raise DomainError("split leaves fewer than 3 items in a partition")
    images = torch.stack([load_rgb(it.image) for it in items])
    mos = torch.tensor([it.mos for it in items], dtype=DTYPE)
    mu, sd = mos[train].mean(), mos[train].std().clamp_min(1e-8)
    target = (mos - mu) / sd

    with torch.random.fork_rng():
        torch.manual_seed(int(seed.numpy("nr-init").integers(0, 2**31)))
        model = NRRegressor(build_backbone(spec), spec.stage_layout[-1][0], seed.seed)
    model.backbone.requires_grad_(True)
    opt = torch.optim.Adam(model.parameters(), lr=schedule.nr_lr)

    def predict(idx):
        model.eval()
        with torch.no_grad():
            return model(images[idx]).numpy()

    best, best_state = -math.inf, None
    train_idx = np.asarray(train)
    for step in range(schedule.nr_iterations):
        model.train()
        rng = seed.numpy("nr-batches", step)
        idx = torch.from_numpy(rng.choice(train_idx, size=min(schedule.nr_batch, len(train_idx)), replace=False))
        loss = torch.mean((model(images[idx]) - target[idx]) ** 2)
        if not torch.isfinite(loss):
            raise DivergenceError(f"NR regression loss became {loss.item()} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if (step + 1) % schedule.eval_every == 0 or step + 1 == schedule.nr_iterations:
            pred = predict(val)
            score = srcc(pred, mos[val].numpy()) if np.ptp(pred) > 0 else -math.inf
            if score > best:
                best = score
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    if best_state is not None:
        model.load_state_dict(best_state)
    return (_safe_report(predict(test), mos[test].numpy()),
            _safe_report(predict(val), mos[val].numpy()))


def run_transfer_experiment(
    backbone: BackboneSpec,
    init: InitMode,
    task: str,
    manifest,
    split: SplitSpec = SplitSpec(),
    schedule: TransferSchedule = TransferSchedule(),
    seed: RngSeed | int = 0,
    work_dir=None,
) -> TransferResult:
    """Train an FR metric (frozen backbone) or an NR regressor (trainable
    backbone) from the given initialization; report on the test split."""
    if task not in ("fr", "nr"):
        raise ConfigurationError(f"unknown IQA task {task!r}")
    seed = seed if isinstance(seed, RngSeed) else RngSeed(seed)
    with tempfile.TemporaryDirectory() as tmp:
        spec = initialized_spec(backbone, init, work_dir or tmp, frozen=(task == "fr"))
        if task == "fr":
            test, val = _transfer_fr(spec, read_fr_manifest(manifest), split, schedule, seed)
        else:
            test, val = _transfer_nr(spec, read_nr_manifest(manifest), split, schedule, seed)
    return TransferResult(backbone.name, init.kind, task, test, val,
                          meta={"manifest": str(manifest), "seed": seed.seed})


# --------------------------------------------------------------------------
# Evaluator score table
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EvaluatorTable:
    """Mean rescaled score per (evaluator, image set), the across-evaluator
    Average row, and the population std over image sets per row."""

    groups: tuple
    rows: dict
    std: dict

    def as_rows(self) -> list[dict]:
        return [{"evaluator": ev, **{g: vals.get(g) for g in self.groups}, "std": self.std[ev]}
                for ev, vals in self.rows.items()]


def evaluator_table(
    scores: Sequence[tuple[str, str, float]],
    calibration: Mapping[str, LogisticParams] | None = None,
    exclude_from_std: Iterable[str] = (),
) -> EvaluatorTable:
    """Image sets are keyed by the parent directory of each image path."""
    calibration = calibration or {}
    acc = defaultdict(lambda: defaultdict(list))
    groups = []
    for path, evaluator, raw in scores:
        g = Path(path).parent.name
        if g not in groups:
            groups.append(g)
        value = apply_rescale(calibration[evaluator], raw) if evaluator in calibration else float(raw)
        acc[evaluator][g].append(value)
    if not acc:
        raise DomainError("no evaluator scores given")
    rows = {ev: {g: float(np.mean(v)) for g, v in per.items()} for ev, per in sorted(acc.items())}
    rows["Average"] = {
        g: float(np.mean([r[g] for r in rows.values() if g in r])) for g in groups
    }
    skip = set(exclude_from_std)
    std = {}
    for ev, vals in rows.items():
        kept = [v for g, v in vals.items() if g not in skip]
        std[ev] = float(np.std(kept)) if kept else float("nan")
    return EvaluatorTable(tuple(groups), rows, std)
