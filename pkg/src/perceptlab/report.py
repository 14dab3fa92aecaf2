"""CSV tables and SVG figures for benchmark, transfer, sweep and asymmetry results."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .core import DataIOError, DomainError  # noqa: E402
from .evaluation import (  # noqa: E402
    BenchmarkReport,
    CorrelationReport,
    EvaluatorTable,
    TransferResult,
)

STYLE = {
    "svg.hashsalt": "perceptlab",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
}
INIT_ORDER = ("random", "gan", "imagenet-file")


@dataclass(frozen=True)
class SweepPoint:
    """Outcome of one stage-2 run in the adversarial-weight sweep."""

    backbone: str
    lambda3: float
    score: float | None
    diverged: bool = False


@dataclass(frozen=True)
class AsymmetryPoint:
    """A metric's IQA correlation against the quality of SR images it supervised."""

    metric: str
    iqa_srcc: float
    sr_quality: float


@dataclass(frozen=True)
class ReportBundle:
    tables: dict = field(default_factory=dict)
    figures: dict = field(default_factory=dict)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)
    return path


def _figure(width=4.0, height=3.0):
    return plt.subplots(figsize=(width, height))


# --------------------------------------------------------------------------
# Per-kind writers
# --------------------------------------------------------------------------


def _benchmarks(items: list, out: Path, bundle: ReportBundle):
    names, datasets = [], []
    for i, (label, rep) in enumerate(items):
        names.append(label or f"metric{i}")
        datasets.extend(d for d in rep.datasets if d not in datasets)
    header = ["metric"] + [f"{d}_{k}" for d in datasets for k in ("srcc", "plcc")] + ["avg_srcc", "avg_plcc"]
    rows = []
    for name, (_, rep) in zip(names, items):
        row = [name]
        for d in datasets:
            r = rep.datasets.get(d)
            row += [r.srcc, r.plcc] if r else [None, None]
        rows.append(row + [rep.average["srcc"], rep.average["plcc"]])
    bundle.tables["fr_benchmark"] = _write_csv(out / "fr_benchmark.csv", header, rows)

    fig, ax = _figure(max(4.0, 1.2 * len(datasets) + 1), 3.0)
    width = 0.8 / len(items)
    for k, (name, (_, rep)) in enumerate(zip(names, items)):
        xs = [i + k * width for i in range(len(datasets) + 1)]
        ys = [rep.datasets[d].srcc if d in rep.datasets else 0.0 for d in datasets] + [rep.average["srcc"]]
        ax.bar(xs, ys, width, label=name, gid=f"bench-{name}")
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(datasets) + 1)], list(datasets) + ["average"])
    ax.set_ylabel("SRCC")
    ax.legend()
    bundle.figures["fr_benchmark"] = _save(fig, out / "fr_benchmark.svg")


def _transfers(items: list[TransferResult], out: Path, bundle: ReportBundle):
    rows = [[r.backbone, r.task, r.init, r.test.srcc, r.test.plcc, r.test.n] for r in items]
    bundle.tables["transfer"] = _write_csv(
        out / "transfer.csv", ["backbone", "task", "init", "srcc", "plcc", "n"], rows
    )
    by_task = defaultdict(list)
    for r in items:
        by_task[r.task].append(r)
    for task, results in sorted(by_task.items()):
        backbones = list(dict.fromkeys(r.backbone for r in results))
        inits = [k for k in INIT_ORDER if any(r.init == k for r in results)]
        fig, ax = _figure(max(3.0, 1.5 * len(backbones) + 1), 3.0)
        width = 0.8 / len(inits)
        for k, init in enumerate(inits):
            lookup = {r.backbone: r.test.srcc for r in results if r.init == init}
            xs = [i + k * width for i in range(len(backbones))]
            ax.bar(xs, [lookup.get(b, 0.0) for b in backbones], width, label=init, gid=f"init-{init}")
        ax.set_xticks([i + 0.4 - width / 2 for i in range(len(backbones))], backbones)
        ax.set_ylabel(f"{task.upper()} SRCC")
        ax.legend()
        bundle.figures[f"transfer_{task}"] = _save(fig, out / f"transfer_{task}.svg")


def _sweeps(items: list[SweepPoint], out: Path, bundle: ReportBundle):
    rows = [[p.backbone, p.lambda3, p.score, p.diverged] for p in items]
    bundle.tables["sweep"] = _write_csv(out / "sweep.csv", ["backbone", "lambda3", "score", "diverged"], rows)
    fig, ax = _figure()
    by_backbone = defaultdict(list)
    for p in items:
        by_backbone[p.backbone].append(p)
    for name, points in by_backbone.items():
        points = sorted(points, key=lambda p: p.lambda3)
        ys = [p.score if (p.score is not None and not p.diverged) else float("nan") for p in points]
        ax.plot([p.lambda3 for p in points], ys, marker="o", label=name, gid=f"sweep-{name}")
        bad = [p for p in points if p.diverged]
        if bad:
            ax.plot([p.lambda3 for p in bad], [0.0] * len(bad), "x", color="k", gid=f"collapse-{name}")
    ax.set_xscale("log")
    ax.set_xlabel("adversarial weight")
    ax.set_ylabel("score")
    ax.legend()
    bundle.figures["sweep"] = _save(fig, out / "sweep.svg")


def _asymmetry(items: list[AsymmetryPoint], out: Path, bundle: ReportBundle):
    rows = [[p.metric, p.iqa_srcc, p.sr_quality] for p in items]
    bundle.tables["asymmetry"] = _write_csv(out / "asymmetry.csv", ["metric", "iqa_srcc", "sr_quality"], rows)
    fig, ax = _figure()
    ax.scatter([p.iqa_srcc for p in items], [p.sr_quality for p in items], gid="asymmetry-points")
    for p in items:
        ax.annotate(p.metric, (p.iqa_srcc, p.sr_quality), fontsize=7, xytext=(3, 3), textcoords="offset points")
    ax.set_xlabel("IQA SRCC")
    ax.set_ylabel("SR quality")
    bundle.figures["asymmetry"] = _save(fig, out / "asymmetry.svg")


def _evaluators(table: EvaluatorTable, out: Path, bundle: ReportBundle):
    rows = [[ev] + [vals.get(g) for g in table.groups] + [table.std[ev]] for ev, vals in table.rows.items()]
    bundle.tables["evaluator_scores"] = _write_csv(
        out / "evaluator_scores.csv", ["evaluator", *table.groups, "std"], rows
    )


def emit_report(results: Sequence, out_dir) -> ReportBundle:
    """Write CSV tables and SVG figures for every result kind present.

    Benchmark reports may be passed bare or as ``(label, report)`` tuples.
    """
    results = list(results)
    if not results:
        raise DomainError("emit_report needs at least one result")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise DataIOError(f"output directory is not writable: {out} ({exc})", missing=[str(out)]) from exc

    kinds = defaultdict(list)
    for r in results:
        if isinstance(r, BenchmarkReport):
            kinds["bench"].append((None, r))
        elif isinstance(r, tuple) and len(r) == 2 and isinstance(r[1], BenchmarkReport):
            kinds["bench"].append(r)
        elif isinstance(r, TransferResult):
            kinds["transfer"].append(r)
        elif isinstance(r, SweepPoint):
            kinds["sweep"].append(r)
        elif isinstance(r, AsymmetryPoint):
            kinds["asym"].append(r)
        elif isinstance(r, EvaluatorTable):
            kinds["eval"].append(r)
        else:
            raise DomainError(f"cannot report a {type(r).__name__}")

    bundle = ReportBundle()
    with plt.rc_context(STYLE):
        if kinds["bench"]:
            _benchmarks(kinds["bench"], out, bundle)
        if kinds["transfer"]:
            _transfers(kinds["transfer"], out, bundle)
        if kinds["sweep"]:
            _sweeps(kinds["sweep"], out, bundle)
        if kinds["asym"]:
            _asymmetry(kinds["asym"], out, bundle)
        for table in kinds["eval"]:
            _evaluators(table, out, bundle)
    return bundle


# --------------------------------------------------------------------------
# Result files
# --------------------------------------------------------------------------


def result_to_dict(r) -> dict:
    if isinstance(r, tuple) and len(r) == 2 and isinstance(r[1], BenchmarkReport):
        label, rep = r
        return {"kind": "benchmark", "label": label,
                "datasets": {k: v.as_dict() for k, v in rep.datasets.items()}, "average": rep.average}
    if isinstance(r, BenchmarkReport):
        return result_to_dict((None, r))
    if isinstance(r, TransferResult):
        return {"kind": "transfer", "backbone": r.backbone, "init": r.init, "task": r.task,
                "test": r.test.as_dict(), "val": r.val.as_dict() if r.val else None}
    if isinstance(r, SweepPoint):
        return {"kind": "sweep", **asdict(r)}
    if isinstance(r, AsymmetryPoint):
        return {"kind": "asymmetry", **asdict(r)}
    raise DomainError(f"cannot serialize a {type(r).__name__}")


def result_from_dict(d: dict):
    kind = d.get("kind")
    body = {k: v for k, v in d.items() if k != "kind"}
    if kind == "benchmark":
        datasets = {k: CorrelationReport(**v) for k, v in body["datasets"].items()}
        return (body.get("label"), BenchmarkReport(datasets, body["average"]))
    if kind == "transfer":
        val = CorrelationReport(**body["val"]) if body.get("val") else None
        return TransferResult(body["backbone"], body["init"], body["task"], CorrelationReport(**body["test"]), val)
    if kind == "sweep":
        return SweepPoint(**body)
    if kind == "asymmetry":
        return AsymmetryPoint(**body)
    raise DomainError(f"unknown result kind {kind!r}")


def save_results(path, results: Sequence) -> Path:
    path = Path(path)
    payload = [result_to_dict(r) for r in results]
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_results(path) -> list:
    return [result_from_dict(d) for d in json.loads(Path(path).read_text(encoding="utf-8"))]
