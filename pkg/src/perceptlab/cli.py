"""``perceptlab`` command line: one subcommand per experiment step."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .adversarial import build_discriminator
from .config import ExperimentConfig, dump_config, parse_config, parse_config_dict
from .core import (
    ConfigurationError,
    DataIOError,
    DivergenceError,
    PerceptLabError,
    RngSeed,
    write_png,
)
from .evaluation import load_rgb, read_fr_manifest, run_fr_benchmark, run_transfer_experiment
from .objective import SETTING_WEIGHTS, SETTINGS, make_setting
from .perceptual import MetricWeights, PerceptualMetric, load_metric, save_metric, train_metric
from .report import SweepPoint, emit_report, load_results, save_results
from .srharness import (
    SRCheckpoint,
    SRDatasetSpec,
    infer,
    make_pairs,
    psnr,
    train_stage1,
    train_stage2,
    write_training_log,
)
from .toydata import make_fr_toy, make_nr_toy, make_sr_toy

log = logging.getLogger("perceptlab")

OUTPUT_ENV = "PERCEPTLAB_OUTPUT"
EXIT_OK, EXIT_FAILURE, EXIT_VALIDATION, EXIT_DIVERGENCE, EXIT_IO = 0, 1, 2, 3, 4
RESULTS_FILE = "results.json"


def output_root(cfg: ExperimentConfig | None) -> Path:
    if cfg is not None and cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def _write_json(path: Path, payload) -> Path:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_run_manifest(run_dir: Path, command: str, cfg: ExperimentConfig | None, status: str, extra=None):
    payload = {
        "subcommand": command,
        "config_hash": cfg.hash() if cfg else None,
        "seed": cfg.seed if cfg else None,
        "version": __version__,
        "torch": torch.__version__,
        "numpy": np.__version__,
        "status": status,
        **(extra or {}),
    }
    return _write_json(run_dir / "manifest.json", payload)


# --------------------------------------------------------------------------
# Shared pieces
# --------------------------------------------------------------------------


def _metric(cfg: ExperimentConfig) -> PerceptualMetric:
    if cfg.metric.checkpoint:
        return load_metric(cfg.metric.checkpoint, cfg.registry)
    log.warning("no metric checkpoint configured; using uniform weights on %s", cfg.metric.backbone)
    spec = cfg.registry.get(cfg.metric.backbone)
    return PerceptualMetric(spec, MetricWeights.uniform(spec.channel_counts))


def _require(value, what: str):
    if not value:
        raise ConfigurationError(f"this subcommand needs {what} in the config")
    return value


def _with_setting(cfg: ExperimentConfig, setting: str | None) -> ExperimentConfig:
    """Re-validate the config with a command-line setting override."""
    if setting is None or setting == cfg.sr.setting:
        return cfg
    raw = cfg.to_dict()
    raw["sr"]["setting"] = setting
    return parse_config_dict(raw)


def _pretrained(cfg: ExperimentConfig, pairs, run_dir: Path, seed: RngSeed) -> SRCheckpoint:
    if cfg.sr.checkpoint:
        ckpt = SRCheckpoint.load(cfg.sr.checkpoint)
        if ckpt.stage != 1:
            raise ConfigurationError(f"{cfg.sr.checkpoint} is not a stage-1 checkpoint")
        return ckpt
    result = train_stage1(cfg.sr.model, pairs, cfg.sr.stage1, seed)
    result.checkpoint.save(run_dir / "stage1.npz")
    write_training_log(run_dir / "stage1_log.csv", result.log)
    return result.checkpoint


def _disc_seed(seed: RngSeed, *extra: int) -> int:
    return int(seed.numpy("disc-init", *extra).integers(0, 2**31))


def _val_pairs(cfg: ExperimentConfig, seed: RngSeed):
    ds = cfg.sr.dataset
    val = SRDatasetSpec(ds.reference_dir, ds.scale, "val")
    if val.directory == ds.directory:
        log.warning("no val/ split under %s; scoring on the training references", ds.reference_dir)
    return make_pairs(val, seed)


def _mean_psnr(model, pairs) -> float:
    return float(np.mean([psnr(infer(model, lr).data, hr) for lr, hr in pairs]))


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_train_metric(cfg, args, run_dir: Path) -> dict:
    manifest = _require(cfg.metric.manifest, "metric.manifest")
    items = read_fr_manifest(manifest)
    data = [((load_rgb(it.distorted), load_rgb(it.reference)), it.mos) for it in items]
    spec = cfg.registry.get(cfg.metric.backbone)
    metric = PerceptualMetric(spec, MetricWeights.uniform(spec.channel_counts))
    metric, mlog = train_metric(metric, data, cfg.metric.schedule, RngSeed(cfg.seed))
    path = save_metric(run_dir / "metric.npz", metric, cfg.metric.schedule)
    with open(run_dir / "metric_log.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "lr", "objective", "residual"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(mlog.steps)
    return {"checkpoint": str(path)}


def cmd_eval_metric(cfg, args, run_dir: Path) -> dict:
    benchmarks = dict(cfg.eval.benchmarks)
    if not benchmarks and cfg.metric.manifest:
        benchmarks = {Path(cfg.metric.manifest).parent.name: cfg.metric.manifest}
    _require(benchmarks, "eval.benchmarks or metric.manifest")
    metric = _metric(cfg)
    report = run_fr_benchmark(metric, benchmarks)
    label = Path(cfg.metric.checkpoint).stem if cfg.metric.checkpoint else cfg.metric.backbone
    results = [(label, report)]
    save_results(run_dir / RESULTS_FILE, results)
    bundle = emit_report(results, run_dir)
    return {"tables": {k: str(v) for k, v in bundle.tables.items()}, "average": report.average}


def cmd_train_sr(cfg, args, run_dir: Path) -> dict:
    cfg = _with_setting(cfg, args.setting)
    _require(cfg.sr.dataset, "sr.dataset")
    seed = RngSeed(cfg.seed)
    pairs = make_pairs(cfg.sr.dataset, seed)
    stage1 = _pretrained(cfg, pairs, run_dir, seed)
    l3 = cfg.lambdas[2]
    metric = _metric(cfg) if cfg.lambdas[1] > 0 else None
    disc = build_discriminator(cfg.discriminator_spec(), _disc_seed(seed)) if l3 > 0 else None
    objective = make_setting(cfg.sr.setting, metric, disc, **cfg.sr.lambdas)
    result = train_stage2(stage1, objective, pairs, cfg.sr.stage2, seed, disc_lr=cfg.adversarial.lr)
    result.checkpoint.save(run_dir / "stage2.npz")
    write_training_log(run_dir / "log.csv", result.log)
    val_psnr = _mean_psnr(result.checkpoint.model(), _val_pairs(cfg, seed))
    return {"setting": cfg.sr.setting, "checkpoint": str(run_dir / "stage2.npz"), "val_psnr": val_psnr}


def cmd_eval_sr(cfg, args, run_dir: Path) -> dict:
    _require(cfg.sr.dataset, "sr.dataset")
    setting = args.setting or cfg.sr.setting
    path = output_root(cfg) / f"train-sr-{setting}" / "stage2.npz"
    if not path.is_file() and cfg.sr.checkpoint:
        path = Path(cfg.sr.checkpoint)
    if not path.is_file():
        raise DataIOError(f"SR checkpoint not found: {path}", missing=[str(path)])
    model = SRCheckpoint.load(path).model()
    metric = _metric(cfg)
    (run_dir / "images").mkdir(exist_ok=True)
    rows = []
    for i, (lr, hr) in enumerate(_val_pairs(cfg, RngSeed(cfg.seed))):
        sr = infer(model, lr)
        write_png(run_dir / "images" / f"{i:04d}.png", sr)
        with torch.no_grad():
            dist = float(metric(sr.data[None], hr[None])[0])
        rows.append((f"{i:04d}", psnr(sr.data, hr), dist))
    with open(run_dir / "sr_eval.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("image", "psnr", "perceptual_distance"))
        writer.writerows((name, f"{p:.6f}", f"{d:.6f}") for name, p, d in rows)
        writer.writerow(("mean", f"{np.mean([r[1] for r in rows]):.6f}", f"{np.mean([r[2] for r in rows]):.6f}"))
    return {"checkpoint": str(path), "images": len(rows)}


def cmd_transfer(cfg, args, run_dir: Path) -> dict:
    manifest = _require(cfg.eval.manifest, "eval.transfer.manifest")
    registry = cfg.registry
    results = []
    for name in cfg.eval.backbones:
        for init in cfg.eval.inits:
            work = run_dir / f"{name}-{init.kind}"
            work.mkdir(exist_ok=True)
            results.append(run_transfer_experiment(
                registry.get(name), init, cfg.eval.task, manifest, cfg.eval.split,
                cfg.eval.schedule, RngSeed(cfg.seed), work_dir=work,
            ))
    save_results(run_dir / RESULTS_FILE, results)
    emit_report(results, run_dir)
    return {"runs": len(results)}


def cmd_sweep(cfg, args, run_dir: Path) -> dict:
    cfg = _with_setting(cfg, args.setting)
    _require(cfg.sr.dataset, "sr.dataset")
    _require(cfg.adversarial.discriminator, "adversarial.discriminator")
    if SETTING_WEIGHTS[cfg.sr.setting][2] == 0:
        raise ConfigurationError(f"sweep varies lambda3, which setting {cfg.sr.setting} fixes at 0")
    seed = RngSeed(cfg.seed)
    pairs = make_pairs(cfg.sr.dataset, seed)
    val = _val_pairs(cfg, seed)
    stage1 = _pretrained(cfg, pairs, run_dir, seed)
    metric = _metric(cfg) if cfg.lambdas[1] > 0 else None
    backbones = cfg.adversarial.sweep_backbones or (cfg.adversarial.discriminator.backbone,)
    overrides = {k: v for k, v in cfg.sr.lambdas.items() if k != "lambda3"}
    points = []
    for b_idx, name in enumerate(backbones):
        for l_idx, l3 in enumerate(cfg.adversarial.sweep_lambda3):
            tag = f"{name}_l3-{l3:g}"
            (run_dir / tag).mkdir(exist_ok=True)
            disc = build_discriminator(cfg.discriminator_spec(name), _disc_seed(seed, b_idx, l_idx))
            objective = make_setting(cfg.sr.setting, metric, disc, lambda3=l3, **overrides)
            try:
                result = train_stage2(stage1, objective, pairs, cfg.sr.stage2, seed, disc_lr=cfg.adversarial.lr)
            except DivergenceError as exc:
                log.warning("%s collapsed: %s", tag, exc)
                write_training_log(run_dir / tag / "log.csv", [])
                _write_json(run_dir / tag / "collapse.json", {"error": str(exc)})
                points.append(SweepPoint(name, l3, None, diverged=True))
                continue
            write_training_log(run_dir / tag / "log.csv", result.log)
            points.append(SweepPoint(name, l3, _mean_psnr(result.checkpoint.model(), val)))
    save_results(run_dir / RESULTS_FILE, points)
    emit_report(points, run_dir)
    return {"runs": len(points), "collapsed": sum(p.diverged for p in points)}


def cmd_report(cfg, args, run_dir: Path) -> dict:
    root = output_root(cfg)
    results, sources = [], []
    for path in sorted(root.rglob(RESULTS_FILE)):
        if run_dir.resolve() in path.resolve().parents:
            continue
        results.extend(load_results(path))
        sources.append(str(path))
    if not results:
        raise DataIOError(f"no {RESULTS_FILE} files found under {root}", missing=[str(root)])
    bundle = emit_report(results, run_dir)
    return {"sources": sources, "tables": sorted(bundle.tables), "figures": sorted(bundle.figures)}


def cmd_make_toy(cfg, args, run_dir: Path) -> dict:
    make_sr_toy(run_dir / "sr")
    fr = make_fr_toy(run_dir / "fr")
    nr = make_nr_toy(run_dir / "nr")
    config = {
        "seed": 0,
        "output_dir": "runs",
        "metric": {"backbone": "tiny", "manifest": "fr/manifest.csv", "schedule": {"iterations": 200}},
        "sr": {
            "model": {"channels": 16, "blocks": 2},
            "dataset": {"reference_dir": "sr"},
            "setting": "RPA",
            "stage1": {"total_iters": 100, "batch_size": 4},
            "stage2": {"total_iters": 50, "batch_size": 4},
        },
        "adversarial": {"discriminator": {"backbone": "tiny", "head": "vanilla"},
                        "sweep": {"lambda3": [5e-3, 2.5e-2]}},
        "eval": {"benchmarks": {"toy": "fr/manifest.csv"},
                 "transfer": {"task": "nr", "manifest": str(nr.relative_to(run_dir)),
                              "inits": [{"kind": "random"}]}},
    }
    cfg_path = run_dir / "config.yaml"
    dump_config(parse_config_dict(config, run_dir), cfg_path)
    return {"config": str(cfg_path), "fr_manifest": str(fr), "nr_manifest": str(nr)}


COMMANDS = {
    "train-metric": cmd_train_metric,
    "eval-metric": cmd_eval_metric,
    "train-sr": cmd_train_sr,
    "eval-sr": cmd_eval_sr,
    "transfer": cmd_transfer,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "make-toy": cmd_make_toy,
}


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="perceptlab", description="Perceptual metric and SR experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "make-toy":
            p.add_argument("--out", required=True, help="directory for toy data and a sample config")
            continue
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--out", help=f"run directory (default: <output root>/<subcommand>, root from "
                                     f"config output_dir or ${OUTPUT_ENV})")
        if name in ("train-sr", "eval-sr", "sweep"):
            p.add_argument("--setting", choices=SETTINGS)
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, DivergenceError):
        return EXIT_DIVERGENCE
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, PerceptLabError):
        return EXIT_VALIDATION
    return EXIT_FAILURE


def _error_payload(exc: BaseException, code: int) -> dict:
    payload = {"status": "error", "exit_code": code, "type": type(exc).__name__, "message": str(exc)}
    if getattr(exc, "errors", None):
        payload["errors"] = list(exc.errors)
    if getattr(exc, "missing", None):
        payload["missing"] = list(exc.missing)
    return payload


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = None
    run_dir = None
    try:
        if args.command != "make-toy":
            cfg = parse_config(args.config)
        suffix = ""
        if args.command in ("train-sr", "eval-sr", "sweep"):
            suffix = f"-{args.setting or cfg.sr.setting}"
        run_dir = Path(args.out) if args.out else output_root(cfg) / f"{args.command}{suffix}"
        try:
            run_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise DataIOError(f"cannot create run directory {run_dir}: {exc}", missing=[str(run_dir)]) from exc
        if cfg is not None:
            dump_config(cfg, run_dir / "config.yaml")
        write_run_manifest(run_dir, args.command, cfg, "running")
        summary = COMMANDS[args.command](cfg, args, run_dir)
        write_run_manifest(run_dir, args.command, cfg, "ok", {"summary": summary})
    except Exception as exc:  # noqa: BLE001 - every failure becomes a structured exit
        code = _exit_code(exc)
        if run_dir is not None and run_dir.is_dir():
            try:
                write_run_manifest(run_dir, args.command, cfg, "error", {"error": _error_payload(exc, code)})
            except OSError:
                pass
        if code == EXIT_FAILURE:
            log.exception("unexpected failure")
        print(json.dumps(_error_payload(exc, code), sort_keys=True), file=sys.stderr)
        return code
    print(json.dumps({"status": "ok", "run_dir": str(run_dir), **summary}, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
