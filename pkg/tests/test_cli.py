import csv
import json

import pytest
import yaml

from perceptlab.cli import EXIT_DIVERGENCE, EXIT_IO, EXIT_OK, EXIT_VALIDATION, main
from perceptlab.config import parse_config


def _config(tmp_path, toy_root, **overrides):
    cfg = {
        "seed": 1,
        "output_dir": str(tmp_path / "runs"),
        "metric": {"backbone": "tiny", "manifest": str(toy_root / "fr" / "manifest.csv"),
                   "schedule": {"iterations": 10, "batch_size": 8}},
        "sr": {
            "model": {"channels": 8, "blocks": 1},
            "dataset": {"reference_dir": str(toy_root / "sr")},
            "stage1": {"total_iters": 3, "batch_size": 2},
            "stage2": {"total_iters": 3, "batch_size": 2},
        },
        "adversarial": {"discriminator": {"backbone": "tiny"}},
        "eval": {"benchmarks": {"toy": str(toy_root / "fr" / "manifest.csv")}},
    }
    for key, value in overrides.items():
        section, _, name = key.partition("__")
        if name:
            cfg[section][name] = value
        else:
            cfg[section] = value
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_eval_metric_on_three_items(tmp_path, toy_root, capsys):
    src = toy_root / "fr"
    lines = (src / "manifest.csv").read_text().splitlines()
    manifest = tmp_path / "three.csv"
    rows = [",".join(str(src / p) if i < 2 else p for i, p in enumerate(r.split(","))) for r in lines[1:4]]
    manifest.write_text("\n".join([lines[0], *rows]) + "\n")
    cfg = _config(tmp_path, toy_root, eval={"benchmarks": {"three": str(manifest)}})
    assert main(["eval-metric", "--config", str(cfg), "--out", str(tmp_path / "ev")]) == EXIT_OK
    table = _rows(tmp_path / "ev" / "fr_benchmark.csv")
    assert len(table) == 1 and table[0]["metric"] == "tiny"
    assert (tmp_path / "ev" / "fr_benchmark.svg").is_file()
    out = json.loads(capsys.readouterr().out)
    assert out["status"] == "ok" and out["average"]["n"] == 3


def test_train_metric_then_use_checkpoint(tmp_path, toy_root):
    cfg = _config(tmp_path, toy_root)
    assert main(["train-metric", "--config", str(cfg)]) == EXIT_OK
    run = tmp_path / "runs" / "train-metric"
    assert (run / "metric.npz").is_file() and len(_rows(run / "metric_log.csv")) == 10
    cfg2 = _config(tmp_path, toy_root, metric__checkpoint=str(run / "metric.npz"))
    assert main(["eval-metric", "--config", str(cfg2)]) == EXIT_OK
    assert _rows(tmp_path / "runs" / "eval-metric" / "fr_benchmark.csv")[0]["metric"] == "metric"


def test_train_sr_setting_override(tmp_path, toy_root):
    cfg = _config(tmp_path, toy_root)
    assert main(["train-sr", "--config", str(cfg), "--setting", "P"]) == EXIT_OK
    run = tmp_path / "runs" / "train-sr-P"
    assert (run / "stage2.npz").is_file() and (run / "stage1.npz").is_file()
    log = _rows(run / "log.csv")
    assert [r["iter"] for r in log] == ["0", "1", "2"]
    assert all(r["l_adv"] == "" for r in log)
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["seed"] == 1
    assert manifest["config_hash"] == parse_config(cfg).hash()
    assert parse_config(run / "config.yaml") == parse_config(cfg)

    assert main(["eval-sr", "--config", str(cfg), "--setting", "P"]) == EXIT_OK
    eval_run = tmp_path / "runs" / "eval-sr-P"
    assert _rows(eval_run / "sr_eval.csv")[-1]["image"] == "mean"
    assert len(list((eval_run / "images").glob("*.png"))) == 4


def test_sweep_writes_one_log_per_run(tmp_path, toy_root):
    cfg = _config(
        tmp_path, toy_root,
        backbones=[{"name": "rand", "weight_source": "builtin-random-fixed", "seed": 3}],
        adversarial={"discriminator": {"backbone": "tiny"},
                     "sweep": {"lambda3": [1e-3, 5e-3], "backbones": ["tiny", "rand"]}},
    )
    assert main(["sweep", "--config", str(cfg)]) == EXIT_OK
    run = tmp_path / "runs" / "sweep-RPA"
    logs = sorted(p.parent.name for p in run.glob("*/log.csv"))
    assert logs == ["rand_l3-0.001", "rand_l3-0.005", "tiny_l3-0.001", "tiny_l3-0.005"]
    assert all(len(_rows(run / d / "log.csv")) == 3 for d in logs)
    assert len(_rows(run / "sweep.csv")) == 4 and (run / "sweep.svg").is_file()

    assert main(["report", "--config", str(cfg)]) == EXIT_OK
    assert len(_rows(tmp_path / "runs" / "report" / "sweep.csv")) == 4


def test_validation_error_exit(tmp_path, toy_root, capsys):
    cfg = _config(tmp_path, toy_root, adversarial={"discriminator": None}, metric__backbone="nope")
    assert main(["train-sr", "--config", str(cfg)]) == EXIT_VALIDATION
    err = json.loads(capsys.readouterr().err)
    assert err["exit_code"] == 2 and len(err["errors"]) == 2
    assert any("no discriminator" in e for e in err["errors"])


def test_missing_data_exit(tmp_path, toy_root, capsys):
    cfg = _config(tmp_path, toy_root, eval={"benchmarks": {"gone": str(tmp_path / "none.csv")}})
    assert main(["eval-metric", "--config", str(cfg), "--out", str(tmp_path / "x")]) == EXIT_IO
    err = json.loads(capsys.readouterr().err)
    assert err["missing"] == [str(tmp_path / "none.csv")]
    manifest = json.loads((tmp_path / "x" / "manifest.json").read_text())
    assert manifest["status"] == "error"


def test_divergence_exit(tmp_path, toy_root, capsys):
    cfg = _config(tmp_path, toy_root, sr={
        "model": {"channels": 8, "blocks": 1},
        "dataset": {"reference_dir": str(toy_root / "sr")},
        "setting": "RP",
        "stage1": {"total_iters": 1, "batch_size": 2},
        "stage2": {"total_iters": 20, "batch_size": 2, "initial_lr": 1e4},
    })
    assert main(["train-sr", "--config", str(cfg)]) == EXIT_DIVERGENCE
    err = json.loads(capsys.readouterr().err)
    assert err["type"] == "DivergenceError"


def test_make_toy_produces_valid_config(tmp_path):
    assert main(["make-toy", "--out", str(tmp_path / "toy")]) == EXIT_OK
    cfg = parse_config(tmp_path / "toy" / "config.yaml")
    assert cfg.sr.dataset is not None and cfg.eval.benchmarks["toy"].endswith("manifest.csv")


def test_missing_config_file(tmp_path, capsys):
    assert main(["report", "--config", str(tmp_path / "none.yaml")]) == EXIT_VALIDATION
    assert json.loads(capsys.readouterr().err)["status"] == "error"


def test_unknown_subcommand():
    with pytest.raises(SystemExit):
        main(["frobnicate"])
