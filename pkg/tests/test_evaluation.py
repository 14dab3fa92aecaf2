import csv
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perceptlab.backbones import BackboneSpec
from perceptlab.core import ConfigurationError, DataIOError, DomainError, ScoreRecord
from perceptlab.evaluation import (
    FitError,
    InitMode,
    LogisticParams,
    SplitSpec,
    TransferSchedule,
    UndefinedCorrelationError,
    apply_rescale,
    correlation_report,
    evaluator_table,
    fit_logistic,
    fr_distances,
    initialized_spec,
    minmax_to_mos_range,
    plcc,
    read_fr_manifest,
    read_nr_manifest,
    run_fr_benchmark,
    run_transfer_experiment,
    srcc,
)
from perceptlab.perceptual import PerceptualMetric


def _ranks(v):
    """Average ranks by direct counting."""
    out = []
    for a in v:
        below = sum(1 for b in v if b < a)
        equal = sum(1 for b in v if b == a)
        out.append(below + (equal + 1) / 2)
    return out


def _pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


class TestCorrelation:
    def test_examples(self):
        assert srcc([1, 2, 3, 4], [10, 20, 30, 40]) == 1.0
        assert srcc([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0
        assert plcc([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
        assert srcc([1, 2, 3], [1, 1, 2]) == pytest.approx(math.sqrt(3) / 2)

    def test_exhaustive_against_counting_oracle(self):
        ys = [(1, 3, 2, 4, 4, 1), (2, 2, 1, 3, 4, 4), (4, 1, 3, 2, 1, 2)]
        for n in (3, 4, 5):
            for x in itertools.product(range(1, 5), repeat=n):
                for y in ys:
                    y = y[:n]
                    if len(set(x)) == 1 or len(set(y)) == 1:
                        continue
                    assert srcc(x, y) == pytest.approx(_pearson(_ranks(x), _ranks(y)), abs=1e-12)
                    assert plcc(x, y) == pytest.approx(_pearson(x, y), abs=1e-12)

    def test_constant_input(self):
        with pytest.raises(UndefinedCorrelationError):
            srcc([1, 1, 1], [1, 2, 3])
        with pytest.raises(UndefinedCorrelationError):
            plcc([1, 2, 3], [5, 5, 5])

    def test_input_validation(self):
        with pytest.raises(DomainError):
            srcc([1, 2], [1, 2])
        with pytest.raises(DomainError):
            plcc([1, 2, 3], [1, 2])
        with pytest.raises(DomainError):
            srcc([1, 2, float("nan")], [1, 2, 3])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(-1000, 1000), min_size=3, max_size=30, unique=True), st.integers(0, 2**31))
    def test_srcc_invariant_under_monotone_maps(self, x, seed):
        y = np.random.default_rng(seed).permutation(len(x)).astype(float)
        x = np.array(x) / 10.0
        base = srcc(x, y)
        assert srcc(np.exp(x / 50), y) == pytest.approx(base, abs=1e-12)
        assert srcc(x**3 + x, y) == pytest.approx(base, abs=1e-12)
        assert -1 <= base <= 1


class TestLogistic:
    def test_bounds_and_midpoint(self):
        p = LogisticParams(eta3=0.5, eta4=0.1)
        assert apply_rescale(p, 0.5) == pytest.approx(50.5)
        assert 1 <= apply_rescale(p, -1e6) <= apply_rescale(p, 1e6) <= 100
        values = apply_rescale(p, np.linspace(-1, 2, 50))
        assert np.all(np.diff(values) > 0)

    def test_negative_slope_uses_magnitude(self):
        assert apply_rescale(LogisticParams(0.0, -2.0), 1.0) == apply_rescale(LogisticParams(0.0, 2.0), 1.0)

    def test_param_validation(self):
        with pytest.raises(DomainError):
            LogisticParams(0.0, 0.0)
        with pytest.raises(DomainError):
            LogisticParams(0.0, 1.0, eta1=1.0, eta2=5.0)

    def test_fit_recovers_parameters(self):
        truth = LogisticParams(eta3=0.3, eta4=0.15)
        raw = np.linspace(-0.5, 1.0, 40)
        records = [ScoreRecord(str(i), float(r), apply_rescale(truth, float(r))) for i, r in enumerate(raw)]
        fit = fit_logistic(records)
        assert abs(fit.eta3 - 0.3) < 1e-3 and abs(abs(fit.eta4) - 0.15) < 1e-3

    def test_fit_errors(self):
        with pytest.raises(DomainError):
            fit_logistic([ScoreRecord("a", 1.0, 2.0)] * 3)
        with pytest.raises(FitError) as info:
            fit_logistic([ScoreRecord(str(i), 1.0, float(i)) for i in range(5)])
        assert info.value.residual == pytest.approx(10.0)
        # records without MOS are ignored
        with pytest.raises(DomainError):
            fit_logistic([ScoreRecord(str(i), float(i), None) for i in range(10)])

    def test_minmax(self):
        np.testing.assert_allclose(minmax_to_mos_range([2.0, 3.0, 4.0]), [1.0, 50.5, 100.0])

    def test_calibration_helps_on_logistic_data(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            q = rng.uniform(-3, 3, 60)
            mos = 1 + 99 / (1 + np.exp(-2.5 * q)) + rng.normal(0, 4, 60)
            report = correlation_report(q, mos)
            assert report.calibrated
            assert report.plcc >= plcc(q, mos)

    def test_calibration_cannot_beat_a_perfect_linear_fit(self):
        # raw PLCC is already 1 here and no logistic reproduces a straight line
        q = np.linspace(0, 1, 30)
        report = correlation_report(q, 3 * q + 1)
        assert plcc(q, 3 * q + 1) == pytest.approx(1.0)
        assert report.calibrated and report.plcc < 1.0
        assert report.plcc > 0.99

    def test_small_samples_fall_back_to_raw(self):
        report = correlation_report([0.1, 0.5, 0.2], [1.0, 3.0, 2.0])
        assert not report.calibrated and report.n == 3


def _write_fr(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("distorted_path", "reference_path", "mos"))
        w.writerows(rows)
    return path


class TestBenchmark:
    def test_oracle_mos_gives_perfect_srcc(self, toy_root, tmp_path, tiny_spec):
        metric = PerceptualMetric(tiny_spec)
        items = read_fr_manifest(toy_root / "fr" / "manifest.csv")
        dist = fr_distances(metric, items)
        rows = [(str(it.distorted), str(it.reference), repr(-float(d))) for it, d in zip(items, dist)]
        path = _write_fr(tmp_path / "oracle.csv", rows)
        report = run_fr_benchmark(metric, {"oracle": path})
        assert report.datasets["oracle"].srcc == pytest.approx(1.0, abs=1e-12)
        assert report.average["srcc"] == report.datasets["oracle"].srcc

    def test_deterministic_and_thread_invariant(self, toy_root, tiny_spec):
        metric = PerceptualMetric(tiny_spec)
        path = toy_root / "fr" / "manifest.csv"
        a = run_fr_benchmark(metric, [path])
        b = run_fr_benchmark(metric, [path], workers=3)
        assert a.rows() == b.rows()
        assert a.datasets["fr"].n == 48
        assert a.datasets["fr"].srcc > 0.5

    def test_missing_files_are_itemized(self, tmp_path):
        (tmp_path / "ok.png").write_bytes(b"")
        path = _write_fr(tmp_path / "m.csv", [("gone1.png", "ok.png", "1"), ("ok.png", "gone2.png", "2")])
        with pytest.raises(DataIOError) as info:
            read_fr_manifest(path)
        names = sorted(p.rsplit("/", 1)[-1] for p in map(str, info.value.missing))
        assert names == ["gone1.png", "gone2.png"]

    def test_malformed_mos(self, tmp_path):
        (tmp_path / "a.png").write_bytes(b"")
        with pytest.raises(DataIOError):
            read_fr_manifest(_write_fr(tmp_path / "m.csv", [("a.png", "a.png", "high")]))

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataIOError):
            read_nr_manifest(tmp_path / "none.csv")


class TestSplit:
    def test_sizes_and_disjointness(self):
        train, val, test = SplitSpec((0.6, 0.2, 0.2), seed=1, group_by_content=False).split(["x"] * 10)
        assert (len(train), len(val), len(test)) == (6, 2, 2)
        assert sorted(train + val + test) == list(range(10))

    def test_groups_never_straddle_splits(self):
        groups = [f"ref{i % 7}" for i in range(49)]
        parts = SplitSpec(seed=3).split(groups)
        seen = [set(groups[i] for i in p) for p in parts]
        assert not (seen[0] & seen[1] or seen[0] & seen[2] or seen[1] & seen[2])
        assert sum(len(p) for p in parts) == 49

    def test_seeded(self):
        groups = [str(i) for i in range(30)]
        assert SplitSpec(seed=2).split(groups) == SplitSpec(seed=2).split(groups)
        assert SplitSpec(seed=2).split(groups) != SplitSpec(seed=5).split(groups)

    def test_bad_ratios(self):
        with pytest.raises(DomainError):
            SplitSpec((0.5, 0.5, 0.5))


class TestTransfer:
    def test_init_mode_validation(self, tmp_path):
        with pytest.raises(ConfigurationError):
            InitMode("imagenet")
        with pytest.raises(ConfigurationError):
            InitMode("gan")
        with pytest.raises(ConfigurationError):
            initialized_spec(BackboneSpec("tiny"), InitMode("imagenet-file", str(tmp_path / "x.npz")), tmp_path, True)
        spec = initialized_spec(BackboneSpec("tiny"), InitMode("random"), tmp_path, frozen=False)
        assert spec.weight_source == "builtin-random-fixed" and not spec.frozen

    def test_fr_transfer_is_deterministic(self, toy_root, tmp_path):
        sched = TransferSchedule(fr_iterations=20)
        args = (BackboneSpec("tiny"), InitMode("random"), "fr", toy_root / "fr" / "manifest.csv")
        a = run_transfer_experiment(*args, schedule=sched, seed=1)
        b = run_transfer_experiment(*args, schedule=sched, seed=1)
        assert a.row() == b.row()
        assert a.row()["task"] == "fr" and -1 <= a.test.srcc <= 1

    def test_nr_transfer_runs(self, toy_root):
        sched = TransferSchedule(nr_iterations=6, nr_batch=4, eval_every=3)
        res = run_transfer_experiment(
            BackboneSpec("tiny"), InitMode("random"), "nr", toy_root / "nr" / "manifest.csv", schedule=sched, seed=2
        )
        assert res.test.n == 12 and res.val.n == 12
        assert math.isfinite(res.test.srcc)

    def test_unknown_task(self, toy_root):
        with pytest.raises(ConfigurationError):
            run_transfer_experiment(BackboneSpec("tiny"), InitMode("random"), "rr", toy_root / "nr" / "manifest.csv")


MANIQA = {
    "perceptual": ([49.98, 54.03, 46.66, 54.50, 28.02, 50.31], 8.995),
    "reconstruction-perceptual": ([50.05, 53.96, 48.85, 54.27, 38.67, 50.28], 5.182),
    "perceptual-adversarial": ([45.97, 57.28, 56.42, 56.66, 56.95, 56.83], 4.055),
    "all": ([48.04, 56.50, 57.73, 56.21, 55.33, 56.90], 3.247),
}
COLUMNS = ["vgg16r", "vgg16", "resnet50", "convnext", "clipvit", "swint"]


@pytest.mark.parametrize("block", list(MANIQA))
def test_evaluator_table_std_matches_published_rows(block):
    values, expected = MANIQA[block]
    scores = [(f"{c}/img.png", "MANIQA", v) for c, v in zip(COLUMNS, values)]
    table = evaluator_table(scores)
    assert round(table.std["MANIQA"], 3) == expected


def test_evaluator_table_average_row():
    rows = {
        "MANIQA": [49.98, 54.03, 46.66, 54.50, 28.02, 50.31],
        "LIQE": [58.90, 58.30, 54.40, 62.46, 59.02, 59.30],
        "DeQA": [64.05, 64.04, 60.71, 54.05, 41.56, 61.62],
        "VQ-R1": [59.04, 61.12, 55.72, 55.09, 39.56, 60.16],
    }
    scores = [(f"{c}/a.png", ev, v) for ev, vals in rows.items() for c, v in zip(COLUMNS, vals)]
    table = evaluator_table(scores)
    avg = [table.rows["Average"][c] for c in COLUMNS]
    np.testing.assert_allclose(avg, [57.99, 59.37, 54.37, 56.53, 42.04, 57.85], atol=6e-3)
    assert table.std["Average"] == pytest.approx(5.863, abs=2e-3)
    assert table.std["LIQE"] == pytest.approx(2.355, abs=1e-3)
    assert [r["evaluator"] for r in table.as_rows()][-1] == "Average"


def test_evaluator_table_calibration_and_exclusion():
    scores = [("a/1.png", "E", 0.0), ("a/2.png", "E", 0.0), ("b/1.png", "E", 10.0), ("ref/1.png", "E", 99.0)]
    table = evaluator_table(scores, calibration={"E": LogisticParams(0.0, 1.0)}, exclude_from_std=["ref"])
    assert table.rows["E"]["a"] == pytest.approx(50.5)
    kept = [table.rows["E"]["a"], table.rows["E"]["b"]]
    assert table.std["E"] == pytest.approx(float(np.std(kept)))
