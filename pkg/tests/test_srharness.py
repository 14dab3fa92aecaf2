import math

import numpy as np
import pytest
import torch

from perceptlab.adversarial import Discriminator, DiscriminatorSpec
from perceptlab.backbones import BackboneSpec
from perceptlab.core import DTYPE, ConfigurationError, DataIOError, DimensionError, write_png
from perceptlab.objective import make_setting
from perceptlab.perceptual import PerceptualMetric
from perceptlab.srharness import (
    DECAY_FRACTIONS,
    SRCheckpoint,
    SRDatasetSpec,
    SRModelSpec,
    TrainSchedule,
    infer,
    make_pairs,
    psnr,
    read_training_log,
    train_stage1,
    train_stage2,
    write_training_log,
)

SMALL = SRModelSpec(channels=8, blocks=1)


@pytest.fixture(scope="module")
def pairs(tmp_path_factory):
    from perceptlab.toydata import make_sr_toy

    root = tmp_path_factory.mktemp("sr")
    make_sr_toy(root, n_train=6, n_val=3, size=32, seed=0)
    return {
        "train": make_pairs(SRDatasetSpec(str(root), split="train")),
        "val": make_pairs(SRDatasetSpec(str(root), split="val")),
    }


class TestSchedules:
    def test_full_stage2(self):
        s = TrainSchedule.full(2)
        assert (s.total_iters, s.batch_size, s.initial_lr) == (400_000, 32, 2e-4)
        assert s.lr_at(0) == 2e-4
        assert s.lr_at(149_999) == 2e-4
        assert s.lr_at(150_000) == 1e-4
        assert s.lr_at(299_999) == 1e-4
        # two halvings have happened by 310K
        assert s.lr_at(310_000) == 5e-5
        assert s.lr_at(360_000) == 2.5e-5
        assert s.lr_at(399_999) == 2e-4 / 16

    def test_full_stage1(self):
        s = TrainSchedule.full(1)
        assert (s.total_iters, s.initial_lr, s.decay_steps) == (100_000, 2e-4, ())
        assert s.lr_at(99_999) == 2e-4

    def test_desk_keeps_fractions(self):
        assert DECAY_FRACTIONS == (0.375, 0.75, 0.875, 0.9375)
        s = TrainSchedule.desk(2)
        assert s.total_iters == 3000 and s.batch_size == 8
        assert s.decay_steps == (1125, 2250, 2625, 2812)
        assert TrainSchedule.desk(2, 16).decay_steps == (6, 12, 14, 15)

    def test_validation(self):
        with pytest.raises(ConfigurationError):
            TrainSchedule(2, 100, decay_steps=(50, 40))
        with pytest.raises(ConfigurationError):
            TrainSchedule(2, 100, decay_steps=(100,))
        with pytest.raises(ConfigurationError):
            TrainSchedule(3, 100)


class TestPairs:
    def test_downsampled_shape(self, tmp_path, rng):
        write_png(tmp_path / "a.png", torch.from_numpy(rng.uniform(0, 1, size=(3, 256, 256))))
        ((low, ref),) = make_pairs(SRDatasetSpec(str(tmp_path)))
        assert low.shape == (3, 64, 64) and ref.shape == (3, 256, 256)

    def test_empty_directory(self, tmp_path):
        with pytest.raises(DataIOError):
            make_pairs(SRDatasetSpec(str(tmp_path)))
        with pytest.raises(DataIOError):
            make_pairs(SRDatasetSpec(str(tmp_path / "missing")))

    def test_order_is_seeded(self, tmp_path, rng):
        for i in range(5):
            write_png(tmp_path / f"{i}.png", torch.from_numpy(rng.uniform(0, 1, size=(3, 8, 8))))
        spec = SRDatasetSpec(str(tmp_path))
        a = make_pairs(spec, seed=1)
        b = make_pairs(spec, seed=1)
        assert all(torch.equal(x[1], y[1]) for x, y in zip(a, b))


class TestTraining:
    def test_resume_is_bitwise_identical(self, tmp_path, pairs):
        sched = TrainSchedule(1, 12, batch_size=2)
        full = train_stage1(SMALL, pairs["train"], sched, seed=3)
        half = train_stage1(SMALL, pairs["train"], TrainSchedule(1, 6, batch_size=2), seed=3)
        half.checkpoint.save(tmp_path / "half.npz")
        resumed = train_stage1(SMALL, pairs["train"], sched, seed=3, resume=SRCheckpoint.load(tmp_path / "half.npz"))
        assert half.totals + resumed.totals == full.totals
        a, b = full.checkpoint.model_state, resumed.checkpoint.model_state
        assert all(torch.equal(a[k], b[k]) for k in a)

    def test_stage1_improves_validation_psnr(self, pairs):
        before = train_stage1(SMALL, pairs["train"], TrainSchedule(1, 1, initial_lr=0.0, batch_size=4))
        after = train_stage1(SMALL, pairs["train"], TrainSchedule(1, 150, initial_lr=1e-3, batch_size=4))

        def val(ckpt):
            return np.mean([psnr(infer(ckpt, low), ref) for low, ref in pairs["val"]])

        assert val(after.checkpoint) > val(before.checkpoint)

    @pytest.mark.parametrize("setting", ["P", "RPA"])
    def test_stage2_logs_every_iteration(self, pairs, setting):
        stage1 = train_stage1(SMALL, pairs["train"], TrainSchedule(1, 3, batch_size=2)).checkpoint
        disc = Discriminator(DiscriminatorSpec(BackboneSpec("d", weight_source="builtin-random-fixed")))
        objective = make_setting(setting, PerceptualMetric(BackboneSpec("tiny")), disc if setting == "RPA" else None)
        res = train_stage2(stage1, objective, pairs["train"], TrainSchedule(2, 4, decay_steps=(2,), batch_size=2))
        assert [r["iter"] for r in res.log] == [0, 1, 2, 3]
        assert [r["lr"] for r in res.log] == [2e-4, 2e-4, 1e-4, 1e-4]
        assert all(math.isfinite(r["total"]) for r in res.log)
        assert (res.log[0]["l_adv"] is None) == (setting == "P")
        assert res.checkpoint.meta["setting"] == setting

    def test_stage2_needs_stage1_checkpoint(self, pairs):
        stage1 = train_stage1(SMALL, pairs["train"], TrainSchedule(1, 1, batch_size=2)).checkpoint
        objective = make_setting("P", PerceptualMetric(BackboneSpec("tiny")))
        res = train_stage2(stage1, objective, pairs["train"], TrainSchedule(2, 1, batch_size=2))
        with pytest.raises(ConfigurationError):
            train_stage2(res.checkpoint, objective, pairs["train"], TrainSchedule(2, 1, batch_size=2))
        with pytest.raises(ConfigurationError):
            train_stage1(SMALL, pairs["train"], TrainSchedule(2, 1))

    def test_no_pairs(self):
        with pytest.raises(DataIOError):
            train_stage1(SMALL, [], TrainSchedule(1, 1))


def test_checkpoint_round_trip_with_discriminator(tmp_path, pairs):
    stage1 = train_stage1(SMALL, pairs["train"], TrainSchedule(1, 2, batch_size=2)).checkpoint
    disc = Discriminator(DiscriminatorSpec(BackboneSpec("d", weight_source="builtin-random-fixed"), "patch", (2, 2)))
    objective = make_setting("PA", PerceptualMetric(BackboneSpec("tiny")), disc)
    ckpt = train_stage2(stage1, objective, pairs["train"], TrainSchedule(2, 2, batch_size=2)).checkpoint
    ckpt.save(tmp_path / "c.npz")
    back = SRCheckpoint.load(tmp_path / "c.npz")
    assert back.spec == ckpt.spec and back.stage == 2 and back.iteration == 2
    assert back.disc_spec == ckpt.disc_spec
    assert all(torch.equal(back.model_state[k], ckpt.model_state[k]) for k in ckpt.model_state)
    assert all(torch.equal(back.disc_state[k], ckpt.disc_state[k]) for k in ckpt.disc_state)
    assert back.meta["setting"] == "PA"


def test_infer_shapes(pairs):
    ckpt = train_stage1(SMALL, pairs["train"], TrainSchedule(1, 1, batch_size=2)).checkpoint
    out = infer(ckpt, torch.rand(3, 5, 7, dtype=DTYPE))
    assert out.shape == (3, 20, 28)
    assert infer(ckpt, torch.rand(1, 4, 4, dtype=DTYPE)).shape == (3, 16, 16)
    with pytest.raises(DimensionError):
        infer(ckpt, torch.rand(2, 3, 4, 4, dtype=DTYPE))
    with pytest.raises(ConfigurationError):
        infer(ckpt, torch.rand(3, 4, 4, dtype=DTYPE), spec=SRModelSpec())


def test_training_log_round_trip(tmp_path):
    rows = [{"iter": 0, "lr": 2e-4, "l_rec": 0.1, "l_per": None, "l_adv": None, "l_d": None, "total": 0.1}]
    write_training_log(tmp_path / "log.csv", rows)
    assert read_training_log(tmp_path / "log.csv") == rows


def test_psnr():
    x = torch.zeros(3, 4, 4, dtype=DTYPE)
    assert psnr(x, x) == math.inf
    assert psnr(x, x + 0.1) == pytest.approx(20.0)
