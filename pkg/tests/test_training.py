import copy
import logging
import math

import numpy as np
import pytest

from adgan.data import SplitSpec, SynthSpec, prepare_patches, stratified_split, synth_dataset
from adgan.evaluation import confusion_matrix, metrics, predict
from adgan.model import GanModel, ModelConfig, load_checkpoint
from adgan.optim import adam_update
from adgan.regularization import RegularizerConfig
from adgan.training import (
    NonFiniteLoss,
    TrainConfig,
    build_model,
    discriminator_loss,
    fake_class_probs,
    train,
    train_step,
)


def small_cfg(**kw):
    model = dict(n_classes=3, patch_size=8, depth=3, base_width=4, noise_dim=8, regularizer=RegularizerConfig("adapdrop", b_size=3))
    model.update(kw.pop("model", {}))
    return TrainConfig(model=ModelConfig(**model), **kw)


@pytest.fixture(scope="module")
def patches():
    cube, labels = synth_dataset(SynthSpec(width=24, height=24, class_counts=(120, 100, 12), noise=0.3), seed=0)
    return prepare_patches(cube, labels, 8)


def params_of(model):
    return {k: v.copy() for k, v in model.named_arrays().items() if k.startswith("param/")}


class TestTrainStep:
    def test_zero_lr_keeps_params(self, patches):
        model = build_model(small_cfg(lr=0.0))
        before = params_of(model)
        d, g = train_step(model, patches.patches[:16], patches.labels[:16], np.random.default_rng(0))
        assert math.isfinite(d) and math.isfinite(g)
        after = params_of(model)
        assert all(np.array_equal(before[k], after[k]) for k in before)
        assert model.step == 1

    def test_deterministic(self, patches):
        results = []
        for _ in range(2):
            model = build_model(small_cfg(seed=3))
            losses = train_step(model, patches.patches[:16], patches.labels[:16], np.random.default_rng(5))
            results.append((losses, model.named_arrays()))
        assert results[0][0] == results[1][0]
        for k, v in results[0][1].items():
            assert v.tobytes() == results[1][1][k].tobytes()

    def test_rejects_bad_labels(self, patches):
        model = build_model(small_cfg())
        with pytest.raises(ValueError, match="labels"):
            train_step(model, patches.patches[:4], np.array([1, 2, 3, 4]), np.random.default_rng(0))

    def test_non_finite_loss_reports_step(self, patches):
        model = build_model(small_cfg())
        model.step = 41
        model.discriminator.params["d.l1.w"].data[:] = np.nan
        with pytest.raises(NonFiniteLoss, match="step 42") as info:
            train_step(model, patches.patches[:4], patches.labels[:4], np.random.default_rng(0))
        assert info.value.step == 42

    @pytest.mark.parametrize("mode", ["adgan", "acgan", "vanilla"])
    def test_d_loss_falls_on_its_own_batch(self, patches, mode):
        falls = 0
        for trial in range(100):
            model = build_model(small_cfg(seed=trial, model={"loss_mode": mode}))
            rng = np.random.default_rng(1000 + trial)
            idx = rng.choice(len(patches), 16, replace=False)
            images, labels = patches.patches[idx], patches.labels[idx]
            fake_classes = rng.integers(1, 4, 16)
            fake = model.generate(model.sample_noise(16, rng), fake_classes, rng).data
            state = copy.deepcopy(rng.bit_generator.state)

            def loss():
                rng.bit_generator.state = copy.deepcopy(state)
                return discriminator_loss(model, images, labels, fake, fake_classes, rng, update_stats=False)

            before = loss()
            before.backward()
            adam_update(model.discriminator.params, model.d_opt)
            falls += loss().item() < before.item()
        assert falls >= 80


class TestTrain:
    def test_step_bookkeeping(self, patches):
        cfg = small_cfg(epochs=2, batch_size=50)
        res = train(patches, cfg)
        per_epoch = math.ceil(len(patches) / 50)
        assert len(res.log.steps) == 2 * per_epoch
        assert [s["step"] for s in res.log.steps] == list(range(1, 2 * per_epoch + 1))
        assert all(math.isfinite(s["d_loss"]) and math.isfinite(s["g_loss"]) for s in res.log.steps)

    def test_single_epoch_returns_it(self, patches, tmp_path):
        res = train(patches.subset(np.arange(40)), small_cfg(epochs=1, batch_size=20), out_dir=tmp_path)
        assert res.log.best_epoch == 1
        assert (tmp_path / "epoch_0001.ckpt").exists()
        ref, _ = load_checkpoint(tmp_path / "epoch_0001.ckpt")
        best, meta = load_checkpoint(tmp_path / "best.ckpt")
        assert meta["epoch"] == 1
        for k, v in ref.named_arrays().items():
            assert v.tobytes() == best.named_arrays()[k].tobytes()

    def test_small_set_falls_back_to_full_batch(self, patches, caplog):
        with caplog.at_level(logging.WARNING):
            res = train(patches.subset(np.arange(10)), small_cfg(epochs=1, batch_size=100))
        assert len(res.log.steps) == 1
        assert "smaller than batch size" in caplog.text

    def test_selects_lowest_d_loss(self, patches):
        res = train(patches, small_cfg(epochs=4, batch_size=50))
        losses = [e["d_loss"] for e in res.log.epochs]
        assert res.log.best_epoch == int(np.argmin(losses)) + 1

    def test_deterministic(self, patches, tmp_path):
        logs = []
        for run in ("a", "b"):
            res = train(patches, small_cfg(epochs=2, batch_size=50, seed=9), out_dir=tmp_path / run)
            logs.append(res.log.steps)
        assert logs[0] == logs[1]
        assert (tmp_path / "a" / "best.ckpt").read_bytes() == (tmp_path / "b" / "best.ckpt").read_bytes()

    def test_checkpoint_reproduces_metrics(self, patches, tmp_path):
        train_set, val = stratified_split(patches, SplitSpec(total=60, seed=0))
        res = train(train_set, small_cfg(epochs=2, batch_size=30), val_set=val, out_dir=tmp_path)
        loaded, _ = load_checkpoint(tmp_path / "epoch_0002.ckpt")
        report = metrics(confusion_matrix(val.labels, predict(loaded, val.patches), 3))
        assert report.oa == res.log.epochs[1]["val_oa"]
        assert report.kappa == res.log.epochs[1]["val_kappa"]

    def test_shape_mismatch(self, patches):
        with pytest.raises(ValueError, match="do not match"):
            train(patches, small_cfg(model={"patch_size": 9}))

    def test_empty(self, patches):
        with pytest.raises(ValueError, match="empty"):
            train(patches.subset(np.arange(0)), small_cfg())


class TestConfigAndIsolation:
    def test_trunk_identical_across_modes(self):
        shapes = {}
        for mode in ("adgan", "acgan", "vanilla"):
            model = GanModel(ModelConfig(loss_mode=mode, patch_size=16), seed=0)
            d = {k: v.shape for k, v in model.discriminator.params.items() if not k.startswith("d.l5.")}
            g = {k: v.shape for k, v in model.generator.params.items()}
            shapes[mode] = (d, g)
        assert shapes["adgan"] == shapes["acgan"] == shapes["vanilla"]

    def test_head_is_the_only_difference(self):
        a = GanModel(ModelConfig(loss_mode="adgan", patch_size=16), seed=0).discriminator.params["d.l5.w"].shape
        b = GanModel(ModelConfig(loss_mode="acgan", patch_size=16), seed=0).discriminator.params["d.l5.w"].shape
        assert a[1:] == b[1:] and (a[0], b[0]) == (4, 5)

    def test_validation(self):
        with pytest.raises(ValueError, match="batch_size"):
            TrainConfig(batch_size=1)
        with pytest.raises(ValueError, match="epochs"):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError, match="fake_sampling"):
            TrainConfig(fake_sampling="other")

    def test_fake_class_probs(self):
        np.testing.assert_allclose(fake_class_probs(np.array([1, 1, 2]), 3, "uniform"), [1 / 3] * 3)
        np.testing.assert_allclose(fake_class_probs(np.array([1, 1, 2, 3]), 3, "match_empirical"), [0.5, 0.25, 0.25])

    def test_optimizer_defaults(self):
        model = build_model(TrainConfig())
        assert (model.d_opt.lr, model.d_opt.beta1, model.d_opt.beta2, model.d_opt.eps) == (2e-4, 0.5, 0.999, 1e-8)


def test_zero_noise_end_to_end():
    cube, labels = synth_dataset(SynthSpec(noise=0.0), seed=0)
    ps = prepare_patches(cube, labels, 16)
    train_set, test = stratified_split(ps, SplitSpec(total=300, seed=0))
    cfg = TrainConfig(model=ModelConfig(n_classes=3, patch_size=16), epochs=10, seed=0)
    res = train(train_set, cfg)
    oa = metrics(confusion_matrix(test.labels, predict(res.model, test.patches), 3)).oa
    assert oa >= 0.95
