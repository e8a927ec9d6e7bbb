"""Acceptance criteria, one test each.

Every test appends a single PASS/FAIL line (with the measured numbers) to
the session log printed at the end of the run. Training-based criteria share
one cached set of runs: 5 seeds x {adgan+adapdrop, acgan+adapdrop,
adgan+none} on the default imbalanced synthetic scene (500/500/25 labeled
pixels, 16x16 patches, 300 training samples, 30 epochs).
"""

import json
import math
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from adgan import tensor as T
from adgan.cli import main as cli_main
from adgan.data import SplitSpec, SynthSpec, load_cube, prepare_patches, save_cube, stratified_split, synth_dataset
from adgan.evaluation import (
    ConfusionMatrix,
    confusion_matrix,
    decode_map,
    default_palette,
    diversity_report,
    mean_pairwise_distance,
    metrics,
    predict,
    render_map,
)
from adgan.model import (
    GanModel,
    ModelConfig,
    acgan_g_loss,
    acgan_losses,
    adgan_d_loss,
    adgan_g_loss,
    load_checkpoint,
    save_checkpoint,
    vanilla_gan_losses,
)
from adgan.regularization import RegularizerConfig, adapdrop, make_mask
from adgan.tensor import grad_check
from adgan.training import TrainConfig, train

from oracles import brute_force_adapdrop, brute_force_metrics

SEEDS = (0, 1, 2, 3, 4)
PATCH = 16
EPOCHS = 30
TRAIN_TOTAL = 300
MINORITY = 3


def record(log, n, ok, text):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {text}"
    log.append(line)
    print(line)
    return ok


def rand(rng, *shape):
    return rng.standard_normal(shape)


# ---------------------------------------------------------------- gradients

def _grad_cases():
    def acgan_d(a, b, c, d, lr, lf):
        return acgan_losses(a, b, c, d, lr, lf).d_objective

    def acgan_g(a, b, c, d, lr, lf):
        return acgan_losses(a, b, c, d, lr, lf).g_objective

    return {
        "conv2d": lambda r: (lambda x, w: T.conv2d(x, w, 2, 1), [rand(r, 2, 2, 6, 6), rand(r, 3, 2, 4, 4)]),
        "conv2d_s1": lambda r: (lambda x, w: T.conv2d(x, w, 1, 0), [rand(r, 2, 3, 5, 5), rand(r, 2, 3, 3, 3)]),
        "conv_transpose2d": lambda r: (
            lambda x, w: T.conv_transpose2d(x, w, 2, 1),
            [rand(r, 2, 2, 3, 3), rand(r, 2, 3, 4, 4)],
        ),
        "conv_transpose2d_s1": lambda r: (
            lambda x, w: T.conv_transpose2d(x, w, 1, 0),
            [rand(r, 2, 3, 1, 1), rand(r, 3, 2, 4, 4)],
        ),
        "batch_norm_train": lambda r: (
            lambda x, g, b: T.batch_norm(x, g, b),
            [rand(r, 4, 2, 3, 3), rand(r, 2), rand(r, 2)],
        ),
        "batch_norm_eval": lambda r: (
            lambda x, g, b: T.batch_norm(x, g, b, np.array([0.3, -0.1]), np.array([0.8, 1.7]), training=False),
            [rand(r, 3, 2, 2, 2), rand(r, 2), rand(r, 2)],
        ),
        "relu": lambda r: (T.relu, [rand(r, 4, 5) + 0.05]),
        "leaky_relu": lambda r: (lambda x: T.leaky_relu(x, 0.2), [rand(r, 4, 5) + 0.05]),
        "tanh": lambda r: (T.tanh, [rand(r, 4, 5)]),
        "log_softmax": lambda r: (T.log_softmax, [rand(r, 4, 5)]),
        "minmax_normalize": lambda r: (T.minmax_normalize, [rand(r, 2, 2, 4, 4)]),
        "loss_adgan_d": lambda r: (
            lambda a, b, y=r.integers(1, 4, 5): adgan_d_loss(a, y, b),
            [rand(r, 5, 4), rand(r, 3, 4)],
        ),
        "loss_adgan_g": lambda r: (lambda a, y=r.integers(1, 4, 4): adgan_g_loss(a, y), [rand(r, 4, 4)]),
        "loss_acgan_d": lambda r: (
            lambda a, b, c, d, lr=r.integers(1, 4, 4), lf=r.integers(1, 4, 4): acgan_d(a, b, c, d, lr, lf),
            [rand(r, 4, 2), rand(r, 4, 2), rand(r, 4, 3), rand(r, 4, 3)],
        ),
        "loss_acgan_g": lambda r: (
            lambda b, d, lf=r.integers(1, 4, 4): acgan_g_loss(b, d, lf),
            [rand(r, 4, 2), rand(r, 4, 3)],
        ),
        "loss_acgan_g_joint": lambda r: (
            lambda a, b, c, d, lr=r.integers(1, 4, 4), lf=r.integers(1, 4, 4): acgan_g(a, b, c, d, lr, lf),
            [rand(r, 4, 2), rand(r, 4, 2), rand(r, 4, 3), rand(r, 4, 3)],
        ),
        "loss_vanilla_d": lambda r: (lambda a, b: vanilla_gan_losses(a, b)[0], [rand(r, 4, 2), rand(r, 4, 2)]),
        "loss_vanilla_g": lambda r: (lambda a, b: vanilla_gan_losses(a, b)[1], [rand(r, 4, 2), rand(r, 4, 2)]),
    }


def test_criterion_1_gradients(acceptance_log):
    started = time.perf_counter()
    worst = {}
    for name, case in _grad_cases().items():
        errs = []
        for seed in range(20):
            fn, inputs = case(np.random.default_rng(seed))
            errs.append(grad_check(fn, inputs, h=1e-5))
        worst[name] = max(errs)
    elapsed = time.perf_counter() - started
    top = max(worst.values())
    ok = top < 1e-4 and elapsed < 120
    record(
        acceptance_log, 1, ok,
        f"{len(worst)} ops x 20 instances, max rel err {top:.2e} (< 1e-4), {elapsed:.1f}s (< 120s)",
    )
    assert ok, worst


# ---------------------------------------------------------------- adapdrop

def test_criterion_2_adapdrop_oracle(acceptance_log):
    rng = np.random.default_rng(2024)
    mismatches = 0
    worst = 0.0
    non_overlapping = 0
    count_errors = 0
    for case in range(1000):
        h, w = (int(v) for v in rng.integers(8, 33, 2))
        b = int(rng.choice([3, 5, 7]))
        k = int(rng.choice([0, 30, 40, 45, 100]))
        cfg = RegularizerConfig("adapdrop", b_size=b, k=k, keep_prob=float(rng.choice([0.7, 0.8, 0.9])))
        plane = rng.normal(size=(h, w)) * rng.uniform(0.1, 5)
        if case % 10 == 0:
            plane = np.round(plane)  # plenty of ties
        drawn = make_mask(plane, cfg, int(rng.integers(2**31)))
        centers = [tuple(int(v) for v in c) for c in zip(*np.nonzero(drawn.centers))]
        out = adapdrop(plane, cfg, centers=drawn.centers)
        ref_out, ref_mask = brute_force_adapdrop(plane, centers, b, k)
        if not np.array_equal(drawn.values, ref_mask):
            mismatches += 1
        worst = max(worst, float(np.abs(out - ref_out).max()))
        apart = all(max(abs(p[0] - q[0]), abs(p[1] - q[1])) >= b for i, p in enumerate(centers) for q in centers[i + 1 :])
        if centers and apart:
            non_overlapping += 1
            expected = math.ceil(k * b * b / 100)
            r = b // 2
            for ci, cj in centers:
                block = drawn.values[ci - r : ci + r + 1, cj - r : cj + r + 1]
                count_errors += int((block == 0).sum() != expected)
    ok = mismatches == 0 and worst <= 1e-12 and count_errors == 0 and non_overlapping > 0
    record(
        acceptance_log, 2, ok,
        f"1000 planes, mask mismatches {mismatches}, max output diff {worst:.1e} (<= 1e-12), "
        f"{non_overlapping} non-overlapping cases with {count_errors} per-block count errors",
    )
    assert ok


# ---------------------------------------------------------------- metrics

def test_criterion_3_metrics_oracle(acceptance_log):
    rng = np.random.default_rng(3)
    count_errors = 0
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(2, 9))
        n = int(rng.integers(1, 400))
        ref = rng.integers(1, k + 1, n)
        pred = np.where(rng.random(n) < rng.random(), ref, rng.integers(1, k + 1, n))
        cm = confusion_matrix(ref, pred, k)
        # tabulation checked by plain loops
        loop = [[0] * k for _ in range(k)]
        for a, p in zip(ref.tolist(), pred.tolist()):
            loop[a - 1][p - 1] += 1
        rep = metrics(cm)
        count_errors += int(cm.counts.tolist() != loop)
        count_errors += int(rep.total != n or rep.counts != [sum(row) for row in loop])
        oa, aa, kappa = brute_force_metrics(loop)
        worst = max(worst, abs(rep.oa - oa), abs(rep.aa - aa), abs(rep.kappa - kappa))
    hand = metrics(ConfusionMatrix(np.array([[40, 10], [20, 30]])))
    hand_ok = all(math.isclose(v, t, rel_tol=0, abs_tol=1e-12) for v, t in ((hand.kappa, 0.4), (hand.oa, 0.7), (hand.aa, 0.7)))
    ok = count_errors == 0 and worst <= 1e-12 and hand_ok
    record(
        acceptance_log, 3, ok,
        f"1000 matrices, count mismatches {count_errors}, max ratio diff {worst:.1e} (<= 1e-12); "
        f"hand case kappa={hand.kappa:.12g} OA={hand.oa:.12g} AA={hand.aa:.12g}",
    )
    assert ok


# ---------------------------------------------------------------- training runs

@pytest.fixture(scope="module")
def scene():
    cube, labels = synth_dataset(SynthSpec(), seed=0)
    return prepare_patches(cube, labels, PATCH)


@pytest.fixture(scope="module")
def runs(scene):
    """(loss_mode, regularizer, seed) -> dict with model, test report, wall time."""
    out = {}
    with threadpool_limits(1):
        for mode, reg in (("adgan", "adapdrop"), ("acgan", "adapdrop"), ("adgan", "none")):
            for seed in SEEDS:
                train_set, test_set = stratified_split(scene, SplitSpec(total=TRAIN_TOTAL, seed=seed))
                cfg = TrainConfig(
                    model=ModelConfig(n_classes=3, patch_size=PATCH, loss_mode=mode, regularizer=RegularizerConfig(kind=reg)),
                    epochs=EPOCHS,
                    seed=seed,
                )
                result = train(train_set, cfg)
                report = metrics(confusion_matrix(test_set.labels, predict(result.model, test_set.patches), 3))
                out[mode, reg, seed] = {"model": result.model, "report": report, "time": result.log.wall_time}
    return out


def test_criterion_4_end_to_end(runs, acceptance_log):
    oas = [runs["adgan", "adapdrop", s]["report"].oa for s in SEEDS]
    times = [runs["adgan", "adapdrop", s]["time"] for s in SEEDS]
    passing = sum(oa >= 0.90 for oa in oas)
    ok = passing >= 4 and max(times) < 15 * 60
    record(
        acceptance_log, 4, ok,
        f"held-out OA per seed {[round(v, 4) for v in oas]}, {passing}/5 >= 0.90 (need 4), "
        f"slowest run {max(times):.0f}s (< 900s)",
    )
    assert ok


def test_criterion_5_imbalance_trend(runs, acceptance_log):
    adgan = [runs["adgan", "adapdrop", s]["report"].per_class[MINORITY - 1] for s in SEEDS]
    acgan = [runs["acgan", "adapdrop", s]["report"].per_class[MINORITY - 1] for s in SEEDS]
    gap = float(np.mean(adgan) - np.mean(acgan))
    ok = gap >= 0
    record(
        acceptance_log, 5, ok,
        f"minority recall adgan {[round(v, 3) for v in adgan]} mean {np.mean(adgan):.4f}, "
        f"acgan {[round(v, 3) for v in acgan]} mean {np.mean(acgan):.4f}, gap {gap:+.4f} (>= 0)",
    )
    assert ok


def test_criterion_6_regularizer_ordering(runs, acceptance_log):
    drop = [runs["adgan", "adapdrop", s]["report"].oa for s in SEEDS]
    none = [runs["adgan", "none", s]["report"].oa for s in SEEDS]
    diff = float(np.mean(drop) - np.mean(none))
    ok = np.mean(drop) >= np.mean(none) - 0.02
    record(
        acceptance_log, 6, ok,
        f"mean OA adapdrop {np.mean(drop):.4f} vs none {np.mean(none):.4f} "
        f"(difference {diff:+.4f}, bar >= -0.02; strictly better: {diff > 0})",
    )
    assert ok


def test_criterion_8_anti_collapse(runs, scene, acceptance_log):
    worst_ratio = math.inf
    zero_var = 0
    for seed in SEEDS:
        model = runs["adgan", "adapdrop", seed]["model"]
        for cls in (1, 2, 3):
            real = scene.patches[scene.labels == cls].astype(np.float64)
            real_mpd = mean_pairwise_distance(real)
            rep = diversity_report(model, cls, 64, seed=100 + seed)
            zero_var += int(not rep["sample_variance"] > 0)
            worst_ratio = min(worst_ratio, rep["mean_pairwise_distance"] / real_mpd)
    ok = zero_var == 0 and worst_ratio > 0.10
    record(
        acceptance_log, 8, ok,
        f"15 (seed, class) pairs, zero-variance classes {zero_var}, "
        f"min generated/real mean pairwise distance {worst_ratio:.3f} (> 0.10)",
    )
    assert ok


# ---------------------------------------------------------------- determinism

def test_criterion_7_determinism(tmp_path, monkeypatch, acceptance_log):
    monkeypatch.setenv("ADGAN_THREADS", "1")
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"seed": 7, "model": {"patch_size": PATCH}, "train": {"epochs": 2}}))
    for name in ("a", "b"):
        root = tmp_path / name
        assert cli_main(["synth", "--config", str(config), "--out", str(root / "data")]) == 0
        assert cli_main(["train", "--config", str(config), "--data", str(root / "data"), "--out", str(root / "run")]) == 0
        assert cli_main(["eval", "--run", str(root / "run"), "--out", str(root / "eval")]) == 0
    same_metrics = (tmp_path / "a/eval/metrics.json").read_bytes() == (tmp_path / "b/eval/metrics.json").read_bytes()
    ckpts = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a/run/checkpoints").glob("*.ckpt"))
    same_ckpts = all((tmp_path / "a" / p).read_bytes() == (tmp_path / "b" / p).read_bytes() for p in ckpts)
    ok = same_metrics and same_ckpts and len(ckpts) > 0
    record(
        acceptance_log, 7, ok,
        f"metrics.json identical: {same_metrics}; {len(ckpts)} checkpoints identical: {same_ckpts} (ADGAN_THREADS=1)",
    )
    assert ok


# ---------------------------------------------------------------- formats

def test_criterion_9_round_trips(tmp_path, acceptance_log):
    cube, labels = synth_dataset(SynthSpec(class_counts=(40, 30, 20), width=20, height=18, bands=7), seed=9)
    save_cube(tmp_path / "c1", cube, labels)
    cube2, labels2 = load_cube(tmp_path / "c1")
    save_cube(tmp_path / "c2", cube2, labels2)
    hsc_ok = (
        np.array_equal(cube.data.astype(np.float32), cube2.data)
        and np.array_equal(labels.labels, labels2.labels)
        and all((tmp_path / "c1" / f).read_bytes() == (tmp_path / "c2" / f).read_bytes() for f in ("meta.json", "cube.bin", "labels.bin"))
    )

    model = GanModel(ModelConfig(n_classes=4, patch_size=9, depth=3, base_width=4, noise_dim=5), seed=3)
    save_checkpoint(tmp_path / "m1.ckpt", model, {"epoch": 2})
    loaded, meta = load_checkpoint(tmp_path / "m1.ckpt")
    save_checkpoint(tmp_path / "m2.ckpt", loaded, meta)
    a, b = model.named_arrays(), loaded.named_arrays()
    ckpt_ok = (
        (tmp_path / "m1.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()
        and a.keys() == b.keys()
        and all(a[k].dtype == b[k].dtype and a[k].tobytes() == b[k].tobytes() for k in a)
    )

    palette = default_palette(16)
    raster = np.random.default_rng(9).integers(0, 17, (31, 23))
    map_ok = np.array_equal(decode_map(render_map(raster, palette), palette), raster)

    ok = hsc_ok and ckpt_ok and map_ok
    record(acceptance_log, 9, ok, f"HSC bit-identical {hsc_ok}, checkpoint bit-identical {ckpt_ok}, map inversion exact {map_ok}")
    assert ok
