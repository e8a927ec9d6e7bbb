"""Alternating D/G optimization with lowest-loss model selection."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import PatchSet
from .model import (
    SOURCE_REAL,
    GanModel,
    ModelConfig,
    acgan_g_loss,
    acgan_losses,
    adgan_d_loss,
    adgan_g_loss,
    save_checkpoint,
    split_heads,
    vanilla_gan_losses,
)
from .optim import adam_update
from .tensor import Tensor

log = logging.getLogger(__name__)

FAKE_SAMPLING = ("uniform", "match_empirical")


class NonFiniteLoss(RuntimeError):
    def __init__(self, step: int, which: str, value: float):
        super().__init__(f"non-finite {which} loss {value} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 100
    batch_size: int = 100
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 1
    fake_sampling: str = "uniform"

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2 for batch normalization, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.fake_sampling not in FAKE_SAMPLING:
            raise ValueError(f"fake_sampling must be one of {FAKE_SAMPLING}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    wall_time: float = 0.0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "epoch", "d_loss", "g_loss"])
            for rec in self.steps:
                writer.writerow([rec["step"], rec["epoch"], repr(rec["d_loss"]), repr(rec["g_loss"])])

    def summary(self) -> dict:
        return {
            "n_steps": len(self.steps),
            "best_epoch": self.best_epoch,
            "epochs": self.epochs,
            "wall_time_s": round(self.wall_time, 3),
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def fake_class_probs(labels: np.ndarray, k: int, mode: str) -> np.ndarray:
    if mode == "uniform":
        return np.full(k, 1.0 / k)
    counts = np.bincount(labels, minlength=k + 1)[1:].astype(np.float64)
    return counts / counts.sum()


def _d_objective(model: GanModel, logits_real: Tensor, labels, logits_fake: Tensor, fake_classes) -> Tensor:
    mode = model.cfg.loss_mode
    if mode == "adgan":
        return adgan_d_loss(logits_real, labels, logits_fake)
    src_r, cls_r = split_heads(logits_real)
    src_f, cls_f = split_heads(logits_fake)
    if mode == "acgan":
        return acgan_losses(src_r, src_f, cls_r, cls_f, labels, fake_classes).d_objective
    d_loss, _ = vanilla_gan_losses(src_r, src_f)
    # the class head only ever sees real samples in this mode
    return d_loss + T.softmax_log_loss(cls_r, np.asarray(labels) - 1)


def _g_objective(model: GanModel, logits_fake: Tensor, classes) -> Tensor:
    mode = model.cfg.loss_mode
    if mode == "adgan":
        return adgan_g_loss(logits_fake, classes)
    src_f, cls_f = split_heads(logits_fake)
    if mode == "acgan":
        return acgan_g_loss(src_f, cls_f, classes)
    return T.softmax_log_loss(src_f, np.full(len(src_f), SOURCE_REAL))


def discriminator_loss(
    model: GanModel,
    images: np.ndarray,
    labels: np.ndarray,
    fake: np.ndarray,
    fake_classes: np.ndarray,
    rng: np.random.Generator,
    update_stats: bool = True,
) -> Tensor:
    """Training-mode D objective on a real batch and a fixed generated batch.

    Only the real batch updates the batch-norm running statistics.
    """
    disc = model.discriminator
    logits_real = disc(Tensor(np.asarray(images, dtype=model.cfg.dtype)), True, rng, update_stats)
    logits_fake = disc(Tensor(np.asarray(fake, dtype=model.cfg.dtype)), True, rng, update_stats=False)
    return _d_objective(model, logits_real, labels, logits_fake, fake_classes)


def train_step(
    model: GanModel,
    images: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
    class_probs: np.ndarray | None = None,
) -> tuple[float, float]:
    """One discriminator update then one generator update (Adam for both).

    The discriminator sees the real batch and an equally sized generated
    batch whose classes are drawn from ``class_probs`` (uniform by default);
    the generator is then updated on a fresh generated batch.
    """
    cfg = model.cfg
    k = cfg.n_classes
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 1 or labels.max() > k):
        raise ValueError(f"batch labels must lie in 1..{k}")
    n = len(labels)
    probs = np.full(k, 1.0 / k) if class_probs is None else class_probs
    step = model.step + 1
    gen, disc = model.generator, model.discriminator

    fake_classes = rng.choice(np.arange(1, k + 1), size=n, p=probs)
    with T.no_grad():
        fake = gen(model.sample_noise(n, rng), fake_classes, True, rng)
    disc.zero_grad()
    d_loss = discriminator_loss(model, images, labels, fake.data, fake_classes, rng)
    if not np.isfinite(d_loss.item()):
        raise NonFiniteLoss(step, "discriminator", d_loss.item())
    d_loss.backward()
    adam_update(disc.params, model.d_opt)

    gen_classes = rng.choice(np.arange(1, k + 1), size=n, p=probs)
    gen.zero_grad()
    disc.zero_grad()
    fake = gen(model.sample_noise(n, rng), gen_classes, True, rng)
    logits = disc(fake, True, rng, update_stats=False)
    g_loss = _g_objective(model, logits, gen_classes)
    if not np.isfinite(g_loss.item()):
        raise NonFiniteLoss(step, "generator", g_loss.item())
    g_loss.backward()
    adam_update(gen.params, model.g_opt)
    disc.zero_grad()

    model.step = step
    return d_loss.item(), g_loss.item()


def recalibrate_bn(model: GanModel, patches: np.ndarray, rng: np.random.Generator, batch_size: int) -> None:
    """Replace running BN statistics by exact averages over fresh passes.

    The discriminator is swept over ``patches``; the generator over the same
    number of samples with uniformly drawn classes. Regularizers stay off, as
    at inference. Per-batch means and variances are averaged.
    """
    k = model.cfg.n_classes
    n = len(patches)
    with T.no_grad():
        for net in (model.generator, model.discriminator):
            for name in net.buffers:
                net.buffers[name][...] = 0.0
        for i, start in enumerate(range(0, n, batch_size), start=1):
            size = min(batch_size, n - start)
            model.generator.bn_momentum = model.discriminator.bn_momentum = 1.0 / i
            model.discriminator(
                Tensor(np.asarray(patches[start : start + batch_size], dtype=model.cfg.dtype)), True, regularize=False
            )
            classes = rng.integers(1, k + 1, size)
            model.generator(model.sample_noise(size, rng), classes, True, regularize=False)
    model.generator.bn_momentum = model.discriminator.bn_momentum = None


@dataclass
class TrainResult:
    model: GanModel
    log: TrainLog
    final_model: GanModel


def build_model(cfg: TrainConfig) -> GanModel:
    model = GanModel(cfg.model, seed=cfg.seed)
    for opt in (model.g_opt, model.d_opt):
        opt.lr, opt.beta1, opt.beta2, opt.eps = cfg.lr, cfg.beta1, cfg.beta2, cfg.eps
    return model


def train(
    train_set: PatchSet,
    cfg: TrainConfig,
    val_set: PatchSet | None = None,
    out_dir=None,
    progress=None,
) -> TrainResult:
    """Run ``cfg.epochs`` epochs of shuffled mini-batches.

    The returned model is the epoch snapshot with the lowest mean
    discriminator loss. With ``out_dir`` every ``checkpoint_every``-th epoch
    is written to disk together with ``best.ckpt``.
    """
    from .evaluation import confusion_matrix, metrics, predict

    n = len(train_set)
    if n == 0:
        raise ValueError("training split is empty")
    if train_set.patches.shape[1:] != (cfg.model.channels, cfg.model.patch_size, cfg.model.patch_size):
        raise ValueError(
            f"patches {train_set.patches.shape[1:]} do not match the model input "
            f"{(cfg.model.channels, cfg.model.patch_size, cfg.model.patch_size)}"
        )
    batch = cfg.batch_size
    if n < batch:
        log.warning("training set (%d) smaller than batch size (%d); using full batches", n, batch)
        batch = n
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(cfg.seed)
    model = build_model(cfg).train()
    probs = fake_class_probs(train_set.labels, cfg.model.n_classes, cfg.fake_sampling)
    tlog = TrainLog()
    best_loss = math.inf
    best = None
    started = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        d_losses, g_losses = [], []
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            d_loss, g_loss = train_step(model, train_set.patches[idx], train_set.labels[idx], rng, probs)
            tlog.steps.append({"step": model.step, "epoch": epoch, "d_loss": d_loss, "g_loss": g_loss})
            d_losses.append(d_loss)
            g_losses.append(g_loss)
        recalibrate_bn(model, train_set.patches[order], rng, batch)
        record = {"epoch": epoch, "d_loss": float(np.mean(d_losses)), "g_loss": float(np.mean(g_losses))}
        if val_set is not None and len(val_set):
            model.eval()
            pred = predict(model, val_set.patches)
            report = metrics(confusion_matrix(val_set.labels, pred, cfg.model.n_classes))
            record.update(val_oa=report.oa, val_aa=report.aa, val_kappa=report.kappa)
            model.train()
        tlog.epochs.append(record)
        if record["d_loss"] < best_loss:
            best_loss = record["d_loss"]
            best = model.clone()
            tlog.best_epoch = epoch
        if out_dir is not None and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"epoch_{epoch:04d}.ckpt", model, {"epoch": epoch, **record})
        if progress is not None:
            progress(record)
    tlog.wall_time = time.perf_counter() - started
    best.eval()
    if out_dir is not None:
        save_checkpoint(out_dir / "best.ckpt", best, {"epoch": tlog.best_epoch, **tlog.epochs[tlog.best_epoch - 1]})
    return TrainResult(best, tlog, model.eval())
