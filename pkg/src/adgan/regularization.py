"""Dropout, DropBlock and adaptive DropBlock (AdapDrop) on feature maps.

All three act on the last two axes of an array (one mask per plane, so an
NCHW feature map gets an independent mask per sample and channel) and are
identities outside training.

AdapDrop, per plane::

    A'  = (A - min A) / (max A - min A)          (constant plane -> zeros)
    M   = 1, except inside each sampled b x b block where the
          ceil(k/100 * b^2) largest entries of A' are 0
    out = A' * M * count(M) / count_ones(M)      (all-dropped plane -> zeros)

Block centers are Bernoulli(gamma) over the interior positions, so a block
never crosses the border. Ties inside a block go to the smaller linear index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .tensor import Tensor, minmax_normalize

KINDS = ("none", "dropout", "dropblock", "adapdrop")


@dataclass
class RegularizerConfig:
    kind: str = "adapdrop"
    b_size: int = 7
    k: float = 40.0
    keep_prob: float = 0.9
    # Algorithm-literal output is the normalized plane; this applies the
    # mask to the raw activations instead (ablation only).
    denormalize_after_drop: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown regularizer kind {self.kind!r}; expected one of {KINDS}")
        if self.b_size < 1 or self.b_size % 2 == 0:
            raise ValueError(f"b_size must be an odd positive int, got {self.b_size}")
        if not 0.0 <= self.k <= 100.0:
            raise ValueError(f"k must be a percentage in [0, 100], got {self.k}")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError(f"keep_prob must be in (0, 1], got {self.keep_prob}")

    @property
    def drop_rate(self) -> float:
        return 1.0 - self.keep_prob


@dataclass
class DropMask:
    values: np.ndarray
    centers: np.ndarray | None = None
    b_size: int | None = None
    k: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def scale(self) -> np.ndarray:
        return mask_scale(self.values)


def compute_gamma(keep_prob: float, b_size: int, feat_size: int | tuple[int, int]) -> float:
    """Bernoulli rate for block centers (the DropBlock schedule).

    ``gamma = (1 - keep_prob) / b^2 * H*W / ((H - b + 1)(W - b + 1))``;
    for a square map this is the familiar ``feat^2 / (feat - b + 1)^2`` form.
    """
    h, w = (feat_size, feat_size) if np.isscalar(feat_size) else feat_size
    if b_size > min(h, w):
        raise ValueError(f"b_size {b_size} exceeds feature extent {h}x{w}")
    return (1.0 - keep_prob) / b_size**2 * (h * w) / ((h - b_size + 1) * (w - b_size + 1))


def drop_count(k: float, b_size: int) -> int:
    """Number of entries zeroed per block: ceil(k/100 * b_size^2), exactly."""
    return math.ceil(Fraction(k).limit_denominator(10**6) * b_size * b_size / 100)


def normalize_feature(a: np.ndarray) -> np.ndarray:
    """(a - min) / (max - min) per plane; constant planes become zeros."""
    a = np.asarray(a, dtype=np.float64)
    lo = a.min(axis=(-2, -1), keepdims=True)
    hi = a.max(axis=(-2, -1), keepdims=True)
    span = hi - lo
    return np.where(span == 0, 0.0, (a - lo) / np.where(span == 0, 1.0, span))


def sample_centers(shape: tuple[int, ...], b_size: int, gamma: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean center map; only positions whose block fits are eligible."""
    h, w = shape[-2:]
    r = b_size // 2
    if b_size > min(h, w):
        raise ValueError(f"b_size {b_size} exceeds feature extent {h}x{w}")
    centers = np.zeros(shape, dtype=bool)
    inner = rng.random(shape[:-2] + (h - 2 * r, w - 2 * r)) < gamma
    centers[..., r : h - r, r : w - r] = inner
    return centers


def _block_offsets(b_size: int) -> tuple[np.ndarray, np.ndarray]:
    r = b_size // 2
    dy, dx = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    return dy.ravel(), dx.ravel()


def dropblock_mask(centers: np.ndarray, b_size: int) -> np.ndarray:
    """Zero the full b x b block around every center."""
    mask = np.ones(centers.shape, dtype=np.float64)
    planes = mask.reshape((-1,) + centers.shape[-2:])
    p, ci, cj = np.nonzero(centers.reshape(planes.shape))
    dy, dx = _block_offsets(b_size)
    planes[p[:, None], ci[:, None] + dy, cj[:, None] + dx] = 0.0
    return mask


def adapdrop_mask(normalized: np.ndarray, centers: np.ndarray, b_size: int, k: float) -> np.ndarray:
    """Zero the top-k percentile of ``normalized`` inside every sampled block."""
    mask = np.ones(normalized.shape, dtype=np.float64)
    n_drop = drop_count(k, b_size)
    if n_drop == 0:
        return mask
    hw = normalized.shape[-2:]
    planes = mask.reshape((-1,) + hw)
    values = normalized.reshape((-1,) + hw)
    p, ci, cj = np.nonzero(centers.reshape(planes.shape))
    if p.size == 0:
        return mask
    dy, dx = _block_offsets(b_size)
    rows = ci[:, None] + dy
    cols = cj[:, None] + dx
    block = values[p[:, None], rows, cols]
    # stable sort on the negation: ties keep row-major (= plane linear) order
    order = np.argsort(-block, axis=1, kind="stable")[:, :n_drop]
    take = np.take_along_axis
    planes[p[:, None], take(rows, order, axis=1), take(cols, order, axis=1)] = 0.0
    return mask


def mask_scale(mask: np.ndarray) -> np.ndarray:
    """count(M) / count_ones(M) per plane, 0 where every entry is dropped."""
    ones = mask.sum(axis=(-2, -1), keepdims=True)
    total = mask.shape[-2] * mask.shape[-1]
    return np.where(ones == 0, 0.0, total / np.where(ones == 0, 1.0, ones))


def _rng(rng_seed) -> np.random.Generator:
    if isinstance(rng_seed, np.random.Generator):
        return rng_seed
    return np.random.default_rng(rng_seed)


def make_mask(
    a: np.ndarray,
    cfg: RegularizerConfig,
    rng_seed=None,
    centers: np.ndarray | None = None,
    normalized: np.ndarray | None = None,
) -> DropMask:
    """Build the mask ``cfg.kind`` would apply to ``a`` (no rescaling)."""
    a = np.asarray(a)
    if cfg.kind == "none":
        return DropMask(np.ones(a.shape))
    if cfg.kind == "dropout":
        rng = _rng(rng_seed)
        return DropMask((rng.random(a.shape) >= cfg.drop_rate).astype(np.float64))
    if centers is None:
        gamma = compute_gamma(cfg.keep_prob, cfg.b_size, a.shape[-2:])
        centers = sample_centers(a.shape, cfg.b_size, gamma, _rng(rng_seed))
    else:
        centers = np.asarray(centers, dtype=bool)
        if centers.shape != a.shape:
            raise ValueError(f"centers shape {centers.shape} does not match feature shape {a.shape}")
    if cfg.kind == "dropblock":
        values = dropblock_mask(centers, cfg.b_size)
    else:
        if normalized is None:
            normalized = normalize_feature(a)
        values = adapdrop_mask(normalized, centers, cfg.b_size, cfg.k)
    return DropMask(values, centers=centers, b_size=cfg.b_size, k=cfg.k)


def adapdrop(
    a: np.ndarray,
    cfg: RegularizerConfig,
    rng_seed=None,
    centers: np.ndarray | None = None,
    training: bool = True,
) -> np.ndarray:
    """Adaptive DropBlock on the last two axes of ``a``.

    ``centers`` forces the sampled block centers (boolean, same shape as
    ``a``); otherwise they are drawn at the DropBlock rate for ``cfg``.
    """
    a = np.asarray(a, dtype=np.float64)
    if not training:
        return a
    if cfg.kind != "adapdrop":
        raise ValueError(f"adapdrop called with a {cfg.kind!r} config")
    normalized = normalize_feature(a)
    mask = make_mask(a, cfg, rng_seed, centers=centers, normalized=normalized).values
    base = a if cfg.denormalize_after_drop else normalized
    return base * mask * mask_scale(mask)


def dropblock(
    a: np.ndarray,
    cfg: RegularizerConfig,
    rng_seed=None,
    centers: np.ndarray | None = None,
    training: bool = True,
) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if not training:
        return a
    block_cfg = cfg if cfg.kind == "dropblock" else _with_kind(cfg, "dropblock")
    mask = make_mask(a, block_cfg, rng_seed, centers=centers).values
    return a * mask * mask_scale(mask)


def dropout(a: np.ndarray, p: float, rng_seed=None, training: bool = True) -> np.ndarray:
    """Inverted dropout: zero i.i.d. with probability ``p``, scale by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    a = np.asarray(a, dtype=np.float64)
    if not training or p == 0.0:
        return a
    keep = _rng(rng_seed).random(a.shape) >= p
    return a * keep / (1.0 - p)


def _with_kind(cfg: RegularizerConfig, kind: str) -> RegularizerConfig:
    return RegularizerConfig(kind, cfg.b_size, cfg.k, cfg.keep_prob, cfg.denormalize_after_drop)


def effective_block(b_size: int, h: int, w: int) -> int:
    """Largest odd block size <= b_size that fits an h x w map."""
    fit = min(h, w)
    if fit % 2 == 0:
        fit -= 1
    return max(1, min(b_size, fit))


def apply_regularizer(x: Tensor, cfg: RegularizerConfig | None, rng: np.random.Generator, training: bool) -> Tensor:
    """Network-layer form: differentiable w.r.t. ``x``; masks are constants.

    Feature maps smaller than ``cfg.b_size`` use the largest odd block that
    fits, as DropBlock implementations do.
    """
    if cfg is None or cfg.kind == "none" or not training:
        return x
    if rng is None:
        raise ValueError(f"a training-mode {cfg.kind} layer needs a random generator")
    dtype = x.dtype
    if cfg.kind == "dropout":
        if cfg.drop_rate == 0.0:
            return x
        keep = rng.random(x.shape) >= cfg.drop_rate
        return x * (keep / cfg.keep_prob).astype(dtype)

    h, w = x.shape[-2:]
    b = effective_block(cfg.b_size, h, w)
    layer_cfg = RegularizerConfig(cfg.kind, b, cfg.k, cfg.keep_prob, cfg.denormalize_after_drop)
    gamma = compute_gamma(cfg.keep_prob, b, (h, w))
    centers = sample_centers(x.shape, b, gamma, rng)
    if cfg.kind == "dropblock":
        mask = dropblock_mask(centers, b)
        return x * (mask * mask_scale(mask)).astype(dtype)

    normalized = minmax_normalize(x)
    mask = make_mask(x.data, layer_cfg, centers=centers, normalized=normalized.data).values
    base = x if cfg.denormalize_after_drop else normalized
    return base * (mask * mask_scale(mask)).astype(dtype)
