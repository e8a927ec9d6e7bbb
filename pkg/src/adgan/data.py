"""Hyperspectral cubes: container I/O, PCA, scaling, patches, splits, synthesis.

On disk a cube lives in an HSC container directory::

    meta.json   {"width", "height", "bands", "dtype": "f32", "version": 1,
                 optional "class_names"}
    cube.bin    little-endian float32, band-sequential, row-major per band
    labels.bin  little-endian uint16, row-major; 0 = unlabeled
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

HSC_VERSION = 1
CUBE_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("<u2")


class ContainerError(ValueError):
    pass


@dataclass
class HsiCube:
    """Band-sequential cube, ``data`` shaped (bands, height, width)."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"cube data must be (bands, height, width), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("cube contains non-finite values")

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def pixels(self) -> np.ndarray:
        """(height*width, bands) matrix, row-major pixel order."""
        return self.data.reshape(self.bands, -1).T


@dataclass
class LabelRaster:
    labels: np.ndarray
    class_names: list[str] | None = None

    def __post_init__(self):
        if self.labels.ndim != 2:
            raise ValueError(f"label raster must be 2-d, got {self.labels.shape}")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def n_classes(self) -> int:
        if self.class_names:
            return len(self.class_names)
        return int(self.labels.max()) if self.labels.size else 0

    def class_counts(self) -> dict[int, int]:
        ids, counts = np.unique(self.labels[self.labels > 0], return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}


@dataclass
class PatchSet:
    """Patches stored channel-first, (P, bands, S, S), sorted by center index."""

    patches: np.ndarray
    labels: np.ndarray
    centers: np.ndarray  # (P, 2) row, col

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def size(self) -> int:
        return self.patches.shape[-1]

    def subset(self, idx: np.ndarray) -> "PatchSet":
        return PatchSet(self.patches[idx], self.labels[idx], self.centers[idx])


@dataclass
class SplitSpec:
    """Training-set request: a total (allocated proportionally) or per-class counts."""

    total: int | None = None
    per_class: dict[int, int] | None = None
    seed: int = 0

    def __post_init__(self):
        if (self.total is None) == (self.per_class is None):
            raise ValueError("SplitSpec needs exactly one of total / per_class")
        if self.per_class is not None:
            self.per_class = {int(k): int(v) for k, v in self.per_class.items()}


# -- container I/O -------------------------------------------------------------


def save_cube(path, cube: HsiCube, labels: LabelRaster) -> Path:
    path = Path(path)
    if (labels.height, labels.width) != (cube.height, cube.width):
        raise ContainerError(
            f"label raster {labels.height}x{labels.width} does not match cube {cube.height}x{cube.width}"
        )
    if labels.labels.size and (labels.labels.min() < 0 or labels.labels.max() > np.iinfo(LABEL_DTYPE).max):
        raise ContainerError("labels out of uint16 range")
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "width": cube.width,
        "height": cube.height,
        "bands": cube.bands,
        "dtype": "f32",
        "version": HSC_VERSION,
    }
    if labels.class_names:
        meta["class_names"] = list(labels.class_names)
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    (path / "cube.bin").write_bytes(np.ascontiguousarray(cube.data, dtype=CUBE_DTYPE).tobytes())
    (path / "labels.bin").write_bytes(np.ascontiguousarray(labels.labels, dtype=LABEL_DTYPE).tobytes())
    return path


def load_cube(path) -> tuple[HsiCube, LabelRaster]:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.is_file():
        raise ContainerError(f"{path}: missing meta.json")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise ContainerError(f"{meta_path}: invalid JSON ({exc})") from None
    if meta.get("version") != HSC_VERSION:
        raise ContainerError(f"{meta_path}: unsupported container version {meta.get('version')!r}")
    if meta.get("dtype") != "f32":
        raise ContainerError(f"{meta_path}: unsupported dtype {meta.get('dtype')!r}")
    for key in ("width", "height", "bands"):
        if not isinstance(meta.get(key), int) or meta[key] <= 0:
            raise ContainerError(f"{meta_path}: field {key!r} must be a positive int")
    w, h, b = meta["width"], meta["height"], meta["bands"]

    cube_raw = _read_exact(path / "cube.bin", w * h * b * CUBE_DTYPE.itemsize)
    label_raw = _read_exact(path / "labels.bin", w * h * LABEL_DTYPE.itemsize)
    data = np.frombuffer(cube_raw, dtype=CUBE_DTYPE).reshape(b, h, w).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise ContainerError(f"{path / 'cube.bin'}: contains non-finite values")
    labels = np.frombuffer(label_raw, dtype=LABEL_DTYPE).reshape(h, w).astype(np.uint16)
    names = meta.get("class_names")
    if names is not None and labels.size and labels.max() > len(names):
        raise ContainerError(f"{path / 'labels.bin'}: label {labels.max()} exceeds {len(names)} class names")
    return HsiCube(data), LabelRaster(labels, names)


def _read_exact(path: Path, expected: int) -> bytes:
    if not path.is_file():
        raise ContainerError(f"{path}: missing")
    raw = path.read_bytes()
    if len(raw) != expected:
        raise ContainerError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return raw


def checksum(array: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(array).tobytes()).hexdigest()


# -- spectral reduction --------------------------------------------------------


def pca_reduce(cube: HsiCube, components: int = 3) -> HsiCube:
    """Project mean-centred pixels onto the leading covariance eigenvectors.

    Components come out in nonincreasing eigenvalue order; each loading
    vector is signed so its largest-magnitude entry is positive.
    """
    if components > cube.bands:
        raise ValueError(f"cannot keep {components} components of a {cube.bands}-band cube")
    x = cube.pixels().astype(np.float64)
    if x.shape[0] < 2:
        raise ValueError("PCA needs at least 2 pixels")
    x = x - x.mean(axis=0)
    cov = x.T @ x / (x.shape[0] - 1)
    _, vecs = np.linalg.eigh(cov)
    basis = vecs[:, ::-1][:, :components]
    basis = basis * np.sign(basis[np.abs(basis).argmax(axis=0), np.arange(components)])
    projected = x @ basis
    return HsiCube(projected.T.reshape(components, cube.height, cube.width))


def pca_basis(cube: HsiCube) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (descending) and matching loading vectors of the band covariance."""
    x = cube.pixels().astype(np.float64)
    x = x - x.mean(axis=0)
    vals, vecs = np.linalg.eigh(x.T @ x / (x.shape[0] - 1))
    return vals[::-1], vecs[:, ::-1]


def normalize_range(cube: HsiCube) -> HsiCube:
    """Per-band affine map of [min, max] onto [-0.5, 0.5]; constant bands -> 0."""
    d = cube.data.astype(np.float64)
    lo = d.min(axis=(1, 2), keepdims=True)
    hi = d.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    scaled = np.where(span == 0, 0.0, (d - lo) / np.where(span == 0, 1.0, span) - 0.5)
    return HsiCube(scaled)


# -- patches and splits --------------------------------------------------------


def extract_patches(cube: HsiCube, labels: LabelRaster, size: int, include_unlabeled: bool = False) -> PatchSet:
    """One S x S patch per labeled pixel, mirror-padded at the borders.

    The center pixel sits at index ``S // 2`` of each patch axis, which for
    even ``S`` leaves one more row/column before it than after it.
    """
    if size < 1:
        raise ValueError(f"patch size must be positive, got {size}")
    if size > 2 * min(cube.width, cube.height):
        raise ValueError(f"patch size {size} too large for a {cube.height}x{cube.width} cube")
    if (labels.height, labels.width) != (cube.height, cube.width):
        raise ValueError("label raster and cube dimensions differ")
    before = size // 2
    after = size - 1 - before
    padded = np.pad(cube.data, ((0, 0), (before, after), (before, after)), mode="reflect")
    select = np.ones_like(labels.labels, dtype=bool) if include_unlabeled else labels.labels > 0
    rows, cols = np.nonzero(select)  # row-major = sorted by center index
    windows = np.lib.stride_tricks.sliding_window_view(padded, (size, size), axis=(1, 2))
    patches = windows[:, rows, cols].transpose(1, 0, 2, 3).copy()
    return PatchSet(patches, labels.labels[rows, cols].astype(np.int64), np.stack([rows, cols], axis=1))


def allocate_counts(class_sizes: dict[int, int], total: int) -> dict[int, int]:
    """Proportional allocation with at least one sample per class.

    Largest-remainder rounding; classes never receive more than they hold.
    """
    n = sum(class_sizes.values())
    if total > n:
        raise ValueError(f"requested {total} training samples but only {n} are labeled")
    if total < len(class_sizes):
        raise ValueError(f"requested {total} training samples for {len(class_sizes)} classes")
    quota = {c: total * s / n for c, s in class_sizes.items()}
    alloc = {c: min(class_sizes[c], max(1, math.floor(q))) for c, q in quota.items()}
    # hand out (or take back) the remainder by fractional part, ties to lower class id
    while sum(alloc.values()) < total:
        room = [c for c in alloc if alloc[c] < class_sizes[c]]
        c = max(room, key=lambda c: (quota[c] - alloc[c], -c))
        alloc[c] += 1
    while sum(alloc.values()) > total:
        room = [c for c in alloc if alloc[c] > 1]
        c = min(room, key=lambda c: (quota[c] - alloc[c], c))
        alloc[c] -= 1
    return alloc


def stratified_split(patchset: PatchSet, spec: SplitSpec) -> tuple[PatchSet, PatchSet]:
    """Random per-class training draw; every other labeled sample is test."""
    classes, sizes = np.unique(patchset.labels, return_counts=True)
    class_sizes = {int(c): int(s) for c, s in zip(classes, sizes)}
    if spec.per_class is not None:
        counts = {c: spec.per_class.get(c, 0) for c in class_sizes}
        unknown = set(spec.per_class) - set(class_sizes)
        if unknown:
            raise ValueError(f"split requests samples from absent class {min(unknown)}")
    else:
        counts = allocate_counts(class_sizes, spec.total)
    for c, want in counts.items():
        if want > class_sizes[c]:
            raise ValueError(f"class {c} has {class_sizes[c]} samples, {want} requested")

    rng = np.random.default_rng(spec.seed)
    train_idx = []
    for c in sorted(class_sizes):
        members = np.flatnonzero(patchset.labels == c)
        train_idx.append(rng.permutation(members)[: counts[c]])
    train = np.sort(np.concatenate(train_idx)) if train_idx else np.empty(0, dtype=np.int64)
    test = np.setdiff1d(np.arange(len(patchset)), train)
    return patchset.subset(train), patchset.subset(test)


def split_indices(patchset: PatchSet, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    """Like :func:`stratified_split` but returns index arrays into ``patchset``."""
    tagged = PatchSet(np.arange(len(patchset))[:, None, None, None], patchset.labels, patchset.centers)
    train, test = stratified_split(tagged, spec)
    return train.patches.reshape(-1), test.patches.reshape(-1)


# -- synthetic scenes ----------------------------------------------------------


@dataclass
class SynthSpec:
    class_counts: Sequence[int] = (500, 500, 25)
    width: int = 48
    height: int = 48
    bands: int = 32
    noise: float = 0.6
    texture: float = 0.5
    class_names: list[str] | None = None
    extra: dict = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return len(self.class_counts)


def synth_dataset(spec: SynthSpec, seed: int = 0) -> tuple[HsiCube, LabelRaster]:
    """Scene of compact class blobs with class-specific spectral signatures.

    Each class grows from a random seed point and claims the nearest still
    unclaimed pixels, so the pixel count per class is exact. Spectra are the
    class signature plus ``noise`` times (a smooth spatial texture field and
    white noise); with ``noise = 0`` all pixels of a class share one spectrum.
    """
    counts = [int(c) for c in spec.class_counts]
    h, w = spec.height, spec.width
    if sum(counts) > h * w:
        raise ValueError(f"{sum(counts)} labeled pixels do not fit a {h}x{w} scene")
    rng = np.random.default_rng(seed)
    labels = np.zeros((h, w), dtype=np.uint16)
    yy, xx = np.mgrid[0:h, 0:w]
    # seeds spread on a jittered ring so blobs stay apart
    k = len(counts)
    angles = 2 * np.pi * (np.arange(k) / k) + rng.uniform(0, 2 * np.pi / k)
    radius = 0.3 * min(h, w)
    seeds = [
        (h / 2 + radius * np.sin(a) + rng.uniform(-1, 1), w / 2 + radius * np.cos(a) + rng.uniform(-1, 1))
        for a in angles
    ]
    for cls in sorted(range(k), key=lambda c: counts[c]):
        sy, sx = seeds[cls]
        dist = np.hypot(yy - sy, xx - sx) + 1e-6 * rng.random((h, w))
        dist[labels > 0] = np.inf
        flat = np.argsort(dist, axis=None, kind="stable")[: counts[cls]]
        labels.flat[flat] = cls + 1

    bands = np.linspace(0.0, 1.0, spec.bands)
    signatures = []
    for _ in range(k + 1):  # last one is background
        centers = rng.uniform(0, 1, size=3)
        widths = rng.uniform(0.05, 0.25, size=3)
        heights = rng.uniform(0.2, 1.0, size=3)
        curve = 0.3 + sum(hh * np.exp(-0.5 * ((bands - cc) / ww) ** 2) for cc, ww, hh in zip(centers, widths, heights))
        signatures.append(curve)
    signatures = np.array(signatures)

    cls_index = np.where(labels > 0, labels.astype(np.int64) - 1, k)
    cube = signatures[cls_index].transpose(2, 0, 1)  # bands, h, w
    if spec.noise > 0:
        field_ = _smooth_field(rng, (h, w), sigma=3.0)
        texture = spec.texture * field_[None] * signatures.std(axis=0).mean()
        white = rng.standard_normal(cube.shape)
        cube = cube + spec.noise * (texture + white * signatures.std(axis=0).mean())
    names = spec.class_names or [f"class_{i + 1}" for i in range(k)]
    return HsiCube(cube.astype(np.float32)), LabelRaster(labels, list(names))


def _smooth_field(rng: np.random.Generator, shape: tuple[int, int], sigma: float) -> np.ndarray:
    noise = rng.standard_normal(shape)
    fy = np.fft.fftfreq(shape[0])[:, None]
    fx = np.fft.fftfreq(shape[1])[None, :]
    kernel = np.exp(-2 * (np.pi * sigma) ** 2 * (fy**2 + fx**2))
    out = np.real(np.fft.ifft2(np.fft.fft2(noise) * kernel))
    return out / (out.std() + 1e-12)


def prepare_patches(cube: HsiCube, labels: LabelRaster, size: int, components: int = 3) -> PatchSet:
    """PCA to ``components`` bands, scale to [-0.5, 0.5], cut labeled patches."""
    reduced = normalize_range(pca_reduce(cube, components))
    return extract_patches(reduced, labels, size)
