"""Scene classification, OA/AA/kappa, class maps and generated-sample grids."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data import HsiCube, LabelRaster, extract_patches
from .model import GanModel
from .tensor import no_grad


@dataclass
class ConfusionMatrix:
    """K x K counts; rows are reference classes, columns predictions."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("confusion matrix counts must be nonnegative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]


@dataclass
class MetricsReport:
    per_class: list[float | None]
    oa: float
    aa: float
    kappa: float
    counts: list[int]
    total: int

    def to_dict(self) -> dict:
        return {
            "oa": self.oa,
            "aa": self.aa,
            "kappa": self.kappa,
            "per_class_accuracy": {str(i + 1): acc for i, acc in enumerate(self.per_class)},
            "class_counts": {str(i + 1): n for i, n in enumerate(self.counts)},
            "total": self.total,
        }

    def csv_rows(self, tag: str = "") -> list[list]:
        rows = [[tag, "OA", repr(self.oa)], [tag, "AA", repr(self.aa)], [tag, "kappa", repr(self.kappa)]]
        for i, acc in enumerate(self.per_class):
            rows.append([tag, f"class_{i + 1}", "" if acc is None else repr(acc)])
        return rows


def confusion_matrix(reference, predicted, n_classes: int) -> ConfusionMatrix:
    """Tabulate 1-based class ids; predictions outside 1..K are an error."""
    reference = np.asarray(reference, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    if reference.shape != predicted.shape:
        raise ValueError(f"reference {reference.shape} and prediction {predicted.shape} differ in shape")
    for name, arr in (("reference", reference), ("prediction", predicted)):
        if arr.size and (arr.min() < 1 or arr.max() > n_classes):
            raise ValueError(f"{name} ids must lie in 1..{n_classes}")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (reference - 1, predicted - 1), 1)
    return ConfusionMatrix(counts)


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Overall accuracy, average accuracy and Cohen's kappa.

    Classes without reference samples have undefined accuracy (None) and are
    left out of AA. If chance agreement is total (p_e == 1), kappa is 1 when
    observed agreement is also total and 0 otherwise.
    """
    c = cm.counts
    total = cm.total
    if total == 0:
        raise ValueError("confusion matrix is empty")
    diag = np.diag(c)
    rows = c.sum(axis=1)
    cols = c.sum(axis=0)
    per_class = [None if r == 0 else int(d) / int(r) for d, r in zip(diag, rows)]
    defined = [a for a in per_class if a is not None]
    oa = int(diag.sum()) / total
    aa = float(sum(defined) / len(defined))
    pe = int((rows * cols).sum()) / total**2
    if pe == 1.0:
        kappa = 1.0 if oa == 1.0 else 0.0
    else:
        kappa = (oa - pe) / (1.0 - pe)
    return MetricsReport(per_class, oa, aa, kappa, [int(r) for r in rows], total)


def _check_eval_ready(model: GanModel) -> None:
    if model.training:
        raise RuntimeError("model is in training mode; call model.eval() before classifying")
    if not model.is_finite():
        raise ValueError("model parameters contain non-finite values")


def predict_logits(model: GanModel, patches: np.ndarray, batch_size: int = 100) -> np.ndarray:
    _check_eval_ready(model)
    out = []
    with no_grad():
        for start in range(0, len(patches), batch_size):
            out.append(model.discriminate(patches[start : start + batch_size], training=False).data)
    if not out:
        return np.zeros((0, model.cfg.head_outputs))
    return np.concatenate(out)


def predict(model: GanModel, patches: np.ndarray, batch_size: int = 100, include_fake: bool = False) -> np.ndarray:
    """Predicted class ids (1..K).

    The fake logit is ignored unless ``include_fake`` is set, in which case
    an ADGAN model may also answer K+1.
    """
    logits = predict_logits(model, patches, batch_size)
    if include_fake and model.cfg.loss_mode == "adgan":
        return logits.argmax(axis=1) + 1
    return model.class_logits(logits).argmax(axis=1) + 1


@dataclass
class SceneResult:
    prediction: np.ndarray
    confusion: ConfusionMatrix
    subset_confusion: ConfusionMatrix | None = None


def classify_scene(
    model: GanModel,
    cube: HsiCube,
    labels: LabelRaster,
    size: int | None = None,
    subset: np.ndarray | None = None,
    batch_size: int = 100,
) -> SceneResult:
    """Classify every labeled pixel of a (PCA-reduced, scaled) cube.

    ``subset`` is an optional boolean raster (e.g. the held-out test pixels);
    its confusion matrix is reported separately from the all-labeled one.
    """
    _check_eval_ready(model)
    size = size or model.cfg.patch_size
    patches = extract_patches(cube, labels, size)
    pred = predict(model, patches.patches, batch_size)
    raster = np.zeros(labels.labels.shape, dtype=np.int64)
    rows, cols = patches.centers[:, 0], patches.centers[:, 1]
    raster[rows, cols] = pred
    k = model.cfg.n_classes
    cm = confusion_matrix(patches.labels, pred, k)
    sub = None
    if subset is not None:
        keep = np.asarray(subset, dtype=bool)[rows, cols]
        sub = confusion_matrix(patches.labels[keep], pred[keep], k)
    return SceneResult(raster, cm, sub)


def write_metrics(path_json, path_csv, reports: dict[str, MetricsReport], extra: dict | None = None) -> None:
    payload = {name: rep.to_dict() for name, rep in reports.items()}
    if extra:
        payload["info"] = extra
    Path(path_json).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    with open(path_csv, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["set", "metric", "value"])
        for name, rep in reports.items():
            writer.writerows(rep.csv_rows(name))


# -- maps ----------------------------------------------------------------------


def default_palette(n_classes: int) -> np.ndarray:
    """(K+1) x 3 uint8 colors; class 0 is black, others are distinct hues."""
    pal = np.zeros((n_classes + 1, 3), dtype=np.uint8)
    seen = {(0, 0, 0)}
    for i in range(1, n_classes + 1):
        hue = ((i - 1) * 0.618033988749895) % 1.0
        for bump in range(256):
            rgb = tuple(int(round(255 * v)) for v in _hsv_to_rgb(hue, 0.75, 0.95 - 0.002 * bump))
            if rgb not in seen:
                break
        seen.add(rgb)
        pal[i] = rgb
    return pal


def _hsv_to_rgb(h: float, s: float, v: float) -> tuple[float, float, float]:
    import colorsys

    return colorsys.hsv_to_rgb(h, s, v)


def save_palette(path, palette: np.ndarray) -> None:
    lines = [" ".join(str(int(c)) for c in row) for row in palette]
    Path(path).write_text("\n".join(lines) + "\n")


def load_palette(path) -> np.ndarray:
    rows = [line.split() for line in Path(path).read_text().splitlines() if line.strip()]
    pal = np.array(rows, dtype=np.int64)
    if pal.ndim != 2 or pal.shape[1] != 3 or pal.min() < 0 or pal.max() > 255:
        raise ValueError(f"{path}: palette must hold RGB triples in 0..255")
    return pal.astype(np.uint8)


def render_map(raster: np.ndarray, palette: np.ndarray, path=None) -> bytes:
    """Color a class raster, one pixel per cell, as PNG bytes (written if ``path``)."""
    raster = np.asarray(raster)
    if raster.size and raster.max() >= len(palette):
        raise ValueError(f"palette has {len(palette)} entries but raster holds class {raster.max()}")
    if raster.size and raster.min() < 0:
        raise ValueError("negative class id in raster")
    image = np.asarray(palette, dtype=np.uint8)[raster]
    data = _png_bytes(image)
    if path is not None:
        Path(path).write_bytes(data)
    return data


def decode_map(source, palette: np.ndarray) -> np.ndarray:
    """Invert :func:`render_map` through the palette."""
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    rgb = np.asarray(Image.open(source).convert("RGB"))
    lut = {tuple(int(c) for c in color): i for i, color in enumerate(palette)}
    if len(lut) != len(palette):
        raise ValueError("palette colors are not unique; map cannot be inverted")
    flat = rgb.reshape(-1, 3)
    out = np.empty(len(flat), dtype=np.int64)
    for j, px in enumerate(map(tuple, flat.tolist())):
        if px not in lut:
            raise ValueError(f"pixel color {px} not in palette")
        out[j] = lut[px]
    return out.reshape(rgb.shape[:2])


def _png_bytes(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def write_pgm(path, gray: np.ndarray) -> None:
    """Binary (P5) PGM of an 8-bit grayscale image."""
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + gray.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h).reshape(h, w)


# -- generated samples ---------------------------------------------------------


def generate_samples(model: GanModel, cls: int, n: int, seed: int) -> np.ndarray:
    """``n`` generator outputs for class ``cls`` (N, 3, S, S), eval mode."""
    rng = np.random.default_rng(seed)
    with no_grad():
        z = model.sample_noise(n, rng)
        return model.generate(z, np.full(n, cls), rng=rng, training=False).data.astype(np.float64)


def to_display(patch: np.ndarray) -> np.ndarray:
    """(3, S, S) in [-0.5, 0.5] -> (S, S, 3) uint8."""
    scaled = np.clip((np.asarray(patch, dtype=np.float64) + 0.5) * 255.0, 0, 255)
    return np.round(scaled).astype(np.uint8).transpose(1, 2, 0)


def sample_grid(model: GanModel, classes, n_per_class: int, seed: int, path=None) -> np.ndarray:
    """Image whose rows are classes and columns generated samples."""
    s = model.cfg.patch_size
    classes = list(classes)
    grid = np.zeros((len(classes) * s, n_per_class * s, 3), dtype=np.uint8)
    for r, cls in enumerate(classes):
        samples = generate_samples(model, cls, n_per_class, seed + 7919 * r)
        for col, sample in enumerate(samples):
            grid[r * s : (r + 1) * s, col * s : (col + 1) * s] = to_display(sample)
    if path is not None:
        Path(path).write_bytes(_png_bytes(grid))
    return grid


def mean_pairwise_distance(samples: np.ndarray) -> float:
    """Mean Euclidean distance over all unordered pairs of samples."""
    flat = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
    if len(flat) < 2:
        raise ValueError("need at least 2 samples")
    sq = (flat**2).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * flat @ flat.T, 0.0)
    iu = np.triu_indices(len(flat), k=1)
    return float(np.sqrt(d2[iu]).mean())


def diversity_statistic(samples: np.ndarray, real: np.ndarray | None = None) -> dict:
    out = {"n": int(len(samples)), "mean_pairwise_distance": mean_pairwise_distance(samples)}
    if real is not None and len(real):
        a = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
        b = np.asarray(real, dtype=np.float64).reshape(len(real), -1)
        d2 = (a**2).sum(1)[:, None] + (b**2).sum(1)[None, :] - 2 * a @ b.T
        nearest = np.sqrt(np.maximum(d2.min(axis=1), 0.0))
        out.update(
            nearest_real_mean=float(nearest.mean()),
            nearest_real_min=float(nearest.min()),
            nearest_real_max=float(nearest.max()),
        )
    return out


def diversity_report(model: GanModel, cls: int, n: int, seed: int, real: np.ndarray | None = None) -> dict:
    """Spread of ``n`` generated samples of one class (mode-collapse check)."""
    if n < 2:
        raise ValueError("diversity needs n >= 2")
    samples = generate_samples(model, cls, n, seed)
    report = diversity_statistic(samples, real)
    report["class"] = int(cls)
    report["sample_variance"] = float(samples.reshape(n, -1).var(axis=0).mean())
    return report
