"""Command-line driver: synth | prepare | train | eval | generate | demo-drop | sweep.

Configuration is a JSON document (see ``default_config``); flags override
the file, unknown keys are rejected. Each subcommand writes
``manifest.json`` into its output directory with the fully resolved config,
so ``--config OUT/manifest.json`` reruns the same experiment.

Failures print one JSON line ``{"error": ..., "message": ...}`` to stderr
and exit nonzero (2 for usage/config problems, 1 otherwise).
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    ContainerError,
    HsiCube,
    LabelRaster,
    SplitSpec,
    SynthSpec,
    extract_patches,
    load_cube,
    normalize_range,
    pca_reduce,
    save_cube,
    stratified_split,
    synth_dataset,
)
from .evaluation import (
    classify_scene,
    confusion_matrix,
    default_palette,
    diversity_report,
    mean_pairwise_distance,
    metrics,
    predict,
    render_map,
    sample_grid,
    save_palette,
    write_metrics,
    write_pgm,
)
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .regularization import RegularizerConfig, adapdrop, dropblock, dropout, effective_block, make_mask
from .training import NonFiniteLoss, TrainConfig, train

log = logging.getLogger("adgan")

MANIFEST_KIND = "adgan-manifest"
DEFAULT_SWEEPS = {
    "b_size": [3, 5, 7, 9, 11],
    "k": [30, 35, 40, 45],
    "patch_size": [11, 15, 19, 23, 27, 31],
    "depth": [3, 4, 5, 6, 7],
}


class ConfigError(ValueError):
    pass


class UsageError(Exception):
    pass


# -- configuration -------------------------------------------------------------


def default_config() -> dict:
    model = asdict(ModelConfig())
    model.pop("n_classes")  # taken from the data
    train_cfg = {k: v for k, v in asdict(TrainConfig()).items() if k not in ("model", "seed")}
    synth = {f.name: getattr(SynthSpec(), f.name) for f in fields(SynthSpec) if f.name != "extra"}
    synth["class_counts"] = list(synth["class_counts"])
    return {
        "seed": 0,
        "data": {"path": None, "components": 3, "synth": synth},
        "split": {"total": 300, "per_class": None},
        "model": model,
        "train": train_cfg,
        "eval": {"batch_size": 100, "checkpoint": None},
        "generate": {"n_per_class": 16, "classes": None, "checkpoint": None},
        "sweep": {"param": "b_size", "values": None},
    }


def merge(base: dict, override: dict, where: str = "") -> dict:
    """Recursively overlay ``override`` on ``base``; unknown keys are an error."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{where}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(out[key], dict) and key != "per_class":
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be an object")
            out[key] = merge(out[key], value, path + ".")
        else:
            out[key] = value
    return out


def read_config_file(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    if doc.get("kind") == MANIFEST_KIND:
        return doc["config"]
    return doc


def validate(cfg: dict) -> None:
    """Build every typed object once so bad values fail before any work."""
    try:
        model_config(cfg, 2)
        train_config(cfg, model_config(cfg, 2))
        SynthSpec(**cfg["data"]["synth"])
        if cfg["split"]["per_class"] is not None or cfg["split"]["total"] is not None:
            SplitSpec(cfg["split"]["total"], cfg["split"]["per_class"])
        else:
            raise ValueError("split needs total or per_class")
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    sweep = cfg["sweep"]
    if sweep["param"] not in DEFAULT_SWEEPS:
        raise ConfigError(f"sweep.param must be one of {sorted(DEFAULT_SWEEPS)}, got {sweep['param']!r}")


def model_config(cfg: dict, n_classes: int) -> ModelConfig:
    m = copy.deepcopy(cfg["model"])
    m["regularizer"] = RegularizerConfig(**m["regularizer"])
    return ModelConfig(n_classes=n_classes, **m)


def train_config(cfg: dict, model: ModelConfig) -> TrainConfig:
    return TrainConfig(model=model, seed=cfg["seed"], **cfg["train"])


def resolve(args: argparse.Namespace) -> dict:
    cfg = default_config()
    if getattr(args, "run", None):
        cfg = merge(cfg, read_config_file(Path(args.run) / "manifest.json"))
    if args.config:
        cfg = merge(cfg, read_config_file(args.config))
    flag_map = {
        "seed": ("seed",),
        "loss_mode": ("model", "loss_mode"),
        "reg": ("model", "regularizer", "kind"),
        "b_size": ("model", "regularizer", "b_size"),
        "k": ("model", "regularizer", "k"),
        "patch_size": ("model", "patch_size"),
        "epochs": ("train", "epochs"),
        "batch_size": ("train", "batch_size"),
        "data": ("data", "path"),
    }
    for flag, path in flag_map.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        node = cfg
        for key in path[:-1]:
            node = node[key]
        node[path[-1]] = value
    checkpoint = getattr(args, "checkpoint", None)
    if checkpoint is None and getattr(args, "run", None):
        checkpoint = str(Path(args.run) / "checkpoints" / "best.ckpt")
    if checkpoint is not None:
        cfg["eval"]["checkpoint"] = cfg["generate"]["checkpoint"] = checkpoint
    if getattr(args, "n", None) is not None:
        cfg["generate"]["n_per_class"] = args.n
    if getattr(args, "param", None) is not None:
        cfg["sweep"]["param"] = args.param
    if getattr(args, "values", None) is not None:
        cfg["sweep"]["values"] = args.values
    validate(cfg)
    return cfg


# -- manifest ------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def code_version() -> dict:
    src = Path(__file__).parent
    digest = hashlib.sha256()
    for path in sorted(src.glob("*.py")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return {"package": __version__, "source_sha256": digest.hexdigest()}


def write_manifest(out: Path, command: str, cfg: dict, extra: dict | None = None) -> Path:
    outputs = {
        str(p.relative_to(out)): _sha256(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    }
    doc = {
        "kind": MANIFEST_KIND,
        "command": command,
        "config": cfg,
        "seed": cfg["seed"],
        "code_version": code_version(),
        "threads": os.environ.get("ADGAN_THREADS"),
        "outputs": outputs,
    }
    if extra:
        doc["info"] = extra
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


# -- shared pipeline -------------------------------------------------------------


def load_scene(cfg: dict) -> tuple[HsiCube, LabelRaster]:
    """PCA-reduced, range-normalized cube and labels for the configured data."""
    path = cfg["data"]["path"]
    if path is not None:
        path = Path(path)
        if (path / "reduced" / "meta.json").is_file():
            return load_cube(path / "reduced")
        cube, labels = load_cube(path)
    else:
        cube, labels = synth_dataset(SynthSpec(**cfg["data"]["synth"]), seed=cfg["seed"])
    return normalize_range(pca_reduce(cube, cfg["data"]["components"])), labels


def split_scene(cfg: dict, cube: HsiCube, labels: LabelRaster, size: int):
    patches = extract_patches(cube, labels, size)
    spec = SplitSpec(cfg["split"]["total"], cfg["split"]["per_class"], seed=cfg["seed"])
    train_set, test_set = stratified_split(patches, spec)
    test_mask = np.zeros(labels.labels.shape, dtype=bool)
    test_mask[test_set.centers[:, 0], test_set.centers[:, 1]] = True
    return train_set, test_set, test_mask


def n_classes_of(labels: LabelRaster) -> int:
    k = labels.n_classes
    if k < 1:
        raise ValueError("label raster holds no classes")
    return k


def load_model(path):
    if path is None:
        raise ConfigError("no checkpoint given (use --checkpoint or --run)")
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    return load_checkpoint(path)


# -- subcommands -----------------------------------------------------------------


def cmd_synth(cfg: dict, out: Path) -> dict:
    cube, labels = synth_dataset(SynthSpec(**cfg["data"]["synth"]), seed=cfg["seed"])
    save_cube(out, cube, labels)
    return {"class_counts": {str(k): v for k, v in labels.class_counts().items()}}


def cmd_prepare(cfg: dict, out: Path) -> dict:
    cube, labels = load_scene(cfg)
    save_cube(out / "reduced", HsiCube(cube.data.astype(np.float32)), labels)
    # patches are cut from the stored float32 cube so a later run on this
    # directory sees exactly the same values
    stored, _ = load_cube(out / "reduced")
    patches = extract_patches(stored, labels, cfg["model"]["patch_size"])
    np.savez(out / "patches.npz", patches=patches.patches, labels=patches.labels, centers=patches.centers)
    return {"n_patches": len(patches), "patch_size": cfg["model"]["patch_size"]}


def cmd_train(cfg: dict, out: Path) -> dict:
    from .plotting import plot_training_curves

    cube, labels = load_scene(cfg)
    k = n_classes_of(labels)
    tcfg = train_config(cfg, model_config(cfg, k))
    train_set, test_set, _ = split_scene(cfg, cube, labels, tcfg.model.patch_size)

    def progress(rec):
        log.info("epoch %d d_loss %.4f g_loss %.4f val_oa %s", rec["epoch"], rec["d_loss"], rec["g_loss"], rec.get("val_oa"))

    result = train(train_set, tcfg, val_set=test_set, out_dir=out / "checkpoints", progress=progress)
    result.log.write_csv(out / "train_log.csv")
    summary = result.log.summary()
    summary.pop("wall_time_s")  # keeps the file reproducible
    summary.update(n_train=len(train_set), n_test=len(test_set), n_classes=k)
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    with open(out / "epochs.csv", "w", newline="") as fh:
        keys = list(result.log.epochs[0])
        writer = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        writer.writeheader()
        writer.writerows(result.log.epochs)
    plot_training_curves(result.log.steps, result.log.epochs, out / "training_curves.png", result.log.best_epoch)
    log.info("trained in %.1fs", result.log.wall_time)
    return {"best_epoch": result.log.best_epoch}


def cmd_eval(cfg: dict, out: Path) -> dict:
    from .plotting import plot_confusion

    model, meta = load_model(cfg["eval"]["checkpoint"])
    cube, labels = load_scene(cfg)
    k = n_classes_of(labels)
    if k != model.cfg.n_classes:
        raise ValueError(f"checkpoint has {model.cfg.n_classes} classes but the data has {k}")
    _, _, test_mask = split_scene(cfg, cube, labels, model.cfg.patch_size)
    scene = classify_scene(model, cube, labels, model.cfg.patch_size, subset=test_mask, batch_size=cfg["eval"]["batch_size"])
    reports = {"test": metrics(scene.subset_confusion), "all_labeled": metrics(scene.confusion)}
    info = {"checkpoint_epoch": meta.get("epoch"), "checkpoint_sha256": _sha256(Path(cfg["eval"]["checkpoint"]))}
    write_metrics(out / "metrics.json", out / "metrics.csv", reports, info)
    palette = default_palette(k)
    save_palette(out / "palette.txt", palette)
    render_map(scene.prediction, palette, out / "class_map.png")
    render_map(labels.labels.astype(np.int64), palette, out / "reference_map.png")
    np.savetxt(out / "confusion_test.csv", scene.subset_confusion.counts, fmt="%d", delimiter=",")
    plot_confusion(scene.subset_confusion.counts, out / "confusion_test.png", labels.class_names, "test split")
    return {"test_oa": reports["test"].oa}


def cmd_generate(cfg: dict, out: Path) -> dict:
    model, _ = load_model(cfg["generate"]["checkpoint"])
    gcfg = cfg["generate"]
    classes = gcfg["classes"] or list(range(1, model.cfg.n_classes + 1))
    n = gcfg["n_per_class"]
    sample_grid(model, classes, n, cfg["seed"], out / "samples.png")
    cube, labels = load_scene(cfg)
    train_set, _, _ = split_scene(cfg, cube, labels, model.cfg.patch_size)
    rows = []
    for cls in classes:
        real = train_set.patches[train_set.labels == cls]
        rep = diversity_report(model, cls, n, cfg["seed"] + cls, real if len(real) else None)
        rep["real_mean_pairwise_distance"] = mean_pairwise_distance(real) if len(real) >= 2 else None
        rows.append(rep)
    (out / "diversity.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    keys = sorted({k for r in rows for k in r})
    with open(out / "diversity.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return {"classes": classes}


def _to_gray(plane: np.ndarray) -> np.ndarray:
    lo, hi = float(plane.min()), float(plane.max())
    if hi == lo:
        return np.zeros(plane.shape, dtype=np.uint8)
    return np.round((plane - lo) / (hi - lo) * 255).astype(np.uint8)


def _demo_feature(args, cfg) -> np.ndarray:
    if args.feature:
        path = Path(args.feature)
        if path.suffix == ".npy":
            plane = np.load(path)
        else:
            from .evaluation import read_pgm

            plane = read_pgm(path).astype(np.float64)
        if plane.ndim != 2:
            raise ValueError(f"feature map must be 2-d, got shape {plane.shape}")
        return plane.astype(np.float64)
    from .data import _smooth_field

    rng = np.random.default_rng(cfg["seed"])
    return _smooth_field(rng, (32, 32), sigma=2.0) + 0.3 * rng.standard_normal((32, 32))


def cmd_demo_drop(cfg: dict, out: Path, args) -> dict:
    from .plotting import plot_masks

    plane = _demo_feature(args, cfg)
    reg = cfg["model"]["regularizer"]
    seed = cfg["seed"]
    block = {**reg, "b_size": effective_block(reg["b_size"], *plane.shape)}
    outputs = {
        "dropout": dropout(plane, 1.0 - reg["keep_prob"], seed),
        "dropblock": dropblock(plane, RegularizerConfig(**{**block, "kind": "dropblock"}), seed),
        "adapdrop": adapdrop(plane, RegularizerConfig(**{**block, "kind": "adapdrop"}), seed),
    }
    write_pgm(out / "input.pgm", _to_gray(plane))
    rows = []
    for kind, result in outputs.items():
        if kind == "dropout":
            mask = (result != 0) | (plane == 0)
        else:
            mask = make_mask(plane, RegularizerConfig(**{**block, "kind": kind}), seed).values.astype(bool)
        write_pgm(out / f"{kind}.pgm", _to_gray(result))
        write_pgm(out / f"{kind}_mask.pgm", mask.astype(np.uint8) * 255)
        rows.append({"kind": kind, "dropped": int((~mask).sum()), "total": int(mask.size)})
    with open(out / "drop_stats.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["kind", "dropped", "total"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    plot_masks(plane, outputs, out / "masks.png")
    return {"b_size": block["b_size"], "k": reg["k"]}


def _sweep_override(cfg: dict, param: str, value) -> dict:
    cfg = copy.deepcopy(cfg)
    if param in ("b_size", "k"):
        cfg["model"]["regularizer"][param] = value
    else:
        cfg["model"][param] = value
    return cfg


def cmd_sweep(cfg: dict, out: Path) -> dict:
    from .plotting import plot_sweep

    param = cfg["sweep"]["param"]
    values = cfg["sweep"]["values"] or DEFAULT_SWEEPS[param]
    cube, labels = load_scene(cfg)
    k = n_classes_of(labels)
    rows = []
    for value in values:
        run_cfg = _sweep_override(cfg, param, value)
        try:
            tcfg = train_config(run_cfg, model_config(run_cfg, k))
        except ValueError as exc:
            raise ConfigError(f"sweep value {param}={value}: {exc}") from None
        train_set, test_set, _ = split_scene(run_cfg, cube, labels, tcfg.model.patch_size)
        result = train(train_set, tcfg)
        save_checkpoint(out / "checkpoints" / f"{param}_{value}.ckpt", result.model, {"epoch": result.log.best_epoch})
        rep = metrics(confusion_matrix(test_set.labels, predict(result.model, test_set.patches), k))
        rows.append({"param": param, "value": value, "oa": rep.oa, "aa": rep.aa, "kappa": rep.kappa, "best_epoch": result.log.best_epoch})
        log.info("%s=%s oa %.4f", param, value, rep.oa)
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    plot_sweep([{**r, param: r["value"]} for r in rows], param, out / "sweep.png")
    return {"param": param, "values": list(values)}


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "generate": cmd_generate,
    "demo-drop": cmd_demo_drop,
    "sweep": cmd_sweep,
}


# -- argument parsing ------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file (or a manifest.json from an earlier run)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--loss-mode", dest="loss_mode", choices=["adgan", "acgan", "vanilla"])
    common.add_argument("--reg", choices=["dropout", "dropblock", "adapdrop", "none"])
    common.add_argument("--b-size", dest="b_size", type=int)
    common.add_argument("--k", type=float)
    common.add_argument("--patch-size", dest="patch_size", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch-size", dest="batch_size", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="adgan", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    data_help = "HSC container or prepared directory (default: synthesize from config)"

    sub.add_parser("synth", parents=[common], help="write a synthetic HSC dataset")
    p = sub.add_parser("prepare", parents=[common], help="PCA, normalize and cache patches")
    p.add_argument("--data", help=data_help)
    p = sub.add_parser("train", parents=[common], help="train and checkpoint a model")
    p.add_argument("--data", help=data_help)
    for name, helptext in (("eval", "metrics and class maps"), ("generate", "sample grids and diversity report")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--data", help=data_help)
        p.add_argument("--run", help="training output directory (config and best checkpoint)")
        p.add_argument("--checkpoint")
        if name == "generate":
            p.add_argument("--n", type=int, help="samples per class")
    p = sub.add_parser("demo-drop", parents=[common], help="visualize the three regularizers on one feature map")
    p.add_argument("--feature", help=".npy or .pgm plane (default: a synthetic one)")
    p = sub.add_parser("sweep", parents=[common], help="OA/AA/kappa over one hyperparameter")
    p.add_argument("--data", help=data_help)
    p.add_argument("--param", choices=sorted(DEFAULT_SWEEPS))
    p.add_argument("--values", type=int, nargs="+")
    return parser


def _apply_threads():
    value = os.environ.get("ADGAN_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"ADGAN_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise ConfigError(f"ADGAN_THREADS must be a positive integer, got {value!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _fail(exc: BaseException, code: int) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(exc, 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve(args)
        limiter = _apply_threads()
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        handler = COMMANDS[args.command]
        if args.command == "demo-drop":
            info = handler(cfg, out, args)
        else:
            info = handler(cfg, out)
        write_manifest(out, args.command, cfg, info)
        if limiter is not None:
            limiter.restore_original_limits()
    except ConfigError as exc:
        return _fail(exc, 2)
    except (ContainerError, ValueError, RuntimeError, OSError, NonFiniteLoss, KeyError) as exc:
        return _fail(exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
