"""Conditional generator / discriminator pair and the three adversarial objectives.

Class ids are 1..K at the API boundary. Inside the networks they are 0-based
and the fake label of the (K+1)-way discriminator head is index K, i.e. id
K+1 is reserved for generated samples.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .optim import AdamState
from .regularization import RegularizerConfig, apply_regularizer
from .tensor import Tensor

LOSS_MODES = ("adgan", "acgan", "vanilla")
SOURCE_FAKE, SOURCE_REAL = 0, 1


@dataclass
class ModelConfig:
    n_classes: int = 3
    patch_size: int = 27
    channels: int = 3
    noise_dim: int = 100
    depth: int = 5
    base_width: int = 32
    loss_mode: str = "adgan"
    regularizer: RegularizerConfig = field(default_factory=RegularizerConfig)
    g_drop_layer: int = 2
    d_drop_layer: int = 4
    d_leak: float = 0.2
    init_std: float = 0.02
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    dtype: str = "float32"
    # number of stride-2 discriminator layers; None halves while the map stays >= 2
    downsample: int | None = None

    def __post_init__(self):
        if isinstance(self.regularizer, dict):
            self.regularizer = RegularizerConfig(**self.regularizer)
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"unknown loss mode {self.loss_mode!r}; expected one of {LOSS_MODES}")
        if self.depth < 2:
            raise ValueError(f"network depth must be at least 2, got {self.depth}")
        if self.n_classes < 1:
            raise ValueError("need at least one class")
        if self.patch_size < 2:
            raise ValueError(f"patch size must be at least 2, got {self.patch_size}")
        if self.downsample is not None and not 0 <= self.downsample < self.depth:
            raise ValueError(f"downsample must be in 0..{self.depth - 1}, got {self.downsample}")

    @property
    def fake_index(self) -> int:
        return self.n_classes

    @property
    def head_outputs(self) -> int:
        if self.loss_mode == "adgan":
            return self.n_classes + 1
        return 2 + self.n_classes

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ConvLayer:
    c_in: int
    c_out: int
    kernel: int
    stride: int
    padding: int
    size_in: int
    size_out: int


def layer_plan(cfg: ModelConfig) -> tuple[list[ConvLayer], list[ConvLayer]]:
    """Shapes of the generator and discriminator layers.

    Discriminator trunk layers halve the map (kernel 4, stride 2, pad 1) while
    the result stays >= 2 pixels (or for the first ``cfg.downsample`` layers),
    then keep it (kernel 3, stride 1, pad 1);
    the head convolves the remaining map to 1x1. The generator mirrors the
    trunk so its output is exactly S x S.
    """
    trunk = cfg.depth - 1
    widths = [cfg.base_width * 2**i for i in range(trunk)]
    sizes = [cfg.patch_size]
    disc = []
    c_in = cfg.channels
    for i, width in enumerate(widths):
        s = sizes[-1]
        if s // 2 >= 2 and (cfg.downsample is None or i < cfg.downsample):
            layer = ConvLayer(c_in, width, 4, 2, 1, s, s // 2)
        else:
            layer = ConvLayer(c_in, width, 3, 1, 1, s, s)
        disc.append(layer)
        sizes.append(layer.size_out)
        c_in = width
    last = sizes[-1]
    disc.append(ConvLayer(c_in, cfg.head_outputs, last, 1, 0, last, 1))

    gen = [ConvLayer(cfg.noise_dim + cfg.n_classes, widths[-1], last, 1, 0, 1, last)]
    for i in reversed(range(trunk)):
        a, b = disc[i].size_out, disc[i].size_in
        c_out = widths[i - 1] if i > 0 else cfg.channels
        if disc[i].stride == 2:
            gen.append(ConvLayer(widths[i], c_out, b - 2 * a + 4, 2, 1, a, b))
        else:
            gen.append(ConvLayer(widths[i], c_out, 3, 1, 1, a, b))
    return gen, disc


class _Network:
    prefix = ""
    # set by recalibrate_bn to turn running averages into exact means
    bn_momentum: float | None = None

    def __init__(self, cfg: ModelConfig, layers: list[ConvLayer], rng: np.random.Generator, transposed: bool):
        self.cfg = cfg
        self.layers = layers
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        dtype = np.dtype(cfg.dtype)
        for i, layer in enumerate(layers, start=1):
            shape = (
                (layer.c_in, layer.c_out, layer.kernel, layer.kernel)
                if transposed
                else (layer.c_out, layer.c_in, layer.kernel, layer.kernel)
            )
            name = f"{self.prefix}.l{i}"
            self.params[f"{name}.w"] = Tensor(
                (cfg.init_std * rng.standard_normal(shape)).astype(dtype), requires_grad=True, name=f"{name}.w"
            )
            if self._has_bn(i):
                self.params[f"{name}.bn.gamma"] = Tensor(np.ones(layer.c_out, dtype), requires_grad=True)
                self.params[f"{name}.bn.beta"] = Tensor(np.zeros(layer.c_out, dtype), requires_grad=True)
                self.buffers[f"{name}.bn.mean"] = np.zeros(layer.c_out, dtype)
                self.buffers[f"{name}.bn.var"] = np.ones(layer.c_out, dtype)

    def _has_bn(self, i: int) -> bool:
        raise NotImplementedError

    def _bn(self, x: Tensor, i: int, training: bool, update_stats: bool = True) -> Tensor:
        name = f"{self.prefix}.l{i}.bn"
        momentum = self.cfg.bn_momentum if self.bn_momentum is None else self.bn_momentum
        return T.batch_norm(
            x,
            self.params[f"{name}.gamma"],
            self.params[f"{name}.beta"],
            self.buffers[f"{name}.mean"],
            self.buffers[f"{name}.var"],
            training=training,
            momentum=momentum,
            eps=self.cfg.bn_eps,
            update_stats=update_stats,
        )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class Generator(_Network):
    """Transposed-conv stack from (noise ++ one-hot class) to an S x S x 3 patch."""

    prefix = "g"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        gen, _ = layer_plan(cfg)
        super().__init__(cfg, gen, rng, transposed=True)

    def _has_bn(self, i: int) -> bool:
        return i < len(self.layers)

    def condition(self, z: Tensor, classes) -> Tensor:
        classes = _check_classes(classes, self.cfg.n_classes, len(z))
        onehot = np.zeros((len(z), self.cfg.n_classes, 1, 1), dtype=z.dtype)
        onehot[np.arange(len(z)), classes - 1, 0, 0] = 1.0
        return T.concat([z, Tensor(onehot)], axis=1)

    def __call__(
        self,
        z: Tensor,
        classes,
        training: bool = True,
        rng: np.random.Generator | None = None,
        regularize: bool | None = None,
    ) -> Tensor:
        if z.ndim != 4 or z.shape[1:] != (self.cfg.noise_dim, 1, 1):
            raise ValueError(f"noise must be N x {self.cfg.noise_dim} x 1 x 1, got {z.shape}")
        h = self.condition(z, classes)
        n_layers = len(self.layers)
        for i, layer in enumerate(self.layers, start=1):
            h = T.conv_transpose2d(h, self.params[f"g.l{i}.w"], layer.stride, layer.padding)
            if i == n_layers:
                return T.tanh(h) * 0.5
            h = T.relu(self._bn(h, i, training))
            if i == self.cfg.g_drop_layer:
                h = apply_regularizer(h, self.cfg.regularizer, rng, training if regularize is None else regularize)
        raise AssertionError("unreachable")


class Discriminator(_Network):
    """Strided-conv stack ending in a single logit head.

    ADGAN mode emits K+1 logits (classes then fake); the ACGAN and vanilla
    modes emit 2 source logits (fake, real) followed by K class logits.
    """

    prefix = "d"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        _, disc = layer_plan(cfg)
        super().__init__(cfg, disc, rng, transposed=False)

    def _has_bn(self, i: int) -> bool:
        return 1 < i < len(self.layers)

    def __call__(
        self,
        x: Tensor,
        training: bool = True,
        rng: np.random.Generator | None = None,
        update_stats: bool = True,
        regularize: bool | None = None,
    ) -> Tensor:
        s, c = self.cfg.patch_size, self.cfg.channels
        if x.ndim != 4 or x.shape[1:] != (c, s, s):
            raise ValueError(f"discriminator input must be N x {c} x {s} x {s}, got {x.shape}")
        h = x
        n_layers = len(self.layers)
        for i, layer in enumerate(self.layers, start=1):
            h = T.conv2d(h, self.params[f"d.l{i}.w"], layer.stride, layer.padding)
            if i == n_layers:
                return h.reshape(len(x), layer.c_out)
            if self._has_bn(i):
                h = self._bn(h, i, training, update_stats)
            h = T.leaky_relu(h, self.cfg.d_leak)
            if i == self.cfg.d_drop_layer:
                h = apply_regularizer(h, self.cfg.regularizer, rng, training if regularize is None else regularize)
        raise AssertionError("unreachable")


def _check_classes(classes, k: int, n: int) -> np.ndarray:
    classes = np.asarray(classes, dtype=np.int64).reshape(-1)
    if classes.shape[0] != n:
        raise ValueError(f"{classes.shape[0]} class ids for a batch of {n}")
    if classes.size and (classes.min() < 1 or classes.max() > k):
        bad = classes[(classes < 1) | (classes > k)][0]
        raise ValueError(f"invalid class id {bad}; expected 1..{k}")
    return classes


class GanModel:
    """Generator, discriminator, their optimizer states and the train/eval flag."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.generator = Generator(cfg, rng)
        self.discriminator = Discriminator(cfg, rng)
        self.g_opt = AdamState()
        self.d_opt = AdamState()
        self.training = True
        self.step = 0

    def train(self) -> "GanModel":
        self.training = True
        return self

    def eval(self) -> "GanModel":
        self.training = False
        return self

    def generate(self, z, classes, rng=None, training: bool | None = None) -> Tensor:
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=self.cfg.dtype))
        return self.generator(z, classes, self.training if training is None else training, rng)

    def discriminate(self, x, rng=None, training: bool | None = None, update_stats: bool = True) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.cfg.dtype))
        return self.discriminator(x, self.training if training is None else training, rng, update_stats)

    def sample_noise(self, n: int, rng: np.random.Generator) -> Tensor:
        return Tensor(rng.standard_normal((n, self.cfg.noise_dim, 1, 1)).astype(self.cfg.dtype))

    def class_logits(self, logits: Tensor | np.ndarray) -> np.ndarray:
        """The K class logits of a head output (fake / source logits dropped)."""
        data = logits.data if isinstance(logits, Tensor) else logits
        if self.cfg.loss_mode == "adgan":
            return data[:, : self.cfg.n_classes]
        return data[:, 2:]

    # -- state ---------------------------------------------------------------

    def named_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for net in (self.generator, self.discriminator):
            for name, p in net.params.items():
                out[f"param/{name}"] = p.data
            for name, b in net.buffers.items():
                out[f"buffer/{name}"] = b
        for tag, opt in (("g", self.g_opt), ("d", self.d_opt)):
            for name in sorted(opt.m):
                out[f"adam_{tag}/m/{name}"] = opt.m[name]
                out[f"adam_{tag}/v/{name}"] = opt.v[name]
        return out

    def copy_from(self, other: "GanModel") -> None:
        for mine, theirs in ((self.generator, other.generator), (self.discriminator, other.discriminator)):
            for name, p in theirs.params.items():
                mine.params[name].data = p.data.copy()
            for name, b in theirs.buffers.items():
                mine.buffers[name] = b.copy()
        for mine, theirs in ((self.g_opt, other.g_opt), (self.d_opt, other.d_opt)):
            mine.step = theirs.step
            mine.lr, mine.beta1, mine.beta2, mine.eps = theirs.lr, theirs.beta1, theirs.beta2, theirs.eps
            mine.m = {k: v.copy() for k, v in theirs.m.items()}
            mine.v = {k: v.copy() for k, v in theirs.v.items()}
        self.step = other.step

    def clone(self) -> "GanModel":
        twin = GanModel.__new__(GanModel)
        twin.cfg = self.cfg
        twin.generator = Generator.__new__(Generator)
        twin.discriminator = Discriminator.__new__(Discriminator)
        for net, src in ((twin.generator, self.generator), (twin.discriminator, self.discriminator)):
            net.cfg, net.layers = src.cfg, src.layers
            net.params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in src.params.items()}
            net.buffers = {k: v.copy() for k, v in src.buffers.items()}
        twin.g_opt, twin.d_opt = AdamState(), AdamState()
        twin.training = self.training
        twin.step = 0
        twin.copy_from(self)
        return twin

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.named_arrays().values())


# -- objectives ----------------------------------------------------------------


def adgan_d_loss(logits_real: Tensor, labels, logits_fake: Tensor) -> Tensor:
    """Negated (K+1)-way log-likelihood: real -> its class, fake -> fake label."""
    k = logits_real.shape[1] - 1
    labels = _check_classes(labels, k, len(logits_real))
    fake = np.full(len(logits_fake), k)
    return T.softmax_log_loss(logits_real, labels - 1) + T.softmax_log_loss(logits_fake, fake)


def adgan_g_loss(logits_fake: Tensor, desired) -> Tensor:
    """Cross-entropy of generated samples against the class they were drawn for."""
    k = logits_fake.shape[1] - 1
    desired = np.asarray(desired, dtype=np.int64).reshape(-1)
    if desired.size and desired.max() == k + 1:
        raise ValueError(f"the generator cannot target the fake label (id {k + 1})")
    desired = _check_classes(desired, k, len(logits_fake))
    return T.softmax_log_loss(logits_fake, desired - 1)


class AcganLosses(NamedTuple):
    source: Tensor  # -L_S
    classification: Tensor  # -L_C
    d_objective: Tensor  # -(L_S + L_C), minimized by D
    g_objective: Tensor  # -(L_C - L_S), minimized by G


def acgan_losses(
    source_real: Tensor,
    source_fake: Tensor,
    class_real: Tensor,
    class_fake: Tensor,
    labels_real,
    labels_fake,
) -> AcganLosses:
    """Two-head objectives; source logits are ordered (fake, real)."""
    k = class_real.shape[1]
    labels_real = _check_classes(labels_real, k, len(class_real))
    labels_fake = _check_classes(labels_fake, k, len(class_fake))
    src = T.softmax_log_loss(source_real, np.full(len(source_real), SOURCE_REAL)) + T.softmax_log_loss(
        source_fake, np.full(len(source_fake), SOURCE_FAKE)
    )
    cls = T.softmax_log_loss(class_real, labels_real - 1) + T.softmax_log_loss(class_fake, labels_fake - 1)
    return AcganLosses(src, cls, src + cls, cls - src)


def acgan_g_loss(source_fake: Tensor, class_fake: Tensor, labels_fake) -> Tensor:
    """Generator objective restricted to the terms that depend on G."""
    k = class_fake.shape[1]
    labels_fake = _check_classes(labels_fake, k, len(class_fake))
    src = T.softmax_log_loss(source_fake, np.full(len(source_fake), SOURCE_FAKE))
    return T.softmax_log_loss(class_fake, labels_fake - 1) - src


def vanilla_gan_losses(source_real: Tensor, source_fake: Tensor) -> tuple[Tensor, Tensor]:
    """Two-way source objectives; generator in the non-saturating form."""
    d_loss = T.softmax_log_loss(source_real, np.full(len(source_real), SOURCE_REAL)) + T.softmax_log_loss(
        source_fake, np.full(len(source_fake), SOURCE_FAKE)
    )
    g_loss = T.softmax_log_loss(source_fake, np.full(len(source_fake), SOURCE_REAL))
    return d_loss, g_loss


def split_heads(logits: Tensor) -> tuple[Tensor, Tensor]:
    """Source (2) and class (K) logits of an ACGAN/vanilla head."""
    return logits[:, :2], logits[:, 2:]


# -- checkpoints ---------------------------------------------------------------

CKPT_MAGIC = b"ADGNCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, model: GanModel, meta: dict | None = None) -> Path:
    """Magic, version, JSON header, then raw little-endian arrays."""
    path = Path(path)
    arrays = model.named_arrays()
    entries = []
    offset = 0
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = le.tobytes()
        entries.append(
            {"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape), "offset": offset}
        )
        blobs.append(blob)
        offset += len(blob)
    header = {
        "version": CKPT_VERSION,
        "config": model.cfg.to_dict(),
        "config_hash": model.cfg.digest(),
        "step": model.step,
        "optim": {
            "g": {**model.g_opt.hyperparameters(), "step": model.g_opt.step},
            "d": {**model.d_opt.hyperparameters(), "step": model.d_opt.step},
        },
        "meta": meta or {},
        "tensors": entries,
        "payload_bytes": offset,
    }
    head = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)
    return path


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        header, _ = _read_header(fh, path)
    return header


def _read_header(fh, path):
    magic = fh.read(len(CKPT_MAGIC))
    if magic != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, head_len = struct.unpack("<IQ", fh.read(12))
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(fh.read(head_len).decode())
    return header, len(CKPT_MAGIC) + 12 + head_len


def load_checkpoint(path) -> tuple[GanModel, dict]:
    path = Path(path)
    raw = path.read_bytes()
    with open(path, "rb") as fh:
        header, start = _read_header(fh, path)
    payload = raw[start:]
    if len(payload) != header["payload_bytes"]:
        raise ValueError(f"{path}: expected {header['payload_bytes']} payload bytes, found {len(payload)}")
    cfg = ModelConfig(**header["config"])
    model = GanModel(cfg, seed=0)
    arrays = {}
    for entry in header["tensors"]:
        dtype = np.dtype("<" + entry["dtype"]) if entry["dtype"][0] in "fiu" else np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=entry["offset"]).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(dtype.newbyteorder("="))
    nets = {"g": model.generator, "d": model.discriminator}
    opts = {"g": model.g_opt, "d": model.d_opt}
    for name, arr in arrays.items():
        kind, rest = name.split("/", 1)
        if kind == "param":
            nets[rest[0]].params[rest].data = arr.copy()
        elif kind == "buffer":
            nets[rest[0]].buffers[rest] = arr.copy()
        else:
            opt = opts[kind[-1]]
            moment, pname = rest.split("/", 1)
            getattr(opt, moment)[pname] = arr.copy()
    for tag, opt in opts.items():
        info = header["optim"][tag]
        opt.lr, opt.beta1, opt.beta2, opt.eps = info["lr"], info["beta1"], info["beta2"], info["eps"]
        opt.step = info["step"]
    model.step = header["step"]
    model.eval()
    return model, header.get("meta", {})
