"""Dense tensors with a reverse-mode differentiation tape.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to parent gradients.
:meth:`Tensor.backward` orders the recorded graph topologically (the tape)
and sweeps it once in reverse.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "is_grad_enabled",
    "concat",
    "conv2d",
    "conv_transpose2d",
    "batch_norm",
    "relu",
    "leaky_relu",
    "tanh",
    "minmax_normalize",
    "softmax_log_loss",
    "log_softmax",
    "grad_check",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """N-dimensional real array taking part in reverse-mode differentiation.

    ``data`` is a numpy array (float64 for checks, float32 allowed for
    training). ``grad`` is allocated lazily on the first backward sweep that
    reaches the tensor and always has the shape of ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = cls(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- backward sweep -------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Propagate ``grad`` (default: ones for a scalar) to every leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        Tape.from_output(self).backward(self, np.asarray(grad, dtype=self.data.dtype))

    # -- elementwise arithmetic ----------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._from_op(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other) -> "Tensor":
        return self + (-_as_tensor(other, self.dtype))

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor(other, self.dtype) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor(other, self.dtype)
        a, b = self.data, other.data
        return Tensor._from_op(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return self * (1.0 / other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._from_op(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.shape
        return Tensor._from_op(self.data.reshape(shape), (self,), lambda g: (g.reshape(orig),))

    def __getitem__(self, idx) -> "Tensor":
        shape, dtype = self.shape, self.dtype

        def backward(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._from_op(self.data[idx], (self,), backward)


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


class Tape:
    """Operations reachable from one output, in execution (topological) order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, output: Tensor, seed: np.ndarray) -> None:
        # interior gradients live here; only leaves keep .grad
        pending: dict[int, np.ndarray] = {id(output): seed}
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


# -- structural ops ------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


# -- convolution ---------------------------------------------------------------


def _check_conv(x: np.ndarray, w: np.ndarray, in_axis: int, op: str) -> None:
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"{op}: expected 4-d input and kernel, got input {x.shape} and kernel {w.shape}")
    if x.shape[1] != w.shape[in_axis]:
        raise ValueError(
            f"{op}: channel mismatch between input {x.shape} and kernel {w.shape}"
        )


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    o, c, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    ho = (xp.shape[2] - kh) // stride + 1
    wo = (xp.shape[3] - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: input {x.shape} too small for kernel {w.shape} (padding {padding})")
    win = _windows(xp, kh, kw, stride)[:, :, :ho, :wo]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N,Ho,Wo,O
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_input_grad(g: np.ndarray, w: np.ndarray, x_shape, stride: int, padding: int) -> np.ndarray:
    n, c, h, wd = x_shape
    o, _, kh, kw = w.shape
    ho, wo = g.shape[2], g.shape[3]
    cols = np.tensordot(g, w, axes=([1], [0]))  # N,Ho,Wo,C,kh,kw
    cols = cols.transpose(0, 3, 4, 5, 1, 2)  # N,C,kh,kw,Ho,Wo
    dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp


def _conv_weight_grad(g: np.ndarray, x: np.ndarray, w_shape, stride: int, padding: int) -> np.ndarray:
    _, _, kh, kw = w_shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = _windows(xp, kh, kw, stride)[:, :, : g.shape[2], : g.shape[3]]
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # O,C,kh,kw


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an OIHW kernel."""
    _check_conv(x.data, kernel.data, 1, "conv2d")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride {stride} / padding {padding}")
    xd, wd = x.data, kernel.data
    out = _conv_forward(xd, wd, stride, padding)

    def backward(g):
        gx = _conv_input_grad(g, wd, xd.shape, stride, padding) if x.requires_grad else None
        gw = _conv_weight_grad(g, xd, wd.shape, stride, padding) if kernel.requires_grad else None
        return gx, gw

    return Tensor._from_op(out, (x, kernel), backward)


def conv_transpose2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution; ``kernel`` is laid out (C_in, C_out, kH, kW).

    The forward map is exactly the input-gradient map of :func:`conv2d` with
    the same kernel, stride and padding. Output extent is
    ``(H - 1) * stride - 2 * padding + kH``.
    """
    _check_conv(x.data, kernel.data, 0, "conv_transpose2d")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv_transpose2d: invalid stride {stride} / padding {padding}")
    xd, wd = x.data, kernel.data
    n, _, h, w = xd.shape
    cout, kh, kw = wd.shape[1], wd.shape[2], wd.shape[3]
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv_transpose2d: input {xd.shape} with kernel {wd.shape} gives empty output")
    out = _conv_input_grad(xd, wd, (n, cout, ho, wo), stride, padding)

    def backward(g):
        gx = _conv_forward(g, wd, stride, padding) if x.requires_grad else None
        gw = _conv_weight_grad(xd, g, wd.shape, stride, padding) if kernel.requires_grad else None
        return gx, gw

    return Tensor._from_op(out, (x, kernel), backward)


# -- normalization -------------------------------------------------------------


def batch_norm(
    x: Tensor,
    gamma_scale: Tensor,
    beta_shift: Tensor,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_stats: bool = True,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W) of an NCHW tensor.

    In training mode batch statistics are used and, when ``update_stats`` is
    set, the running buffers are updated in place. In eval mode the running
    buffers are used.
    """
    c = x.shape[1]
    if gamma_scale.data.size != c or beta_shift.data.size != c:
        raise ValueError(
            f"batch_norm: scale {gamma_scale.shape} / shift {beta_shift.shape} do not match {c} channels"
        )
    xd = x.data
    axes = (0, 2, 3)
    bshape = (1, c, 1, 1)
    gam = gamma_scale.data.reshape(bshape)
    bet = beta_shift.data.reshape(bshape)

    if not training:
        if running_mean is None or running_var is None:
            raise ValueError("batch_norm: eval mode needs running statistics")
        inv = 1.0 / np.sqrt(running_var.reshape(bshape) + eps)
        xhat = (xd - running_mean.reshape(bshape)) * inv
        out = (gam * xhat + bet).astype(xd.dtype, copy=False)

        def backward_eval(g):
            return (
                g * gam * inv,
                (g * xhat).sum(axis=axes).reshape(gamma_scale.shape),
                g.sum(axis=axes).reshape(beta_shift.shape),
            )

        return Tensor._from_op(out, (x, gamma_scale, beta_shift), backward_eval)

    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    mu = xd.mean(axis=axes, keepdims=True)
    var = xd.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = gam * xhat + bet

    if update_stats and running_mean is not None and running_var is not None:
        unbiased = var.reshape(c) * (m / max(m - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gam
        dx = inv / m * (
            m * dxhat
            - dxhat.sum(axis=axes, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
        )
        return dx, dgamma.reshape(gamma_scale.shape), dbeta.reshape(beta_shift.shape)

    return Tensor._from_op(out, (x, gamma_scale, beta_shift), backward)


def minmax_normalize(x: Tensor, axes: tuple[int, ...] = (-2, -1)) -> Tensor:
    """Map each plane to [0, 1] via (x - min) / (max - min).

    Constant planes map to zeros. The gradient includes the dependence of the
    extremes on the input (routed to the first arg-min / arg-max).
    """
    xd = x.data
    axes = tuple(a % xd.ndim for a in axes)
    lo = xd.min(axis=axes, keepdims=True)
    hi = xd.max(axis=axes, keepdims=True)
    span = hi - lo
    flat = span == 0
    safe = np.where(flat, 1.0, span).astype(xd.dtype)
    y = np.where(flat, 0.0, (xd - lo) / safe).astype(xd.dtype)

    def backward(g):
        g = np.where(flat, 0.0, g)
        gx = g / safe
        g_lo = (g * (y - 1.0) / safe).sum(axis=axes, keepdims=True)
        g_hi = (-(g * y) / safe).sum(axis=axes, keepdims=True)
        gx = gx + _route_to_extreme(xd, axes, g_lo, "min") + _route_to_extreme(xd, axes, g_hi, "max")
        return (gx.astype(xd.dtype, copy=False),)

    return Tensor._from_op(y, (x,), backward)


def _route_to_extreme(xd: np.ndarray, axes, g: np.ndarray, which: str) -> np.ndarray:
    keep = [a for a in range(xd.ndim) if a not in axes]
    moved = np.moveaxis(xd, keep, list(range(len(keep))))
    lead = moved.shape[: len(keep)]
    flat = moved.reshape(lead + (-1,))
    idx = flat.argmin(axis=-1) if which == "min" else flat.argmax(axis=-1)
    onehot = np.zeros_like(flat)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    onehot = onehot.reshape(moved.shape)
    onehot = np.moveaxis(onehot, list(range(len(keep))), keep)
    return onehot * g


# -- activations ---------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return Tensor._from_op(np.where(pos, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * pos,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return Tensor._from_op(x.data * factor, (x,), lambda g: (g * factor,))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return Tensor._from_op(t, (x,), lambda g: (g * (1.0 - t * t),))


def log_softmax(logits: Tensor) -> Tensor:
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return Tensor._from_op(out, (logits,), backward)


def softmax_log_loss(logits: Tensor, target) -> Tensor:
    """Mean negative log-probability of ``target`` under softmax(logits).

    ``logits`` is N x C; ``target`` holds one class index in [0, C) per row.
    """
    if logits.ndim != 2:
        raise ValueError(f"softmax_log_loss: logits must be N x C, got {logits.shape}")
    n, c = logits.shape
    target = np.asarray(target, dtype=np.int64).reshape(-1)
    if target.shape[0] != n:
        raise ValueError(f"softmax_log_loss: {target.shape[0]} targets for {n} rows")
    if target.size and (target.min() < 0 or target.max() >= c):
        raise ValueError(f"softmax_log_loss: target index out of range [0, {c - 1}]")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = (lse - shifted[rows, target]).mean()

    def backward(g):
        probs = np.exp(shifted - lse[:, None])
        probs[rows, target] -= 1.0
        return (probs * (g / n),)

    return Tensor._from_op(np.asarray(loss, dtype=z.dtype), (logits,), backward)


# -- finite differences --------------------------------------------------------


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Iterable[np.ndarray],
    h: float = 1e-5,
    seed_grad: np.ndarray | None = None,
) -> float:
    """Largest relative error between autodiff and central differences.

    ``fn`` maps Tensors to a Tensor; non-scalar outputs are reduced by a dot
    product with ``seed_grad`` (a fixed random direction when omitted).
    Relative error per coordinate is ``|a - n| / max(1, |a|, |n|)``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    probe = fn(*[Tensor(a) for a in arrays]).data
    if seed_grad is None:
        seed_grad = np.random.default_rng(12345).standard_normal(probe.shape)

    def scalar(*arrs) -> float:
        with no_grad():
            return float((fn(*[Tensor(a) for a in arrs]).data * seed_grad).sum())

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    out.backward(np.asarray(seed_grad, dtype=out.dtype).reshape(out.shape))

    worst = 0.0
    for i, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[i])
        base = arrays[i]
        for idx in np.ndindex(base.shape):
            orig = base[idx]
            base[idx] = orig + h
            up = scalar(*arrays)
            base[idx] = orig - h
            down = scalar(*arrays)
            base[idx] = orig
            numeric = (up - down) / (2 * h)
            a = analytic[idx]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
