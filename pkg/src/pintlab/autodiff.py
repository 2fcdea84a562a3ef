"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Implements exactly the operator set the segmentation network and its losses
need: conv2d, nearest-neighbour upsampling, max pooling, relu, inverted
dropout, channel softmax / log-softmax, concat, elementwise arithmetic and
reductions. Every operation records its inputs and a backward rule on the
output tensor; ``backward(loss)`` replays the recorded operations once each,
in reverse topological order, accumulating gradients additively.

The graph is single-threaded: one training step builds and consumes one
graph. Tensors themselves are plain values and safe to hand between threads.

Any operation whose output contains NaN/Inf raises ``NumericError`` instead
of propagating the values.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import (
    ContractError,
    DataFormatError,
    NumericError,
    ShapeError,
    TruncatedFileError,
)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {what}")


class _Op:
    """One recorded operation: input tensors plus a backward rule.

    ``back(grad_out)`` returns one gradient array per input (None for inputs
    that need none).
    """

    __slots__ = ("inputs", "back", "name")

    def __init__(self, inputs, back, name):
        self.inputs = inputs
        self.back = back
        self.name = name


class Tensor:
    """N-dimensional float64 array with optional gradient-tape participation."""

    __slots__ = ("data", "requires_grad", "grad", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            # ascontiguousarray would also promote 0-d to 1-d, so gate it
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._op: _Op | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None) -> "Tensor":
        n = self.size if axis is None else _axis_count(self.shape, axis)
        return tsum(self, axis=axis) * (1.0 / n)

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        if isinstance(other, Tensor) or not np.isscalar(other):
            raise ContractError("tensor division only supports scalar divisors")
        return mul(self, _as_tensor(1.0 / float(other)))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _axis_count(shape, axis) -> int:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    n = 1
    for a in axes:
        n *= shape[a]
    return n


def _make(data: np.ndarray, inputs, back, name: str) -> Tensor:
    """Wrap an op result, recording the backward rule if any input needs it."""
    _check_finite(data, name)
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._op = _Op(tuple(inputs), back, name)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad tensor reachable from loss.

    Gradients accumulate additively, both across multiple uses inside the
    graph and across repeated backward calls (until cleared by the optimizer).
    """
    if loss.shape != ():
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._op is None:
        raise ContractError("backward on a tensor with no recorded operations")

    # Reverse topological order via iterative DFS: children before parents.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._op is not None:
            for inp in node._op.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._op is None:
            node.grad = np.array(g) if node.grad is None else node.grad + g
            continue
        for inp, gin in zip(node._op.inputs, node._op.back(g)):
            if gin is None or not inp.requires_grad:
                continue
            acc = grads.get(id(inp))
            grads[id(inp)] = gin if acc is None else acc + gin


# ---------------------------------------------------------------------------
# elementwise / reduction ops


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), back, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), back, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), back, "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def back(g):
        return (g * out_data,)

    return _make(out_data, (a,), back, "exp")


def log(a: Tensor) -> Tensor:
    def back(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), back, "log")


def power(a: Tensor, exponent) -> Tensor:
    if not np.isscalar(exponent):
        raise ContractError("power only supports scalar exponents")
    p = float(exponent)

    def back(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(a.data**p, (a,), back, "power")


def relu(a: Tensor) -> Tensor:
    def back(g):
        return (g * (a.data > 0.0),)

    return _make(np.maximum(a.data, 0.0), (a,), back, "relu")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    in_shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(ax % len(in_shape) for ax in axes)
            kshape = tuple(1 if i in axes else d for i, d in enumerate(in_shape))
            g = g.reshape(kshape)
        return (np.broadcast_to(g, in_shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), back, "sum")


def concat_channels(tensors) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat_channels needs at least one tensor")
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != 4 or t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise ShapeError(
                f"concat_channels shape mismatch: {t.shape} vs {base}"
            )
    widths = [t.shape[1] for t in tensors]

    def back(g):
        outs, start = [], 0
        for w in widths:
            outs.append(g[:, start : start + w])
            start += w
        return tuple(outs)

    return _make(
        np.concatenate([t.data for t in tensors], axis=1), tuple(tensors), back, "concat"
    )


# ---------------------------------------------------------------------------
# network ops


def _require_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} expects a [B,C,H,W] tensor, got shape {x.shape}")


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2D convolution (cross-correlation) with zero padding, via im2col."""
    _require_4d(x, "conv2d input")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be [Cout,Cin,kh,kw], got {weight.shape}")
    batch, cin, height, width = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input {cin} vs weight {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias must be [{cout}], got {bias.shape}")
    if stride < 1 or padding < 0:
        raise ContractError("conv2d needs stride >= 1 and padding >= 0")
    hp, wp = height + 2 * padding, width + 2 * padding
    out_h = (hp - kh) // stride + 1
    out_w = (wp - kw) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(
            f"conv2d kernel {kh}x{kw} does not fit input {height}x{width} (pad {padding})"
        )

    if padding:
        xp = np.zeros((batch, cin, hp, wp), dtype=np.float64)
        xp[:, :, padding : padding + height, padding : padding + width] = x.data
    else:
        xp = x.data

    cols = np.empty((batch, cin, kh, kw, out_h, out_w), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[
                :, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride
            ]
    cols = cols.reshape(batch, cin * kh * kw, out_h * out_w)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out = np.matmul(wmat, cols).reshape(batch, cout, out_h, out_w)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    need_x = x.requires_grad
    need_w = weight.requires_grad

    def back(g):
        gflat = g.reshape(batch, cout, out_h * out_w)
        grad_w = grad_x = grad_b = None
        if need_w:
            grad_w = np.einsum("bon,bkn->ok", gflat, cols).reshape(weight.shape)
        if bias is not None:
            grad_b = g.sum(axis=(0, 2, 3))
        if need_x:
            gcols = np.matmul(wmat.T, gflat).reshape(
                batch, cin, kh, kw, out_h, out_w
            )
            gxp = np.zeros((batch, cin, hp, wp), dtype=np.float64)
            for i in range(kh):
                for j in range(kw):
                    gxp[
                        :,
                        :,
                        i : i + stride * out_h : stride,
                        j : j + stride * out_w : stride,
                    ] += gcols[:, :, i, j]
            grad_x = (
                gxp[:, :, padding : padding + height, padding : padding + width]
                if padding
                else gxp
            )
        return (grad_x, grad_w) if bias is None else (grad_x, grad_w, grad_b)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, inputs, back, "conv2d")


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first max."""
    _require_4d(x, "max_pool2d input")
    batch, ch, height, width = x.shape
    if height % size or width % size:
        raise ShapeError(f"max_pool2d needs H,W divisible by {size}, got {height}x{width}")
    out_h, out_w = height // size, width // size
    windows = (
        x.data.reshape(batch, ch, out_h, size, out_w, size)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(batch, ch, out_h, out_w, size * size)
    )
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gw = np.zeros((batch, ch, out_h, out_w, size * size), dtype=np.float64)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = (
            gw.reshape(batch, ch, out_h, out_w, size, size)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(batch, ch, height, width)
        )
        return (gx,)

    return _make(out, (x,), back, "max_pool2d")


def upsample_nearest2x(x: Tensor) -> Tensor:
    _require_4d(x, "upsample_nearest2x input")
    batch, ch, height, width = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def back(g):
        return (g.reshape(batch, ch, height, 2, width, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), back, "upsample_nearest2x")


def dropout(x: Tensor, rate: float, train_mode: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: scales survivors by 1/(1-rate); identity in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0,1), got {rate}")
    if not train_mode or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode requires an rng")
    scale = 1.0 / (1.0 - rate)
    keep = (rng.random(x.shape) >= rate) * scale

    def back(g):
        return (g * keep,)

    return _make(x.data * keep, (x,), back, "dropout")


def softmax_channel(x: Tensor) -> Tensor:
    """Softmax over the channel axis of a [B,C,H,W] tensor."""
    _require_4d(x, "softmax input")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)

    def back(g):
        dot = (g * probs).sum(axis=1, keepdims=True)
        return (probs * (g - dot),)

    return _make(probs, (x,), back, "softmax_channel")


def log_softmax_channel(x: Tensor) -> Tensor:
    _require_4d(x, "log_softmax input")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - logz
    probs = np.exp(out)

    def back(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return _make(out, (x,), back, "log_softmax_channel")


# ---------------------------------------------------------------------------
# optimizer


class SGD:
    """SGD with classical momentum and L2 weight decay added to the gradient.

    Update: v <- momentum*v + grad + weight_decay*theta; theta <- theta - lr*v.
    """

    def __init__(self, params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        params = list(params)
        if lr <= 0.0:
            raise ContractError(f"learning rate must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ContractError(f"momentum must be in [0,1), got {momentum}")
        if weight_decay < 0.0:
            raise ContractError(f"weight decay must be nonnegative, got {weight_decay}")
        self.params = params
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ContractError(f"sgd step with missing gradient on parameter {i}")
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity[i]
            v *= self.momentum
            v += g
            p.data -= self.lr * v
            p.grad = None

    def velocity_state(self) -> list[np.ndarray]:
        return [v.copy() for v in self.velocity]

    def load_velocity_state(self, state) -> None:
        state = list(state)
        if len(state) != len(self.velocity):
            raise ContractError("velocity state count mismatch")
        for i, v in enumerate(state):
            if v.shape != self.velocity[i].shape:
                raise ContractError("velocity state shape mismatch")
            self.velocity[i] = np.array(v, dtype=np.float64)


# ---------------------------------------------------------------------------
# tensor checkpoint format ("PNTW")

_WEIGHTS_MAGIC = b"PNTW"


def save_tensors(path, named: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays to the binary PNTW format (little-endian)."""
    with open(path, "wb") as fh:
        fh.write(_WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", len(named)))
        for name, arr in named.items():
            arr = np.asarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    """Read a PNTW file back into {name: float64 array}; bit-exact round trip."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _WEIGHTS_MAGIC:
        raise DataFormatError(f"{path}: not a PNTW weights file")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise TruncatedFileError(f"{path}: truncated at byte {pos}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    named: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n_elems = 1
        for d in dims:
            n_elems *= d
        data = np.frombuffer(take(8 * n_elems), dtype="<f8").reshape(dims)
        named[name] = np.array(data, dtype=np.float64)  # owning copy, keeps 0-d
    if pos != len(blob):
        raise DataFormatError(f"{path}: {len(blob) - pos} trailing bytes")
    return named
