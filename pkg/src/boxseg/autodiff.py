"""Minimal reverse-mode autodiff over dense N-D arrays.

Scope is exactly the op set the segmentation network needs: 3D
convolution/transposed convolution, 2x2x2 max-pooling, frozen batch
normalization, ReLU, sigmoid, elementwise arithmetic, channel concat, and
trilinear upsampling. Feature maps are laid out N x C x D x H x W.
Convolution follows the cross-correlation convention. Backward passes
accumulate (+=) into ``.grad`` so shared subexpressions are handled; no op
mutates its inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import product
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    a, b, c = (int(x) for x in v)
    return (a, b, c)


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 3D convolution layer."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int] = (3, 3, 3)
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (1, 1, 1)
    has_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        object.__setattr__(self, "padding", _triple(self.padding))
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ValueError(f"invalid conv geometry {self!r}")


class Tensor:
    """N-D value grid participating in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self):
        """Backpropagate from a scalar; populates ``.grad`` on every
        reachable tensor with ``requires_grad``."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- scalar/elementwise arithmetic ------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        return add(self, self._coerce(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, self._coerce(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, Tensor(np.asarray(-1.0, dtype=self.data.dtype)))

    def __sub__(self, other):
        return add(self, -self._coerce(other))

    def __rsub__(self, other):
        return add(self._coerce(other), -self)

    def __truediv__(self, other):
        return div(self, self._coerce(other))

    def __rtruediv__(self, other):
        return div(self._coerce(other), self)


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape`` by summing."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _node(data, parents, backward) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=tuple(parents), _backward=backward if req else None)


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data / b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(out_data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out_data = np.where(mask, x.data, 0)

    def backward(g):
        _accumulate(x, g * mask)

    return _node(out_data, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    out_data = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))

    def backward(g):
        _accumulate(x, g * out_data * (1.0 - out_data))

    return _node(out_data, (x,), backward)


def tsum(x: Tensor) -> Tensor:
    out_data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward(g):
        _accumulate(x, np.broadcast_to(g, x.data.shape))

    return _node(out_data, (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != b.data.ndim or a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ValueError(f"concat_channels shape mismatch: {a.data.shape} vs {b.data.shape}")
    split = a.data.shape[1]
    out_data = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        _accumulate(a, g[:, :split])
        _accumulate(b, g[:, split:])

    return _node(out_data, (a, b), backward)


# -- convolution ----------------------------------------------------------


def _out_dim(d: int, k: int, s: int, p: int) -> int:
    return (d + 2 * p - k) // s + 1


def _im2col(x: np.ndarray, kernel, stride, padding):
    """(N,C,D,H,W) -> (N, C*kd*kh*kw, L) column matrix plus output dims."""
    kd, kh, kw = kernel
    sd, sh, sw = stride
    pd, ph, pw = padding
    xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))
    win = win[:, :, ::sd, ::sh, ::sw]
    n, c, do, ho, wo = win.shape[:5]
    cols = win.transpose(0, 1, 5, 6, 7, 2, 3, 4).reshape(n, c * kd * kh * kw, do * ho * wo)
    return np.ascontiguousarray(cols), (do, ho, wo)


def _col2im(cols: np.ndarray, x_shape, kernel, stride, padding, out_dims):
    """Adjoint of :func:`_im2col`: scatter-add columns back onto the grid."""
    n, c, d, h, w = x_shape
    kd, kh, kw = kernel
    sd, sh, sw = stride
    pd, ph, pw = padding
    do, ho, wo = out_dims
    xp = np.zeros((n, c, d + 2 * pd, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kd, kh, kw, do, ho, wo)
    for a, b, cc in product(range(kd), range(kh), range(kw)):
        xp[:, :, a : a + sd * do : sd, b : b + sh * ho : sh, cc : cc + sw * wo : sw] += cols6[:, :, a, b, cc]
    return xp[:, :, pd : pd + d, ph : ph + h, pw : pw + w].copy()


def conv3d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlate (N,C,D,H,W) with weights (O,C,kd,kh,kw)."""
    stride = _triple(stride)
    padding = _triple(padding)
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ValueError("conv3d expects 5D input and weights")
    n, c, d, h, wd = x.data.shape
    o, cw, kd, kh, kw = w.data.shape
    if c != cw:
        raise ValueError(f"channel mismatch: input has {c}, weights expect {cw}")
    out_dims = tuple(_out_dim(dim, k, s, p) for dim, k, s, p in zip((d, h, wd), (kd, kh, kw), stride, padding))
    if min(out_dims) < 1:
        raise ValueError(f"conv3d output dims {out_dims} < 1")
    cols, _ = _im2col(x.data, (kd, kh, kw), stride, padding)
    w_mat = w.data.reshape(o, -1)
    out_flat = np.matmul(w_mat, cols)
    out_data = out_flat.reshape(n, o, *out_dims)
    if bias is not None:
        if bias.data.shape != (o,):
            raise ValueError(f"bias must have shape ({o},), got {bias.data.shape}")
        out_data = out_data + bias.data.reshape(1, o, 1, 1, 1)

    def backward(g):
        g_flat = g.reshape(n, o, -1)
        if w.requires_grad:
            _accumulate(w, np.matmul(g_flat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3, 4)))
        if x.requires_grad:
            dcols = np.matmul(w_mat.T, g_flat)
            _accumulate(x, _col2im(dcols, x.data.shape, (kd, kh, kw), stride, padding, out_dims))

    parents = (x, w) if bias is None else (x, w, bias)
    return _node(out_data, parents, backward)


def conv_transpose3d(x: Tensor, w: Tensor, stride=2, padding=0) -> Tensor:
    """Adjoint of :func:`conv3d`; weights are laid out (in, out, kd, kh, kw).

    Output spatial dims are (d - 1) * stride + kernel - 2 * padding.
    """
    stride = _triple(stride)
    padding = _triple(padding)
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ValueError("conv_transpose3d expects 5D input and weights")
    n, o, d, h, wd = x.data.shape
    ow, c, kd, kh, kw = w.data.shape
    if o != ow:
        raise ValueError(f"channel mismatch: input has {o}, weights expect {ow}")
    out_dims = tuple(
        (dim - 1) * s + k - 2 * p for dim, k, s, p in zip((d, h, wd), (kd, kh, kw), stride, padding)
    )
    if min(out_dims) < 1:
        raise ValueError(f"conv_transpose3d output dims {out_dims} < 1")
    w_mat = w.data.reshape(o, -1)
    x_flat = x.data.reshape(n, o, -1)
    cols = np.matmul(w_mat.T, x_flat)
    out_data = _col2im(cols, (n, c) + out_dims, (kd, kh, kw), stride, padding, (d, h, wd))

    def backward(g):
        gcols, _ = _im2col(g, (kd, kh, kw), stride, padding)
        if x.requires_grad:
            _accumulate(x, np.matmul(w_mat, gcols).reshape(x.data.shape))
        if w.requires_grad:
            _accumulate(w, np.matmul(x_flat, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape))

    return _node(out_data, (x, w), backward)


def maxpool3d(x: Tensor) -> Tensor:
    """Non-overlapping 2x2x2 max-pool; gradient goes to the first max per
    window in (D,H,W) scan order."""
    n, c, d, h, w = x.data.shape
    if d % 2 or h % 2 or w % 2:
        raise ValueError(
            f"maxpool3d needs even spatial dims, got {(d, h, w)}; pad or resize upstream"
        )
    d2, h2, w2 = d // 2, h // 2, w // 2
    windows = (
        x.data.reshape(n, c, d2, 2, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 6, 3, 5, 7)
        .reshape(n, c, d2, h2, w2, 8)
    )
    arg = windows.argmax(axis=-1)
    out_data = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        g8 = np.zeros_like(windows)
        np.put_along_axis(g8, arg[..., None], g[..., None], axis=-1)
        dx = (
            g8.reshape(n, c, d2, h2, w2, 2, 2, 2)
            .transpose(0, 1, 2, 5, 3, 6, 4, 7)
            .reshape(n, c, d, h, w)
        )
        _accumulate(x, dx)

    return _node(out_data, (x,), backward)


def frozen_batchnorm(
    x: Tensor,
    gamma: np.ndarray,
    beta: np.ndarray,
    mean: np.ndarray,
    var: np.ndarray,
    eps: float = 1e-5,
) -> Tensor:
    """Affine-normalize per channel with fixed statistics (non-trainable)."""
    c = x.data.shape[1]
    for name, v in (("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)):
        if np.asarray(v).shape != (c,):
            raise ValueError(f"{name} must have shape ({c},)")
    if np.any(np.asarray(var) < 0):
        raise ValueError("var must be nonnegative")
    scale = (gamma / np.sqrt(var + eps)).reshape(1, c, 1, 1, 1).astype(x.data.dtype)
    shift = (beta - mean * gamma / np.sqrt(var + eps)).reshape(1, c, 1, 1, 1).astype(x.data.dtype)
    out_data = x.data * scale + shift

    def backward(g):
        _accumulate(x, g * scale)

    return _node(out_data, (x,), backward)


def _lerp_plan(in_len: int, out_len: int):
    src = (np.arange(out_len) + 0.5) * (in_len / out_len) - 0.5
    i0f = np.floor(src)
    frac = src - i0f
    i0 = np.clip(i0f, 0, in_len - 1).astype(np.int64)
    i1 = np.clip(i0f + 1, 0, in_len - 1).astype(np.int64)
    return i0, i1, frac


def upsample_trilinear(x: Tensor, scale: int = 2) -> Tensor:
    """Trilinear upsampling by an integer factor (half-pixel-centres)."""
    if scale < 1:
        raise ValueError("scale must be >= 1")
    if scale == 1:
        return _node(x.data.copy(), (x,), lambda g: _accumulate(x, g))
    plans = []
    out_data = x.data
    for axis in (2, 3, 4):
        in_len = out_data.shape[axis]
        i0, i1, frac = _lerp_plan(in_len, in_len * scale)
        shape = [1] * out_data.ndim
        shape[axis] = i0.size
        w = frac.reshape(shape)
        out_data = np.take(out_data, i0, axis=axis) * (1.0 - w) + np.take(out_data, i1, axis=axis) * w
        plans.append((axis, in_len, i0, i1, w))

    def backward(g):
        for axis, in_len, i0, i1, w in reversed(plans):
            shape = list(g.shape)
            shape[axis] = in_len
            acc = np.zeros(shape, dtype=g.dtype)
            moved = np.moveaxis(acc, axis, 0)
            g0 = np.moveaxis(g * (1.0 - w), axis, 0)
            g1 = np.moveaxis(g * w, axis, 0)
            np.add.at(moved, i0, g0)
            np.add.at(moved, i1, g1)
            g = acc
        _accumulate(x, g)

    return _node(out_data, (x,), backward)


def zero_grads(tensors) -> None:
    seq = tensors.values() if isinstance(tensors, dict) else tensors
    for t in seq:
        t.grad = None


# -- checkpoint I/O --------------------------------------------------------


def save_tensor_dict(directory, arrays: dict[str, np.ndarray], manifest_name: str = "params.json"):
    """Write a named-array collection as a JSON manifest + raw blobs.

    Blobs are little-endian, float32 by default; the manifest records name,
    dims, dtype, and blob file per tensor. Round-trips exactly.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for idx, (name, arr) in enumerate(arrays.items()):
        arr = np.asarray(arr)
        if arr.dtype == np.float64:
            disk = np.dtype("<f8")
        else:
            disk = np.dtype("<f4")
        blob = f"t{idx:04d}.raw"
        (directory / blob).write_bytes(np.ascontiguousarray(arr, dtype=disk).tobytes())
        entries.append(
            {"name": name, "dims": list(arr.shape), "dtype": disk.name, "data_file": blob}
        )
    (directory / manifest_name).write_text(json.dumps({"tensors": entries}, indent=2) + "\n")


def load_tensor_dict(directory, manifest_name: str = "params.json") -> dict[str, np.ndarray]:
    directory = Path(directory)
    manifest_path = directory / manifest_name
    if not manifest_path.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        disk = np.dtype("<f8") if entry.get("dtype") == "float64" else np.dtype("<f4")
        blob = (directory / entry["data_file"]).read_bytes()
        dims = tuple(entry["dims"])
        expected = int(np.prod(dims)) * disk.itemsize if dims else disk.itemsize
        if len(blob) != expected:
            raise ValueError(f"checkpoint blob {entry['data_file']}: length mismatch")
        arrays[entry["name"]] = np.frombuffer(blob, dtype=disk).reshape(dims).copy()
    return arrays
