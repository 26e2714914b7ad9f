"""Minimal reverse-mode differentiation over numpy arrays.

Tensors here have no batch dimension: sequence tensors are laid out as
``(channels, frames)``. Every op records a closure that pushes the output
gradient back to its parents; :meth:`Tensor.backward` walks the graph in
reverse topological order.
"""
from __future__ import annotations

import contextlib
import math
import struct
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"SOMDCKPT"
CKPT_VERSION = 1


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), -self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return tsum(self, axis) * (1.0 / n)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _make(data, parents, backward):
    parents = tuple(parents)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def parameter(data, name=None):
    return Tensor(np.asarray(data), requires_grad=True, name=name)


# elementwise ---------------------------------------------------------------

def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward)


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


def power(a, p):
    out = a.data ** p

    def backward(g):
        return (g * p * a.data ** (p - 1),)

    return _make(out, (a,), backward)


def tabs(a):
    out = np.abs(a.data)
    return _make(out, (a,), lambda g: (g * np.sign(a.data),))


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def leaky_relu(a, slope=0.1):
    """Elementwise ``max(x, slope * x)`` for ``0 < slope < 1``."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"slope must lie in (0, 1), got {slope}")
    a = as_tensor(a)
    pos = a.data > 0
    out = np.where(pos, a.data, a.data * slope)

    def backward(g):
        return (np.where(pos, g, g * slope),)

    return _make(out, (a,), backward)


def clamp_min(a, floor):
    keep = a.data >= floor
    out = np.where(keep, a.data, floor).astype(a.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * keep,))


# reductions and shape ops --------------------------------------------------

def tsum(a, axis=None):
    out = np.sum(a.data, axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward)


def reshape(a, shape):
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index):
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), backward)


def take(a, indices, axis=0):
    """Gather along ``axis`` with an integer index array; scatter-adds back."""
    indices = np.asarray(indices)
    out = np.take(a.data, indices, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, tuple(range(axis, axis + indices.ndim)),
                         tuple(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        return (full,)

    return _make(out, (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _make(out, tensors, backward)


def matmul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


def softmax(logits):
    """Softmax over a 1-D logit vector."""
    z = logits.data - logits.data.max()
    e = np.exp(z)
    out = e / e.sum()

    def backward(g):
        return (out * (g - np.dot(g, out)),)

    return _make(out, (logits,), backward)


# convolutions --------------------------------------------------------------

def conv_out_frames(frames, kernel_size, stride=1, padding=0, dilation=1):
    span = dilation * (kernel_size - 1) + 1
    return (frames + 2 * padding - span) // stride + 1


def conv_transpose_out_frames(frames, kernel_size, stride=1, padding=0,
                              output_padding=0):
    return (frames - 1) * stride + kernel_size - 2 * padding + output_padding


def _check_conv(x, w, b, in_axis):
    if x.ndim != 2:
        raise ShapeError(f"input must be (channels, frames), got shape {x.shape}")
    if w.ndim != 3:
        raise ShapeError(f"weights must be rank 3, got shape {w.shape}")
    if x.shape[0] != w.shape[in_axis]:
        raise ShapeError(
            f"in_channels mismatch: input has {x.shape[0]} channels, "
            f"weights expect {w.shape[in_axis]}")
    out_ch = w.shape[1 - in_axis]
    if b is not None and b.shape != (out_ch,):
        raise ShapeError(f"bias must have shape ({out_ch},), got {b.shape}")


def conv1d(x, w, b=None, stride=1, padding=0, dilation=1):
    """1-D cross-correlation. ``w`` is ``(out, in, kernel)``."""
    x = as_tensor(x)
    w = as_tensor(w, x.dtype)
    b = None if b is None else as_tensor(b, x.dtype)
    _check_conv(x, w, b, in_axis=1)
    if stride < 1 or dilation < 1:
        raise ShapeError(f"stride and dilation must be >= 1, got {stride}, {dilation}")
    c_out, c_in, k = w.shape
    frames = x.shape[1]
    t_out = conv_out_frames(frames, k, stride, padding, dilation)
    if t_out < 1:
        raise ShapeError(
            f"frames={frames} too short for kernel_size={k} with padding={padding}")
    span = dilation * (k - 1) + 1
    xp = np.pad(x.data, ((0, 0), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, span, axis=1)
    win = win[:, ::stride][:, :t_out, ::dilation]
    cols = np.ascontiguousarray(win.transpose(1, 0, 2)).reshape(t_out, c_in * k)
    wmat = w.data.reshape(c_out, c_in * k)
    out = wmat @ cols.T
    if b is not None:
        out += b.data[:, None]

    def backward(g):
        gx = gw = gb = None
        if w.requires_grad:
            gw = (g @ cols).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=1)
        if x.requires_grad:
            gcols = (g.T @ wmat).reshape(t_out, c_in, k)
            gxp = np.zeros_like(xp)
            reach = stride * (t_out - 1) + 1
            for j in range(k):
                off = j * dilation
                gxp[:, off:off + reach:stride] += gcols[:, :, j].T
            gx = gxp[:, padding:padding + frames] if padding else gxp
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


def conv_transpose1d(x, w, b=None, stride=1, padding=0, output_padding=0):
    """Transposed 1-D convolution, the adjoint of :func:`conv1d`.

    ``w`` is ``(in, out, kernel)`` so that the same array used as a
    ``conv1d`` weight (``(out', in', kernel)``) gives the adjoint map.
    """
    x = as_tensor(x)
    w = as_tensor(w, x.dtype)
    b = None if b is None else as_tensor(b, x.dtype)
    _check_conv(x, w, b, in_axis=0)
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    c_in, c_out, k = w.shape
    frames = x.shape[1]
    full_len = (frames - 1) * stride + k + output_padding
    t_out = conv_transpose_out_frames(frames, k, stride, padding, output_padding)
    if t_out < 1:
        raise ShapeError(f"padding={padding} crops away the whole output")
    full = np.zeros((c_out, full_len), dtype=x.dtype)
    span = stride * (frames - 1) + 1
    for j in range(k):
        full[:, j:j + span:stride] += w.data[:, :, j].T @ x.data
    out = full[:, padding:padding + t_out]
    if b is not None:
        out = out + b.data[:, None]
    else:
        out = out.copy()

    def backward(g):
        gx = gw = gb = None
        gfull = np.zeros((c_out, full_len), dtype=g.dtype)
        gfull[:, padding:padding + t_out] = g
        if x.requires_grad:
            gx = np.zeros_like(x.data)
        if w.requires_grad:
            gw = np.zeros_like(w.data)
        for j in range(k):
            sl = gfull[:, j:j + span:stride]
            if gx is not None:
                gx += w.data[:, :, j] @ sl
            if gw is not None:
                gw[:, :, j] = x.data @ sl.T
        if b is not None and b.requires_grad:
            gb = g.sum(axis=1)
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


# parameters and optimisation ------------------------------------------------

def init_conv_weight(rng, shape, fan_in, dtype=np.float32):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ParamStore:
    """Named trainable tensors plus their Adam moments."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name, data):
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = parameter(np.asarray(data), name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def names(self, prefix=""):
        return [n for n in self.params if n.startswith(prefix)]

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def grads(self, prefix=""):
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for n, t in self.params.items() if n.startswith(prefix)}

    def state(self):
        return {n: t.data for n, t in self.params.items()}

    def load_state(self, state, strict=True):
        for name, t in self.params.items():
            if name not in state:
                if strict:
                    raise KeyError(f"missing parameter {name!r} in state")
                continue
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise ShapeError(
                    f"parameter {name!r}: state shape {arr.shape} != {t.shape}")
            t.data = arr.astype(t.dtype).copy()

    def astype(self, dtype):
        for name, t in self.params.items():
            t.data = t.data.astype(dtype)
            self.m[name] = self.m[name].astype(dtype)
            self.v[name] = self.v[name].astype(dtype)
        return self


def adam_step(store, grads, lr, betas=(0.8, 0.99), eps=1e-8):
    """One Adam update (with bias correction) on the entries named in ``grads``.

    The step counter is shared by the store and incremented once per call.
    """
    for name, g in grads.items():
        if name not in store.params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != store.params[name].shape:
            raise ShapeError(
                f"gradient for {name!r} has shape {np.shape(g)}, "
                f"parameter has {store.params[name].shape}")
    store.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1 ** store.step
    c2 = 1.0 - b2 ** store.step
    for name, g in grads.items():
        p = store.params[name]
        m = store.m[name]
        v = store.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if lr:
            update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
            p.data = (p.data - update).astype(p.dtype, copy=False)
    return store


# verification --------------------------------------------------------------

def grad_check(forward, point, eps=1e-6, max_entries=None, seed=0):
    """Max relative error between backprop and central finite differences.

    ``forward`` maps a dict of tensors (same keys as ``point``) to a scalar
    tensor. Errors are scaled per input by the larger of the two gradient
    magnitudes, so entries with near-zero gradient do not dominate.

    ``max_entries`` caps how many coordinates of each input are probed
    (drawn without replacement from ``seed``); ``None`` probes all of them.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    point = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
    leaves = {k: parameter(v.copy(), name=k) for k, v in point.items()}
    out = forward(leaves)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite value in forward pass; check aborted")
    out.backward()

    def value(arrays):
        y = forward({k: Tensor(a) for k, a in arrays.items()})
        if not np.all(np.isfinite(y.data)):
            raise FloatingPointError("non-finite value in forward pass; check aborted")
        return float(np.sum(y.data))

    rng = np.random.default_rng(seed)
    worst = 0.0
    for key, base in point.items():
        analytic = leaves[key].grad
        if analytic is None:
            analytic = np.zeros_like(base)
        idx = np.arange(base.size)
        if max_entries is not None and base.size > max_entries:
            idx = np.sort(rng.choice(base.size, size=max_entries, replace=False))
        analytic = analytic.reshape(-1)[idx]
        numeric = np.zeros(len(idx))
        for j, i in enumerate(idx):
            probe = {k: v for k, v in point.items()}
            shifted = base.copy().reshape(-1)
            orig = shifted[i]
            shifted[i] = orig + eps
            probe[key] = shifted.reshape(base.shape)
            up = value(probe)
            shifted[i] = orig - eps
            probe[key] = shifted.reshape(base.shape)
            down = value(probe)
            numeric[j] = (up - down) / (2.0 * eps)
        scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
        worst = max(worst, float(np.max(np.abs(analytic - numeric)) / scale))
    return worst


# checkpoint I/O ------------------------------------------------------------

def save_checkpoint(path, arrays):
    """Write named arrays as float32 in the SOMDCKPT container."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    path.write_bytes(b"".join(chunks))


def load_checkpoint(path):
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: bad magic, not a checkpoint file")
    pos = 8

    def read(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise ValueError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, count = read("<II")
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = read("<I")
        if pos + nlen > len(buf):
            raise ValueError(f"{path}: truncated checkpoint")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = read("<I")
        dims = read(f"<{rank}I") if rank else ()
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(buf):
            raise ValueError(f"{path}: truncated checkpoint")
        out[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4,
                                  offset=pos).reshape(dims).astype(np.float32)
        pos += nbytes
    return out
