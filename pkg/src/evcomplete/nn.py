"""A small reverse-mode autodiff over numpy arrays.

Only the handful of layers the event networks need are provided: affine
maps, leaky rectifiers, gathers over point sets, masked softmax attention
and a few reductions.  ``Tensor.backward`` walks the recorded graph in
reverse topological order.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

LEAK = 0.1


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "name", "requires_grad")

    def __init__(self, data, parents=(), backward_fn=None, name=None, requires_grad=False):
        self.data = data
        self.grad = None
        self.name = name
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        # constant subgraphs keep no history
        self.parents = parents if self.requires_grad else ()
        self.backward_fn = backward_fn if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.data.dtype)))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, seed=None):
        if not self.requires_grad:
            raise ValueError("tensor does not depend on any differentiable leaf")
        order, seen = [], set()

        def visit(node):
            stack = [(node, False)]
            while stack:
                n, done = stack.pop()
                if done:
                    order.append(n)
                    continue
                if id(n) in seen:
                    continue
                seen.add(id(n))
                stack.append((n, True))
                for p in n.parents:
                    if id(p) not in seen:
                        stack.append((p, False))

        visit(self)
        self.grad = np.ones_like(self.data) if seed is None else seed
        for n in reversed(order):
            if n.backward_fn is not None and n.grad is not None:
                n.backward_fn(n.grad)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    if g.ndim > len(shape):
        g = g.sum(axis=tuple(range(g.ndim - len(shape))))
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.data.dtype)

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return Tensor(a.data + b.data, (a, b), back)


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, (a,), lambda g: _accum(a, -g))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.data.dtype)

    def back(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor(a.data * b.data, (a, b), back)


def matmul(x: Tensor, w: Tensor) -> Tensor:
    """(..., Din) @ (Din, Dout)."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise ValueError(f"shape mismatch: {x.data.shape} @ {w.data.shape}")
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, x.data.shape[-1])
    out = (x2 @ w.data).reshape(lead + (w.data.shape[1],))

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        _accum(w, x2.T @ g2)
        if x.requires_grad:
            _accum(x, (g2 @ w.data.T).reshape(x.data.shape))

    return Tensor(out, (x, w), back)


def leaky_relu(x: Tensor, slope: float = LEAK) -> Tensor:
    if not 0 <= slope <= 1:
        raise ValueError("slope must lie in [0, 1]")
    out = np.maximum(x.data, x.data * x.data.dtype.type(slope))

    def back(g):
        _accum(x, np.where(x.data > 0, g, g * g.dtype.type(slope)))

    return Tensor(out, (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor(s, (x,), lambda g: _accum(x, g * s * (1.0 - s)))


def concat(xs, axis=-1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.data.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for x, part in zip(xs, np.split(g, splits, axis=axis)):
            _accum(x, part)

    return Tensor(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), back)


def reshape(x: Tensor, shape) -> Tensor:
    return Tensor(x.data.reshape(shape), (x,), lambda g: _accum(x, g.reshape(x.data.shape)))


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.data.shape).copy())

    return Tensor(np.asarray(out), (x,), back)


def mean(x: Tensor) -> Tensor:
    return mul(tsum(x), np.asarray(1.0 / x.data.size, dtype=x.data.dtype))


def square(x: Tensor) -> Tensor:
    return Tensor(x.data * x.data, (x,), lambda g: _accum(x, 2.0 * g * x.data))


def gather(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows along axis 1: x (B,N,D), idx (B,...) -> (B,...,D)."""
    b, n, d = x.data.shape
    flat = (idx.reshape(b, -1) + (np.arange(b) * n)[:, None]).ravel()
    src = x.data.reshape(b * n, d)
    out = src[flat].reshape(idx.shape + (d,))

    def back(g):
        if not x.requires_grad:
            return
        gx = np.zeros((b * n, d), dtype=g.dtype)
        np.add.at(gx, flat, g.reshape(-1, d))
        _accum(x, gx.reshape(b, n, d))

    return Tensor(out, (x,), back)


def masked_softmax(s: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    z = np.where(mask, s.data, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0).astype(s.data.dtype)
    w = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        _accum(s, w * (g - (g * w).sum(axis=axis, keepdims=True)))

    return Tensor(w, (s,), back)


def take_last(x: Tensor, a: int, b: int) -> Tensor:
    """Slice ``[..., a:b]``."""

    def back(g):
        full = np.zeros_like(x.data)
        full[..., a:b] = g
        _accum(x, full)

    return Tensor(x.data[..., a:b], (x,), back)


def clamp_unit(x: Tensor) -> Tensor:
    """Clip to [-1, 1]; the gradient is zero where clipping was active."""
    inside = (np.abs(x.data) <= 1.0).astype(x.data.dtype)
    return Tensor(np.clip(x.data, -1.0, 1.0), (x,), lambda g: _accum(x, g * inside))


def bce_with_logits(z: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy; ``target`` holds +-1 labels."""
    y = (np.asarray(target) > 0).astype(z.data.dtype)
    zd = z.data
    loss = np.maximum(zd, 0) - zd * y + np.log1p(np.exp(-np.abs(zd)))
    s = 0.5 * (1.0 + np.tanh(0.5 * zd))
    out = np.asarray(loss.mean(), dtype=zd.dtype)
    return Tensor(out, (z,), lambda g: _accum(z, g * (s - y) / zd.size))


# parameters ---------------------------------------------------------------


class ParamStore:
    """Named parameter arrays; shapes are fixed once created."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.arrays: OrderedDict[str, np.ndarray] = OrderedDict()
        self._leaves: dict[str, Tensor] = {}

    def __contains__(self, name):
        return name in self.arrays

    def __getitem__(self, name) -> np.ndarray:
        return self.arrays[name]

    def names(self):
        return list(self.arrays)

    @property
    def count(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def add(self, name: str, value) -> np.ndarray:
        if name in self.arrays:
            raise ValueError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=self.dtype)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"parameter {name!r} is not finite")
        self.arrays[name] = arr
        return arr

    def set(self, name: str, value):
        arr = self.arrays[name]
        value = np.asarray(value)
        if value.shape != arr.shape:
            raise ValueError(f"{name}: shape {value.shape} != {arr.shape}")
        arr[...] = value

    def tensor(self, name: str) -> Tensor:
        """Leaf tensor for ``name``; one shared leaf per forward pass."""
        leaf = self._leaves.get(name)
        if leaf is None:
            leaf = Tensor(self.arrays[name], name=name, requires_grad=True)
            self._leaves[name] = leaf
        return leaf

    def zero_grad(self):
        self._leaves = {}

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for name, arr in self.arrays.items():
            leaf = self._leaves.get(name)
            g = None if leaf is None else leaf.grad
            out[name] = np.zeros_like(arr) if g is None else g.astype(arr.dtype, copy=False)
        return out

    def astype(self, dtype) -> ParamStore:
        other = ParamStore(dtype)
        for k, v in self.arrays.items():
            other.add(k, v)
        return other

    def copy(self) -> ParamStore:
        return self.astype(self.dtype)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays.values()]) if self.arrays else np.zeros(0)


def init_dense(params: ParamStore, name: str, d_in: int, d_out: int, rng, zero: bool = False):
    bound = 1.0 / np.sqrt(d_in)
    w = np.zeros((d_in, d_out)) if zero else rng.uniform(-bound, bound, (d_in, d_out))
    b = np.zeros(d_out) if zero else rng.uniform(-bound, bound, d_out)
    params.add(name + ".w", w)
    params.add(name + ".b", b)


def dense(params: ParamStore, name: str, x) -> Tensor:
    """Affine map ``x @ W + b`` over the last axis."""
    return dense_forward(as_tensor(x), params.tensor(name + ".w"), params.tensor(name + ".b"))


def dense_forward(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if w.data.ndim != 2 or b.data.shape != (w.data.shape[1],):
        raise ValueError(f"bad dense parameter shapes {w.data.shape}, {b.data.shape}")
    if x.data.shape[-1] != w.data.shape[0]:
        raise ValueError(f"shape mismatch: {x.data.shape} @ {w.data.shape}")
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, x.data.shape[-1])
    out = (x2 @ w.data + b.data).reshape(lead + (w.data.shape[1],))

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        _accum(w, x2.T @ g2)
        _accum(b, g2.sum(axis=0))
        if x.requires_grad:
            _accum(x, (g2 @ w.data.T).reshape(x.data.shape))

    return Tensor(out, (x, w, b), back)


def init_mlp(params: ParamStore, name: str, widths, rng):
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        init_dense(params, f"{name}.{i}", a, b, rng)


def mlp(params: ParamStore, name: str, x, n_layers: int) -> Tensor:
    """Shared MLP with a leaky rectifier after every layer."""
    h = as_tensor(x)
    for i in range(n_layers):
        h = leaky_relu(dense(params, f"{name}.{i}", h))
    return h


def init_attention(params: ParamStore, name: str, d: int, rng):
    init_dense(params, name, d, 1, rng)


def attention_weights(params: ParamStore, name: str, h: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the neighbour axis (-2) of a learned per-neighbour score."""
    s = dense(params, name, h)  # (..., K, 1)
    return masked_softmax(s, mask[..., None], axis=-2)


def attention_aggregate(params: ParamStore, name: str, h: Tensor, mask=None) -> Tensor:
    """Attention-weighted sum over the neighbour axis: (..., K, D) -> (..., D)."""
    h = as_tensor(h)
    if h.data.shape[-2] < 1:
        raise ValueError("attention over an empty group")
    if mask is None:
        mask = np.ones(h.data.shape[:-1], dtype=bool)
    if not mask.any(axis=-1).all():
        raise ValueError("attention over an empty group")
    w = attention_weights(params, name, h, mask)
    return tsum(mul(h, w), axis=-2)


def sinusoidal_step_embedding(t, dim: int) -> np.ndarray:
    """Interleaved sin/cos features of the step ``t`` (scalar or 1-D array)."""
    if dim % 2:
        raise ValueError(f"embedding width must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    freqs = np.exp(-np.log(10000.0) * np.arange(dim // 2) / (dim // 2))
    ang = t[..., None] * freqs
    out = np.empty(t.shape + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


# optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class NonFiniteGradient(FloatingPointError):
    pass


def adam_step(params: ParamStore, grads: dict, state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, expected {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in {name!r}")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return state


# checkpoints --------------------------------------------------------------

CKPT_MAGIC = b"EDR1"


def save_checkpoint(params: ParamStore, path) -> None:
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(params.arrays)))
        for name, arr in params.arrays.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path, dtype=np.float32) -> ParamStore:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic {buf[:4]!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    params = ParamStore(dtype)
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims)
        params.add(name, arr)
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return params
