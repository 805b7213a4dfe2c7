"""Minimal reverse-mode tensor engine.

Every op computes its forward value eagerly with numpy (float64) and records a
backward closure on the output.  ``Tensor.backward`` walks the record in
reverse topological order.  There is no fusion or graph rewriting: each rule
is written out by hand so it can be audited against finite differences.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

MAX_RANK = 4


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = ()):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ValueError(f"rank {arr.ndim} exceeds maximum rank {MAX_RANK}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        # interior gradients are scratch; leaves (parameters) keep accumulating
        for node in order:
            if node._parents:
                node.grad = None
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data, _parents=tuple(parents))
    if out.requires_grad:
        out._backward = backward
    return out


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        x._accumulate(g * mask)

    return _make(np.where(mask, x.data, 0.0), (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    out = _logistic(x.data)

    def bw(g):
        x._accumulate(g * out * (1.0 - out))

    return _make(out, (x,), bw)


def _logistic(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def log(x: Tensor) -> Tensor:
    def bw(g):
        x._accumulate(g / x.data)

    return _make(np.log(x.data), (x,), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bw(g):
        x._accumulate(g * out)

    return _make(out, (x,), bw)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)

    def bw(g):
        x._accumulate(g * inside)

    return _make(np.clip(x.data, lo, hi), (x,), bw)


# ---------------------------------------------------------------- reductions / shape

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    def bw(g):
        x._accumulate(g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), bw)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)

    def bw(g):
        x._accumulate(np.transpose(g, inv))

    return _make(np.transpose(x.data, axes), (x,), bw)


def getitem(x: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x._accumulate(full)

    return _make(x.data[idx], (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        for x, part in zip(xs, np.split(g, sizes, axis=axis)):
            if x.requires_grad:
                x._accumulate(part)

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of rank-2 operands (or stacks of them, batched on axis 0)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), bw)


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.  ``mask`` (broadcastable, bool) drops entries."""
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        x._accumulate(out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _make(out, (x,), bw)


def layer_norm(x: Tensor, scale: Tensor, offset: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        if scale.requires_grad:
            scale._accumulate(_unbroadcast(g * xhat, scale.shape))
        if offset.requires_grad:
            offset._accumulate(_unbroadcast(g, offset.shape))
        if x.requires_grad:
            gh = g * scale.data
            d = x.shape[-1]
            gx = inv / d * (d * gh - gh.sum(axis=-1, keepdims=True)
                            - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
            x._accumulate(gx)

    return _make(xhat * scale.data + offset.data, (x, scale, offset), bw)


# ---------------------------------------------------------------- image ops

def _im2col(x: np.ndarray) -> np.ndarray:
    """[C,H,W] -> [C*9, H*W] patches for a 3x3 kernel, zero padding 1."""
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = np.empty((c, 3, 3, h, w))
    for dy in range(3):
        for dx in range(3):
            cols[:, dy, dx] = xp[:, dy:dy + h, dx:dx + w]
    return cols.reshape(c * 9, h * w)


def _col2im(cols: np.ndarray, c: int, h: int, w: int) -> np.ndarray:
    cols = cols.reshape(c, 3, 3, h, w)
    xp = np.zeros((c, h + 2, w + 2))
    for dy in range(3):
        for dx in range(3):
            xp[:, dy:dy + h, dx:dx + w] += cols[:, dy, dx]
    return xp[:, 1:h + 1, 1:w + 1]


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1 (cross-correlation convention)."""
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.ndim != 3:
        raise ValueError(f"conv2d expects [C,H,W] input, got {x.shape}")
    if kernel.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise ValueError(f"conv2d expects a [Cout,Cin,3,3] kernel, got {kernel.shape}")
    cin, h, w = x.shape
    cout = kernel.shape[0]
    if kernel.shape[1] != cin:
        raise ValueError(f"channel mismatch: input has {cin}, kernel expects {kernel.shape[1]}")
    if bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} does not match {cout} output channels")
    cols = _im2col(x.data)
    wmat = kernel.data.reshape(cout, cin * 9)
    out = (wmat @ cols).reshape(cout, h, w) + bias.data[:, None, None]

    def bw(g):
        gm = g.reshape(cout, h * w)
        if kernel.requires_grad:
            kernel._accumulate((gm @ cols.T).reshape(kernel.shape))
        if bias.requires_grad:
            bias._accumulate(gm.sum(axis=1))
        if x.requires_grad:
            x._accumulate(_col2im(wmat.T @ gm, cin, h, w))

    return _make(out, (x, kernel, bias), bw)


def _bilinear_matrix(n: int, factor: int) -> np.ndarray:
    """[n*factor, n] interpolation weights, half-pixel centers, edge clamped."""
    m = np.zeros((n * factor, n))
    for i in range(n * factor):
        src = (i + 0.5) / factor - 0.5
        src = min(max(src, 0.0), n - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    if factor not in (2, 4):
        raise ValueError(f"upsample factor must be 2 or 4, got {factor}")
    if x.ndim != 3:
        raise ValueError(f"upsample expects [C,H,W], got {x.shape}")
    _, h, w = x.shape
    uh = _bilinear_matrix(h, factor)
    uw = _bilinear_matrix(w, factor)
    out = np.einsum("ih,chw,jw->cij", uh, x.data, uw, optimize=True)

    def bw(g):
        x._accumulate(np.einsum("ih,cij,jw->chw", uh, g, uw, optimize=True))

    return _make(out, (x,), bw)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling, stride 2."""
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even spatial dims, got {x.shape}")
    out = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def bw(g):
        x._accumulate(np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / 4.0)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------- parameters

class ParamStore:
    """Named trainable tensors.  Gradients live on the tensors themselves."""

    def __init__(self, params: Mapping[str, np.ndarray | Tensor] | None = None):
        self._params: dict[str, Tensor] = {}
        for name, value in (params or {}).items():
            self[name] = value

    def __setitem__(self, name: str, value):
        arr = value.data if isinstance(value, Tensor) else value
        self._params[name] = Tensor(np.array(arr, dtype=np.float64), requires_grad=True)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def require(self, names: Iterable[str]):
        missing = [n for n in names if n not in self._params]
        if missing:
            raise KeyError(f"missing parameters: {', '.join(missing)}")

    def grads(self) -> dict[str, np.ndarray]:
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for n, t in self._params.items()}

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def copy(self) -> "ParamStore":
        return ParamStore({n: t.data.copy() for n, t in self._params.items()})

    def subset(self, prefix: str) -> "ParamStore":
        """A view sharing tensors whose names start with ``prefix``."""
        view = ParamStore()
        view._params = {n: t for n, t in self._params.items() if n.startswith(prefix)}
        return view

    def scoped(self, prefix: str) -> "ParamStore":
        """Like ``subset`` but with ``prefix`` stripped from the names."""
        view = ParamStore()
        view._params = {n[len(prefix):]: t for n, t in self._params.items() if n.startswith(prefix)}
        return view

    def update(self, other: "ParamStore"):
        self._params.update(other._params)

    def num_values(self) -> int:
        return int(np.sum([t.data.size for t in self._params.values()]))


def finite_diff_check(loss: Callable[[ParamStore], Tensor], params: ParamStore,
                      eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per entry is ``|analytic - numeric| / max(1e-8, |numeric|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params.zero_grad()
    out = loss(params)
    if not np.isfinite(out.data).all():
        raise FloatingPointError("loss is not finite")
    out.backward()
    analytic = {n: g.copy() for n, g in params.grads().items()}
    worst = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        g_an = analytic[name].reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = loss(params).item()
            flat[k] = orig - eps
            down = loss(params).item()
            flat[k] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise FloatingPointError(f"loss is not finite when perturbing {name}[{k}]")
            numeric = (up - down) / (2.0 * eps)
            err = abs(g_an[k] - numeric) / max(1e-8, abs(numeric))
            worst = max(worst, err)
    params.zero_grad()
    return worst
