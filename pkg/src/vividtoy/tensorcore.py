"""Dense tensors on top of numpy with a small reverse-mode autodiff engine.

Every primitive records a closure that maps the output gradient to one
gradient per parent. ``backward`` walks the graph once in reverse
topological order and sums contributions across fan-out.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf"):
        arr = np.asarray(data)
        if arr.dtype.kind in "biu" and op == "leaf" and requires_grad:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- convenience -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _wrap(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return NotImplemented

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def __getitem__(self, index):
        return slice_(self, index)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(op: str, arrays: Sequence[np.ndarray]) -> None:
    for i, a in enumerate(arrays):
        if a.dtype.kind != "f":
            continue
        # one reduction is far cheaper than an elementwise mask; overflow falls through to the exact test
        if not math.isfinite(float(a.sum())) and not np.isfinite(a).all():
            raise NonFiniteError(f"{op}: input {i} contains NaN or Inf")


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise -------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    _check_finite("add", (a.data, b.data))
    out = a.data + b.data
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(out, (a, b), back, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)
    _check_finite("sub", (a.data, b.data))
    out = a.data - b.data
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(out, (a, b), back, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    _check_finite("mul", (a.data, b.data))
    ad, bd = a.data, b.data
    out = ad * bd

    def back(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), back, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    _check_finite("scale", (a.data,))
    c = float(c)
    out = a.data * a.data.dtype.type(c)

    def back(g):
        return (g * g.dtype.type(c),)

    return _make(out, (a,), back, "scale")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    _check_finite("gelu", (a.data,))
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner
        return (g * d,)

    return _make(out, (a,), back, "gelu")


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch dims {a.shape} and {b.shape}") from None
    _check_finite("matmul", (a.data, b.data))
    ad, bd = a.data, b.data
    out = ad @ bd

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), back, "matmul")


# -- shape -------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    src = a.shape

    def back(g):
        return (g.reshape(src),)

    return _make(out, (a,), back, "reshape")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for shape {a.shape}")
    out = np.transpose(a.data, axes)
    inv = tuple(np.argsort(axes))

    def back(g):
        return (np.transpose(g, inv),)

    return _make(out, (a,), back, "permute")


def slice_(a: Tensor, index) -> Tensor:
    out = a.data[index]
    src_shape, dtype = a.shape, a.dtype

    def back(g):
        full = np.zeros(src_shape, dtype=dtype)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _make(np.array(out, copy=True), (a,), back, "slice")


def _is_fancy(index) -> bool:
    idx = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in idx)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty input list")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _make(out, tuple(tensors), back, "concat")


# -- reductions ----------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    src = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(out), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    src = a.shape
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([src[x] for x in axes]))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, src).copy(),)

    return _make(np.asarray(out), (a,), back, "mean")


# -- normalization -------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_finite("softmax", (a.data,))
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    e /= e.sum(axis=axis, keepdims=True)

    def back(g):
        return (e * (g - (g * e).sum(axis=axis, keepdims=True)),)

    return _make(e, (a,), back, "softmax")


def masked_softmax(a: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax where positions with ``mask == False`` receive exactly zero weight."""
    _check_finite("softmax", (a.data,))
    x = np.where(mask, a.data, -np.inf)
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    e /= e.sum(axis=axis, keepdims=True)

    def back(g):
        return (e * (g - (g * e).sum(axis=axis, keepdims=True)),)

    return _make(e, (a,), back, "softmax")


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (no affine)."""
    _check_finite("layer_norm", (a.data,))
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    y = xc * rstd
    n = x.shape[-1]

    def back(g):
        gy = g
        s1 = gy.sum(axis=-1, keepdims=True)
        s2 = (gy * y).sum(axis=-1, keepdims=True)
        return (rstd * (gy - s1 / n - y * s2 / n),)

    return _make(y, (a,), back, "layer_norm")


# -- lookups and convolution -------------------------------------------------

def embed_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embed_lookup: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embed_lookup: ids out of range for table {table.shape}")
    out = table.data[ids]
    tshape, dtype = table.shape, table.dtype

    def back(g):
        full = np.zeros(tshape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, tshape[1]))
        return (full,)

    return _make(out, (table,), back, "embed_lookup")


def _pad_index(n: int, lo: int, hi: int, mode: str) -> np.ndarray:
    idx = np.arange(-lo, n + hi)
    if mode == "replicate" or (mode == "reflect" and n == 1):
        return np.clip(idx, 0, n - 1)
    if mode == "reflect":
        if lo >= n or hi >= n:
            raise ShapeError(f"pad: reflect padding {lo},{hi} too large for extent {n}")
        idx = np.abs(idx)
        return np.where(idx > n - 1, 2 * (n - 1) - idx, idx)
    raise ValueError(f"pad: unknown mode {mode!r}")


def pad(a: Tensor, widths: Sequence[tuple[int, int]], mode: str = "zeros") -> Tensor:
    """Pad trailing axes. Reflect mode degrades to edge replication on length-1 axes."""
    widths = [tuple(w) for w in widths]
    lead = a.ndim - len(widths)
    if mode == "zeros":
        full = [(0, 0)] * lead + widths
        out = np.pad(a.data, full)
        sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(full, a.shape))

        def back(g):
            return (g[sl],)

        return _make(out, (a,), back, "pad")
    out = a.data
    index_arrays = []
    for k, (lo, hi) in enumerate(widths):
        ax = lead + k
        ix = _pad_index(a.shape[ax], lo, hi, mode)
        index_arrays.append((ax, ix))
        out = np.take(out, ix, axis=ax)
    src = a.shape

    def back(g):
        for ax, ix in reversed(index_arrays):
            shape = list(g.shape)
            shape[ax] = src[ax]
            acc = np.zeros(shape, dtype=g.dtype)
            moved = np.moveaxis(acc, ax, 0)
            np.add.at(moved, ix, np.moveaxis(g, ax, 0))
            g = acc
        return (g,)

    return _make(out, (a,), back, "pad")


def conv3d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride=(1, 1, 1), padding=(0, 0, 0),
           pad_mode: str = "zeros") -> Tensor:
    """3-D convolution of a (C_in, F, H, W) volume with (C_out, C_in, kf, kh, kw) weights.

    Implemented as explicit padding, im2col and a single matmul.
    """
    if x.ndim != 4 or w.ndim != 5 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"conv3d: input {x.shape} incompatible with kernel {w.shape}")
    stride = tuple(int(s) for s in stride)
    padding = tuple(int(p) for p in padding)
    if any(padding):
        x = pad(x, [(p, p) for p in padding], mode=pad_mode)
    cin, F, H, W = x.shape
    cout, _, kf, kh, kw = w.shape
    if kf > F or kh > H or kw > W:
        raise ShapeError(f"conv3d: kernel {w.shape} does not fit padded input {x.shape}")
    _check_finite("conv3d", (x.data, w.data))
    sf, sh, sw = stride
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kf, kh, kw), axis=(1, 2, 3))
    win = win[:, ::sf, ::sh, ::sw]
    Fo, Ho, Wo = win.shape[1:4]
    # (Fo,Ho,Wo, cin,kf,kh,kw)
    cols = np.ascontiguousarray(win.transpose(1, 2, 3, 0, 4, 5, 6)).reshape(Fo * Ho * Wo, -1)
    wm = w.data.reshape(cout, -1)
    out = (cols @ wm.T).T.reshape(cout, Fo, Ho, Wo)
    if bias is not None:
        out = out + bias.data.reshape(cout, 1, 1, 1)
    xshape, xdtype = x.shape, x.dtype

    def back(g):
        gm = g.reshape(cout, -1)  # (cout, P)
        gw = (gm @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wm.T @ gm).reshape(cin, kf, kh, kw, Fo, Ho, Wo)
            gx = np.zeros(xshape, dtype=xdtype)
            for a in range(kf):
                for b in range(kh):
                    for c in range(kw):
                        gx[:, a:a + sf * Fo:sf, b:b + sh * Ho:sh, c:c + sw * Wo:sw] += gcols[:, a, b, c]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2, 3)) if bias.requires_grad else None)
        return tuple(grads)

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, back, "conv3d")


# -- dispatch ------------------------------------------------------------------

PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "conv3d": conv3d,
    "add": add,
    "mul": mul,
    "scale": scale,
    "reshape": reshape,
    "permute": permute,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "gelu": gelu,
    "mean": mean,
    "sum": tsum,
    "slice": slice_,
    "concat": concat,
    "embed_lookup": embed_lookup,
}


def forward_primitive(op: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Apply a named primitive; ``concat`` takes the whole list as its first argument."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    if op == "concat":
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)


# -- engine --------------------------------------------------------------------

def topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
    if root.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = topological_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=root.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg
        if not retain_graph:
            node._backward = None
            node._parents = ()


def finite_difference_check(f: Callable[[Tensor], Tensor], x: np.ndarray, step: float = 1e-4,
                            indices: Sequence[tuple[int, ...]] | None = None, order: int = 4) -> float:
    """Max relative error between the autodiff gradient of ``f`` at ``x`` and central differences.

    ``order`` selects the 3-point (2) or 5-point (4) central stencil. ``indices`` restricts the
    comparison to a subset of elements.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    xt = Tensor(x.copy(), requires_grad=True)
    backward(f(xt))
    g_ad = xt.grad if xt.grad is not None else np.zeros_like(x)

    def ev(v):
        return float(f(Tensor(v)).data)

    if indices is None:
        indices = list(np.ndindex(x.shape))
    worst = 0.0
    for idx in indices:
        def shifted(k):
            v = x.copy()
            v[idx] += k * step
            return ev(v)

        if order == 2:
            g_fd = (shifted(1) - shifted(-1)) / (2 * step)
        else:
            g_fd = (8 * (shifted(1) - shifted(-1)) - (shifted(2) - shifted(-2))) / (12 * step)
        err = abs(g_ad[idx] - g_fd) / max(abs(g_fd), 1e-8)
        worst = max(worst, err)
    return worst
