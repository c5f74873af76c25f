"""Minimal dense tensors with reverse-mode differentiation on top of numpy.

Every op builds its output eagerly and, while gradients are enabled, records
its parents plus a closure mapping the output gradient to parent gradients.
``compute_gradients`` walks that graph once in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .exceptions import DimensionError, UsageError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, beam search)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data)
            if data.dtype.kind in "iub":
                data = data.astype(np.float64)
        self.data = data
        self.requires_grad = requires_grad
        self.parents: tuple = ()
        self.backward_fn: Callable | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def check_finite(self) -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError("tensor contains NaN or Inf")
        return self

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self.dtype)))

    def __rsub__(self, other):
        return add(_lift(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def _lift(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _make(data: np.ndarray, parents: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b, a.dtype if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b, a.dtype if isinstance(a, Tensor) else None)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(a.data * pos, (a,), lambda g: (g * pos,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ------------------------------------------------------------------ reductions


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.shape
    return _make(np.asarray(a.data.mean()), (a,),
                 lambda g: (np.full(shape, g / n, dtype=a.dtype),))


# ------------------------------------------------------------------ structure


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        if _is_advanced(index):
            np.add.at(out, index, g)
        else:
            out[index] = g
        return (out,)

    return _make(a.data[index], (a,), backward)


def _is_advanced(index) -> bool:
    if isinstance(index, tuple):
        return any(isinstance(i, (list, np.ndarray)) for i in index)
    return isinstance(index, (list, np.ndarray))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    n = len(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def embedding(weight: Tensor, indices: np.ndarray) -> Tensor:
    """Row gather ``weight[indices]``; gradient scatters back with add.at."""
    indices = np.asarray(indices)
    if indices.size and (indices.min() < 0 or indices.max() >= weight.shape[0]):
        raise DimensionError(f"index out of range for table of {weight.shape[0]} rows")
    shape, dtype = weight.shape, weight.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, indices.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _make(weight.data[indices], (weight,), backward)


# ------------------------------------------------------------------ linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError("matmul expects operands of rank >= 2")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")

    def backward(g):
        if bd.ndim == 2:
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), backward)


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"affine: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"affine: bias {bias.shape} must be ({weight.shape[1]},)")
    return add(matmul(x, weight), bias)


# ------------------------------------------------------------------ normalisation


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Stable softmax; positions where ``mask`` is False get exactly zero weight."""
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), backward)


def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean token cross-entropy over positions where ``mask`` is true.

    ``logits`` is ``[..., V]`` and ``targets`` the matching integer array.
    """
    x = logits.data
    v = x.shape[-1]
    flat = x.reshape(-1, v)
    t = np.asarray(targets).reshape(-1)
    w = np.ones(t.shape, dtype=x.dtype) if mask is None else np.asarray(mask, dtype=x.dtype).reshape(-1)
    count = w.sum()
    if count <= 0:
        raise UsageError("cross_entropy needs at least one unmasked position")
    logp = log_softmax_np(flat)
    rows = np.arange(t.size)
    loss = -(logp[rows, t] * w).sum() / count

    def backward(g):
        p = np.exp(logp)
        p[rows, t] -= 1.0
        p *= (w / count)[:, None]
        return ((g * p).reshape(x.shape).astype(x.dtype, copy=False),)

    return _make(np.asarray(loss, dtype=x.dtype), (logits,), backward)


# ------------------------------------------------------------------ convolution


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    """3x3 convolution with symmetric zero padding of 1 and the given stride.

    ``x`` is ``[B, C_in, H, W]`` (or ``[C_in, H, W]``); output spatial size is
    ``ceil(H / stride)`` by ``ceil(W / stride)``.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError("conv2d expects [B, C, H, W] input and [C_out, C_in, 3, 3] kernels")
    b, cin, h, w = x.shape
    cout, kin, kh, kw = kernel.shape
    if kin != cin or (kh, kw) != (3, 3):
        raise DimensionError(f"conv2d kernel {kernel.shape} does not fit input channels {cin}")
    if h < 1 or w < 1:
        raise DimensionError("conv2d needs positive spatial dims")
    ho, wo = (h - 1) // stride + 1, (w - 1) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    cols = np.stack(
        [xp[:, :, i:i + hspan:stride, j:j + wspan:stride] for i in range(3) for j in range(3)],
        axis=2,
    ).reshape(b, cin * 9, ho * wo)
    kmat = kernel.data.reshape(cout, cin * 9)
    out = (kmat @ cols).reshape(b, cout, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        g2 = g.reshape(b, cout, ho * wo)
        gk = np.einsum("bop,bkp->ok", g2, cols).reshape(kernel.shape)
        dcols = (kmat.T @ g2).reshape(b, cin, 3, 3, ho, wo)
        dxp = np.zeros(xp.shape, dtype=xp.dtype)
        for i in range(3):
            for j in range(3):
                dxp[:, :, i:i + hspan:stride, j:j + wspan:stride] += dcols[:, :, i, j]
        grads = [dxp[:, :, 1:-1, 1:-1], gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    y = _make(out, parents, backward)
    return reshape(y, y.shape[1:]) if squeeze else y


# ------------------------------------------------------------------ recurrent cell


def lstm_cell(x: Tensor, state: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor,
              mask: np.ndarray | None = None) -> Tensor:
    """One LSTM step, gate order (input, forget, cell, output).

    ``state`` packs ``[h, c]`` along the last axis (``[B, 2k]``) and so does the
    result. Rows where ``mask`` is 0 carry the previous state through unchanged.
    """
    k = w_h.shape[0]
    if w_x.shape != (x.shape[-1], 4 * k) or w_h.shape != (k, 4 * k) or b.shape != (4 * k,):
        raise DimensionError(
            f"lstm_cell: x {x.shape}, w_x {w_x.shape}, w_h {w_h.shape}, b {b.shape} inconsistent")
    if state.shape[-1] != 2 * k:
        raise DimensionError(f"lstm_cell: state width {state.shape[-1]} != 2*{k}")
    xd, sd = x.data, state.data
    h, c = sd[:, :k], sd[:, k:]
    z = xd @ w_x.data + h @ w_h.data + b.data
    i = _sigmoid(z[:, :k])
    f = _sigmoid(z[:, k:2 * k])
    gg = np.tanh(z[:, 2 * k:3 * k])
    o = _sigmoid(z[:, 3 * k:])
    c_new = f * c + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc
    if mask is not None:
        m = np.asarray(mask, dtype=xd.dtype).reshape(-1, 1)
        h_out = m * h_new + (1 - m) * h
        c_out = m * c_new + (1 - m) * c
    else:
        m = None
        h_out, c_out = h_new, c_new

    def backward(g):
        gh, gc = g[:, :k], g[:, k:]
        if m is not None:
            gh_new, gc_in = m * gh, m * gc
        else:
            gh_new, gc_in = gh, gc
        gcn = gc_in + gh_new * o * (1.0 - tc * tc)
        dz = np.concatenate([
            gcn * gg * i * (1.0 - i),
            gcn * c * f * (1.0 - f),
            gcn * i * (1.0 - gg * gg),
            gh_new * tc * o * (1.0 - o),
        ], axis=1)
        dh = dz @ w_h.data.T
        dc = gcn * f
        if m is not None:
            dh = dh + (1 - m) * gh
            dc = dc + (1 - m) * gc
        return (dz @ w_x.data.T, np.concatenate([dh, dc], axis=1),
                xd.T @ dz, h.T @ dz, dz.sum(axis=0))

    return _make(np.concatenate([h_out, c_out], axis=1), (x, state, w_x, w_h, b), backward)


# ------------------------------------------------------------------ gradients


def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar; returns gradients of leaf tensors keyed by ``id``."""
    if loss.data.size != 1:
        raise UsageError(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, np.ndarray] = {}
    if not loss.requires_grad:
        return leaves
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            leaves[id(node)] = g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


def compute_gradients(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradient of ``loss`` for every named parameter; unreachable ones get zeros."""
    leaves = backward(loss)
    out = {}
    for name, p in params.items():
        g = leaves.get(id(p))
        out[name] = np.zeros_like(p.data) if g is None else g.reshape(p.shape).astype(p.dtype, copy=False)
    return out


def parameters(arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    """Wrap raw arrays as trainable leaves."""
    return {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}


def as_tensors(items: Iterable) -> list[Tensor]:
    return [x if isinstance(x, Tensor) else Tensor(x) for x in items]


# ------------------------------------------------------------------ finite differences


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5,
                       indices: Iterable[tuple] | None = None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``x`` (perturbed in place and restored).

    With ``indices`` only those coordinates are probed; the rest stay zero.
    """
    g = np.zeros_like(x)
    for idx in (np.ndindex(x.shape) if indices is None else indices):
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``||a - n|| / max(||a||, ||n||)``; gradients that are both ~0 count as agreeing."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def gradient_check(loss_fn: Callable[[Mapping[str, Tensor]], Tensor], arrays: Mapping[str, np.ndarray],
                   h: float = 1e-5, max_coords: int | None = None,
                   rng: np.random.Generator | None = None) -> dict[str, float]:
    """Relative error between reverse-mode and central-difference gradients, per array.

    ``arrays`` should be float64. ``max_coords`` caps the probed coordinates
    per array (chosen with ``rng``) to bound the cost on larger models.
    """
    params = parameters(arrays)
    analytic = compute_gradients(loss_fn(params), params)
    rng = rng or np.random.default_rng(0)

    def f() -> float:
        with no_grad():
            return float(loss_fn(params).data)

    errors = {}
    for name, p in params.items():
        x = p.data
        idx = None
        if max_coords is not None and x.size > max_coords:
            flat = rng.choice(x.size, size=max_coords, replace=False)
            idx = [np.unravel_index(i, x.shape) for i in flat]
        numeric = numerical_gradient(f, x, h, idx)
        a = analytic[name]
        if idx is not None:
            sel = tuple(np.array(ix) for ix in zip(*idx))
            a, numeric = a[sel], numeric[sel]
        errors[name] = relative_error(a, numeric)
    return errors
