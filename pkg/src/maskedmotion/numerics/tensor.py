"""Reverse-mode automatic differentiation over float32 numpy arrays.

A :class:`Tensor` wraps a row-major float32 ndarray plus an optional
gradient. Ops build a tape of backward closures; :func:`backward` walks
the tape in reverse topological order and accumulates gradients into
every reachable leaf with ``requires_grad``. There is no operator
fusion and no implicit 64-bit accumulation: values are computed the way
they are written, which keeps runs bit-reproducible on one platform.

Ops raise :class:`ShapeError` (naming the op and the offending shapes)
rather than letting numpy broadcasting silently do the wrong thing.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Raised when an op receives non-conforming shapes."""

    def __init__(self, op: str, message: str):
        self.op = op
        super().__init__(f"{op}: {message}")


class NumericsError(ArithmeticError):
    """Raised when a numeric check encounters non-finite values."""


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording; forward passes only."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float32)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all routing goes through the module-level ops
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

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn) -> Tensor:
    """Build an op result, recording the tape only when it matters."""
    out = Tensor(data)
    grad_parents = tuple(p for p in parents if p.requires_grad)
    if _GRAD_ENABLED and grad_parents:
        out.requires_grad = True
        out._parents = grad_parents
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float32)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.astype(np.float32, copy=False)


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.data.shape} with {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    data = a.data - b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    data = ad * bd

    def bwd(g):
        _accum(a, _unbroadcast(g * bd, a.data.shape))
        _accum(b, _unbroadcast(g * ad, b.data.shape))

    return _make(data, (a, b), bwd)


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0.0)

    def bwd(g):
        _accum(x, g * (x.data > 0))

    return _make(data, (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {old} into {shape}")

    def bwd(g):
        _accum(x, g.reshape(old))

    return _make(data, (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = x.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        _accum(x, g.transpose(inv))

    return _make(data, (x,), bwd)


def concat(parts, axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            _accum(p, piece)

    return _make(data, tuple(parts), bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    if start < 0 or start + length > x.data.shape[axis]:
        raise ShapeError(
            "narrow",
            f"slice [{start}, {start + length}) exceeds axis {axis} "
            f"of shape {x.data.shape}",
        )
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    data = x.data[sl]

    def bwd(g):
        if not x.requires_grad:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[sl] += g

    return _make(data, (x,), bwd)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float32)

    def bwd(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.data.shape).astype(np.float32, copy=False))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(x, np.broadcast_to(gg, x.data.shape).astype(np.float32, copy=False))

    return _make(data, (x,), bwd)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), _as_tensor(1.0 / n))


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: ids of any integer shape index axis 0 of ``table``.

    Doubles as a gather for loss masking; backward scatter-adds.
    """
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding", f"ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(
            "embedding",
            f"ids out of range [0, {table.data.shape[0]}): "
            f"min={ids.min()} max={ids.max()}",
        )
    data = table.data[ids]
    width = table.data.shape[1:]

    def bwd(g):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids.ravel(), g.reshape((-1,) + width))

    return _make(data, (table,), bwd)


def stop_gradient(x: Tensor) -> Tensor:
    """Identity forward; gradients do not flow through.

    Under an active :func:`grad_check` tape the forward value is pinned
    to its recorded snapshot, so the finite-difference oracle matches
    the stop-gradient semantics.
    """
    data = x.data
    tape = _ACTIVE_SG_TAPE
    if tape is not None:
        if tape.recording:
            tape.values.append(data.copy())
        else:
            data = tape.values[tape.cursor]
            tape.cursor += 1
    return Tensor(data.copy())


def dropout(x: Tensor, p: float, rng) -> Tensor:
    if p <= 0.0:
        return x
    keep = (rng.uniform(0.0, 1.0, x.data.shape) >= p).astype(np.float32)
    scale = np.float32(1.0 / (1.0 - p))
    return mul(x, Tensor(keep * scale))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError("matmul", f"need >=2-d operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError("matmul", f"inner dims differ: {ad.shape} @ {bd.shape}")

    if ad.ndim > 2 and bd.ndim == 2:
        # (..., n, k) @ (k, m): one big GEMM instead of a batch loop
        a2 = np.ascontiguousarray(ad).reshape(-1, ad.shape[-1])
        data = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def bwd(g):
            g2 = g.reshape(-1, bd.shape[1])
            if a.requires_grad:
                _accum(a, (g2 @ bd.T).reshape(ad.shape))
            if b.requires_grad:
                _accum(b, a2.T @ g2)

        return _make(data, (a, b), bwd)

    try:
        data = np.matmul(ad, bd)
    except ValueError:
        raise ShapeError("matmul", f"batch dims incompatible: {ad.shape} @ {bd.shape}")

    def bwd(g):
        # batched BLAS wants contiguous inner panels; 2-d GEMM takes
        # transposed views natively
        if a.requires_grad:
            bt = bd.swapaxes(-1, -2)
            if bd.ndim > 2:
                bt = np.ascontiguousarray(bt)
            _accum(a, _unbroadcast(np.matmul(g, bt), ad.shape))
        if b.requires_grad:
            at = ad.swapaxes(-1, -2)
            if ad.ndim > 2:
                at = np.ascontiguousarray(at)
            _accum(b, _unbroadcast(np.matmul(at, g), bd.shape))

    return _make(data, (a, b), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax. Rows that are entirely -inf (used for
    fully masked attention queries) yield zeros instead of NaN."""
    xd = x.data
    m = xd.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, np.float32(0.0))
    e = np.exp(xd - m)
    s = e.sum(axis=axis, keepdims=True)
    y = e / np.where(s == 0.0, np.float32(1.0), s)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(x, y * (g - dot))

    return _make(y, (x,), bwd)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance. Affine gain
    and bias, when wanted, are applied by the caller with mul/add."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.float32(eps))
    y = xc * inv

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        _accum(x, (inv * (g - gm - y * gy)).astype(np.float32, copy=False))

    return _make(y, (x,), bwd)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under
    ``logits`` of shape (n, vocab)."""
    targets = np.asarray(targets)
    ld = logits.data
    if ld.ndim != 2:
        raise ShapeError("cross_entropy", f"logits must be 2-d, got {ld.shape}")
    if targets.shape != (ld.shape[0],):
        raise ShapeError(
            "cross_entropy",
            f"targets shape {targets.shape} does not match logits rows {ld.shape[0]}",
        )
    n, _ = ld.shape
    m = ld.max(axis=1, keepdims=True)
    z = ld - m
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    nll = logsumexp[:, 0] - z[np.arange(n), targets]
    data = np.float32(nll.mean())

    def bwd(g):
        p = np.exp(z - logsumexp)
        p[np.arange(n), targets] -= 1.0
        _accum(logits, (g * p / np.float32(n)).astype(np.float32, copy=False))

    return _make(data, (logits,), bwd)


def attention(q: Tensor, k: Tensor, v: Tensor, additive_mask=None) -> Tensor:
    """Scaled dot-product attention: softmax(q kᵀ / sqrt(d)) v.

    ``additive_mask`` broadcasts onto the score matrix (..., Tq, Tk);
    -inf entries remove the corresponding key/value rows exactly.
    Composed from primitive ops, so gradients come for free.
    """
    if q.data.shape[-1] != k.data.shape[-1]:
        raise ShapeError(
            "attention", f"q/k feature dims differ: {q.data.shape} vs {k.data.shape}"
        )
    if k.data.shape[-2] != v.data.shape[-2]:
        raise ShapeError(
            "attention", f"k/v length dims differ: {k.data.shape} vs {v.data.shape}"
        )
    scale = 1.0 / math.sqrt(q.data.shape[-1])
    scores = mul(matmul(q, transpose(k, _swap_last(k.data.ndim))), _as_tensor(scale))
    if additive_mask is not None:
        scores = add(scores, _as_tensor(additive_mask))
    return matmul(softmax(scores, axis=-1), v)


def _swap_last(ndim: int):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return axes


# ---------------------------------------------------------------------------
# 1-d convolutions (batch, channels, time)


def _conv_cols(xp: np.ndarray, ksize: int, stride: int, t_out: int) -> np.ndarray:
    idx = np.arange(ksize)[:, None] + stride * np.arange(t_out)[None, :]
    return xp[:, :, idx]  # (B, C, K, T_out)


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Strided 1-d convolution. x: (B, Cin, T), w: (Cout, Cin, K), b: (Cout,)."""
    xd, wd = x.data, w.data
    if xd.ndim != 3 or wd.ndim != 3:
        raise ShapeError("conv1d", f"expected 3-d x and w, got {xd.shape}, {wd.shape}")
    if xd.shape[1] != wd.shape[1]:
        raise ShapeError("conv1d", f"channel mismatch: x {xd.shape} vs w {wd.shape}")
    B, Cin, T = xd.shape
    Cout, _, K = wd.shape
    t_out = (T + 2 * pad - K) // stride + 1
    if t_out < 1:
        raise ShapeError("conv1d", f"kernel {K} too large for length {T} with pad {pad}")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad))) if pad else xd
    cols = _conv_cols(xp, K, stride, t_out)
    y = np.tensordot(wd, cols, axes=([1, 2], [1, 2]))  # (Cout, B, T_out)
    y = y.transpose(1, 0, 2) + b.data[None, :, None]

    def bwd(g):
        if w.requires_grad:
            _accum(w, np.tensordot(g, cols, axes=([0, 2], [0, 3])))
        if b.requires_grad:
            _accum(b, g.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = np.tensordot(g, wd, axes=([1], [0]))  # (B, T_out, Cin, K)
            dxp = np.zeros_like(xp)
            pos = stride * np.arange(t_out)
            for kk in range(K):
                dxp[:, :, pos + kk] += dcols[:, :, :, kk].transpose(0, 2, 1)
            _accum(x, dxp[:, :, pad : pad + T] if pad else dxp)

    return _make(y, (x, w, b), bwd)


def conv1d_transpose(
    x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0
) -> Tensor:
    """Transposed 1-d convolution (length upsampling).

    x: (B, Cin, T), w: (Cin, Cout, K); output length (T-1)*stride - 2*pad + K.
    """
    xd, wd = x.data, w.data
    if xd.ndim != 3 or wd.ndim != 3:
        raise ShapeError(
            "conv1d_transpose", f"expected 3-d x and w, got {xd.shape}, {wd.shape}"
        )
    if xd.shape[1] != wd.shape[0]:
        raise ShapeError(
            "conv1d_transpose", f"channel mismatch: x {xd.shape} vs w {wd.shape}"
        )
    B, Cin, T = xd.shape
    _, Cout, K = wd.shape
    t_full = (T - 1) * stride + K
    t_out = t_full - 2 * pad
    if t_out < 1:
        raise ShapeError("conv1d_transpose", f"padding {pad} swallows output (T={T})")
    contrib = np.tensordot(xd, wd, axes=([1], [0]))  # (B, T, Cout, K)
    y_full = np.zeros((B, Cout, t_full), dtype=np.float32)
    pos = stride * np.arange(T)
    for kk in range(K):
        y_full[:, :, pos + kk] += contrib[:, :, :, kk].transpose(0, 2, 1)
    y = y_full[:, :, pad : pad + t_out] + b.data[None, :, None]

    def bwd(g):
        g_full = np.zeros((B, Cout, t_full), dtype=np.float32)
        g_full[:, :, pad : pad + t_out] = g
        dcontrib = np.empty((B, T, Cout, K), dtype=np.float32)
        for kk in range(K):
            dcontrib[:, :, :, kk] = g_full[:, :, pos + kk].transpose(0, 2, 1)
        if x.requires_grad:
            _accum(x, np.tensordot(dcontrib, wd, axes=([2, 3], [1, 2])).transpose(0, 2, 1))
        if w.requires_grad:
            _accum(w, np.tensordot(xd, dcontrib, axes=([0, 2], [0, 1])))
        if b.requires_grad:
            _accum(b, g.sum(axis=(0, 2)))

    return _make(y, (x, w, b), bwd)


# ---------------------------------------------------------------------------
# backward pass and gradient checking


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into every reachable requires_grad leaf."""
    if loss.data.size != 1:
        raise ShapeError("backward", f"loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def _topo_order(root: Tensor):
    order = []
    seen = {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, it = stack[-1]
        advanced = False
        for p in it:
            if id(p) not in seen:
                seen.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


class _SgTape:
    __slots__ = ("recording", "values", "cursor")

    def __init__(self):
        self.recording = True
        self.values = []
        self.cursor = 0


_ACTIVE_SG_TAPE = None


def grad_check(f, x: Tensor, eps: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference
    gradients of scalar-valued ``f`` at ``x``.

    Relative error per coordinate is |analytic - numeric| / max(1, |numeric|).
    stop_gradient arguments are held fixed during the numeric sweeps, so
    the oracle agrees with stop-gradient semantics by construction.
    """
    global _ACTIVE_SG_TAPE
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    x.zero_grad()
    y = f(x)
    if y.data.size != 1:
        raise ShapeError("grad_check", f"f must be scalar-valued, got {y.data.shape}")
    backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    if not np.isfinite(y.data).all() or not np.isfinite(analytic).all():
        raise NumericsError("grad_check: non-finite forward value or gradient")

    tape = _SgTape()
    _ACTIVE_SG_TAPE = tape
    try:
        f(x)  # recording pass pins every stop_gradient snapshot
        tape.recording = False
        numeric = np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            tape.cursor = 0
            fp = float(f(x).data)
            flat[i] = orig - eps
            tape.cursor = 0
            fm = float(f(x).data)
            flat[i] = orig
            num_flat[i] = (fp - fm) / (2.0 * eps)
    finally:
        _ACTIVE_SG_TAPE = None
    if not np.isfinite(numeric).all():
        raise NumericsError("grad_check: non-finite numeric gradient")
    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
