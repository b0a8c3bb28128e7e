"""Minimal deterministic reverse-mode autodiff over dense float64 arrays.

Tensors are 2-D matrices (plus 0-d scalars for losses) laid out as
(feature rows x time columns).  The graph is recorded through parent links
on each tensor; ``Tensor.backward`` runs one topologically ordered sweep.

Two evaluation modes exist:

* fast mode (default) uses whole-matrix numpy/BLAS kernels.  Results are
  deterministic for fixed shapes, but a column of a matrix product is not
  guaranteed to be bit-identical when the matrix width changes.
* column-exact mode (``with column_exact():``) evaluates every
  column-parallel primitive one column at a time with fixed-shape kernels,
  so column n of any causal computation is bit-identical no matter how many
  columns follow it.  Inference-time decoding runs in this mode; that is
  what makes incremental decoding reproduce the teacher-forced forward
  pass exactly.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateColumnError, ShapeError

NEG_INF = -1e30
_MASKED = -1e29  # entries below this are treated as fully masked

_column_exact = False


@contextlib.contextmanager
def column_exact(enabled: bool = True):
    """Force column-by-column evaluation of all primitives."""
    global _column_exact
    prev = _column_exact
    _column_exact = enabled
    try:
        yield
    finally:
        _column_exact = prev


def is_column_exact() -> bool:
    return _column_exact


class Tensor:
    """Dense float64 array with optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self):
        """Backpropagate from a scalar tensor through the recorded graph."""
        if self.data.shape != ():
            raise ShapeError("backward() must start from a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones((), dtype=np.float64)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _result(data: np.ndarray, parents: Sequence[Tensor],
            backward: Callable[[np.ndarray], None] | None) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product; fixed-shape per-column kernels in column-exact mode.

    Each output column is a gemv over the nonzero support of the matching
    input column.  Restricting to the support keeps the reduction length
    constant for a logical column even when trailing structurally-zero
    entries (causal attention, zero padding) are appended, which is what
    makes incremental decoding bit-identical to the batch pass.
    """
    if not _column_exact or b.ndim != 2:
        return a @ b
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for j in range(b.shape[1]):
        col = b[:, j]
        nz = np.flatnonzero(col)
        if len(nz):
            # always go through the gathered copy: gemv on the original and
            # on an equal-content copy can disagree in the last bit
            out[:, j] = a[:, nz] @ col[nz]
    return out


# ---------------------------------------------------------------------------
# elementwise / structural ops

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: {a.data.shape} vs {b.data.shape}")
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(g)

    return _result(out_data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: {a.data.shape} vs {b.data.shape}")
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accum(g * b.data)
        if b.requires_grad:
            b._accum(g * a.data)

    return _result(out_data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def backward(g):
        a._accum(g * c)

    return _result(a.data * c, (a,), backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a (d, 1) bias column to every column of a (d, N) matrix."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.data.shape != (x.data.shape[0], 1):
        raise ShapeError(f"add_bias: bias {b.data.shape} for input {x.data.shape}")

    def backward(g):
        if x.requires_grad:
            x._accum(g)
        if b.requires_grad:
            b._accum(g.sum(axis=1, keepdims=True))

    return _result(x.data + b.data, (x, b), backward)


def absolute(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    sign = np.sign(a.data)

    def backward(g):
        a._accum(g * sign)

    return _result(np.abs(a.data), (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        a._accum(np.full_like(a.data, float(g)))

    return _result(np.asarray(a.data.sum(), dtype=np.float64), (a,), backward)


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        a._accum(g.T)

    return _result(a.data.T.copy(), (a,), backward)


def slice_rows(a: Tensor, i0: int, i1: int) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        full[i0:i1] = g
        a._accum(full)

    return _result(a.data[i0:i1].copy(), (a,), backward)


def slice_cols(a: Tensor, j0: int, j1: int) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, j0:j1] = g
        a._accum(full)

    return _result(a.data[:, j0:j1].copy(), (a,), backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    widths = {p.data.shape[1] for p in parts}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows: mismatched widths {sorted(widths)}")
    sizes = [p.data.shape[0] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def backward(g):
        for p, o, s in zip(parts, offsets, sizes):
            if p.requires_grad:
                p._accum(g[o:o + s])

    return _result(np.concatenate([p.data for p in parts], axis=0), parts, backward)


def tile_cols(a: Tensor, n: int) -> Tensor:
    """Repeat a (d, 1) column n times to form (d, n)."""
    a = _as_tensor(a)
    if a.data.ndim != 2 or a.data.shape[1] != 1:
        raise ShapeError(f"tile_cols expects a column, got {a.data.shape}")

    def backward(g):
        a._accum(g.sum(axis=1, keepdims=True))

    return _result(np.repeat(a.data, n, axis=1), (a,), backward)


# ---------------------------------------------------------------------------
# core primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")
    out_data = _mm(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return _result(out_data, (a, b), backward)


def masked_softmax_columns(x: Tensor, mask: np.ndarray) -> Tensor:
    """Column-wise softmax with an additive mask of 0 / -1e30 sentinels.

    Masked rows come out exactly 0; every unmasked column sums to 1.
    """
    x = _as_tensor(x)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x.data.shape:
        raise ShapeError(f"mask shape {mask.shape} != input {x.data.shape}")
    keep = mask > _MASKED
    if not keep.any(axis=0).all():
        raise DegenerateColumnError("softmax column has all rows masked")

    if _column_exact:
        y = np.zeros_like(x.data)
        for j in range(x.data.shape[1]):
            idx = np.flatnonzero(keep[:, j])
            z = x.data[idx, j]
            e = np.exp(z - z.max())
            y[idx, j] = e / e.sum()
    else:
        z = x.data + mask
        e = np.exp(z - z.max(axis=0, keepdims=True))
        e[~keep] = 0.0
        y = e / e.sum(axis=0, keepdims=True)

    def backward(g):
        gy = y * (g - (g * y).sum(axis=0, keepdims=True))
        x._accum(gy)

    return _result(y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each column to zero mean / unit variance over its rows."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d, n = x.data.shape
    if gain.data.shape != (d, 1) or bias.data.shape != (d, 1):
        raise ShapeError("layer_norm gain/bias must be (d, 1) columns")

    if _column_exact:
        xhat = np.empty_like(x.data)
        inv_std = np.empty((1, n))
        for j in range(n):
            col = x.data[:, j]
            mu = col.sum() / d
            c = col - mu
            var = (c * c).sum() / d
            s = 1.0 / math.sqrt(var + eps)
            inv_std[0, j] = s
            xhat[:, j] = c * s
    else:
        mu = x.data.mean(axis=0, keepdims=True)
        c = x.data - mu
        var = (c * c).mean(axis=0, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = c * inv_std
    y = gain.data * xhat + bias.data

    def backward(g):
        if gain.requires_grad:
            gain._accum((g * xhat).sum(axis=1, keepdims=True))
        if bias.requires_grad:
            bias._accum(g.sum(axis=1, keepdims=True))
        if x.requires_grad:
            gx_hat = g * gain.data
            m1 = gx_hat.mean(axis=0, keepdims=True)
            m2 = (gx_hat * xhat).mean(axis=0, keepdims=True)
            x._accum(inv_std * (gx_hat - m1 - xhat * m2))

    return _result(y, (x, gain, bias), backward)


def conv1d(x: Tensor, kernel: Tensor, dilation: int = 1, causal: bool = False) -> Tensor:
    """1-D convolution over the time axis, length-preserving.

    x is (c_in, N); kernel is (c_out, c_in, K).  Non-causal convs need odd K
    and pad symmetrically; causal convs pad (K-1)*dilation on the left only.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.data.ndim != 2 or kernel.data.ndim != 3 or kernel.data.shape[1] != x.data.shape[0]:
        raise ShapeError(f"conv1d: x {x.data.shape}, kernel {kernel.data.shape}")
    c_out, c_in, k = kernel.data.shape
    n = x.data.shape[1]
    if causal:
        pad_l, pad_r = (k - 1) * dilation, 0
    else:
        if k % 2 == 0:
            raise ShapeError("non-causal conv1d requires odd kernel size")
        pad_l = pad_r = (k - 1) // 2 * dilation
    xp = np.pad(x.data, ((0, 0), (pad_l, pad_r)))

    if _column_exact:
        # fixed-shape per-tap kernels keep appended columns from disturbing
        # earlier ones (see _mm)
        y = np.zeros((c_out, n), dtype=np.float64)
        for t in range(k):
            y += _mm(kernel.data[:, :, t], xp[:, t * dilation:t * dilation + n])
        xcol = None
    else:
        # im2col: one gemm instead of k small ones
        xcol = np.empty((k * c_in, n), dtype=np.float64)
        for t in range(k):
            xcol[t * c_in:(t + 1) * c_in] = xp[:, t * dilation:t * dilation + n]
        y = kernel.data.transpose(0, 2, 1).reshape(c_out, -1) @ xcol

    def backward(g):
        if kernel.requires_grad:
            if xcol is not None:
                gk = (g @ xcol.T).reshape(c_out, k, c_in).transpose(0, 2, 1)
            else:
                gk = np.empty_like(kernel.data)
                for t in range(k):
                    gk[:, :, t] = g @ xp[:, t * dilation:t * dilation + n].T
            kernel._accum(np.ascontiguousarray(gk))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            if xcol is not None:
                gcol = kernel.data.transpose(0, 2, 1).reshape(c_out, -1).T @ g
                for t in range(k):
                    gxp[:, t * dilation:t * dilation + n] += gcol[t * c_in:(t + 1) * c_in]
            else:
                for t in range(k):
                    gxp[:, t * dilation:t * dilation + n] += kernel.data[:, :, t].T @ g
            x._accum(gxp[:, pad_l:pad_l + n])

    return _result(y, (x, kernel), backward)


def glu(x: Tensor) -> Tensor:
    """Gated linear unit over the row axis: [a; b] -> a * sigmoid(b)."""
    x = _as_tensor(x)
    d2 = x.data.shape[0]
    if d2 % 2 != 0:
        raise ShapeError(f"glu needs an even number of rows, got {d2}")
    c = d2 // 2
    a, b = x.data[:c], x.data[c:]
    sig = 1.0 / (1.0 + np.exp(-b))
    y = a * sig

    def backward(g):
        gx = np.empty_like(x.data)
        gx[:c] = g * sig
        gx[c:] = g * a * sig * (1.0 - sig)
        x._accum(gx)

    return _result(y, (x,), backward)


def weight_norm_apply(direction: Tensor, w_scale: Tensor, eps: float = 1e-12) -> Tensor:
    """Per-output-channel weight normalization.

    Channel c of the result is w_scale[c] * direction[c] / ||direction[c]||.
    direction has output channels along axis 0; w_scale is (c_out,).
    """
    direction, w_scale = _as_tensor(direction), _as_tensor(w_scale)
    c_out = direction.data.shape[0]
    if w_scale.data.shape != (c_out,):
        raise ShapeError(f"weight_norm scale must be ({c_out},), got {w_scale.data.shape}")
    flat = direction.data.reshape(c_out, -1)
    norm = np.sqrt((flat * flat).sum(axis=1))
    denom = norm + eps
    shp = (c_out,) + (1,) * (direction.data.ndim - 1)
    w = (w_scale.data / denom).reshape(shp) * direction.data

    def backward(g):
        gflat = g.reshape(c_out, -1)
        dot = (gflat * flat).sum(axis=1)
        if w_scale.requires_grad:
            w_scale._accum(dot / denom)
        if direction.requires_grad:
            coef = (w_scale.data / denom).reshape(shp)
            # d(1/denom)/d(dir) = -dir / (denom^2 * norm); guard norm == 0
            safe = np.where(norm > 0.0, norm, 1.0)
            corr = (w_scale.data * dot / (denom * denom * safe)).reshape(shp)
            direction._accum(coef * g - corr * direction.data)

    return _result(w, (direction, w_scale), backward)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity outside training or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
    x = _as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout requires an explicit rng")
    keep = rng.random(x.data.shape) >= rate
    factor = keep / (1.0 - rate)

    def backward(g):
        x._accum(g * factor)

    return _result(x.data * factor, (x,), backward)


# ---------------------------------------------------------------------------
# optimizer and gradient checking

class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self):
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float,
              beta1: float, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One in-place Adam update over every parameter with a gradient."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
               indices: Sequence[tuple] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    f must build a fresh graph and return a scalar Tensor.  indices limits
    the probe to selected elements of x (all elements by default).
    """
    x.requires_grad = True
    x.zero_grad()
    y = f(x)
    if not np.isfinite(y.data):
        raise ValueError("grad_check: non-finite function value")
    y.backward()
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    if indices is None:
        indices = list(np.ndindex(*x.data.shape)) if x.data.shape else [()]
    worst = 0.0
    for idx in indices:
        orig = x.data[idx]
        x.data[idx] = orig + h
        yp = f(x).item()
        x.data[idx] = orig - h
        ym = f(x).item()
        x.data[idx] = orig
        if not (math.isfinite(yp) and math.isfinite(ym)):
            raise ValueError("grad_check: non-finite perturbed value")
        numeric = (yp - ym) / (2.0 * h)
        err = abs(analytic[idx] - numeric) / (abs(numeric) + 1e-8)
        worst = max(worst, err)
    return worst
