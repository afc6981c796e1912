"""Dense tensors with reverse-mode automatic differentiation.

The operation set is deliberately small: exactly what a pair of
convolutional Transformer encoders with dot-product scoring needs.
Tensors hold row-major float32 arrays (float64 is accepted so gradient
checks can run at higher precision). There is no general broadcasting;
binary ops take equal shapes, a trailing bias vector, or a size-1 tensor.
"""

from __future__ import annotations

import math
from typing import Callable, Iterator

import numpy as np

from .errors import ShapeError

DEFAULT_DTYPE = np.float32


class Tensor:
    """A dense array plus the bookkeeping needed for backpropagation.

    ``data`` is the value, ``grad`` (same shape, or None) the accumulated
    gradient, ``requires_grad`` marks leaves that should receive gradients.
    Results of operations remember their parents and a closure that routes
    the output gradient back to them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor through the recorded graph."""
        if grad is None:
            grad = np.ones_like(self.data)
        _accumulate(self, np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(_topo_order(self)):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; floats are wrapped as non-differentiable constants.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    # op results are freshly computed contiguous arrays; skip __init__ checks
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: mixed dtypes {a.dtype} and {b.dtype}")


def _check_binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    # Allowed: identical shapes, a trailing bias vector, or a size-1 tensor.
    if a.shape == b.shape or a.data.size == 1 or b.data.size == 1:
        return
    if a.data.ndim == 2 and b.shape == (a.shape[1],):
        return
    if b.data.ndim == 2 and a.shape == (b.shape[1],):
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "add")
    _check_binary_shapes(a, b, "add")
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _result(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "sub")
    _check_binary_shapes(a, b, "sub")
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, -_unbroadcast(g, b.shape))

    return _result(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "mul")
    _check_binary_shapes(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(out, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    out = x.data * x.dtype.type(c)

    def backward(g):
        _accumulate(x, g * x.dtype.type(c))

    return _result(out, (x,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "matmul")
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _result(out, (a, b), backward)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D tensor, got shape {x.shape}")
    out = np.ascontiguousarray(x.data.T)

    def backward(g):
        _accumulate(x, np.ascontiguousarray(g.T))

    return _result(out, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    out = x.data.sum(dtype=x.dtype).reshape(())

    def backward(g):
        _accumulate(x, np.full_like(x.data, g))

    return _result(out, (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)


# ---------------------------------------------------------------------------
# nonlinearities

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU via the tanh approximation used by BERT-family models."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * (xd + _GELU_A * (x2 * xd)))
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        local = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
        _accumulate(x, g * local.astype(x.dtype, copy=False))

    return _result(out.astype(x.dtype, copy=False), (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    # branch on sign to avoid overflow in exp for large |x|
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    out[~pos] = e / (1.0 + e)

    def backward(g):
        _accumulate(x, g * out * (1.0 - out))

    return _result(out, (x,), backward)


# ---------------------------------------------------------------------------
# structural ops


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: out[i] = table[ids[i]]."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"embedding: ids must be 1-D, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: id out of range for table with {table.shape[0]} rows")
    out = table.data[ids]

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids, g)
            _accumulate(table, gt)

    return _result(out, (table,), backward)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "concat_rows")
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"concat_rows: incompatible shapes {a.shape} and {b.shape}")
    out = np.concatenate([a.data, b.data], axis=0)
    split = a.shape[0]

    def backward(g):
        _accumulate(a, g[:split])
        _accumulate(b, g[split:])

    return _result(out, (a, b), backward)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"slice_rows: expected 2-D tensor, got shape {x.shape}")
    out = x.data[start:stop].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        _accumulate(x, gx)

    return _result(out, (x,), backward)


def rowmax(x: Tensor) -> Tensor:
    """Per-row maximum of a 2-D tensor; gradient flows to the argmax."""
    if x.data.ndim != 2:
        raise ShapeError(f"rowmax: expected 2-D tensor, got shape {x.shape}")
    arg = x.data.argmax(axis=1)
    out = x.data[np.arange(x.shape[0]), arg]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[np.arange(x.shape[0]), arg] = g
        _accumulate(x, gx)

    return _result(out, (x,), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate is 0."""
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    out = x.data * keep

    def backward(g):
        _accumulate(x, g * keep)

    return _result(out, (x,), backward)


# ---------------------------------------------------------------------------
# normalization, convolution, attention

LAYER_NORM_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Per-row normalization to zero mean / unit variance, then affine."""
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm: expected 2-D input, got shape {x.shape}")
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(LAYER_NORM_EPS))
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=0))
        gh = g * gain.data
        gx = inv * (gh - gh.mean(axis=1, keepdims=True) - xhat * (gh * xhat).mean(axis=1, keepdims=True))
        _accumulate(x, gx.astype(x.dtype, copy=False))

    return _result(out.astype(x.dtype, copy=False), (x, gain, bias), backward)


def _conv_geometry(n: int, width: int, stride: int, padding: int) -> tuple[int, int]:
    n_out = -(-n // stride)
    pad_right = max(0, (n_out - 1) * stride + width - padding - n)
    return n_out, pad_right


def conv1d(x: Tensor, weight: Tensor, bias: Tensor, stride: int, padding: int) -> Tensor:
    """1-D cross-correlation along the time axis.

    Padding follows the "same" convention: the output always has exactly
    ceil(n / stride) rows (the right edge is zero-padded as needed).
    """
    if x.data.ndim != 2 or weight.data.ndim != 3:
        raise ShapeError(f"conv1d: expected x (n, d_in) and weight (w, d_in, d_out), got {x.shape} and {weight.shape}")
    n, d_in = x.shape
    width, w_in, d_out = weight.shape
    if width % 2 != 1:
        raise ShapeError(f"conv1d: kernel width must be odd, got {width}")
    if w_in != d_in:
        raise ShapeError(f"conv1d: x has {d_in} input channels but weight expects {w_in}")
    if bias.shape != (d_out,):
        raise ShapeError(f"conv1d: bias must have shape ({d_out},), got {bias.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv1d: invalid stride {stride} or padding {padding}")

    n_out, pad_right = _conv_geometry(n, width, stride, padding)
    xp = np.pad(x.data, ((padding, pad_right), (0, 0)))
    out = np.tile(bias.data, (n_out, 1))
    stop = (n_out - 1) * stride + 1
    for k in range(width):
        out += xp[k:k + stop:stride] @ weight.data[k]

    def backward(g):
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=0))
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            for k in range(width):
                gw[k] = xp[k:k + stop:stride].T @ g
            _accumulate(weight, gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for k in range(width):
                gxp[k:k + stop:stride] += g @ weight.data[k].T
            _accumulate(x, gxp[padding:padding + n])

    return _result(out, (x, weight, bias), backward)


def conv1d_transposed(x: Tensor, weight: Tensor, bias: Tensor, stride: int, target_len: int) -> Tensor:
    """Transpose of conv1d's geometry, cropped/padded to exactly target_len rows."""
    if x.data.ndim != 2 or weight.data.ndim != 3:
        raise ShapeError(
            f"conv1d_transposed: expected x (m, d_in) and weight (w, d_in, d_out), got {x.shape} and {weight.shape}"
        )
    m, d_in = x.shape
    width, w_in, d_out = weight.shape
    if width % 2 != 1:
        raise ShapeError(f"conv1d_transposed: kernel width must be odd, got {width}")
    if w_in != d_in:
        raise ShapeError(f"conv1d_transposed: x has {d_in} input channels but weight expects {w_in}")
    if bias.shape != (d_out,):
        raise ShapeError(f"conv1d_transposed: bias must have shape ({d_out},), got {bias.shape}")
    if m != -(-target_len // stride):
        raise ShapeError(
            f"conv1d_transposed: input length {m} inconsistent with target_len {target_len} at stride {stride}"
        )

    padding = width // 2
    full = (m - 1) * stride + width
    buf = np.zeros((full, d_out), dtype=x.dtype)
    stop = (m - 1) * stride + 1
    for k in range(width):
        buf[k:k + stop:stride] += x.data @ weight.data[k]
    out = buf[padding:padding + target_len]
    if out.shape[0] < target_len:
        out = np.pad(out, ((0, target_len - out.shape[0]), (0, 0)))
    out = out + bias.data

    def backward(g):
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=0))
        gbuf = np.zeros((full, d_out), dtype=g.dtype)
        avail = min(target_len, full - padding)
        gbuf[padding:padding + avail] = g[:avail]
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            for k in range(width):
                gw[k] = x.data.T @ gbuf[k:k + stop:stride]
            _accumulate(weight, gw)
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for k in range(width):
                gx += gbuf[k:k + stop:stride] @ weight.data[k].T
            _accumulate(x, gx)

    return _result(out, (x, weight, bias), backward)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, mask, heads: int, return_weights: bool = False):
    """Scaled dot-product attention over ``heads`` heads with a 0/1 mask.

    Masked-out positions get -inf scores before the softmax, so their
    attention weights are exactly zero. Every mask row must keep at least
    one position.
    """
    n, d = q.shape
    if k.shape != (n, d) or v.shape != (n, d):
        raise ShapeError(f"attention: q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    if d % heads != 0:
        raise ShapeError(f"attention: model width {d} not divisible by {heads} heads")
    mask_arr = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if mask_arr.shape != (n, n):
        raise ShapeError(f"attention: mask must have shape ({n}, {n}), got {mask_arr.shape}")
    keep = mask_arr != 0
    if not keep.any(axis=1).all():
        row = int(np.flatnonzero(~keep.any(axis=1))[0])
        raise ShapeError(f"attention: mask row {row} is all zero; softmax undefined")

    dh = d // heads
    inv_sqrt = 1.0 / math.sqrt(dh)
    qh = q.data.reshape(n, heads, dh).transpose(1, 0, 2)
    kh = k.data.reshape(n, heads, dh).transpose(1, 0, 2)
    vh = v.data.reshape(n, heads, dh).transpose(1, 0, 2)

    scores = np.where(keep, (qh @ kh.transpose(0, 2, 1)) * q.dtype.type(inv_sqrt), q.dtype.type(-np.inf))
    scores -= scores.max(axis=2, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=2, keepdims=True)
    out = (weights @ vh).transpose(1, 0, 2).reshape(n, d)

    def backward(g):
        gh = g.reshape(n, heads, dh).transpose(1, 0, 2)
        if v.requires_grad:
            gv = weights.transpose(0, 2, 1) @ gh
            _accumulate(v, gv.transpose(1, 0, 2).reshape(n, d))
        gw = gh @ vh.transpose(0, 2, 1)
        gs = weights * (gw - (gw * weights).sum(axis=2, keepdims=True))
        if q.requires_grad:
            gq = (gs @ kh) * inv_sqrt
            _accumulate(q, gq.transpose(1, 0, 2).reshape(n, d).astype(q.dtype, copy=False))
        if k.requires_grad:
            gk = (gs.transpose(0, 2, 1) @ qh) * inv_sqrt
            _accumulate(k, gk.transpose(1, 0, 2).reshape(n, d).astype(k.dtype, copy=False))

    result = _result(out, (q, k, v), backward)
    if return_weights:
        return result, weights
    return result


# ---------------------------------------------------------------------------
# losses


def bce_with_logits(logits: Tensor, targets, weights) -> Tensor:
    """Weighted-mean binary cross-entropy computed from logits.

    ``targets`` and ``weights`` are plain arrays; weights of zero drop a
    position (e.g. padding), and the mean is over the total weight.
    """
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype)
    w = np.asarray(weights, dtype=z.dtype)
    if y.shape != z.shape or w.shape != z.shape:
        raise ShapeError(f"bce_with_logits: shapes differ: {z.shape}, {y.shape}, {w.shape}")
    total = w.sum()
    if total <= 0:
        raise ShapeError("bce_with_logits: weights sum to zero")
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray((per * w).sum() / total, dtype=z.dtype).reshape(())

    def backward(g):
        s = np.empty_like(z)
        pos = z >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        e = np.exp(z[~pos])
        s[~pos] = e / (1.0 + e)
        _accumulate(logits, g * w * (s - y) / total)

    return _result(out, (logits,), backward)


# ---------------------------------------------------------------------------
# parameters


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations (BERT convention)."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2.0 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2.0 * std
    return x.astype(dtype)


class ParameterSet:
    """Named trainable tensors with deterministic iteration order.

    Shared parameters are registered once; modules that share storage hold
    references to the same Tensor objects, so the total size reflects the
    sharing.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def total_size(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None
