"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every layer primitive used elsewhere in the package (convolution, linear
maps, pooling, the masked gating softmax) is a pure function over
:class:`Tensor`. Running an op inside an active :class:`ComputationTape`
appends a backward rule; replaying the tape in reverse accumulates
gradients into every tensor with ``requires_grad=True`` reachable from
the loss. Outside a tape, ops run forward-only, which is the evaluation
fast path.

Shapes below are written per sample (e.g. ``[T, F]``); ops that the
trainer batches also accept one extra leading batch axis.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .exceptions import DimensionError, EmptyInputError, MaskError

NEG_INF = float("-inf")


class Tensor:
    """A dense float64 array plus an optional accumulated gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: "ComputationTape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64), requires_grad=requires_grad)


class _TapeEntry:
    __slots__ = ("op", "output", "backward")

    def __init__(self, op: str, output: Tensor, backward: Callable[[np.ndarray], None]):
        self.op = op
        self.output = output
        self.backward = backward


_TAPES: list["ComputationTape"] = []


class ComputationTape:
    """Records ops in execution order; reverse replay accumulates grads.

    Execution order is a valid topological order of the graph, so the
    reverse sweep needs no explicit sort. Replays are deterministic:
    identical op order gives bitwise-identical gradients.
    """

    def __init__(self):
        self._entries: list[_TapeEntry] = []

    def __enter__(self) -> "ComputationTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def __len__(self) -> int:
        return len(self._entries)

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise DimensionError(
                f"backward requires a scalar loss, got shape {loss.shape}"
            )
        _accumulate(loss, np.ones_like(loss.data))
        for entry in reversed(self._entries):
            g = entry.output.grad
            if g is None:
                continue
            entry.backward(g)


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from ``loss`` over its recording tape."""
    if loss._tape is None:
        raise DimensionError("loss was not recorded on any ComputationTape")
    loss._tape.backward(loss)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # copy: g may alias a buffer shared with another consumer
        t.grad = np.array(g)
    else:
        t.grad += g


def _record(op: str, inputs: Sequence[Tensor], output: Tensor,
            bwd: Callable[[np.ndarray], None]) -> Tensor:
    if _TAPES and any(t.requires_grad for t in inputs):
        tape = _TAPES[-1]
        output.requires_grad = True
        output._tape = tape
        tape._entries.append(_TapeEntry(op, output, bwd))
    return output


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _record("add", (a, b), out, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _record("sub", (a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _record("mul", (a, b), out, bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)

    def bwd(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _record("div", (a, b), out, bwd)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (not differentiated wrt ``c``)."""
    out = Tensor(a.data * c)

    def bwd(g):
        _accumulate(a, g * c)

    return _record("scale", (a,), out, bwd)


def vsum(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = Tensor(a.data.sum())

    def bwd(g):
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _record("vsum", (a,), out, bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Strict 2-D matrix product ``[m,p] @ [p,q] -> [m,q]``."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul shapes incompatible: {a.shape} vs {b.shape}"
        )
    out = Tensor(a.data @ b.data)

    def bwd(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _record("matmul", (a, b), out, bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``[..., in] @ [in, out] + [out]``."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(
            f"linear shapes incompatible: {x.shape} vs {w.shape}"
        )
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    out = Tensor(y)
    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g):
        _accumulate(x, g @ w.data.T)
        gf = g.reshape(-1, g.shape[-1])
        xf = x.data.reshape(-1, x.shape[-1])
        _accumulate(w, xf.T @ gf)
        if b is not None:
            _accumulate(b, gf.sum(axis=0))

    return _record("linear", inputs, out, bwd)


def conv1d(x: Tensor, kernels: Tensor, stride: int = 1,
           bias: Tensor | None = None) -> Tensor:
    """1-D convolution over a feature sequence with "same" zero padding.

    ``x`` is ``[T, F]`` or ``[B, T, F]``; ``kernels`` is ``[K, W, F]``.
    The output has ``T' = ceil(T / stride)`` frames and ``K`` channels.
    An optional per-channel ``bias [K]`` is fused into the op.
    """
    if stride < 1:
        raise DimensionError(f"stride must be positive, got {stride}")
    if kernels.data.ndim != 3:
        raise DimensionError(f"kernels must be [K, W, F], got {kernels.shape}")
    batched = x.data.ndim == 3
    x3 = x.data if batched else x.data[None]
    if x3.ndim != 3:
        raise DimensionError(f"conv1d input must be [T, F] or [B, T, F], got {x.shape}")
    n_batch, t_in, f_in = x3.shape
    k_out, width, f_k = kernels.shape
    if t_in == 0:
        raise EmptyInputError("conv1d received an empty sequence (T=0)")
    if f_k != f_in:
        raise DimensionError(
            f"conv1d channel mismatch: input {x.shape} vs kernels {kernels.shape}"
        )
    t_out = -(-t_in // stride)
    pad = max((t_out - 1) * stride + width - t_in, 0)
    pad_left = pad // 2
    xp = np.zeros((n_batch, t_in + pad, f_in))
    xp[:, pad_left:pad_left + t_in] = x3
    starts = np.arange(t_out) * stride
    idx = starts[:, None] + np.arange(width)[None, :]
    cols = xp[:, idx, :]                                   # [B, T', W, F]
    flat = cols.reshape(n_batch * t_out, width * f_in)
    kmat = kernels.data.reshape(k_out, width * f_in)
    y = (flat @ kmat.T).reshape(n_batch, t_out, k_out)
    if bias is not None:
        y += bias.data
    out = Tensor(y if batched else y[0])
    inputs = (x, kernels) if bias is None else (x, kernels, bias)

    def bwd(g):
        g3 = g if batched else g[None]
        gf = g3.reshape(n_batch * t_out, k_out)
        _accumulate(kernels, (gf.T @ flat).reshape(k_out, width, f_in))
        if bias is not None:
            _accumulate(bias, gf.sum(axis=0))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for w_off in range(width):
                # starts are distinct for a fixed offset, so fancy += is safe
                dxp[:, starts + w_off, :] += g3 @ kernels.data[:, w_off, :]
            dx = dxp[:, pad_left:pad_left + t_in]
            _accumulate(x, dx if batched else dx[0])

    return _record("conv1d", inputs, out, bwd)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))

    def bwd(g):
        _accumulate(x, g * (x.data > 0.0))

    return _record("relu", (x,), out, bwd)


def softplus(x: Tensor) -> Tensor:
    """ln(1 + e^x) via the overflow-safe form max(x,0) + ln(1 + e^-|x|)."""
    d = x.data
    out = Tensor(np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d))))

    def bwd(g):
        sig = np.where(d >= 0, 1.0 / (1.0 + np.exp(-d)),
                       np.exp(d) / (1.0 + np.exp(d)))
        _accumulate(x, g * sig)

    return _record("softplus", (x,), out, bwd)


def softmax(v: Tensor) -> Tensor:
    """Row-wise softmax over the last axis with exact -inf masking.

    Entries equal to -inf map to exactly 0; stabilization subtracts the
    per-row max over finite entries only. A row with no finite entry is
    an error ("no selectable expert").
    """
    d = v.data
    finite = np.isfinite(d)
    if not finite.any(axis=-1).all():
        raise MaskError("no selectable expert: a row is entirely -inf")
    m = np.where(finite, d, NEG_INF).max(axis=-1, keepdims=True)
    e = np.exp(d - m)                                      # exp(-inf) == 0.0
    s = e.sum(axis=-1, keepdims=True)
    y = e / s
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accumulate(v, (g - dot) * y)

    return _record("softmax", (v,), out, bwd)


def mask_keep(v: Tensor, keep: np.ndarray) -> Tensor:
    """Keep entries where ``keep`` is True, set the rest to -inf.

    Gradient is identity on kept entries and zero on masked ones.
    """
    if keep.shape != v.shape:
        raise DimensionError(f"mask shape {keep.shape} != value shape {v.shape}")
    out = Tensor(np.where(keep, v.data, NEG_INF))

    def bwd(g):
        _accumulate(v, g * keep)

    return _record("mask_keep", (v,), out, bwd)


# ---------------------------------------------------------------------------
# pooling and reductions


def mean_pool(x: Tensor) -> Tensor:
    """Mean over the frame axis: ``[..., T, F] -> [..., F]``."""
    if x.data.ndim < 2:
        raise DimensionError(f"mean_pool expects at least 2 axes, got {x.shape}")
    t_len = x.shape[-2]
    if t_len == 0:
        raise EmptyInputError("mean_pool received an empty sequence (T=0)")
    out = Tensor(x.data.mean(axis=-2))

    def bwd(g):
        _accumulate(x, np.repeat(np.expand_dims(g / t_len, -2), t_len, axis=-2))

    return _record("mean_pool", (x,), out, bwd)


def segment_mean_pool(x: Tensor, segments: Sequence[tuple[int, int]]) -> Tensor:
    """Mean over each ``[start, end)`` frame range: ``[..., T, F] -> [..., S, F]``.

    Segments must be sorted, disjoint and lie within ``[0, T)``.
    """
    t_len = x.shape[-2]
    if not segments:
        raise EmptyInputError("segment_mean_pool requires at least one segment")
    prev_end = 0
    for start, end in segments:
        if not (0 <= start < end <= t_len):
            raise DimensionError(
                f"segment ({start}, {end}) out of range for T={t_len}"
            )
        if start < prev_end:
            raise DimensionError("segments must be sorted and disjoint")
        prev_end = end
    pooled = np.stack(
        [x.data[..., s:e, :].mean(axis=-2) for s, e in segments], axis=-2
    )
    out = Tensor(pooled)

    def bwd(g):
        dx = np.zeros_like(x.data)
        for i, (s, e) in enumerate(segments):
            dx[..., s:e, :] += np.expand_dims(g[..., i, :], -2) / (e - s)
        _accumulate(x, dx)

    return _record("segment_mean_pool", (x,), out, bwd)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all elements, as a scalar tensor."""
    if pred.shape != target.shape:
        raise DimensionError(
            f"mse shapes differ: {pred.shape} vs {target.shape}"
        )
    diff = pred.data - target.data
    out = Tensor(np.mean(diff * diff))
    n = diff.size

    def bwd(g):
        d = (2.0 / n) * diff * g
        _accumulate(pred, d)
        _accumulate(target, -d)

    return _record("mse", (pred, target), out, bwd)


# ---------------------------------------------------------------------------
# shape plumbing and gather/scatter (sparse dispatch support)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def bwd(g):
        _accumulate(x, g.reshape(x.shape))

    return _record("reshape", (x,), out, bwd)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise EmptyInputError("concat requires at least one tensor")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        moved = np.moveaxis(g, axis, 0)
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accumulate(p, np.moveaxis(moved[lo:hi], 0, axis))

    return _record("concat", tuple(parts), out, bwd)


def take(v: Tensor, index: int) -> Tensor:
    """Scalar entry of a 1-D tensor, kept differentiable."""
    if v.data.ndim != 1:
        raise DimensionError(f"take expects a vector, got {v.shape}")
    out = Tensor(v.data[index])

    def bwd(g):
        dv = np.zeros_like(v.data)
        dv[index] = g
        _accumulate(v, dv)

    return _record("take", (v,), out, bwd)


def take_column(x: Tensor, col: int) -> Tensor:
    """Column ``col`` of the last axis, keepdims: ``[..., n] -> [..., 1]``."""
    out = Tensor(x.data[..., col:col + 1])

    def bwd(g):
        dx = np.zeros_like(x.data)
        dx[..., col:col + 1] = g
        _accumulate(x, dx)

    return _record("take_column", (x,), out, bwd)


def _rows_unique(idx: np.ndarray) -> bool:
    return len(np.unique(idx)) == len(idx)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along the first axis (duplicates allowed)."""
    out = Tensor(x.data[idx])
    unique = _rows_unique(idx)

    def bwd(g):
        dx = np.zeros_like(x.data)
        if unique:
            dx[idx] = g
        else:
            np.add.at(dx, idx, g)
        _accumulate(x, dx)

    return _record("gather_rows", (x,), out, bwd)


def scatter_add_rows(base: Tensor, idx: np.ndarray, values: Tensor) -> Tensor:
    """Add ``values`` rows into ``base`` at positions ``idx`` (out of place)."""
    out_data = base.data.copy()
    if _rows_unique(idx):
        out_data[idx] += values.data
    else:
        np.add.at(out_data, idx, values.data)
    out = Tensor(out_data)

    def bwd(g):
        _accumulate(base, g)
        _accumulate(values, g[idx])

    return _record("scatter_add_rows", (base, values), out, bwd)


# ---------------------------------------------------------------------------
# initialization and gradient checking


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Uniform in [-sqrt(1/fan_in), +sqrt(1/fan_in)], seeded."""
    limit = math.sqrt(1.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def finite_difference_gradient(f: Callable[[], float], t: Tensor,
                               step: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``f()`` wrt every element of ``t``.

    ``f`` must recompute the scalar forward value from current tensor
    contents; ``t.data`` is perturbed in place and restored.
    """
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = f()
        flat[i] = orig - step
        f_minus = f()
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def gradient_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative error between two gradient arrays."""
    num = np.max(np.abs(analytic - numeric))
    den = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(num / den)
