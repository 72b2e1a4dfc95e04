"""Minimal dense tensor engine with tape-based reverse-mode differentiation.

Tensors wrap read-only numpy arrays.  Storage is float32 by default; any
float64 input switches an operation to float64 output ("64-bit mode", used
by gradient checks).  Reductions and contractions always accumulate in
float64 and round back to the storage precision.

Differentiation is recorded on a :class:`Tape`::

    with Tape() as tape:
        loss = cross_entropy(forward(x, params), labels)
    grads = tape.gradients(loss, params)
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "IGNORE_INDEX",
    "matmul_batched",
    "softmax",
    "conv2d",
    "upsample_bilinear",
    "bilinear_matrix",
    "patch_split",
    "patch_merge",
    "relu",
    "add",
    "scale",
    "concat",
    "reshape",
    "swap_last",
    "repeat_batch",
    "sum_all",
    "cross_entropy",
]

IGNORE_INDEX = 255
MAX_RANK = 5


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class Tensor:
    """Immutable dense array with an explicit shape.

    Parameters
    ----------
    data : array_like
        Values; copied into a read-only array.  Storage is float32 unless
        ``data`` is a float64 ndarray or ``dtype`` says otherwise.
    requires_grad : bool
        Whether a :class:`Tape` should track operations on this tensor.
    dtype : numpy dtype, optional
        Force ``float32`` or ``float64`` storage.
    """

    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            # only an explicit float64 array selects 64-bit storage
            is64 = isinstance(data, np.ndarray) and data.dtype == np.float64
            dtype = np.float64 if is64 else np.float32
        arr = np.asarray(data)
        dtype = np.dtype(dtype)
        if dtype not in (np.float32, np.float64):
            raise TypeError(f"unsupported storage dtype {dtype}")
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not 1 <= arr.ndim <= MAX_RANK:
            raise ShapeError(f"rank must be in 1..{MAX_RANK}, got shape {arr.shape}")
        if 0 in arr.shape:
            raise ShapeError(f"extents must be positive, got shape {arr.shape}")
        arr = np.array(arr, dtype=dtype, order="C", copy=True)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # internal fast path: arr is freshly computed and owned
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, requires_grad=self.requires_grad, dtype=dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------


@dataclass
class _Node:
    op: str
    forward: Callable
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable


_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive applications.

    Operations whose inputs require gradients (or were produced by recorded
    operations) are appended in execution order, which is a topological
    order; :meth:`gradients` walks it in reverse, visiting each node once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._tracked: set[int] = set()

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def _tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def _record(self, node: _Node) -> None:
        self.nodes.append(node)
        self._tracked.add(id(node.output))

    def backward(self, terminal: Tensor) -> dict[int, np.ndarray]:
        """Reverse sweep from a scalar terminal; returns gradients keyed by ``id(tensor)``."""
        if terminal.size != 1:
            raise ShapeError(f"backward needs a scalar terminal, got shape {terminal.shape}")
        grads: dict[int, np.ndarray] = {id(terminal): np.ones(terminal.shape, terminal.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not self._tracks(inp):
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return grads

    def gradients(self, terminal: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
        """Gradient of ``terminal`` with respect to every tensor in ``params``.

        Parameters that did not influence the terminal get zero gradients.
        """
        raw = self.backward(terminal)
        out = {}
        for name, p in params.items():
            g = raw.get(id(p))
            out[name] = np.zeros(p.shape, p.dtype) if g is None else np.asarray(g, p.dtype)
        return out

    def replay(self, feeds: Mapping[int, np.ndarray] | None = None) -> np.ndarray:
        """Re-run every recorded forward and return the last node's output.

        ``feeds`` optionally overrides leaf values by ``id(tensor)``.
        """
        values: dict[int, np.ndarray] = dict(feeds or {})
        out = None
        for node in self.nodes:
            args = [values.get(id(t), t.data) for t in node.inputs]
            out, _ = node.forward(*args)
            values[id(node.output)] = out
        if out is None:
            raise ValueError("empty tape")
        return out


def _result_dtype(*arrays: np.ndarray) -> np.dtype:
    return np.dtype(np.float64) if any(a.dtype == np.float64 for a in arrays) else np.dtype(np.float32)


def _apply(op: str, fwd: Callable, inputs: Sequence[Tensor], **kwargs) -> Tensor:
    def bound(*arrays):
        return fwd(*arrays, **kwargs)

    out_arr, vjp = bound(*(t.data for t in inputs))
    out = Tensor._wrap(out_arr)
    tape = _active_tape()
    if tape is not None and any(tape._tracks(t) for t in inputs):
        tape._record(_Node(op, bound, tuple(inputs), out, vjp))
    return out


# --------------------------------------------------------------------------
# Primitives
# --------------------------------------------------------------------------


def _matmul_fwd(a, b):
    dt = _result_dtype(a, b)
    a64, b64 = a.astype(np.float64), b.astype(np.float64)
    out = np.matmul(a64, b64).astype(dt)

    def vjp(g):
        g64 = g.astype(np.float64)
        ga = np.matmul(g64, np.swapaxes(b64, -1, -2)).astype(a.dtype)
        gb = np.matmul(np.swapaxes(a64, -1, -2), g64).astype(b.dtype)
        return ga, gb

    return out, vjp


def matmul_batched(a: Tensor, b: Tensor) -> Tensor:
    """Batched contraction ``out[b, m, q] = sum_p a[b, m, p] * b[b, p, q]``.

    Rank-2 operands are treated as a single batch.
    """
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ShapeError(f"matmul_batched needs two rank-2 or two rank-3 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul_batched shape mismatch: {a.shape} x {b.shape}")
    return _apply("matmul_batched", _matmul_fwd, (a, b))


def _softmax_fwd(x, axis):
    x64 = x.astype(np.float64)
    e = np.exp(x64 - x64.max(axis=axis, keepdims=True))
    y64 = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        g64 = g.astype(np.float64)
        gx = y64 * (g64 - (g64 * y64).sum(axis=axis, keepdims=True))
        return (gx.astype(x.dtype),)

    return y64.astype(x.dtype), vjp


def softmax(x: Tensor, axis: int) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    return _apply("softmax", _softmax_fwd, (x,), axis=axis % x.ndim)


def _conv_fwd(x, w, b=None, *, stride):
    dt = _result_dtype(x, w) if b is None else _result_dtype(x, w, b)
    k = w.shape[-1]
    pad = k // 2
    x64 = x.astype(np.float64)
    w64 = w.astype(np.float64)
    if pad:
        x64 = np.pad(x64, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = sliding_window_view(x64, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, _, ho, wo = cols.shape[:4]
    # (N, Ho, Wo, Cout) -> (N, Cout, Ho, Wo)
    out = np.tensordot(cols, w64, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.astype(np.float64)[None, :, None, None]

    def vjp(g):
        g64 = g.astype(np.float64)
        gw = np.tensordot(g64, cols, axes=([0, 2, 3], [0, 2, 3]))
        gcols = np.tensordot(g64, w64, axes=([1], [0]))  # N, Ho, Wo, Cin, k, k
        gxp = np.zeros(x64.shape)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                    gcols[..., i, j].transpose(0, 3, 1, 2)
                )
        if pad:
            gxp = gxp[:, :, pad:-pad, pad:-pad]
        grads = (gxp.astype(x.dtype), gw.astype(w.dtype))
        if b is not None:
            grads += (g64.sum(axis=(0, 2, 3)).astype(b.dtype),)
        return grads

    return out.astype(dt), vjp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Zero same-padded 2-D cross-correlation.

    ``weight`` is ``Cout x Cin x k x k`` with ``k`` in {1, 3}; ``stride`` is 1 or 2.
    ``bias`` (``Cout``) may be omitted.
    """
    if x.ndim != 4 or weight.ndim != 4 or (bias is not None and bias.ndim != 1):
        raise ShapeError(
            f"conv2d expects NCHW input, OIkk weight, O bias; got {x.shape}, {weight.shape}, "
            f"{None if bias is None else bias.shape}"
        )
    cout, cin, kh, kw = weight.shape
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"conv2d kernel must be 1x1 or 3x3, got {kh}x{kw}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d stride must be 1 or 2, got {stride}")
    if x.shape[1] != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[1]} channels, weight expects {cin}")
    if bias is not None and bias.shape[0] != cout:
        raise ShapeError(f"conv2d bias has {bias.shape[0]} entries for {cout} output channels")
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _apply("conv2d", _conv_fwd, inputs, stride=stride)


def bilinear_matrix(n_in: int, factor: int) -> np.ndarray:
    """Interpolation matrix ``(n_in * factor) x n_in`` (align-corners=false)."""
    n_out = n_in * factor
    mat = np.zeros((n_out, n_in))
    for o in range(n_out):
        src = max((o + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        mat[o, i0] += 1.0 - frac
        mat[o, i1] += frac
    return mat


def _upsample_fwd(x, factor):
    ah = bilinear_matrix(x.shape[2], factor)
    aw = bilinear_matrix(x.shape[3], factor)
    out = np.einsum("oh,nchw,pw->ncop", ah, x.astype(np.float64), aw, optimize=True)

    def vjp(g):
        gx = np.einsum("oh,ncop,pw->nchw", ah, g.astype(np.float64), aw, optimize=True)
        return (gx.astype(x.dtype),)

    return out.astype(x.dtype), vjp


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling by 2 or 4 with the align-corners=false convention.

    Output pixel ``o`` samples source coordinate ``(o + 0.5) / factor - 0.5``,
    clamped to the border.
    """
    if factor not in (2, 4):
        raise ShapeError(f"upsample factor must be 2 or 4, got {factor}")
    if x.ndim != 4:
        raise ShapeError(f"upsample_bilinear expects NCHW input, got {x.shape}")
    return _apply("upsample_bilinear", _upsample_fwd, (x,), factor=factor)


def _split(x, gh, gw):
    n, c, hh, ww = x.shape
    h, w = hh // gh, ww // gw
    return x.reshape(n, c, gh, h, gw, w).transpose(0, 2, 4, 1, 3, 5).reshape(n * gh * gw, c, h, w)


def _merge(x, gh, gw):
    b, c, h, w = x.shape
    n = b // (gh * gw)
    return x.reshape(n, gh, gw, c, h, w).transpose(0, 3, 1, 4, 2, 5).reshape(n, c, gh * h, gw * w)


def _split_fwd(x, gh, gw):
    return _split(x, gh, gw), lambda g: (_merge(g, gh, gw),)


def _merge_fwd(x, gh, gw):
    return _merge(x, gh, gw), lambda g: (_split(g, gh, gw),)


def patch_split(x: Tensor, grid: tuple[int, int]) -> Tensor:
    """Cut each map into a ``grid`` of patches folded into the batch axis.

    Patch ``(i, j)`` of sample ``n`` lands in batch slot ``n*Nh*Nw + i*Nw + j``.
    """
    gh, gw = grid
    if x.ndim != 4:
        raise ShapeError(f"patch_split expects NCHW input, got {x.shape}")
    if gh < 1 or gw < 1 or x.shape[2] % gh or x.shape[3] % gw:
        raise ShapeError(
            f"patch_split: extents {x.shape[2]}x{x.shape[3]} not divisible by grid {gh}x{gw}"
        )
    return _apply("patch_split", _split_fwd, (x,), gh=gh, gw=gw)


def patch_merge(x: Tensor, grid: tuple[int, int]) -> Tensor:
    """Inverse of :func:`patch_split`."""
    gh, gw = grid
    if x.ndim != 4:
        raise ShapeError(f"patch_merge expects 4-D patched input, got {x.shape}")
    if gh < 1 or gw < 1 or x.shape[0] % (gh * gw):
        raise ShapeError(f"patch_merge: batch {x.shape[0]} not divisible by grid {gh}x{gw}")
    return _apply("patch_merge", _merge_fwd, (x,), gh=gh, gw=gw)


def _relu_fwd(x):
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype), lambda g: (np.where(mask, g, 0).astype(x.dtype),)


def relu(x: Tensor) -> Tensor:
    return _apply("relu", _relu_fwd, (x,))


def _add_fwd(a, b):
    dt = _result_dtype(a, b)
    return (a.astype(np.float64) + b.astype(np.float64)).astype(dt), lambda g: (g.astype(a.dtype), g.astype(b.dtype))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise sum of equally shaped tensors (no broadcasting)."""
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _apply("add", _add_fwd, (a, b))


def _scale_fwd(x, factor):
    return (x.astype(np.float64) * factor).astype(x.dtype), lambda g: ((g.astype(np.float64) * factor).astype(x.dtype),)


def scale(x: Tensor, factor: float) -> Tensor:
    return _apply("scale", _scale_fwd, (x,), factor=float(factor))


def _concat_fwd(*xs, axis):
    dt = _result_dtype(*xs)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def vjp(g):
        return tuple(p.astype(x.dtype) for p, x in zip(np.split(g, bounds, axis=axis), xs))

    return np.concatenate(xs, axis=axis).astype(dt), vjp


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(x.shape, ref)) if i != axis):
            raise ShapeError(f"concat shape mismatch along axes other than {axis}: {ref} vs {x.shape}")
    return _apply("concat", _concat_fwd, tuple(xs), axis=axis)


def _reshape_fwd(x, shape):
    return x.reshape(shape), lambda g: (g.reshape(x.shape),)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    return _apply("reshape", _reshape_fwd, (x,), shape=shape)


def _swap_fwd(x):
    return np.swapaxes(x, -1, -2), lambda g: (np.swapaxes(g, -1, -2),)


def swap_last(x: Tensor) -> Tensor:
    """Transpose the two trailing axes."""
    if x.ndim < 2:
        raise ShapeError(f"swap_last needs rank >= 2, got {x.shape}")
    return _apply("swap_last", _swap_fwd, (x,))


def _repeat_fwd(x, times):
    def vjp(g):
        g64 = g.astype(np.float64).reshape((x.shape[0], times) + x.shape[1:]).sum(axis=1)
        return (g64.astype(x.dtype),)

    return np.repeat(x, times, axis=0), vjp


def repeat_batch(x: Tensor, times: int) -> Tensor:
    """Repeat every batch entry ``times`` times consecutively (``n -> n*times + t``)."""
    return _apply("repeat_batch", _repeat_fwd, (x,), times=int(times))


def _sum_fwd(x):
    total = np.array([x.astype(np.float64).sum()]).astype(x.dtype)
    return total, lambda g: (np.full(x.shape, g.reshape(-1)[0], dtype=x.dtype),)


def sum_all(x: Tensor) -> Tensor:
    return _apply("sum_all", _sum_fwd, (x,))


def _ce_fwd(logits, labels):
    k = logits.shape[1]
    x = np.moveaxis(logits.astype(np.float64), 1, -1).reshape(-1, k)
    lab = labels.reshape(-1)
    valid = lab != IGNORE_INDEX
    count = int(valid.sum())
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    idx = np.where(valid, lab, 0)
    nll = lse - shifted[np.arange(len(lab)), idx]
    loss = float(nll[valid].sum() / count) if count else 0.0

    def vjp(g):
        if not count:
            return (np.zeros(logits.shape, logits.dtype),)
        p = np.exp(shifted - lse[:, None])
        p[np.arange(len(lab)), idx] -= 1.0
        p[~valid] = 0.0
        p *= float(g.reshape(-1)[0]) / count
        gx = np.moveaxis(p.reshape(logits.shape[0], *logits.shape[2:], k), -1, 1)
        return (gx.astype(logits.dtype),)

    return np.array([loss], dtype=logits.dtype), vjp


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean pixel-wise negative log-likelihood, skipping ``IGNORE_INDEX`` pixels.

    ``logits`` is ``N x K x H x W``; ``labels`` is an integer ``N x H x W`` array.
    """
    labels = np.asarray(labels)
    if logits.ndim != 4 or labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} incompatible with labels {labels.shape}")
    labels = labels.astype(np.int64)
    k = logits.shape[1]
    bad = (labels != IGNORE_INDEX) & ((labels < 0) | (labels >= k))
    if bad.any():
        raise ValueError(f"label {int(labels[bad][0])} out of range for {k} classes")
    return _apply("cross_entropy", lambda x: _ce_fwd(x, labels), (logits,))
