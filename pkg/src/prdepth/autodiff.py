"""A small reverse-mode autodiff engine over float64 numpy arrays.

Operations run eagerly. While a :class:`Tape` is active, every operation with
a gradient-requiring input appends a node to it; :func:`backward` walks the
tape in reverse, which is a valid topological order by construction.

Images are channel-first, unbatched: ``C x H x W``.
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


_nan_check = False


def set_nan_check(enabled: bool) -> None:
    """Raise ``FloatingPointError`` whenever an op produces a non-finite value."""
    global _nan_check
    _nan_check = bool(enabled)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: Tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Records operations for one backward pass. Not shareable between threads."""

    def __init__(self):
        self.nodes: List[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if _nan_check and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced")
    needs = any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = needs
    stack = _tape_stack()
    if needs and stack:
        stack[-1].nodes.append(_Node(out, tuple(parents), backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    pending: Dict[int, Tuple[Tensor, np.ndarray]] = {id(loss): (loss, np.ones_like(loss.data))}
    seen = set()
    for node in reversed(tape.nodes):
        key = id(node.out)
        assert key not in seen, "tensor recorded twice on the tape"
        seen.add(key)
        entry = pending.pop(key, None)
        if entry is None:
            continue
        for parent, pg in zip(node.parents, node.backward(entry[1])):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in pending:
                pending[pid] = (parent, pending[pid][1] + pg)
            else:
                pending[pid] = (parent, pg)
    # whatever is still pending was never produced on this tape: a leaf
    for tensor, g in pending.values():
        if tensor is loss and not tape.nodes:
            continue
        tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,))


def scaled_tanh(x: Tensor) -> Tensor:
    """``0.5 * tanh(x)``, bounded to (-0.5, 0.5)."""
    t = np.tanh(x.data)
    return _make(0.5 * t, (x,), lambda g: (0.5 * g * (1.0 - t * t),))


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


# --- reductions ------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _make(np.array(x.data.mean()), (x,), lambda g: (np.full(shape, g / n),))


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over the pixels where ``mask`` is true; other values are never read."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("mask selects no pixels")
    value = x.data[mask].sum() / n

    def grad_fn(g):
        out = np.zeros(x.shape)
        out[mask] = g / n
        return (out,)

    return _make(np.array(value), (x,), grad_fn)


def sum_channels(x: Tensor) -> Tensor:
    return _make(x.data.sum(axis=0), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def max_channels(x: Tensor) -> Tensor:
    """Per-pixel maximum over the channel axis; gradient goes to the first maximiser."""
    idx = np.argmax(x.data, axis=0)
    out = np.take_along_axis(x.data, idx[None], axis=0)[0]

    def grad_fn(g):
        gx = np.zeros(x.shape)
        np.put_along_axis(gx, idx[None], g[None], axis=0)
        return (gx,)

    return _make(out, (x,), grad_fn)


# --- channel ops -----------------------------------------------------------


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    splits = np.cumsum([t.shape[0] for t in tensors])[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=0),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=0)),
    )


def _softmax(data: np.ndarray) -> np.ndarray:
    z = data - data.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def softmax_channels(x: Tensor) -> Tensor:
    s = _softmax(x.data)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=0, keepdims=True)),)

    return _make(s, (x,), grad_fn)


def cross_entropy_channels(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-pixel ``-log softmax(logits)[label]`` for 0-based integer ``labels``.

    Labels outside ``[0, C)`` are allowed only where the caller masks the
    result; they are clipped so the value stays finite.
    """
    C = logits.shape[0]
    labels = np.clip(np.asarray(labels, dtype=np.int64), 0, C - 1)
    z = logits.data - logits.data.max(axis=0, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=0))
    picked = np.take_along_axis(z, labels[None], axis=0)[0]
    out = logsumexp - picked

    def grad_fn(g):
        gx = _softmax(logits.data) * g[None]
        onehot = np.zeros(logits.shape)
        np.put_along_axis(onehot, labels[None], 1.0, axis=0)
        return (gx - onehot * g[None],)

    return _make(out, (logits,), grad_fn)


# --- spatial ops -----------------------------------------------------------


def _box_sum(a: np.ndarray, radius: int) -> np.ndarray:
    """Sum over the clipped (2r+1)^2 window on the last two axes."""
    out = a
    for axis in (-2, -1):
        n = out.shape[axis]
        c = np.cumsum(out, axis=axis)
        pad_shape = list(c.shape)
        pad_shape[axis] = 1
        c = np.concatenate([np.zeros(pad_shape), c], axis=axis)
        idx = np.arange(n)
        hi = np.minimum(idx + radius + 1, n)
        lo = np.maximum(idx - radius, 0)
        out = np.take(c, hi, axis=axis) - np.take(c, lo, axis=axis)
    return out


def box_count(shape: Tuple[int, int], radius: int) -> np.ndarray:
    """Number of pixels inside each clipped window."""
    return _box_sum(np.ones(shape), radius)


def box_mean(a: np.ndarray, radius: int) -> np.ndarray:
    return _box_sum(a, radius) / box_count(a.shape[-2:], radius)


def avgpool(x: Tensor, radius: int) -> Tensor:
    """Box mean over a (2r+1)^2 window that shrinks at the image border."""
    count = box_count(x.shape[-2:], radius)
    # window membership is symmetric, so the adjoint is a box sum of g/count
    return _make(_box_sum(x.data, radius) / count, (x,), lambda g: (_box_sum(g / count, radius),))


def _pad(a: np.ndarray, p: int) -> np.ndarray:
    return np.pad(a, ((0, 0), (p, p), (p, p))) if p else a


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a ``C_in x H x W`` input with ``C_out x C_in x k x k`` weights."""
    C, H, W = x.shape
    C_out, C_in, k, k2 = w.shape
    if C_in != C or k != k2:
        raise ValueError(f"weight {w.shape} does not match input {x.shape}")
    if k % 2 == 0:
        raise ValueError("conv2d kernel size must be odd")
    span_h, span_w = H + 2 * padding - k, W + 2 * padding - k
    if span_h < 0 or span_w < 0 or stride < 1:
        raise ValueError(f"kernel {k} does not fit input {x.shape} with padding {padding}")
    # trailing rows/cols that do not fill a whole stride are dropped
    Ho, Wo = span_h // stride + 1, span_w // stride + 1

    xp = _pad(x.data, padding)
    cols = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]  # C,Ho,Wo,k,k
    out = np.tensordot(w.data, cols, axes=([1, 2, 3], [0, 3, 4]))
    parents: Tuple[Tensor, ...] = (x, w)
    if b is not None:
        out = out + b.data[:, None, None]
        parents = (x, w, b)

    def grad_fn(g):
        gw = np.tensordot(g, cols, axes=([1, 2], [1, 2]))  # C_out,C,k,k
        gxp = np.zeros_like(xp)
        for u in range(k):
            for v in range(k):
                gxp[:, u:u + stride * Ho:stride, v:v + stride * Wo:stride] += np.tensordot(
                    w.data[:, :, u, v], g, axes=([0], [0])
                )
        gx = gxp[:, padding:padding + H, padding:padding + W] if padding else gxp
        grads = (gx, gw)
        if b is not None:
            grads += (g.sum(axis=(1, 2)),)
        return grads

    return _make(out, parents, grad_fn)


def deconv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution with ``C_in x C_out x k x k`` weights.

    Output size is ``(H - 1) * stride - 2 * padding + k``.
    """
    C, H, W = x.shape
    C_in, C_out, k, k2 = w.shape
    if C_in != C or k != k2:
        raise ValueError(f"weight {w.shape} does not match input {x.shape}")
    Hf, Wf = (H - 1) * stride + k, (W - 1) * stride + k
    Ho, Wo = Hf - 2 * padding, Wf - 2 * padding
    if Ho <= 0 or Wo <= 0:
        raise ValueError("padding removes the whole output")

    full = np.zeros((C_out, Hf, Wf))
    for u in range(k):
        for v in range(k):
            full[:, u:u + stride * H:stride, v:v + stride * W:stride] += np.tensordot(
                w.data[:, :, u, v], x.data, axes=([0], [0])
            )
    out = full[:, padding:padding + Ho, padding:padding + Wo]
    parents: Tuple[Tensor, ...] = (x, w)
    if b is not None:
        out = out + b.data[:, None, None]
        parents = (x, w, b)

    def grad_fn(g):
        gfull = np.zeros((C_out, Hf, Wf))
        gfull[:, padding:padding + Ho, padding:padding + Wo] = g
        gx = np.zeros(x.shape)
        gw = np.zeros(w.shape)
        for u in range(k):
            for v in range(k):
                gs = gfull[:, u:u + stride * H:stride, v:v + stride * W:stride]
                gx += np.tensordot(w.data[:, :, u, v], gs, axes=([1], [0]))
                gw[:, :, u, v] = np.tensordot(x.data, gs, axes=([1, 2], [1, 2]))
        grads = (gx, gw)
        if b is not None:
            grads += (g.sum(axis=(1, 2)),)
        return grads

    return _make(np.ascontiguousarray(out), parents, grad_fn)


# --- gradient checking -----------------------------------------------------


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    entries: Optional[Mapping[int, np.ndarray]] = None,
    floor: float = 1e-8,
) -> float:
    """Worst relative error between the tape gradient and central differences.

    ``fn`` maps the input tensors to a scalar tensor. The error for each input
    is ``||analytic - numeric|| / max(||analytic||, ||numeric||, floor)``, so
    gradients that are zero up to round-off compare absolutely. ``entries``
    optionally restricts the check for input ``i`` to a set of flat indices.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = fn(*inputs)
    backward(tape, loss)

    worst = 0.0
    for i, t in enumerate(inputs):
        analytic = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1)
        flat = t.data.reshape(-1)
        idx = np.arange(t.size) if entries is None or i not in entries else np.asarray(entries[i], dtype=np.int64)
        numeric = np.empty(idx.size)
        for j, n in enumerate(idx):
            orig = flat[n]
            flat[n] = orig + h
            up = fn(*inputs).item()
            flat[n] = orig - h
            down = fn(*inputs).item()
            flat[n] = orig
            numeric[j] = (up - down) / (2 * h)
        a = analytic[idx]
        scale = max(np.linalg.norm(a), np.linalg.norm(numeric), floor)
        worst = max(worst, float(np.linalg.norm(a - numeric) / scale))
    return worst


# --- checkpoints -----------------------------------------------------------

CHECKPOINT_MAGIC = b"PRDC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: Mapping[str, np.ndarray | Tensor]) -> None:
    """Write named float64 arrays in the PRDC little-endian binary layout."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for name, value in params.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a PRDC checkpoint")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    params: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<I")
        if pos + name_len > len(blob):
            raise CheckpointError("truncated checkpoint")
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = take("<I")
        shape = take(f"<{rank}I")
        n = int(np.prod(shape, dtype=np.int64))
        if pos + 8 * n > len(blob):
            raise CheckpointError("truncated checkpoint")
        params[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * n
    if pos != len(blob):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return params

