"""Dense-tensor numerics with reverse-mode automatic differentiation.

The engine is deliberately small: eager numpy forward computation plus a
:class:`Tape` that records one backward closure per executed operation.
Replaying the tape in reverse applies the chain rule. Everything a small
CNN and the statistics-matching losses need is here: conv2d, relu,
maxpool2, pooling, dense, per-channel statistics, elementwise arithmetic,
reductions, an augmentation gather, and an Adam step.

Default precision is float32; float64 is supported so analytic gradients
can be checked against finite differences without being noise-dominated.
Reductions run in fixed row-major order, so repeated runs on identical
inputs are bit-identical.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    DegenerateInputError,
    DimensionError,
    NumericError,
    StateError,
)

FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """N-dimensional array with an optional gradient slot.

    ``data`` is always a contiguous float32 or float64 numpy array.
    ``grad`` is populated by :func:`backward` for every tensor with
    ``requires_grad=True`` that participated in the recorded forward.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of executed differentiable operations.

    Use as a context manager; operations executed inside the block are
    recorded. :func:`backward` replays the record in reverse exactly once;
    a second replay without :meth:`reset` raises :class:`StateError`.
    """

    def __init__(self):
        self._entries: list[tuple[Callable[[], None], tuple[Tensor, ...]]] = []
        self._output_ids: set[int] = set()
        self._touched: list[Tensor] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _LOCAL.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _LOCAL.stack.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, backward_fn: Callable[[], None], outputs: tuple[Tensor, ...]) -> None:
        self._entries.append((backward_fn, outputs))
        for out in outputs:
            self._output_ids.add(id(out))

    def accumulate(self, tensor: Tensor, grad: np.ndarray) -> None:
        """Add ``grad`` into ``tensor.grad``, allocating on first use."""
        if not tensor.requires_grad:
            return
        if tensor.grad is None:
            tensor.grad = np.zeros_like(tensor.data)
            self._touched.append(tensor)
        tensor.grad += grad

    def produced(self, tensor: Tensor) -> bool:
        return id(tensor) in self._output_ids

    def reset(self) -> None:
        """Re-arm the tape for another backward pass; zeroes touched grads."""
        for t in self._touched:
            t.grad = None
        self._touched.clear()
        self._consumed = False


class _TapeStack(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []


_LOCAL = _TapeStack()


def _active_tape() -> Tape | None:
    return _LOCAL.stack[-1] if _LOCAL.stack else None


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate gradients by replaying ``tape`` in reverse.

    ``loss`` must be a scalar produced through ``tape``. Gradients for
    tensors used multiple times accumulate additively. Calling twice on
    the same tape without ``tape.reset()`` is an error.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if tape._consumed:
        raise StateError("backward already ran on this tape; call reset() first")
    if not tape.produced(loss):
        raise ContractError("loss was not produced through this tape")
    tape._consumed = True
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
        tape._touched.append(loss)
    loss.grad += np.ones_like(loss.data)
    for fn, outputs in reversed(tape._entries):
        if any(out.grad is not None for out in outputs):
            fn()


def _out(data: np.ndarray, *inputs: Tensor) -> Tensor:
    """Wrap an op result, checking finiteness and propagating grad need."""
    if not np.isfinite(data).all():
        raise NumericError("operation produced NaN/Inf from finite inputs (overflow)")
    req = any(t.requires_grad for t in inputs)
    return Tensor(data, requires_grad=req)


def _grad_for(out: Tensor) -> np.ndarray:
    return out.grad if out.grad is not None else np.zeros_like(out.data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _same_dtype(*tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise DimensionError(f"mixed dtypes in one operation: {sorted(map(str, dtypes))}")


# ---------------------------------------------------------------------------
# elementwise arithmetic and reductions
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    out = _out(a.data + b.data, a, b)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def bwd():
            g = _grad_for(out)
            tape.accumulate(a, _unbroadcast(g, a.shape))
            tape.accumulate(b, _unbroadcast(g, b.shape))
        tape.record(bwd, (out,))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    out = _out(a.data - b.data, a, b)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def bwd():
            g = _grad_for(out)
            tape.accumulate(a, _unbroadcast(g, a.shape))
            tape.accumulate(b, -_unbroadcast(g, b.shape))
        tape.record(bwd, (out,))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    out = _out(a.data * b.data, a, b)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        a_data, b_data = a.data, b.data
        def bwd():
            g = _grad_for(out)
            tape.accumulate(a, _unbroadcast(g * b_data, a.shape))
            tape.accumulate(b, _unbroadcast(g * a_data, b.shape))
        tape.record(bwd, (out,))
    return out


def square(a: Tensor) -> Tensor:
    out = _out(a.data * a.data, a)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        a_data = a.data
        def bwd():
            tape.accumulate(a, 2.0 * a_data * _grad_for(out))
        tape.record(bwd, (out,))
    return out


def scale(a: Tensor, factor: float) -> Tensor:
    out = _out(a.data * a.dtype.type(factor), a)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        f = a.dtype.type(factor)
        def bwd():
            tape.accumulate(a, f * _grad_for(out))
        tape.record(bwd, (out,))
    return out


def sum_all(a: Tensor) -> Tensor:
    out = _out(a.data.sum(dtype=a.dtype), a)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def bwd():
            tape.accumulate(a, np.full_like(a.data, _grad_for(out)))
        tape.record(bwd, (out,))
    return out


def mean_all(a: Tensor) -> Tensor:
    if a.size == 0:
        raise DegenerateInputError("mean of an empty tensor")
    n = a.size
    out = _out(a.data.sum(dtype=a.dtype) / a.dtype.type(n), a)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def bwd():
            tape.accumulate(a, np.full_like(a.data, _grad_for(out) / a.dtype.type(n)))
        tape.record(bwd, (out,))
    return out


def sum_axis(a: Tensor, axis: int) -> Tensor:
    out = _out(a.data.sum(axis=axis, dtype=a.dtype), a)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def bwd():
            tape.accumulate(a, np.expand_dims(_grad_for(out), axis) * np.ones_like(a.data))
        tape.record(bwd, (out,))
    return out


# ---------------------------------------------------------------------------
# network blocks
# ---------------------------------------------------------------------------


def _conv_cols(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Extract (N, C*kh*kw, ho*wo) patch matrix from a padded input."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return view.reshape(n, c * kh * kw, ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over an N,C,H,W batch.

    Output spatial size is floor((H + 2p - kh)/stride) + 1. Backward
    produces gradients for the input, the weight, and the bias.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}"
        )
    n, c, h, w = x.shape
    k, wc, kh, kw = weight.shape
    if c != wc:
        raise DimensionError(
            f"conv2d channel mismatch: input {x.shape} has {c} channels, weight {weight.shape} expects {wc}"
        )
    if bias.shape != (k,):
        raise DimensionError(f"conv2d bias must have shape ({k},), got {bias.shape}")
    if stride < 1:
        raise ConfigError(f"conv2d stride must be >= 1, got {stride}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"kernel {kh}x{kw} exceeds padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    _same_dtype(x, weight, bias)

    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _conv_cols(xp, kh, kw, stride, ho, wo)
    w2 = weight.data.reshape(k, c * kh * kw)
    out_data = (w2 @ cols + bias.data[:, None]).reshape(n, k, ho, wo)
    out = _out(out_data, x, weight, bias)

    tape = _active_tape()
    if tape is not None and out.requires_grad:
        cols_saved = np.ascontiguousarray(cols) if weight.requires_grad else None

        def bwd():
            g = _grad_for(out).reshape(n, k, ho * wo)
            if bias.requires_grad:
                tape.accumulate(bias, g.sum(axis=(0, 2)))
            if weight.requires_grad:
                gw = np.einsum("nkp,nmp->km", g, cols_saved).reshape(weight.shape)
                tape.accumulate(weight, gw)
            if x.requires_grad:
                gcols = (w2.T @ g).reshape(n, c, kh, kw, ho, wo)
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += gcols[:, :, i, j]
                if padding:
                    gxp = gxp[:, :, padding : padding + h, padding : padding + w]
                tape.accumulate(x, gxp)

        tape.record(bwd, (out,))
    return out


def relu(x: Tensor) -> Tensor:
    out = _out(np.maximum(x.data, 0), x)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        mask = x.data > 0
        def bwd():
            tape.accumulate(x, _grad_for(out) * mask)
        tape.record(bwd, (out,))
    return out


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped.

    Ties send the backward gradient to the first maximal element in
    row-major window order.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2 expects N,C,H,W input, got {x.shape}")
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise DimensionError(f"maxpool2 needs spatial extent >= 2, got {h}x{w}")
    cropped = x.data[:, :, : 2 * h2, : 2 * w2]
    windows = cropped.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = windows.argmax(axis=-1)
    out = _out(np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0], x)

    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def bwd():
            g = _grad_for(out)
            gwin = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
            np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
            gx = np.zeros_like(x.data)
            gx[:, :, : 2 * h2, : 2 * w2] = (
                gwin.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
            )
            tape.accumulate(x, gx)
        tape.record(bwd, (out,))
    return out


def avgpool_global(x: Tensor) -> Tensor:
    """Mean over all spatial positions: N,C,H,W -> N,C."""
    if x.data.ndim != 4:
        raise DimensionError(f"avgpool_global expects N,C,H,W input, got {x.shape}")
    n, c, h, w = x.shape
    if h * w == 0:
        raise DegenerateInputError("avgpool_global over empty spatial extent")
    out = _out(x.data.mean(axis=(2, 3), dtype=x.dtype), x)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def bwd():
            g = _grad_for(out) / x.dtype.type(h * w)
            tape.accumulate(x, np.broadcast_to(g[:, :, None, None], x.shape).copy())
        tape.record(bwd, (out,))
    return out


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map N,F -> N,G with weight of shape (F, G)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise DimensionError(f"dense expects 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"dense feature mismatch: input {x.shape} vs weight {weight.shape}"
        )
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"dense bias must have shape ({weight.shape[1]},), got {bias.shape}")
    _same_dtype(x, weight, bias)
    out = _out(x.data @ weight.data + bias.data, x, weight, bias)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        x_data, w_data = x.data, weight.data
        def bwd():
            g = _grad_for(out)
            if x.requires_grad:
                tape.accumulate(x, g @ w_data.T)
            if weight.requires_grad:
                tape.accumulate(weight, x_data.T @ g)
            if bias.requires_grad:
                tape.accumulate(bias, g.sum(axis=0))
        tape.record(bwd, (out,))
    return out


def channel_affine(x: Tensor, scale_vec: np.ndarray, shift_vec: np.ndarray) -> Tensor:
    """Per-channel y = x * scale + shift with constant coefficients.

    Used for input normalization; gradients flow to ``x`` only.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"channel_affine expects N,C,H,W input, got {x.shape}")
    c = x.shape[1]
    s = np.asarray(scale_vec, dtype=x.dtype).reshape(1, c, 1, 1)
    b = np.asarray(shift_vec, dtype=x.dtype).reshape(1, c, 1, 1)
    out = _out(x.data * s + b, x)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def bwd():
            tape.accumulate(x, _grad_for(out) * s)
        tape.record(bwd, (out,))
    return out


def channel_stats(x: Tensor, over_batch: bool) -> tuple[Tensor, Tensor]:
    """Per-channel mean and population variance of an N,C,H,W tensor.

    ``over_batch=False`` reduces each sample's H*W elements (outputs N,C);
    ``over_batch=True`` reduces all N*H*W elements per channel (outputs C).
    Both outputs are differentiable with respect to the input.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"channel_stats expects N,C,H,W input, got {x.shape}")
    n, c, h, w = x.shape
    if h * w == 0:
        raise DegenerateInputError("channel_stats over empty spatial extent")
    if over_batch and n == 0:
        raise DegenerateInputError("channel_stats over an empty batch")
    axes = (0, 2, 3) if over_batch else (2, 3)
    m = n * h * w if over_batch else h * w
    mu = x.data.mean(axis=axes, dtype=x.dtype)
    expand = mu[None, :, None, None] if over_batch else mu[:, :, None, None]
    centered = x.data - expand
    var = (centered * centered).mean(axis=axes, dtype=x.dtype)
    mean_t = _out(mu, x)
    var_t = _out(var, x)

    tape = _active_tape()
    if tape is not None and (mean_t.requires_grad or var_t.requires_grad):
        inv_m = x.dtype.type(1.0 / m)

        def bwd():
            gx = np.zeros_like(x.data)
            if mean_t.grad is not None:
                gm = mean_t.grad[None, :, None, None] if over_batch else mean_t.grad[:, :, None, None]
                gx += gm * inv_m
            if var_t.grad is not None:
                gv = var_t.grad[None, :, None, None] if over_batch else var_t.grad[:, :, None, None]
                gx += gv * (2.0 * inv_m) * centered
            tape.accumulate(x, gx)

        tape.record(bwd, (mean_t, var_t))
    return mean_t, var_t


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over a batch of integer labels."""
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects N,G logits, got {logits.shape}")
    n, g = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= g:
        raise ConfigError(f"labels must lie in [0, {g}), got range [{labels.min()}, {labels.max()}]")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(denom)
    out = _out(-log_probs[np.arange(n), labels].mean(dtype=logits.dtype), logits)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        softmax = exp / denom
        def bwd():
            grad = softmax.copy()
            grad[np.arange(n), labels] -= 1.0
            tape.accumulate(logits, grad * (_grad_for(out) / logits.dtype.type(n)))
        tape.record(bwd, (out,))
    return out


def pad_crop_flip(x: Tensor, shift: int, offsets: np.ndarray, flips: np.ndarray) -> Tensor:
    """Translation-jitter augmentation, differentiable back to the input.

    Each image is padded by ``shift`` pixels with edge replication, cropped
    back to its original size at a per-image offset in [0, 2*shift], and
    optionally flipped horizontally. Implemented as a per-image gather so
    the backward pass is an exact scatter-add.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"pad_crop_flip expects N,C,H,W input, got {x.shape}")
    n, c, h, w = x.shape
    offsets = np.asarray(offsets, dtype=np.int64).reshape(n, 2)
    flips = np.asarray(flips, dtype=bool).reshape(n)
    if shift < 0:
        raise ConfigError(f"shift must be >= 0, got {shift}")
    if offsets.min() < 0 or offsets.max() > 2 * shift:
        raise ConfigError("offsets must lie in [0, 2*shift]")

    rows = np.arange(h)
    cols_base = np.arange(w)
    src_y = np.empty((n, h), dtype=np.int64)
    src_x = np.empty((n, w), dtype=np.int64)
    for i in range(n):
        src_y[i] = np.clip(rows + offsets[i, 0] - shift, 0, h - 1)
        sx = np.clip(cols_base + offsets[i, 1] - shift, 0, w - 1)
        src_x[i] = sx[::-1] if flips[i] else sx
    out_data = np.empty_like(x.data)
    for i in range(n):
        out_data[i] = x.data[i][:, src_y[i][:, None], src_x[i][None, :]]
    out = _out(out_data, x)

    tape = _active_tape()
    if tape is not None and out.requires_grad:
        chan = np.arange(c)[:, None, None]
        def bwd():
            g = _grad_for(out)
            gx = np.zeros_like(x.data)
            for i in range(n):
                np.add.at(gx[i], (chan, src_y[i][None, :, None], src_x[i][None, None, :]), g[i])
            tape.accumulate(x, gx)
        tape.record(bwd, (out,))
    return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment accumulators for one tensor."""

    m: np.ndarray
    v: np.ndarray

    @classmethod
    def for_array(cls, array: np.ndarray) -> "AdamState":
        return cls(m=np.zeros_like(array), v=np.zeros_like(array))


def adam_step(
    values: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
    step_index: int,
) -> None:
    """One bias-corrected Adam update, applied to ``values`` in place."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be > 0, got {lr}")
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise ConfigError(f"betas must lie in [0, 1), got ({beta1}, {beta2})")
    if step_index < 1:
        raise ConfigError(f"step_index must be >= 1, got {step_index}")
    if state.m.shape != values.shape or state.v.shape != values.shape:
        raise DimensionError("Adam state shape does not match the tensor")
    dt = values.dtype.type
    b1, b2 = dt(beta1), dt(beta2)
    state.m *= b1
    state.m += (dt(1) - b1) * grad
    state.v *= b2
    state.v += (dt(1) - b2) * (grad * grad)
    m_hat = state.m / (dt(1) - b1 ** dt(step_index))
    v_hat = state.v / (dt(1) - b2 ** dt(step_index))
    values -= dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps))


@dataclass
class AdamOptimizer:
    """Adam over a list of (values, grad-getter) pairs; keeps its own step count."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_index: int = 0
    states: dict[int, AdamState] = field(default_factory=dict)

    def step(self, params: list[Tensor]) -> None:
        self.step_index += 1
        for i, p in enumerate(params):
            if p.grad is None:
                continue
            if i not in self.states:
                self.states[i] = AdamState.for_array(p.data)
            adam_step(p.data, p.grad, self.states[i], self.lr, self.beta1, self.beta2, self.eps, self.step_index)
