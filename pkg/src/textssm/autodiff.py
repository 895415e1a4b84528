"""Minimal dense tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are appended to it in
execution order, so replaying the tape backwards is already a topological
traversal. Each record declares how many scalars it keeps alive for its
adjoint; :data:`tracker` sums those counts, which gives an allocator-free
measure of activation memory.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_state = threading.local()


class TapeError(RuntimeError):
    """Raised for misuse of the tape (double backward, detached loss...)."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward operation produces NaN or Inf from finite inputs."""


class ActivationCapExceeded(MemoryError):
    """Raised when retained activations would exceed the tracker cap."""


class ActivationTracker:
    """Counts scalars retained for the backward pass.

    ``cap`` (in scalars) turns an over-budget allocation into
    :class:`ActivationCapExceeded` instead of an actual out-of-memory.
    """

    def __init__(self) -> None:
        self.live = 0
        self.peak = 0
        self.cap: int | None = None

    def reset(self, cap: int | None = None) -> None:
        self.live = 0
        self.peak = 0
        self.cap = cap

    def reserve(self, n: int) -> None:
        """Fail early if ``n`` more scalars would not fit under the cap."""
        if self.cap is not None and self.live + n > self.cap:
            raise ActivationCapExceeded(
                f"retaining {n} more scalars would exceed cap {self.cap} (live {self.live})"
            )

    def acquire(self, n: int) -> None:
        self.reserve(n)
        self.live += n
        if self.live > self.peak:
            self.peak = self.live

    def release(self, n: int) -> None:
        self.live -= n


tracker = ActivationTracker()


def _check_finite(arr: np.ndarray, op: str) -> None:
    # one reduction catches nan/inf; overflow of the sum itself falls back to the full test
    if not np.isfinite(arr.sum()) and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


@dataclass
class _Record:
    output: "Tensor"
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    saved: int
    name: str


@dataclass
class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; operations run inside the block are recorded.
    A tape supports exactly one :meth:`backward` call.
    """

    records: list[_Record] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def record(self, output, inputs, backward, saved, name) -> None:
        tracker.acquire(saved)
        self.records.append(_Record(output, tuple(inputs), backward, saved, name))
        output._tape = self

    def backward(self, loss: "Tensor") -> None:
        if self.consumed:
            raise TapeError("backward already called on this tape; start a new Tape")
        if loss.data.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape (detached loss)")
        self.consumed = True
        adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = adjoints.pop(id(rec.output), None)
            if g is not None:
                grads = rec.backward(g)
                for inp, gi in zip(rec.inputs, grads):
                    if gi is None or not inp.requires_grad:
                        continue
                    if inp._tape is self:
                        prev = adjoints.get(id(inp))
                        adjoints[id(inp)] = gi if prev is None else prev + gi
                    else:
                        inp._accumulate(gi)
            tracker.release(rec.saved)
        self.records.clear()


def _tape_stack() -> list[Tape]:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Dense array with an optional gradient slot."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind not in "f":
            arr = arr.astype(DEFAULT_DTYPE)
        elif dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        g = _unbroadcast(g, self.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        if self._tape is None:
            raise TapeError("tensor is not on any tape (detached loss)")
        self._tape.backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

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
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_axis(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_axis(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _wants_grad(*ts: Tensor) -> bool:
    return any(t.requires_grad for t in ts)


def _make(out: np.ndarray, inputs: Sequence[Tensor], backward, saved: int, name: str) -> Tensor:
    """Wrap ``out`` and record it on the active tape when gradients are needed."""
    _check_finite(out, name)
    tape = active_tape()
    needs = _wants_grad(*inputs)
    t = Tensor(out)
    if tape is not None and needs:
        t.requires_grad = True
        t.grad = None
        tape.record(t, inputs, backward, saved, name)
    return t


def parameter(data, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), 0, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), 0, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    saved = (bd.size if a.requires_grad else 0) + (ad.size if b.requires_grad else 0)
    return _make(ad * bd, (a, b), backward, saved, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (
            _unbroadcast(g / bd, ad.shape),
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), backward, bd.size + (out.size if b.requires_grad else 0), "div")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), out.size, "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), xd.size, "log")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), out.size, "sqrt")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only, so neither branch overflows
    e = np.exp(-np.abs(x))
    return np.where(np.asarray(x) < 0, e, 1.0) / (1.0 + e)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(x) -> Tensor:
    """log(1 + exp(x)) in the overflow-safe form max(x, 0) + log1p(exp(-|x|))."""
    x = as_tensor(x)
    xd = x.data
    return _make(_softplus(xd), (x,), lambda g: (g * _sigmoid(xd),), xd.size, "softplus")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), s.size, "sigmoid")


def silu(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    s = _sigmoid(xd)

    def backward(g):
        return (g * (s + xd * s * (1.0 - s)),)

    return _make(xd * s, (x,), backward, 2 * xd.size, "silu")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), out.size, "tanh")


def clamp(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    mask = (xd >= lo) & (xd <= hi)
    return _make(np.clip(xd, lo, hi), (x,), lambda g: (g * mask,), xd.size, "clamp")


# ---------------------------------------------------------------- reductions / shape


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_axis(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(out), (x,), backward, 0, "sum")


def mean_axis(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    return sum_axis(x, axes, keepdims) * (1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), 0, "reshape")


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), 0, "transpose")


def swapaxes(x, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def flip(x, axis: int) -> Tensor:
    x = as_tensor(x)
    return _make(np.flip(x.data, axis).copy(), (x,), lambda g: (np.flip(g, axis),), 0, "flip")


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    out = np.broadcast_to(x.data, shape)
    return _make(np.ascontiguousarray(out), (x,), lambda g: (_unbroadcast(g, old),), 0, "broadcast")


def index(x, idx) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(x.data[idx]), (x,), backward, 0, "index")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ndim = ts[0].ndim
    ax = axis % ndim
    for t in ts[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise ValueError(
                f"concat: shapes {[t.shape for t in ts]} differ off axis {axis}"
            )
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=ax)
    return _make(out, ts, lambda g: tuple(np.split(g, splits, axis=ax)), 0, "concat")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Batched contraction ``a[..., m, k] @ b[..., k, n]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ValueError("matmul needs at least 1-d operands")
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as e:
        raise ValueError(f"matmul batch extents not broadcastable: {a.shape} @ {b.shape}") from e
    ad, bd = a.data, b.data
    saved = (bd.size if a.requires_grad else 0) + (ad.size if b.requires_grad else 0)
    if active_tape() is not None and _wants_grad(a, b):
        tracker.reserve(saved + int(np.prod(batch)) * a.shape[-2] * b.shape[-1])

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), backward, saved, "matmul")


def linear(x, W, b=None) -> Tensor:
    """Affine map over the last axis: ``x @ W + b`` with ``W`` shaped (in, out)."""
    x, W = as_tensor(x), as_tensor(W)
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight rows {W.shape[0]} (x {x.shape}, W {W.shape})")
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), W)
    y = reshape(y, lead + (W.shape[1],))
    return y if b is None else add(y, b)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), backward, s.size, "softmax")


def rms_norm(x, scale, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * scale over the last axis."""
    x, scale = as_tensor(x), as_tensor(scale)
    xd = x.data
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xn = xd * inv
    out = xn * scale.data

    def backward(g):
        gs = _unbroadcast(g * xn, scale.shape) if scale.requires_grad else None
        gxn = g * scale.data
        gx = inv * (gxn - xn * (gxn * xn).mean(axis=-1, keepdims=True))
        return gx, gs

    return _make(out, (x, scale), backward, xd.size + inv.size, "rms_norm")


def causal_depthwise_conv(x, w, axis: int = -2) -> Tensor:
    """Per-channel causal convolution along ``axis``; channels on the last axis.

    ``y[t, c] = sum_k w[k, c] * x[t - K + 1 + k, c]`` with zero left padding,
    so ``w[-1]`` weights the current step.
    """
    x, w = as_tensor(x), as_tensor(w)
    ax = axis % x.ndim
    K = w.shape[0]
    xm = np.moveaxis(x.data, ax, 0)
    L = xm.shape[0]
    pad = np.concatenate([np.zeros((K - 1,) + xm.shape[1:], dtype=xm.dtype), xm], axis=0)
    wd = w.data
    out = np.zeros_like(xm)
    for k in range(K):
        out += pad[k : k + L] * wd[k]

    def backward(g):
        gm = np.moveaxis(g, ax, 0)
        gpad = np.zeros_like(pad)
        gw = np.zeros_like(wd) if w.requires_grad else None
        for k in range(K):
            gpad[k : k + L] += gm * wd[k]
            if gw is not None:
                gw[k] = (gm * pad[k : k + L]).reshape(-1, wd.shape[-1]).sum(axis=0)
        return np.moveaxis(gpad[K - 1 :], 0, ax), gw

    return _make(np.moveaxis(out, 0, ax), (x, w), backward, pad.size, "conv")


# ---------------------------------------------------------------- gradient checking


def finite_diff_check(
    f: Callable[[], Tensor],
    leaves: Iterable[Tensor],
    step: float = 1e-5,
    max_elems: int | None = None,
    rng: np.random.Generator | None = None,
    richardson: bool = False,
) -> float:
    """Compare tape gradients with central differences.

    ``f`` rebuilds the scalar loss from the current leaf values. Returns the
    max over checked elements of ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)``.
    ``max_elems`` limits the check to a random subset of each leaf.
    ``richardson`` combines steps ``h`` and ``h/2`` as ``(4 D(h/2) - D(h)) / 3``,
    cancelling the O(h^2) truncation term; useful when some gradient entries
    are tiny and a plain step cannot balance truncation against roundoff.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    leaves = list(leaves)
    for leaf in leaves:
        leaf.zero_grad()
    with Tape() as tape:
        loss = f()
    _check_finite(loss.data, "finite_diff_check loss")
    if loss._tape is tape:
        tape.backward(loss)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for leaf in leaves:
        g_ad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_elems is not None and flat.size > max_elems:
            idxs = rng.choice(flat.size, size=max_elems, replace=False)
        for i in idxs:
            orig = flat[i]

            def central(h):
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NonFiniteError("non-finite loss during finite differences")
                return (fp - fm) / (2 * h)

            g_fd = central(step)
            if richardson:
                g_fd = (4.0 * central(step / 2) - g_fd) / 3.0
            ga = g_ad.reshape(-1)[i]
            err = abs(ga - g_fd) / max(abs(ga), abs(g_fd), 1e-8)
            worst = max(worst, err)
    return worst
