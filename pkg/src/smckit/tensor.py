"""Dense tensors with a reverse-mode gradient tape.

Operations record themselves on the innermost active :class:`GradientTape`
of the calling thread when at least one input requires a gradient.  Without
an active tape every op is a plain numpy computation, which is how the
no-grad channel forwards of the trainer run.

Example::

    w = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    with GradientTape() as tape:
        loss = tsum(mul(w, w))
    (g,) = backward(tape, loss, [w])   # -> [2., 4., 6.]
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "GradientTape",
    "ParameterSet",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "affine",
    "conv2d",
    "maxpool2d",
    "relu",
    "add",
    "scale",
    "mul",
    "reshape",
    "flatten",
    "log_softmax",
    "tsum",
    "backward",
    "sgd_step",
    "finite_difference_check",
    "checked_mode",
    "inject_fault",
    "OPS",
]

OPS = ("affine", "conv2d", "maxpool2d", "relu", "add", "scale", "mul", "reshape", "log_softmax", "sum")


class ShapeError(ValueError):
    def __init__(self, op: str, a: tuple, b: tuple, detail: str = ""):
        msg = f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


_ids = itertools.count()
_local = threading.local()
_checked = False
_faults: set[str] = set()


class Tensor:
    """An n-d float array that may take part in a gradient trace."""

    __slots__ = ("data", "requires_grad", "id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    # maps the output gradient to one gradient per input (None where not needed)
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class GradientTape:
    """Ordered log of differentiable ops for one forward trace."""

    records: list[Record] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "GradientTape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().remove(self)

    def produced(self) -> set[int]:
        return {r.output.id for r in self.records}


def _tape_stack() -> list[GradientTape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def _active_tape() -> GradientTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def checked_mode(enabled: bool = True):
    """Raise :class:`NonFiniteError` when any op receives NaN or Inf."""
    global _checked
    prev, _checked = _checked, enabled
    try:
        yield
    finally:
        _checked = prev


@contextlib.contextmanager
def inject_fault(op: str):
    """Corrupt the backward rule of ``op`` (negative control for gradient checks)."""
    if op not in ("relu", "maxpool2d", "conv2d", "affine", "log_softmax"):
        raise ValueError(f"no fault available for op {op!r}")
    _faults.add(op)
    try:
        yield
    finally:
        _faults.discard(op)


def _check(op: str, *arrays: np.ndarray) -> None:
    if not _checked:
        return
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"{op}: non-finite input")


def _emit(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, bw) -> Tensor:
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=track)
    if track:
        tape.records.append(Record(op, inputs, result, bw))
    return result


# ---------------------------------------------------------------------------
# forward ops


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` for x of shape (n, d), w (d, h), b (h,)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError("affine", x.shape, w.shape)
    if b.shape != (w.shape[1],):
        raise ShapeError("affine", w.shape, b.shape, "bias")
    _check("affine", x.data, w.data, b.data)
    xd, wd = x.data, w.data
    out = xd @ wd + b.data

    need_gx = x.requires_grad

    def bw(g):
        gx = g @ wd.T if need_gx else None
        if gx is not None and "affine" in _faults:
            gx = gx * 0.5
        return gx, xd.T @ g, g.sum(axis=0)

    return _emit("affine", (x, w, b), out, bw)


def conv2d(x: Tensor, w: Tensor, b: Tensor, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation with symmetric zero padding.

    x: (n, c, H, W); w: (o, c, kh, kw); b: (o,).  Output (n, o, H', W').
    Internally channels-last; the returned array is a channels-last buffer
    viewed as (n, o, H', W'), which the next conv consumes without copying.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    if b.shape != (w.shape[0],):
        raise ShapeError("conv2d", w.shape, b.shape, "bias")
    n, c, H, W = x.shape
    o, _, kh, kw = w.shape
    p = int(padding)
    Ho, Wo = H + 2 * p - kh + 1, W + 2 * p - kw + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError("conv2d", x.shape, w.shape, "kernel larger than padded input")
    _check("conv2d", x.data, w.data, b.data)
    xh = x.data.transpose(0, 2, 3, 1)
    if p:
        xh = np.pad(xh, ((0, 0), (p, p), (p, p), (0, 0)))
    # rows (n*Ho*Wo, kh*kw*c), channel fastest
    cols = sliding_window_view(xh, (kh, kw), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3).reshape(n * Ho * Wo, kh * kw * c)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(o, kh * kw * c)
    out = cols @ wmat.T
    out += b.data
    out = out.reshape(n, Ho, Wo, o).transpose(0, 3, 1, 2)
    need_gx = x.requires_grad

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * Ho * Wo, o)
        gw = (g2.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        if "conv2d" in _faults:
            gw = gw * 1.01
        gb = g2.sum(axis=0)
        if not need_gx:
            return None, gw, gb
        gcols = (g2 @ wmat).reshape(n, Ho, Wo, kh, kw, c)
        gxp = np.zeros((n, H + 2 * p, W + 2 * p, c), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + Ho, j:j + Wo, :] += gcols[:, :, :, i, j, :]
        return gxp[:, p:p + H, p:p + W, :].transpose(0, 3, 1, 2), gw, gb

    return _emit("conv2d", (x, w, b), out, bw)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties go to the first element of the
    window in row-major order."""
    x = as_tensor(x)
    if x.data.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError("maxpool2d", x.shape, (2, 2), "spatial extents must be even")
    _check("maxpool2d", x.data)
    n, c, H, W = x.shape
    win = x.data.transpose(0, 2, 3, 1).reshape(n, H // 2, 2, W // 2, 2, c)
    out = win.max(axis=(2, 4))

    def bw(g):
        gh = g.transpose(0, 2, 3, 1)
        gwin = np.zeros(win.shape, dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        ref = win.min(axis=(2, 4)) if "maxpool2d" in _faults else out
        for r, s in ((0, 0), (0, 1), (1, 0), (1, 1)):
            hit = win[:, :, r, :, s] == ref
            hit &= ~taken
            taken |= hit
            gwin[:, :, r, :, s] = gh * hit
        return (gwin.reshape(n, H, W, c).transpose(0, 3, 1, 2),)

    return _emit("maxpool2d", (x,), out.transpose(0, 3, 1, 2), bw)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    _check("relu", x.data)
    d = x.data
    out = np.maximum(d, 0)

    def bw(g):
        if "relu" in _faults:
            return (g,)
        return (g * (d > 0),)

    return _emit("relu", (x,), out, bw)


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum of two equally shaped tensors (``b`` may be a constant)."""
    a, b = as_tensor(a), as_tensor(b, dtype=None)
    if a.shape != b.shape:
        raise ShapeError("add", a.shape, b.shape)
    _check("add", a.data, b.data)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    _check("scale", x.data)
    c = float(c)
    return _emit("scale", (x,), x.data * c, lambda g: (g * c,))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product of two equally shaped tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)
    _check("mul", a.data, b.data)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    src = x.shape
    return _emit("reshape", (x,), out, lambda g: (g.reshape(src),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax over the last (class) axis, max-stabilized."""
    x = as_tensor(x)
    _check("log_softmax", x.data)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    probs = np.exp(out)

    def bw(g):
        if "log_softmax" in _faults:
            return (g,)
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax", (x,), out, bw)


def tsum(x: Tensor) -> Tensor:
    """Sum of all entries, as a 0-d tensor."""
    x = as_tensor(x)
    _check("sum", x.data)
    src = x.shape
    return _emit("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.broadcast_to(g, src),))


# ---------------------------------------------------------------------------
# reverse pass


def backward(tape: GradientTape, loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of the scalar ``loss`` with respect to each tensor in ``wrt``.

    Tensors the loss does not depend on get zero gradients.  A tape can be
    replayed only once.
    """
    wrt = list(wrt)
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward pass")
    if loss.id not in tape.produced() and all(loss.id != t.id for t in wrt):
        raise TapeError(f"loss node {loss.id} was not produced on this tape")
    tape.consumed = True

    keep = {t.id for t in wrt}
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        out_id = rec.output.id
        g = grads.get(out_id) if out_id in keep else grads.pop(out_id, None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            prev = grads.get(inp.id)
            grads[inp.id] = np.asarray(gi, dtype=inp.dtype) if prev is None else prev + gi
    return [grads[t.id] if t.id in grads else np.zeros_like(t.data) for t in wrt]


# ---------------------------------------------------------------------------
# parameters and optimizer


class ParameterSet:
    """Named trainable arrays with one momentum buffer each."""

    def __init__(self, values: Mapping[str, np.ndarray]):
        self.values: dict[str, np.ndarray] = {k: np.asarray(v) for k, v in values.items()}
        self.momentum: dict[str, np.ndarray] = {k: np.zeros_like(v) for k, v in self.values.items()}

    def names(self) -> list[str]:
        return list(self.values)

    def leaves(self) -> dict[str, Tensor]:
        """Fresh gradient-tracking leaf tensors viewing the current values."""
        return {k: Tensor(v, requires_grad=True, name=k) for k, v in self.values.items()}

    def copy(self) -> "ParameterSet":
        out = ParameterSet({k: v.copy() for k, v in self.values.items()})
        out.momentum = {k: v.copy() for k, v in self.momentum.items()}
        return out

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __len__(self) -> int:
        return len(self.values)

    def __iter__(self):
        return iter(self.values)

    def identical(self, other: "ParameterSet") -> bool:
        """Bitwise equality of names, values and momentum buffers."""
        if self.names() != other.names():
            return False
        return all(
            np.array_equal(self.values[k], other.values[k]) and np.array_equal(self.momentum[k], other.momentum[k])
            for k in self.values
        )


def sgd_step(
    params: ParameterSet,
    grads: Mapping[str, np.ndarray],
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
) -> ParameterSet:
    """SGD with heavy-ball momentum and coupled L2 weight decay.

    ``v <- momentum*v + grad + weight_decay*w``; ``w <- w - lr*v``.  Updates
    ``params`` in place and returns it.
    """
    if not lr > 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not 0 <= momentum < 1:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    if weight_decay < 0:
        raise ValueError(f"weight_decay must be nonnegative, got {weight_decay}")
    for name, w in params.values.items():
        g = np.asarray(grads[name])
        if g.shape != w.shape:
            raise ShapeError("sgd_step", w.shape, g.shape, name)
        v = momentum * params.momentum[name] + g
        if weight_decay:
            v = v + weight_decay * w
        params.momentum[name] = v
        params.values[name] = w - lr * v
    return params


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol


def finite_difference_check(
    fn: Callable[..., Tensor],
    params: Mapping[str, np.ndarray],
    x=None,
    tol: float = 1e-4,
    h: float = 1e-5,
    floor: float = 1e-5,
) -> GradCheckReport:
    """Compare tape gradients of ``fn`` against central differences.

    ``fn(leaves)`` (or ``fn(leaves, x)``) must return a scalar tensor.  The
    error of an entry is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``;
    the report keeps the worst entry per parameter.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    call = (lambda leaves: fn(leaves)) if x is None else (lambda leaves: fn(leaves, x))

    leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in base.items()}
    with GradientTape() as tape:
        loss = call(leaves)
    analytic = dict(zip(leaves, backward(tape, loss, leaves.values())))

    errors = {}
    for name, value in base.items():
        numeric = np.zeros_like(value)
        flat = value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = call({k: Tensor(v) for k, v in base.items()}).item()
            flat[i] = orig - h
            down = call({k: Tensor(v) for k, v in base.items()}).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * h)
        a = analytic[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        errors[name] = float(np.max(np.abs(a - numeric) / denom)) if a.size else 0.0
    return GradCheckReport(errors, tol)
