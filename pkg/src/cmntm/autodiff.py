"""Tape-based reverse-mode automatic differentiation over dense numpy arrays.

Operations execute eagerly and append themselves to the active ``Tape``; eager
order is already topological, so ``Tape.backward`` visits each recorded node
exactly once in reverse. Gradients accumulate additively into ``Tensor.grad``:
running backward twice on the same tape doubles leaf gradients, and the caller
is responsible for resetting grads between optimization steps.

Values default to single precision. Construct tensors with
``dtype=numpy.float64`` when running finite-difference gradient checks.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateInputError, DomainError, ShapeError

# Cosine denominators are clamped below at this value; vectors whose norm
# falls at or below it are rejected at API boundaries instead.
COSINE_EPS = 1e-8

_F32 = np.dtype(np.float32)
_F64 = np.dtype(np.float64)

_tls = threading.local()


def _stack() -> list:
    s = getattr(_tls, "tapes", None)
    if s is None:
        s = []
        _tls.tapes = s
    return s


def active_tape() -> "Tape | None":
    s = _stack()
    return s[-1] if s else None


class Tensor:
    """Dense array with an optional gradient slot.

    Values are stored row-major (C order). ``grad`` is ``None`` until a
    backward pass touches the tensor, after which it matches ``data``'s shape.
    Tensors and tapes are single-owner: never mutate one from two threads.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        # np.dtype singletons make the common already-float case an identity check
        if dtype is None and isinstance(data, np.ndarray) and (
                data.dtype is _F32 or data.dtype is _F64):
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype)
            if arr.dtype is not _F32 and arr.dtype is not _F64:
                arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: "Tape | None" = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the stored values."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", f"expected a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar; everything routes through the module-level primitives.
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, other):
        return power(self, other)


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs: tuple, output: Tensor, backward: Callable):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of executed operations for one forward pass."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _stack().pop()
        if popped is not self:
            raise RuntimeError("tape stack corrupted: exited a tape that was not innermost")
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(tensor) to every recorded tensor's ``grad``.

        ``loss`` must be a scalar produced while this tape was active. Each
        node is visited once, in reverse recording order; because consumers
        are always recorded after producers, a tensor's pass-gradient is
        complete by the time its producing node is visited.
        """
        if loss.data.size != 1:
            raise ShapeError("backward", f"loss must be scalar, got shape {loss.data.shape}")
        if loss._tape is not self:
            raise ValueError("backward: loss was not recorded on this tape")
        pass_grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self._nodes):
            g = pass_grads.get(id(node.output))
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in pass_grads:
                    pass_grads[key] = pass_grads[key] + gi
                else:
                    pass_grads[key] = gi
                    holders[key] = t
        for key, t in holders.items():
            if t.requires_grad:
                g = pass_grads[key]
                t.grad = np.array(g, copy=True) if t.grad is None else t.grad + g


class no_grad:
    """Context manager that disables gradient recording on the current thread."""

    def __enter__(self):
        _stack().append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _stack().pop()
        return False


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _record(inputs: Sequence[Tensor], out_data: np.ndarray, backward: Callable) -> Tensor:
    s = getattr(_tls, "tapes", None)
    tape = s[-1] if s else None
    if tape is None:
        return Tensor(out_data)
    requires = False
    for t in inputs:
        if t.requires_grad:
            requires = True
            break
    out = Tensor(out_data, requires_grad=requires)
    if requires:
        tape._nodes.append(_Node(tuple(inputs), out, backward))
        out._tape = tape
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    if type(a) is not Tensor:
        a = _as_tensor(a, like=b if type(b) is Tensor else None)
    if type(b) is not Tensor:
        b = _as_tensor(b, like=a)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError("add", f"incompatible shapes {a.data.shape} and {b.data.shape}") from None

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record((a, b), out, backward)


def sub(a, b) -> Tensor:
    if type(a) is not Tensor:
        a = _as_tensor(a, like=b if type(b) is Tensor else None)
    if type(b) is not Tensor:
        b = _as_tensor(b, like=a)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError("sub", f"incompatible shapes {a.data.shape} and {b.data.shape}") from None

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record((a, b), out, backward)


def mul(a, b) -> Tensor:
    if type(a) is not Tensor:
        a = _as_tensor(a, like=b if type(b) is Tensor else None)
    if type(b) is not Tensor:
        b = _as_tensor(b, like=a)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError("mul", f"incompatible shapes {a.data.shape} and {b.data.shape}") from None

    def backward(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _record((a, b), out, backward)


def div(a, b) -> Tensor:
    if type(a) is not Tensor:
        a = _as_tensor(a, like=b if type(b) is Tensor else None)
    if type(b) is not Tensor:
        b = _as_tensor(b, like=a)
    # all() is false exactly when a zero is present; avoids a temporary bool array
    if not b.data.all():
        raise DomainError("div: division by zero")
    try:
        out = a.data / b.data
    except ValueError:
        raise ShapeError("div", f"incompatible shapes {a.data.shape} and {b.data.shape}") from None

    def backward(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * out / b.data, b.data.shape)
        return ga, gb

    return _record((a, b), out, backward)


def power(base, exponent) -> Tensor:
    """Elementwise ``base ** exponent`` with broadcasting.

    Negative bases are rejected unless every exponent value is an integer;
    zero bases with negative exponents are rejected. The derivative w.r.t. the
    exponent uses the limit value 0 where the base is 0.
    """
    if type(base) is not Tensor:
        base = _as_tensor(base, like=exponent if type(exponent) is Tensor else None)
    if type(exponent) is not Tensor:
        exponent = _as_tensor(exponent, like=base)
    bx, ex = base.data, exponent.data
    try:
        if bx.size and bx.min() <= 0:
            if np.any(bx < 0) and np.any(np.mod(ex, 1.0) != 0):
                raise DomainError("power: negative base with non-integer exponent")
            if np.any((bx == 0) & (ex < 0)):
                raise DomainError("power: zero base with negative exponent")
        out = bx ** ex
    except ValueError:
        raise ShapeError("power", f"incompatible shapes {bx.shape} and {ex.shape}") from None

    def backward(g):
        gb = g * ex * bx ** (ex - 1)
        safe = np.where(bx > 0, bx, 1.0)
        ge = g * out * np.where(bx > 0, np.log(safe), 0.0)
        return _unbroadcast(gb, bx.shape), _unbroadcast(ge, ex.shape)

    return _record((base, exponent), out, backward)


def clamp_min(t: Tensor, lo: float) -> Tensor:
    """Elementwise maximum with a constant floor; gradient passes where ``t > lo``."""
    if type(t) is not Tensor:
        t = _as_tensor(t)
    out = np.maximum(t.data, np.asarray(lo, dtype=t.data.dtype))

    def backward(g):
        return (g * (t.data > lo),)

    return _record((t,), out, backward)


def clamp(t: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp into ``[lo, hi]``; gradient passes only strictly inside the band."""
    if type(t) is not Tensor:
        t = _as_tensor(t)
    out = np.clip(t.data, lo, hi)

    def backward(g):
        return (g * ((t.data > lo) & (t.data < hi)),)

    return _record((t,), out, backward)


# ---------------------------------------------------------------------------
# structural ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if type(a) is not Tensor:
        a = _as_tensor(a)
    if type(b) is not Tensor:
        b = _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul", f"expected 2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError("matmul", f"inner dimensions differ: {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _record((a, b), out, backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat", "empty input list")
    ndim = ts[0].data.ndim
    for t in ts:
        if t.data.ndim != ndim:
            raise ShapeError("concat", f"rank mismatch: {[u.data.shape for u in ts]}")
        for ax in range(ndim):
            if ax != axis and t.data.shape[ax] != ts[0].data.shape[ax]:
                raise ShapeError("concat", f"non-concat dims differ: {[u.data.shape for u in ts]}")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        grads = []
        for i in range(len(ts)):
            idx = [slice(None)] * ndim
            idx[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return _record(tuple(ts), out, backward)


def take_slice(t: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``[start:stop]`` along one axis."""
    if type(t) is not Tensor:
        t = _as_tensor(t)
    if axis < 0 or axis >= t.data.ndim:
        raise ShapeError("take_slice", f"axis {axis} out of range for shape {t.data.shape}")
    size = t.data.shape[axis]
    if not (0 <= start <= stop <= size):
        raise ShapeError("take_slice", f"bounds [{start}:{stop}] invalid for axis of size {size}")
    idx = [slice(None)] * t.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = t.data[idx].copy()

    def backward(g):
        gi = np.zeros_like(t.data)
        gi[idx] = g
        return (gi,)

    return _record((t,), out, backward)


def reduce_sum(t: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    if type(t) is not Tensor:
        t = _as_tensor(t)
    out = t.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, t.data.shape),)

    return _record((t,), out, backward)


def reduce_mean(t: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    if type(t) is not Tensor:
        t = _as_tensor(t)
    count = t.data.size if axis is None else t.data.shape[axis]
    out = t.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, t.data.shape) / count,)

    return _record((t,), out, backward)


# ---------------------------------------------------------------------------
# nonlinearities


def sigmoid(t: Tensor) -> Tensor:
    if type(t) is not Tensor:
        t = _as_tensor(t)
    x = t.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g):
        return (g * out * (1.0 - out),)

    return _record((t,), out, backward)


def tanh(t: Tensor) -> Tensor:
    if type(t) is not Tensor:
        t = _as_tensor(t)
    out = np.tanh(t.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _record((t,), out, backward)


def softplus(t: Tensor) -> Tensor:
    if type(t) is not Tensor:
        t = _as_tensor(t)
    x = t.data
    # NaN inputs pass through; divergence is caught at the loss value
    with np.errstate(invalid="ignore"):
        out = np.logaddexp(np.asarray(0.0, dtype=x.dtype), x)

    def backward(g):
        e = np.exp(-np.abs(x))
        sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * sig,)

    return _record((t,), out, backward)


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax; output rows sum to 1."""
    if type(t) is not Tensor:
        t = _as_tensor(t)
    x = t.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _record((t,), out, backward)


def log(t: Tensor) -> Tensor:
    if type(t) is not Tensor:
        t = _as_tensor(t)
    if t.data.size and not t.data.min() > 0:
        raise DomainError("log: non-positive input")
    out = np.log(t.data)

    def backward(g):
        return (g / t.data,)

    return _record((t,), out, backward)


def exp(t: Tensor) -> Tensor:
    if type(t) is not Tensor:
        t = _as_tensor(t)
    with np.errstate(over="ignore"):
        out = np.exp(t.data)
    if out.size:
        m = out.max()
        if m == np.inf or m != m:
            raise DomainError("exp: overflow or invalid input")

    def backward(g):
        return (g * out,)

    return _record((t,), out, backward)


def l2norm(t: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Euclidean norm; the subgradient at an exactly-zero vector is 0."""
    if type(t) is not Tensor:
        t = _as_tensor(t)
    sq = (t.data * t.data).sum(axis=axis, keepdims=keepdims)
    out = np.sqrt(sq)

    def backward(g):
        gg, nn = g, out
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
            nn = np.expand_dims(nn, axis)
        safe = np.where(nn > 0, nn, 1.0)
        return (gg * t.data / safe,)

    return _record((t,), out, backward)


# ---------------------------------------------------------------------------
# contraction / convolution


# np.einsum's subscript parsing dominates small-operand contractions, so the
# handful of patterns on the model's hot path get direct BLAS equivalents.
_EINSUM_FAST = {
    "bm,bpm->bp": lambda x, y: np.matmul(y, x[:, :, None])[:, :, 0],
    "bp,bpm->bm": lambda x, y: np.matmul(x[:, None, :], y)[:, 0, :],
    "bpm,bm->bp": lambda x, y: np.matmul(x, y[:, :, None])[:, :, 0],
    "bpm,bp->bm": lambda x, y: np.matmul(y[:, None, :], x)[:, 0, :],
    "bp,bm->bpm": lambda x, y: x[:, :, None] * y[:, None, :],
    "bm,bp->bpm": lambda x, y: y[:, :, None] * x[:, None, :],
    "id,jd->ij": lambda x, y: np.matmul(x, y.T),
    "ij,jd->id": lambda x, y: np.matmul(x, y),
    "ij,id->jd": lambda x, y: np.matmul(x.T, y),
}

_EINSUM_SPECS: dict[str, tuple] = {}

# (forward, inverse) gather indices realizing np.roll along the last axis
_ROLL_CACHE: dict[tuple[int, tuple[int, ...]], list[tuple[np.ndarray, np.ndarray]]] = {}


def _roll_indices(size: int, offsets: tuple[int, ...]) -> list[tuple[np.ndarray, np.ndarray]]:
    key = (size, offsets)
    got = _ROLL_CACHE.get(key)
    if got is None:
        base = np.arange(size)
        got = [((base - off) % size, (base + off) % size) for off in offsets]
        _ROLL_CACHE[key] = got
    return got


def _einsum_specs(subscripts: str) -> tuple:
    cached = _EINSUM_SPECS.get(subscripts)
    if cached is not None:
        return cached
    try:
        lhs, out_spec = subscripts.replace(" ", "").split("->")
        a_spec, b_spec = lhs.split(",")
    except ValueError:
        raise ShapeError("einsum", f"unsupported subscripts {subscripts!r}") from None
    for term, other in ((a_spec, b_spec), (b_spec, a_spec)):
        if len(set(term)) != len(term):
            raise ShapeError("einsum", f"repeated index within a term in {subscripts!r}")
        if not set(term) <= set(out_spec) | set(other):
            raise ShapeError("einsum", f"index summed over a single operand in {subscripts!r}")
    key = f"{a_spec},{b_spec}->{out_spec}"
    ga_spec = f"{out_spec},{b_spec}->{a_spec}"
    gb_spec = f"{out_spec},{a_spec}->{b_spec}"
    specs = (key, ga_spec, gb_spec)
    _EINSUM_SPECS[subscripts] = specs
    return specs


def _einsum_exec(spec: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    fast = _EINSUM_FAST.get(spec)
    if fast is not None:
        return fast(x, y)
    return np.einsum(spec, x, y)


def einsum2(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum restricted to plain contractions.

    Every index must be unique within its term and appear in the output or in
    the other operand, which makes the adjoint of each operand itself an
    einsum with the output specification swapped in.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    key, ga_spec, gb_spec = _einsum_specs(subscripts)
    try:
        out = _einsum_exec(key, a.data, b.data)
    except ValueError as e:
        raise ShapeError("einsum", f"{subscripts!r} on {a.data.shape} and {b.data.shape}: {e}") from None

    def backward(g):
        ga = _einsum_exec(ga_spec, g, b.data)
        gb = _einsum_exec(gb_spec, g, a.data)
        return ga, gb

    return _record((a, b), out, backward)


def circular_convolution(w: Tensor, s: Tensor, offsets: Sequence[int] | None = None) -> Tensor:
    """Circularly shift weighting ``w`` by the kernel ``s``.

    ``out[i] = sum_k s[k] * w[(i - offsets[k]) mod P]``, so a one-hot kernel at
    offset +1 rotates the weighting forward by one slot. Works on vectors or
    on batched rows (shift applied along the last axis). Callers guarantee
    that ``w`` and ``s`` are simplex vectors; only shapes are checked here.
    """
    if type(w) is not Tensor:
        w = _as_tensor(w)
    if type(s) is not Tensor:
        s = _as_tensor(s)
    if w.data.ndim not in (1, 2) or s.data.ndim != w.data.ndim:
        raise ShapeError("circular_convolution",
                         f"expected matching 1-d or 2-d operands, got {w.data.shape} and {s.data.shape}")
    if w.data.ndim == 2 and w.data.shape[0] != s.data.shape[0]:
        raise ShapeError("circular_convolution",
                         f"batch dims differ: {w.data.shape} and {s.data.shape}")
    k = s.data.shape[-1]
    if offsets is None:
        if k % 2 == 0:
            raise ShapeError("circular_convolution", "even kernel length needs explicit offsets")
        half = k // 2
        offsets = tuple(range(-half, half + 1))
    offsets = tuple(int(o) for o in offsets)
    if len(offsets) != k:
        raise ShapeError("circular_convolution",
                         f"kernel length {k} does not match {len(offsets)} offsets")
    rolls = _roll_indices(w.data.shape[-1], offsets)
    out = np.zeros_like(w.data)
    for i, (fwd, _) in enumerate(rolls):
        out += s.data[..., i:i + 1] * w.data[..., fwd]

    def backward(g):
        gw = np.zeros_like(w.data)
        gs = np.zeros_like(s.data)
        for i, (fwd, inv) in enumerate(rolls):
            gw += s.data[..., i:i + 1] * g[..., inv]
            gs[..., i] = (g * w.data[..., fwd]).sum(axis=-1)
        return gw, gs

    return _record((w, s), out, backward)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of the angle between two vectors, clamped into [-1, 1].

    The denominator is floored at ``COSINE_EPS``; inputs whose own norm is at
    or below that floor are rejected outright.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ShapeError("cosine_similarity",
                         f"expected equal-length vectors, got {a.data.shape} and {b.data.shape}")
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na <= COSINE_EPS or nb <= COSINE_EPS:
        raise DegenerateInputError(f"cosine_similarity: zero-norm input (norms {na:.3g}, {nb:.3g})")
    dot = reduce_sum(mul(a, b))
    denom = clamp_min(mul(l2norm(a), l2norm(b)), COSINE_EPS)
    return clamp(div(dot, denom), -1.0, 1.0)


# ---------------------------------------------------------------------------
# batch normalization


class BatchNorm:
    """Per-feature batch normalization with learnable scale and shift.

    Train mode normalizes by batch statistics (biased variance) and updates
    running statistics with the given momentum; eval mode normalizes by the
    running statistics. Train mode needs a batch of at least 2 rows, since a
    single row has no variance to normalize by.
    """

    def __init__(self, dim: int, eps: float = 1e-5, momentum: float = 0.1, dtype=np.float32):
        self.dim = dim
        self.eps = eps
        self.momentum = momentum
        self.scale = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.shift = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(dim, dtype=dtype)
        self.running_var = np.ones(dim, dtype=dtype)
        self.training = True

    def parameters(self) -> dict[str, Tensor]:
        return {"scale": self.scale, "shift": self.shift}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def __call__(self, x: Tensor) -> Tensor:
        x = _as_tensor(x)
        if x.data.ndim != 2 or x.data.shape[1] != self.dim:
            raise ShapeError("batch_norm", f"expected (batch, {self.dim}) input, got {x.data.shape}")
        if self.training:
            if x.data.shape[0] < 2:
                raise DomainError("batch_norm: train mode needs a batch of at least 2 rows")
            mean = reduce_mean(x, axis=0, keepdims=True)
            centered = sub(x, mean)
            var = reduce_mean(mul(centered, centered), axis=0, keepdims=True)
            m = self.momentum
            self.running_mean = ((1.0 - m) * self.running_mean + m * mean.data[0]).astype(self.running_mean.dtype)
            self.running_var = ((1.0 - m) * self.running_var + m * var.data[0]).astype(self.running_var.dtype)
            inv = power(add(var, self.eps), -0.5)
            normalized = mul(centered, inv)
        else:
            inv = 1.0 / np.sqrt(self.running_var.astype(x.data.dtype) + self.eps)
            normalized = mul(sub(x, Tensor(self.running_mean.astype(x.data.dtype))),
                             Tensor(inv))
        return add(mul(normalized, self.scale), self.shift)


# ---------------------------------------------------------------------------
# gradient checking


def gradient_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-4) -> float:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` must rebuild its forward pass on every call (the checker evaluates
    it repeatedly with perturbed parameters) and must be deterministic.
    Parameters must be double precision; the relative error for a coordinate
    is ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`` and the
    maximum over all coordinates is returned.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError("gradient_check requires float64 parameters")
        if not p.requires_grad:
            raise ValueError("gradient_check: every parameter must require gradients")
    with Tape() as tape:
        loss = f()
    if loss.data.size != 1:
        raise ShapeError("gradient_check", f"f() must return a scalar, got shape {loss.data.shape}")
    for p in params:
        p.grad = None
    tape.backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    max_rel = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data.reshape(()))
                flat[i] = orig - h
                fm = float(f().data.reshape(()))
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * h)
                rel = abs(gflat[i] - numeric) / max(abs(gflat[i]), abs(numeric), 1e-8)
                if rel > max_rel:
                    max_rel = rel
    return max_rel
