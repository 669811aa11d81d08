"""Dense float64 tensors with tape-based reverse-mode differentiation.

The operation set is fixed and sized to what the velocity-field model and its
training loss need: 2-D matmul, transpose, a small elementwise family, row
softmax, RMS normalisation, column slicing, a row-broadcast add, and a full
reduction to a scalar.  There is no general broadcasting; binary elementwise
ops require equal shapes or a scalar operand.  Every op is pure: inputs are
never mutated (tensor data is frozen at construction) and each call returns a
fresh tensor.

Gradients: while grad recording is enabled (the default), every op whose
inputs require gradients appends a record to the active tape.  ``backward``
replays the tape strictly in reverse execution order, accumulates adjoints,
writes ``.grad`` buffers, and clears the tape.  Enter ``no_grad()`` for
inference so the tape stays empty.

Randomness: ``seeded_randn`` draws from numpy's PCG64 generator (a documented,
well-known permuted-congruential generator) so a given seed yields bit-identical
values on every run.  ``derive_seed`` mixes structured parts (ints, strings)
into fresh 64-bit seeds with SplitMix64 so independent streams never overlap
by construction.
"""

from __future__ import annotations

import hashlib
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from .errors import ValidationError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """Immutable dense float64 array plus gradient metadata."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C")
        if any(extent <= 0 for extent in arr.shape):
            raise ValidationError(f"tensor extents must be positive, got shape {arr.shape}")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != ():
            raise ValidationError(f"item() needs a scalar tensor, got shape {self.data.shape}")
        return float(self.data)

    def detached(self, requires_grad: bool = False) -> "Tensor":
        """Same values, fresh identity, no tape history."""
        return Tensor(self.data, requires_grad=requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Operator sugar; the named functions below are the actual op set.
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(other, self)


class Tape:
    """Ordered record of executed ops for one backward pass."""

    __slots__ = ("records",)

    def __init__(self):
        # Each record: (output tensor, ((input tensor, adjoint fn), ...)).
        # Execution order is a topological order of the graph, so replaying
        # the list back-to-front visits every consumer before its producer.
        self.records: list[tuple[Tensor, tuple]] = []

    def record(self, out: Tensor, pulls: tuple) -> None:
        self.records.append((out, pulls))

    def clear(self) -> None:
        self.records.clear()

    def __len__(self) -> int:
        return len(self.records)


_TAPE = Tape()
_GRAD_ENABLED = True


def active_tape() -> Tape:
    return _TAPE


def clear_tape() -> None:
    _TAPE.clear()


@contextmanager
def no_grad():
    """Disable tape recording within the block (inference / finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)):
        return Tensor(float(x))
    raise ValidationError(f"expected Tensor or number, got {type(x).__name__}")


def _result(data: np.ndarray, pulls: tuple[tuple[Tensor, object], ...]) -> Tensor:
    """Wrap an op result, recording it on the tape when gradients are live."""
    needs = _GRAD_ENABLED and any(t.requires_grad for t, _ in pulls)
    out = Tensor(data, requires_grad=needs)
    if needs:
        live = tuple((t, fn) for t, fn in pulls if t.requires_grad)
        _TAPE.record(out, live)
    return out


def _require_2d(a: Tensor, op: str) -> None:
    if a.data.ndim != 2:
        raise ValidationError(f"{op} requires a 2-D tensor, got shape {a.data.shape}")


# ---------------------------------------------------------------------------
# op set


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _require_2d(a, "matmul")
    _require_2d(b, "matmul")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValidationError(f"matmul inner extents differ: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data
    return _result(out, (
        (a, lambda g, bd=b.data: g @ bd.T),
        (b, lambda g, ad=a.data: ad.T @ g),
    ))


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    _require_2d(a, "transpose")
    return _result(a.data.T, ((a, lambda g: g.T),))


def _binary(a: Tensor, b: Tensor, op: str):
    """Shape contract for add/sub/mul: equal shapes or one scalar operand."""
    if a.data.shape == b.data.shape:
        return
    if a.data.shape == () or b.data.shape == ():
        return
    raise ValidationError(f"{op} needs equal shapes or a scalar, got {a.data.shape} and {b.data.shape}")


def _reduce_to(shape: tuple[int, ...], g: np.ndarray) -> np.ndarray:
    return g if g.shape == shape else np.sum(g).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary(a, b, "add")
    return _result(a.data + b.data, (
        (a, lambda g, s=a.data.shape: _reduce_to(s, g)),
        (b, lambda g, s=b.data.shape: _reduce_to(s, g)),
    ))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary(a, b, "sub")
    return _result(a.data - b.data, (
        (a, lambda g, s=a.data.shape: _reduce_to(s, g)),
        (b, lambda g, s=b.data.shape: _reduce_to(s, -g)),
    ))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary(a, b, "mul")
    return _result(a.data * b.data, (
        (a, lambda g, s=a.data.shape, bd=b.data: _reduce_to(s, g * bd)),
        (b, lambda g, s=b.data.shape, ad=a.data: _reduce_to(s, g * ad)),
    ))


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _result(a.data * c, ((a, lambda g: g * c),))


def sin(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _result(np.sin(a.data), ((a, lambda g, ad=a.data: g * np.cos(ad)),))


def cos(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _result(np.cos(a.data), ((a, lambda g, ad=a.data: -g * np.sin(ad)),))


def square(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _result(a.data * a.data, ((a, lambda g, ad=a.data: g * (2.0 * ad)),))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    a = _as_tensor(a)
    x = a.data
    out = 0.5 * x * (1.0 + erf(x * _INV_SQRT2))

    def pull(g, x=x):
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return g * (cdf + x * pdf)

    return _result(out, ((a, pull),))


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax, stabilised by the row maximum (no overflow for large logits)."""
    a = _as_tensor(a)
    _require_2d(a, "softmax_rows")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def pull(g, p=p):
        dot = np.sum(g * p, axis=1, keepdims=True)
        return p * (g - dot)

    return _result(p, ((a, pull),))


def rms_norm(a: Tensor, eps: float = 1e-6) -> Tensor:
    """Row-wise x / sqrt(mean(x^2) + eps); no learned affine."""
    a = _as_tensor(a)
    _require_2d(a, "rms_norm")
    x = a.data
    n = x.shape[1]
    s = np.sqrt(np.mean(x * x, axis=1, keepdims=True) + eps)
    out = x / s

    def pull(g, x=x, s=s, n=n):
        dot = np.sum(g * x, axis=1, keepdims=True)
        return g / s - x * dot / (n * s ** 3)

    return _result(out, ((a, pull),))


def add_row(a: Tensor, row: Tensor) -> Tensor:
    """Add a 1 x n row vector to every row of an m x n tensor (bias-style broadcast)."""
    a, row = _as_tensor(a), _as_tensor(row)
    _require_2d(a, "add_row")
    if row.data.shape != (1, a.data.shape[1]):
        raise ValidationError(f"add_row needs a (1, {a.data.shape[1]}) row, got {row.data.shape}")
    return _result(a.data + row.data, (
        (a, lambda g: g),
        (row, lambda g: g.sum(axis=0, keepdims=True)),
    ))


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous column slice a[:, start:stop]; adjoint scatters back into zeros."""
    a = _as_tensor(a)
    _require_2d(a, "slice_cols")
    cols = a.data.shape[1]
    if not (0 <= start < stop <= cols):
        raise ValidationError(f"slice_cols bounds [{start}, {stop}) invalid for {cols} columns")

    def pull(g, shape=a.data.shape, start=start, stop=stop):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return full

    return _result(np.ascontiguousarray(a.data[:, start:stop]), ((a, pull),))


def sum_all(a: Tensor) -> Tensor:
    """Reduce every entry to one scalar (the loss-side reduction)."""
    a = _as_tensor(a)
    return _result(np.sum(a.data).reshape(()), (
        (a, lambda g, s=a.data.shape: np.broadcast_to(g, s).copy() if s != () else g),
    ))


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor) -> None:
    """Accumulate gradients of ``loss`` into every reachable requires_grad tensor.

    The loss must be a scalar produced by ops recorded on the active tape.
    Gradient buffers are overwritten (not accumulated across calls) and the
    tape is cleared afterwards, ready for the next step.
    """
    if not isinstance(loss, Tensor) or loss.data.shape != ():
        raise ValidationError("backward requires a scalar Tensor loss")
    produced = {id(out) for out, _ in _TAPE.records}
    if id(loss) not in produced:
        raise ValidationError("loss is not connected to the active tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    holders: dict[int, Tensor] = {id(loss): loss}
    for out, pulls in reversed(_TAPE.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        out.grad = g
        for inp, pull in pulls:
            contribution = pull(g)
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + contribution
            else:
                grads[key] = np.asarray(contribution, dtype=np.float64)
                holders[key] = inp
    for key, g in grads.items():
        holders[key].grad = np.asarray(g, dtype=np.float64)
    _TAPE.clear()


# ---------------------------------------------------------------------------
# seeded randomness

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(*parts) -> int:
    """Mix ints/strings into a fresh 64-bit seed (SplitMix64 chain, order-sensitive)."""
    state = 0x1234567887654321
    for part in parts:
        if isinstance(part, str):
            part = int.from_bytes(hashlib.blake2b(part.encode(), digest_size=8).digest(), "little")
        elif isinstance(part, (int, np.integer)):
            part = int(part) & _MASK64
        else:
            raise ValidationError(f"seed parts must be int or str, got {type(part).__name__}")
        state = _splitmix64(state ^ part)
    return state


def seeded_randn(shape: tuple[int, ...], seed: int) -> Tensor:
    """Standard-normal tensor; identical seed gives bit-identical values (PCG64 stream)."""
    rng = np.random.Generator(np.random.PCG64(int(seed) & _MASK64))
    return Tensor(rng.standard_normal(shape))
