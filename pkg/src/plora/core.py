"""Dense float64 tensors with a reverse-mode gradient tape.

Every primitive computes its forward value with numpy, checks that the result
is finite, and (when a tape is recording and an input needs a gradient)
appends a backward closure to the active tape. ``GradTape.backward`` replays
those closures in exact reverse execution order.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class OracleError(RuntimeError):
    """The finite-difference oracle evaluated a non-finite objective."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class GradTape:
    """Records primitive applications; one tape per training step.

    Use as a context manager. Only primitives executed while the tape is
    active, and having at least one input with ``requires_grad``, are recorded.
    """

    records: list[_Record] = field(default_factory=list)
    visit_log: list[int] | None = None

    def __enter__(self) -> "GradTape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self

    def backward(self, loss: Tensor, params: Iterable[Tensor] = ()) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(param) and store it on each param's ``.grad``.

        Parameters that the loss does not depend on get an exact zero gradient.
        Returns the raw gradient table keyed by ``id(tensor)``.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for idx in range(len(self.records) - 1, -1, -1):
            rec = self.records[idx]
            gout = grads.pop(id(rec.output), None)
            if gout is None:
                continue
            if self.visit_log is not None:
                self.visit_log.append(idx)
            for inp, g in zip(rec.inputs, rec.backward(gout)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        for p in params:
            g = grads.get(id(p))
            p.grad = np.zeros_like(p.data) if g is None else np.array(g, dtype=np.float64)
        return grads


_local = threading.local()


def _stack() -> list[GradTape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def _active() -> GradTape | None:
    st = _stack()
    return st[-1] if st else None


def _emit(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op} produced non-finite values (shape {out.shape})")
    tape = _active()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    res = Tensor.__new__(Tensor)
    res.data = out
    res.requires_grad = needs
    res.grad = None
    res.name = None
    if needs:
        tape.records.append(_Record(op, inputs, res, backward))
    return res


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _emit("add", out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _emit("sub", out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _emit("mul", out, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def total(a: Tensor) -> Tensor:
    return _emit("sum", np.asarray(a.data.sum()), (a,),
                 lambda g: (np.broadcast_to(g, a.shape).copy(),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU with its exact derivative."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du),)

    return _emit("gelu", out, (a,), back)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes, numpy broadcasting rules."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {list(a.shape)} by {list(b.shape)}")
    out = a.data @ b.data

    def back(g):
        return (_unbroadcast(g @ _swap(b.data), a.shape),
                _unbroadcast(_swap(a.data) @ g, b.shape))

    return _emit("matmul", out, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T (+ b)`` with ``w`` stored as [out, in]."""
    if w.data.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {list(x.shape)} incompatible with weight {list(w.shape)}")
    out = x.data @ w.data.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias {list(b.shape)} does not match weight {list(w.shape)}")
        out = out + b.data
    inputs = (x, w) if b is None else (x, w, b)

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        grads = [g @ w.data, g2.T @ x2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _emit("linear", out, inputs, back)


def transpose(a: Tensor) -> Tensor:
    return _emit("transpose", _swap(a.data), (a,), lambda g: (_swap(g),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("permute", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


# ---------------------------------------------------------------------------
# normalisation / attention
# ---------------------------------------------------------------------------


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """``gain * x / sqrt(mean(x**2) + eps)`` over the last axis."""
    if eps <= 0:
        raise ValueError("rms_norm: eps must be positive")
    if gain.shape != (x.shape[-1],):
        raise ShapeError(f"rms_norm: gain {list(gain.shape)} vs input {list(x.shape)}")
    xs = x.data
    n = xs.shape[-1]
    inv = 1.0 / np.sqrt((xs * xs).mean(axis=-1, keepdims=True) + eps)
    xhat = xs * inv
    out = xhat * gain.data

    def back(g):
        gx_hat = g * gain.data
        dot = (gx_hat * xs).sum(axis=-1, keepdims=True)
        dx = inv * gx_hat - (inv**3) * xs * dot / n
        dgain = (g * xhat).reshape(-1, n).sum(axis=0)
        return dx, dgain

    return _emit("rms_norm", out, (x, gain), back)


def softmax_rows(m: Tensor, causal: bool = False) -> Tensor:
    """Softmax over the last axis with per-row max subtraction.

    With ``causal`` the entry ``[..., i, j]`` for ``j > i`` is excluded and
    gets probability exactly zero.
    """
    s = m.data
    if causal:
        rows, cols = s.shape[-2], s.shape[-1]
        keep = np.tril(np.ones((rows, cols), dtype=bool))
        s = np.where(keep, s, -np.inf)
    mx = s.max(axis=-1, keepdims=True)
    e = np.exp(s - mx)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", p, (m,), back)


def log_softmax_rows(m: Tensor) -> Tensor:
    s = m.data
    mx = s.max(axis=-1, keepdims=True)
    lse = mx + np.log(np.exp(s - mx).sum(axis=-1, keepdims=True))
    out = s - lse
    p = np.exp(out)
    return _emit("log_softmax", out, (m,),
                 lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def cross_entropy(logits: Tensor, targets, loss_mask=None) -> tuple[Tensor, bool]:
    """Mean next-token negative log-likelihood over masked-in positions.

    Returns ``(loss, empty)``; when no position is masked in the loss is 0
    and ``empty`` is True.
    """
    V = logits.shape[-1]
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {list(tgt.shape)} vs logits {list(logits.shape)}")
    mask = np.ones(tgt.shape, dtype=bool) if loss_mask is None else np.asarray(loss_mask, dtype=bool)
    if mask.shape != tgt.shape:
        raise ShapeError(f"cross_entropy: loss mask {list(mask.shape)} vs targets {list(tgt.shape)}")
    picked = tgt[mask]
    if np.any((picked < 0) | (picked >= V)):
        bad = int(picked[(picked < 0) | (picked >= V)][0])
        raise IndexError(f"cross_entropy: target {bad} out of range for vocab {V}")
    n = int(mask.sum())
    if n == 0:
        return _emit("cross_entropy", np.asarray(0.0), (logits,),
                     lambda g: (np.zeros_like(logits.data),)), True

    flat = logits.data.reshape(-1, V)[mask.reshape(-1)]
    mx = flat.max(axis=-1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(flat - mx).sum(axis=-1))
    nll = lse - flat[np.arange(n), picked]
    out = np.asarray(nll.mean())

    def back(g):
        p = np.exp(flat - lse[:, None])
        p[np.arange(n), picked] -= 1.0
        full = np.zeros((mask.size, V))
        full[mask.reshape(-1)] = p * (float(g) / n)
        return (full.reshape(logits.shape),)

    return _emit("cross_entropy", out, (logits,), back), False


# ---------------------------------------------------------------------------
# indexing
# ---------------------------------------------------------------------------


def embedding(table: Tensor, ids) -> Tensor:
    idx = np.asarray(ids, dtype=np.int64)
    if np.any((idx < 0) | (idx >= table.shape[0])):
        raise IndexError(f"embedding: id out of range for table of {table.shape[0]} rows")
    out = table.data[idx]

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _emit("embedding", out, (table,), back)


def gather_rows(x: Tensor, mask: np.ndarray) -> Tensor:
    """Rows of ``x`` (leading axes indexed by boolean ``mask``) as [N, C]."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:-1]:
        raise ShapeError(f"gather_rows: mask {list(mask.shape)} vs input {list(x.shape)}")
    out = x.data[mask]

    def back(g):
        gx = np.zeros_like(x.data)
        gx[mask] = g
        return (gx,)

    return _emit("gather_rows", out, (x,), back)


def add_rows(base: Tensor, mask: np.ndarray, delta: Tensor) -> Tensor:
    """Copy of ``base`` with ``delta`` added to the rows selected by ``mask``.

    Unselected rows are copied, never touched by arithmetic.
    """
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if delta.shape != (n, base.shape[-1]):
        raise ShapeError(f"add_rows: delta {list(delta.shape)} for {n} rows of {list(base.shape)}")
    out = base.data.copy()
    out[mask] = out[mask] + delta.data
    return _emit("add_rows", out, (base, delta), lambda g: (g, g[mask]))


def place_rows(base: Tensor, mask: np.ndarray, rows: Tensor) -> Tensor:
    """Copy of ``base`` whose rows selected by ``mask`` are replaced by ``rows``."""
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if rows.shape != (n, base.shape[-1]):
        raise ShapeError(f"place_rows: rows {list(rows.shape)} for {n} slots of {list(base.shape)}")
    out = base.data.copy()
    out[mask] = rows.data

    def back(g):
        gb = g.copy()
        gb[mask] = 0.0
        return gb, g[mask]

    return _emit("place_rows", out, (base, rows), back)


# ---------------------------------------------------------------------------
# oracle
# ---------------------------------------------------------------------------


def finite_diff_grad(f: Callable[[np.ndarray], float], theta, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``theta``."""
    if h <= 0:
        raise ValueError("finite_diff_grad: step must be positive")
    th = np.array(theta, dtype=np.float64).reshape(-1)
    grad = np.zeros_like(th)
    for i in range(th.size):
        orig = th[i]
        th[i] = orig + h
        fp = float(f(th.copy()))
        th[i] = orig - h
        fm = float(f(th.copy()))
        th[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise OracleError(f"non-finite objective at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(np.shape(theta))


def max_rel_error(a, b, floor: float = 1e-8) -> float:
    """max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size == 0:
        return 0.0
    den = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / den))
