"""Reverse-mode automatic differentiation over 64-bit numpy arrays.

Define-by-run: a Tape records every operation executed while it is
active, and ``Tape.backward`` replays the records in reverse to
accumulate gradients. The op set is deliberately small -- just what the
model needs -- and every adjoint here is finite-difference checked (see
``dgann.gradcheck``). With no active tape, ops run as plain forward
numpy computations, which is the fast path for inference.

A Tape and the tensors recorded on it belong to a single thread for the
duration of a forward/backward pass. Separate tapes over shared
read-only parameter tensors may run concurrently.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5  # fixed variance stabilizer

_GELU_COEF = math.sqrt(2.0 / math.pi)
_GELU_CUBIC = 0.044715


class Tensor:
    """A shaped 64-bit array plus an optional gradient of the same shape."""

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.values.shape}{flag})"

    # Operator sugar; these defer to the module-level ops so everything
    # goes through the same tape machinery.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return subtract(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return multiply(self, other)
        return scalar_multiply(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return reduce_sum(self)

    def mean(self) -> "Tensor":
        return reduce_mean(self)


def _result(values: np.ndarray) -> Tensor:
    """Wrap an array we own into a fresh Tensor without copying."""
    out = Tensor.__new__(Tensor)
    out.values = values
    out.requires_grad = False
    out.grad = None
    return out


_tape_stack: list["Tape"] = []


class Tape:
    """Ordered record of executed ops, replayed in reverse by backward().

    Records are appended in execution order, so inputs always precede
    the op that consumes them; the reverse sweep therefore visits each
    record exactly once with its output gradient fully accumulated.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._tensors: dict[int, Tensor] = {}
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._records)

    def _add(self, output: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        self._records.append((output, inputs, backward_fn))
        self._tensors[id(output)] = output
        for t in inputs:
            self._tensors[id(t)] = t

    def backward(self, loss: Tensor, params: Sequence[Tensor] = ()) -> None:
        """Populate .grad with d(loss)/d(tensor) for every requires_grad tensor.

        ``loss`` must be a scalar produced on this tape. Gradients are
        overwritten, not accumulated, and parameters in ``params`` that the
        loss never touched receive a zero gradient. A tape can be walked
        only once.
        """
        if loss.values.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.values.shape}")
        if self._consumed:
            raise RuntimeError("this tape has already been walked backward")
        if id(loss) not in self._tensors:
            raise ValueError("loss was not recorded on this tape")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
        for output, inputs, backward_fn in reversed(self._records):
            if output.requires_grad:
                out_grad = grads.get(id(output))
            else:
                out_grad = grads.pop(id(output), None)
            if out_grad is None:
                continue
            input_grads = backward_fn(out_grad)
            for tensor, grad in zip(inputs, input_grads):
                if grad is None:
                    continue
                held = grads.get(id(tensor))
                grads[id(tensor)] = grad if held is None else held + grad

        for tid, tensor in self._tensors.items():
            if tensor.requires_grad:
                held = grads.get(tid)
                tensor.grad = np.zeros_like(tensor.values) if held is None else held
        for p in params:
            if p.requires_grad and id(p) not in self._tensors:
                p.grad = np.zeros_like(p.values)


def _record(output: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
    if _tape_stack:
        _tape_stack[-1]._add(output, inputs, backward_fn)


# ---------------------------------------------------------------------------
# Ops. Each returns a fresh Tensor and never mutates its inputs.
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    va, vb = a.values, b.values
    if va.ndim != 2 or vb.ndim != 2 or va.shape[1] != vb.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {va.shape} and {vb.shape}")
    out = _result(va @ vb)

    def backward_fn(g):
        return g @ vb.T, va.T @ g

    _record(out, (a, b), backward_fn)
    return out


def linear(x: Tensor, w: Tensor) -> Tensor:
    """x @ w.T for row-stacked inputs x (n, k) and a weight matrix w (m, k)."""
    vx, vw = x.values, w.values
    if vx.ndim != 2 or vw.ndim != 2 or vx.shape[1] != vw.shape[1]:
        raise ValueError(f"linear: incompatible shapes {vx.shape} and {vw.shape}")
    out = _result(vx @ vw.T)

    def backward_fn(g):
        return g @ vw, g.T @ vx

    _record(out, (x, w), backward_fn)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a 1-D b broadcast across the rows of a."""
    va, vb = a.values, b.values
    if va.shape == vb.shape:
        reduce_b = False
    elif vb.ndim == 1 and va.ndim == 2 and va.shape[1] == vb.shape[0]:
        reduce_b = True
    else:
        raise ValueError(f"add: incompatible shapes {va.shape} and {vb.shape}")
    out = _result(va + vb)

    def backward_fn(g):
        return g, g.sum(axis=0) if reduce_b else g

    _record(out, (a, b), backward_fn)
    return out


def subtract(a: Tensor, b: Tensor) -> Tensor:
    va, vb = a.values, b.values
    if va.shape != vb.shape:
        raise ValueError(f"subtract: incompatible shapes {va.shape} and {vb.shape}")
    out = _result(va - vb)

    def backward_fn(g):
        return g, -g

    _record(out, (a, b), backward_fn)
    return out


def multiply(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of same-shape tensors."""
    va, vb = a.values, b.values
    if va.shape != vb.shape:
        raise ValueError(f"multiply: incompatible shapes {va.shape} and {vb.shape}")
    out = _result(va * vb)

    def backward_fn(g):
        return g * vb, g * va

    _record(out, (a, b), backward_fn)
    return out


def scalar_multiply(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = _result(x.values * c)

    def backward_fn(g):
        return (g * c,)

    _record(out, (x,), backward_fn)
    return out


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate 2-D tensors along rows (axis=0) or columns (axis=-1)."""
    parts = list(parts)
    if not parts:
        raise ValueError("concat: need at least one tensor")
    if axis not in (0, 1, -1):
        raise ValueError(f"concat: unsupported axis {axis}")
    for p in parts:
        if p.values.ndim != 2:
            raise ValueError(f"concat: expected 2-D tensors, got shape {p.values.shape}")
    ax = 0 if axis == 0 else 1
    out = _result(np.concatenate([p.values for p in parts], axis=ax))
    sizes = [p.values.shape[ax] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, offsets, axis=ax))

    _record(out, tuple(parts), backward_fn)
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old_shape = x.values.shape
    out = _result(x.values.reshape(shape).copy())

    def backward_fn(g):
        return (g.reshape(old_shape),)

    _record(out, (x,), backward_fn)
    return out


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows of a 2-D tensor; repeated indices are allowed."""
    idx = np.asarray(indices, dtype=np.intp)
    vx = x.values
    if vx.ndim != 2:
        raise ValueError(f"gather_rows: expected a 2-D tensor, got shape {vx.shape}")
    out = _result(vx[idx])

    def backward_fn(g):
        dx = np.zeros_like(vx)
        np.add.at(dx, idx, g)
        return (dx,)

    _record(out, (x,), backward_fn)
    return out


def scatter_add_rows(x: Tensor, indices, num_rows: int) -> Tensor:
    """Sum rows of x into an output of ``num_rows`` rows at the given indices."""
    idx = np.asarray(indices, dtype=np.intp)
    vx = x.values
    if vx.ndim != 2 or idx.shape[0] != vx.shape[0]:
        raise ValueError(f"scatter_add_rows: {idx.shape[0]} indices for {vx.shape} rows")
    acc = np.zeros((num_rows, vx.shape[1]))
    np.add.at(acc, idx, vx)
    out = _result(acc)

    def backward_fn(g):
        return (g[idx],)

    _record(out, (x,), backward_fn)
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.values)
    out = _result(y)

    def backward_fn(g):
        return (g * (1.0 - y * y),)

    _record(out, (x,), backward_fn)
    return out


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation:
    0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    vx = x.values
    inner = _GELU_COEF * (vx + _GELU_CUBIC * vx ** 3)
    t = np.tanh(inner)
    out = _result(0.5 * vx * (1.0 + t))

    def backward_fn(g):
        sech2 = 1.0 - t * t
        dinner = _GELU_COEF * (1.0 + 3.0 * _GELU_CUBIC * vx * vx)
        return (g * (0.5 * (1.0 + t) + 0.5 * vx * sech2 * dinner),)

    _record(out, (x,), backward_fn)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    vx = x.values
    d = vx.shape[-1]
    if d < 2:
        raise ValueError(f"layer_norm: last axis must have extent >= 2, got {d}")
    if gain.values.shape != (d,) or bias.values.shape != (d,):
        raise ValueError(
            f"layer_norm: gain/bias shapes {gain.values.shape}/{bias.values.shape} "
            f"do not match feature size {d}"
        )
    mu = vx.mean(axis=-1, keepdims=True)
    centered = vx - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = centered * inv_std
    vg = gain.values
    out = _result(xhat * vg + bias.values)

    def backward_fn(g):
        flat_g = g.reshape(-1, d)
        flat_xhat = xhat.reshape(-1, d)
        dgain = (flat_g * flat_xhat).sum(axis=0)
        dbias = flat_g.sum(axis=0)
        dxhat = g * vg
        mean_dxhat = dxhat.mean(axis=-1, keepdims=True)
        mean_dxhat_xhat = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
        return dx, dgain, dbias

    _record(out, (x, gain, bias), backward_fn)
    return out


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Exp-normalize over the last axis; masked entries come out exactly 0.

    ``mask`` is boolean, True where entries participate. It may match x's
    shape or be 1-D over the last axis. Every slice must keep at least one
    unmasked entry.
    """
    vx = x.values
    if mask is None:
        m = np.ones(vx.shape, dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
        if m.shape == vx.shape:
            pass
        elif m.ndim == 1 and m.shape[0] == vx.shape[-1]:
            m = np.broadcast_to(m, vx.shape)
        else:
            raise ValueError(f"softmax: mask shape {m.shape} does not fit input {vx.shape}")
    if not m.any(axis=-1).all():
        raise ValueError("softmax: every slice needs at least one unmasked entry")
    neg_inf = np.where(m, vx, -np.inf)
    shifted = neg_inf - neg_inf.max(axis=-1, keepdims=True)
    ex = np.where(m, np.exp(shifted), 0.0)
    p = ex / ex.sum(axis=-1, keepdims=True)
    out = _result(p)

    def backward_fn(g):
        gp = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - gp),)

    _record(out, (x,), backward_fn)
    return out


def segment_attend(queries: Tensor, keys: Tensor, values: Tensor, segments) -> Tensor:
    """Scaled dot-product attention where key/value rows are grouped per query.

    ``segments[r]`` names the query each key/value row belongs to. For every
    query t: weights = softmax(q_t . k_r / sqrt(d)) over its group, output =
    weighted sum of the group's value rows. Every query must own at least
    one row.
    """
    seg = np.asarray(segments, dtype=np.intp)
    vq, vk, vv = queries.values, keys.values, values.values
    if vq.ndim != 2 or vk.ndim != 2 or vv.ndim != 2:
        raise ValueError("segment_attend: queries/keys/values must be 2-D")
    if vk.shape[0] != vv.shape[0] or vk.shape[0] != seg.shape[0]:
        raise ValueError(
            f"segment_attend: {vk.shape[0]} keys, {vv.shape[0]} values, "
            f"{seg.shape[0]} segment ids"
        )
    if vq.shape[1] != vk.shape[1]:
        raise ValueError(f"segment_attend: query dim {vq.shape[1]} != key dim {vk.shape[1]}")
    n_targets = vq.shape[0]
    if seg.size and (seg.min() < 0 or seg.max() >= n_targets):
        raise ValueError("segment_attend: segment id out of range")
    counts = np.bincount(seg, minlength=n_targets)
    if (counts == 0).any():
        empty = int(np.nonzero(counts == 0)[0][0])
        raise ValueError(f"segment_attend: query {empty} has an empty key/value group")

    scale = 1.0 / math.sqrt(vq.shape[1])
    q_rows = vq[seg]
    scores = (q_rows * vk).sum(axis=-1) * scale
    seg_max = np.full(n_targets, -np.inf)
    np.maximum.at(seg_max, seg, scores)
    ex = np.exp(scores - seg_max[seg])
    denom = np.bincount(seg, weights=ex, minlength=n_targets)
    alpha = ex / denom[seg]
    out_values = np.zeros((n_targets, vv.shape[1]))
    np.add.at(out_values, seg, alpha[:, None] * vv)
    out = _result(out_values)

    def backward_fn(g):
        g_rows = g[seg]
        dvalues = alpha[:, None] * g_rows
        dalpha = (g_rows * vv).sum(axis=-1)
        weighted = alpha * dalpha
        seg_dot = np.bincount(seg, weights=weighted, minlength=n_targets)
        dscores = alpha * (dalpha - seg_dot[seg])
        dkeys = (dscores * scale)[:, None] * q_rows
        dqueries = np.zeros_like(vq)
        np.add.at(dqueries, seg, (dscores * scale)[:, None] * vk)
        return dqueries, dkeys, dvalues

    _record(out, (queries, keys, values), backward_fn)
    return out


def reduce_sum(x: Tensor) -> Tensor:
    vx = x.values
    out = _result(np.array(vx.sum()))

    def backward_fn(g):
        return (np.full(vx.shape, float(g)),)

    _record(out, (x,), backward_fn)
    return out


def reduce_mean(x: Tensor) -> Tensor:
    vx = x.values
    out = _result(np.array(vx.mean()))

    def backward_fn(g):
        return (np.full(vx.shape, float(g) / vx.size),)

    _record(out, (x,), backward_fn)
    return out


def huber(x: Tensor, delta: float) -> Tensor:
    """Elementwise Huber penalty: x^2/2 inside |x| <= delta, linear outside.

    The two branches meet with matching value and slope at the seam, so the
    gradient is continuous everywhere.
    """
    delta = float(delta)
    if delta <= 0:
        raise ValueError(f"huber: delta must be positive, got {delta}")
    vx = x.values
    small = np.abs(vx) <= delta
    out = _result(np.where(small, 0.5 * vx * vx, delta * (np.abs(vx) - 0.5 * delta)))

    def backward_fn(g):
        return (g * np.where(small, vx, delta * np.sign(vx)),)

    _record(out, (x,), backward_fn)
    return out
