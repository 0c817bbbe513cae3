"""Finite-difference verification of every differentiable op and the full model.

Central differences with h = 1e-5 at 64-bit; the reported figure per op is
the worst relative error over 20 random probe points, where relative error
uses a unit floor: |analytic - numeric| / max(1, |analytic|, |numeric|).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T

FD_STEP = 1e-5
OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-4
DEFAULT_POINTS = 20


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    floor = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    if analytic.size == 0:
        return 0.0
    return float((np.abs(analytic - numeric) / floor).max())


def central_difference(f: Callable[[], float], arr: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """d f / d arr entrywise; temporarily perturbs arr in place."""
    grad = np.empty_like(arr)
    flat = arr.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return grad


def check_case(
    inputs: list[T.Tensor],
    forward: Callable[[], T.Tensor],
    rng: np.random.Generator,
    grad_scale: float = 1.0,
) -> float:
    """Compare tape gradients of a random linear functional of the output
    against central differences on every float input. ``grad_scale``
    deliberately corrupts the analytic side (negative-control hook)."""
    probe_out = forward()
    weights = rng.standard_normal(probe_out.values.shape)

    for t in inputs:
        t.requires_grad = True
    with T.Tape() as tape:
        out = forward()
        loss = T.reduce_sum(T.multiply(out, T.Tensor(weights)))
    tape.backward(loss, params=inputs)

    def scalar() -> float:
        return float((forward().values * weights).sum())

    worst = 0.0
    for t in inputs:
        numeric = central_difference(scalar, t.values)
        worst = max(worst, relative_error(t.grad * grad_scale, numeric))
    return worst


@dataclass
class OpReport:
    name: str
    worst_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst_error <= self.tolerance


# ---------------------------------------------------------------------------
# Per-op probe builders. Each returns (inputs, forward) for one random point.
# ---------------------------------------------------------------------------

def _build_matmul(rng, point):
    a = T.Tensor(rng.standard_normal((3, 4)))
    b = T.Tensor(rng.standard_normal((4, 2)))
    return [a, b], lambda: T.matmul(a, b)


def _build_linear(rng, point):
    x = T.Tensor(rng.standard_normal((4, 3)))
    w = T.Tensor(rng.standard_normal((5, 3)))
    return [x, w], lambda: T.linear(x, w)


def _build_add(rng, point):
    a = T.Tensor(rng.standard_normal((3, 4)))
    if point % 2 == 0:
        b = T.Tensor(rng.standard_normal((3, 4)))
    else:
        b = T.Tensor(rng.standard_normal(4))  # row-broadcast bias form
    return [a, b], lambda: T.add(a, b)


def _build_subtract(rng, point):
    a = T.Tensor(rng.standard_normal((3, 4)))
    b = T.Tensor(rng.standard_normal((3, 4)))
    return [a, b], lambda: T.subtract(a, b)


def _build_multiply(rng, point):
    a = T.Tensor(rng.standard_normal((3, 4)))
    b = T.Tensor(rng.standard_normal((3, 4)))
    return [a, b], lambda: T.multiply(a, b)


def _build_scalar_multiply(rng, point):
    x = T.Tensor(rng.standard_normal((3, 4)))
    c = float(rng.uniform(-2.0, 2.0))
    return [x], lambda: T.scalar_multiply(x, c)


def _build_concat(rng, point):
    axis = 0 if point % 2 == 0 else -1
    parts = [T.Tensor(rng.standard_normal((3, 4))) for _ in range(3)]
    return parts, lambda: T.concat(parts, axis=axis)


def _build_reshape(rng, point):
    x = T.Tensor(rng.standard_normal((6, 2)))
    return [x], lambda: T.reshape(x, (3, 4))


def _build_gather_rows(rng, point):
    x = T.Tensor(rng.standard_normal((5, 3)))
    idx = rng.integers(0, 5, size=7)  # repeats expected
    return [x], lambda: T.gather_rows(x, idx)


def _build_scatter_add_rows(rng, point):
    x = T.Tensor(rng.standard_normal((7, 3)))
    idx = rng.integers(0, 4, size=7)
    return [x], lambda: T.scatter_add_rows(x, idx, 4)


def _build_tanh(rng, point):
    x = T.Tensor(rng.standard_normal((3, 4)))
    return [x], lambda: T.tanh(x)


def _build_gelu(rng, point):
    x = T.Tensor(rng.standard_normal((3, 4)) * 2.0)
    return [x], lambda: T.gelu(x)


def _build_layer_norm(rng, point):
    x = T.Tensor(rng.standard_normal((4, 5)))
    gain = T.Tensor(rng.uniform(0.5, 1.5, size=5))
    bias = T.Tensor(rng.standard_normal(5) * 0.1)
    return [x, gain, bias], lambda: T.layer_norm(x, gain, bias)


def _build_softmax(rng, point):
    x = T.Tensor(rng.standard_normal((3, 5)))
    if point % 2 == 0:
        mask = None
    else:
        mask = rng.random(5) < 0.7
        mask[0] = True  # keep every row non-empty
    return [x], lambda: T.softmax(x, mask=mask)


def _build_segment_attend(rng, point):
    n_targets, n_rows = 3, 8
    segments = np.concatenate([np.arange(n_targets), rng.integers(0, n_targets, size=n_rows - n_targets)])
    q = T.Tensor(rng.standard_normal((n_targets, 4)))
    k = T.Tensor(rng.standard_normal((n_rows, 4)))
    v = T.Tensor(rng.standard_normal((n_rows, 3)))
    return [q, k, v], lambda: T.segment_attend(q, k, v, segments)


def _build_reduce_sum(rng, point):
    x = T.Tensor(rng.standard_normal((3, 4)))
    return [x], lambda: T.reduce_sum(x)


def _build_reduce_mean(rng, point):
    x = T.Tensor(rng.standard_normal((3, 4)))
    return [x], lambda: T.reduce_mean(x)


def _build_huber(rng, point):
    delta = 1.0
    values = rng.standard_normal((3, 4)) * 1.5
    # stay clear of the seam so finite differences are valid
    near = np.abs(np.abs(values) - delta) < 1e-3
    values[near] += 0.01
    x = T.Tensor(values)
    return [x], lambda: T.huber(x, delta)


OP_CHECKS: dict[str, Callable] = {
    "matmul": _build_matmul,
    "linear": _build_linear,
    "add": _build_add,
    "subtract": _build_subtract,
    "multiply": _build_multiply,
    "scalar_multiply": _build_scalar_multiply,
    "concat": _build_concat,
    "reshape": _build_reshape,
    "gather_rows": _build_gather_rows,
    "scatter_add_rows": _build_scatter_add_rows,
    "tanh": _build_tanh,
    "gelu": _build_gelu,
    "layer_norm": _build_layer_norm,
    "softmax": _build_softmax,
    "segment_attend": _build_segment_attend,
    "reduce_sum": _build_reduce_sum,
    "reduce_mean": _build_reduce_mean,
    "huber": _build_huber,
}


def check_op(name: str, points: int = DEFAULT_POINTS, seed: int = 2024, perturb: bool = False) -> float:
    build = OP_CHECKS[name]
    rng = np.random.default_rng((seed, zlib.crc32(name.encode())))
    worst = 0.0
    scale = 1.01 if perturb else 1.0
    for point in range(points):
        inputs, forward = build(rng, point)
        worst = max(worst, check_case(inputs, forward, rng, grad_scale=scale))
    return worst


def run_op_checks(points: int = DEFAULT_POINTS, seed: int = 2024, perturb_op: str | None = None) -> list[OpReport]:
    reports = []
    for name in OP_CHECKS:
        worst = check_op(name, points=points, seed=seed, perturb=(name == perturb_op))
        reports.append(OpReport(name, worst, OP_TOLERANCE))
    return reports


# ---------------------------------------------------------------------------
# Full model
# ---------------------------------------------------------------------------

def _tiny_molecule():
    from .molgraph import Atom, Bond, Molecule

    return Molecule(
        atoms=(
            Atom("O", (0.0, 0.0, 0.119)),
            Atom("H", (0.0, 0.763, -0.477)),
            Atom("H", (0.0, -0.763, -0.477)),
        ),
        bonds=(Bond(0, 1, "single"), Bond(0, 2, "single")),
        identifier="water",
    )


def check_full_model(
    d_model: int = 32,
    n_heads: int = 4,
    n_interaction: int = 1,
    n_transformer: int = 1,
    seed: int = 11,
    h: float = FD_STEP,
) -> float:
    """Finite-difference every parameter scalar of a reduced model against
    the tape gradient of the prediction on a 3-atom molecule."""
    from . import model as M
    from .molgraph import center_molecule, graph_from_molecule

    cfg = M.ModelConfig(
        d_model=d_model,
        n_heads=n_heads,
        n_interaction=n_interaction,
        n_transformer=n_transformer,
    )
    params = M.ModelParams.initialize(cfg, seed)
    graph = graph_from_molecule(center_molecule(_tiny_molecule()))

    with T.Tape() as tape:
        preds, _ = M.forward_graphs([graph], params)
        loss = T.reduce_sum(preds)
    tape.backward(loss, params=params.parameters())

    def scalar() -> float:
        preds, _ = M.forward_graphs([graph], params)
        return float(preds.values.sum())

    worst = 0.0
    for name in params.names():
        tensor = params[name]
        numeric = central_difference(scalar, tensor.values, h=h)
        worst = max(worst, relative_error(tensor.grad, numeric))
    return worst


def run_all(points: int = DEFAULT_POINTS, seed: int = 2024, perturb_op: str | None = None) -> list[OpReport]:
    """Per-op suite plus the full-model check; one row per differentiable op."""
    reports = run_op_checks(points=points, seed=seed, perturb_op=perturb_op)
    reports.append(OpReport("full_model", check_full_model(), MODEL_TOLERANCE))
    return reports
