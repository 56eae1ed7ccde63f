"""Minimal reverse-mode differentiation over dense float64 arrays.

A :class:`Tape` records primitive applications eagerly (values are computed
at apply time) and plays them back in reverse to accumulate gradients.
Everything is 64-bit; any non-finite value produced by a primitive raises
immediately instead of propagating.

Supported primitives (row-wise ops treat a 1-D array as a single row):

=================  =============================================  ==========
name               meaning                                        shapes
=================  =============================================  ==========
matmul             matrix product                                 (m,k)@(k,n) -> (m,n)
add                elementwise sum; 2nd arg may be a row vector   (m,n)+(n,) -> (m,n)
scale              multiply by a python float constant ``c``      any -> same
relu               max(x, 0); subgradient 0 at x == 0             any -> same
row_log_softmax    log softmax per row (max-shifted)              (m,n) -> (m,n); (n,) -> (n,)
row_logsumexp      log-sum-exp per row (max-shifted)              (m,n) -> (m,); (n,) -> ()
row_l2_normalize   x / sqrt(sum x^2 + 1e-12) per row              (m,n) -> (m,n); (n,) -> (n,)
exp                elementwise exp                                any -> same
log                elementwise natural log                        any -> same
sum                sum of all entries                             any -> ()
mean               mean of all entries                            any -> ()
gather_rows        select rows by index (repeats allowed)         (m,...) -> (len(rows),...)
concat_rows        stack along axis 0                             (m1,...)+(m2,...) -> (m1+m2,...)
dot_rows           per-row dot product                            (m,n),(m,n) -> (m,); (n,),(n,) -> ()
=================  =============================================  ==========

Gradient accumulation walks the records in fixed reverse creation order,
so repeated backward passes over an unchanged tape are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

L2_NORM_EPS = 1e-12


class DiffcoreError(Exception):
    """Base class for tape errors."""


class ShapeError(DiffcoreError):
    """Rejected input: shapes do not conform to the primitive's rules."""


class NumericError(DiffcoreError):
    """A primitive produced a NaN or infinity."""


def _as_f64(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    # ascontiguousarray would promote 0-d scalars to 1-d
    return arr if arr.ndim == 0 else np.ascontiguousarray(arr)


@dataclass
class TensorBuf:
    """Dense row-major float64 buffer with an optional gradient of equal shape."""

    value: np.ndarray
    grad: np.ndarray | None = None

    @property
    def dims(self) -> tuple[int, ...]:
        return self.value.shape


@dataclass
class _Record:
    prim: str
    inputs: tuple[int, ...]
    buf: TensorBuf
    params: dict = field(default_factory=dict)
    ctx: dict = field(default_factory=dict)
    is_param: bool = False


class Node:
    """Reference to one tape record. Cheap to copy, valid for the tape's lifetime."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.records[self.index].buf.value

    @property
    def grad(self) -> np.ndarray | None:
        return self.tape.records[self.index].buf.grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


# ---------------------------------------------------------------------------
# primitive definitions: forward(values, params) -> (out, ctx)
#                        backward(g, values, out, ctx, params) -> per-input grads
# ---------------------------------------------------------------------------


def _rows_view(x: np.ndarray) -> np.ndarray:
    # 1-D input is one row
    return x.reshape(1, -1) if x.ndim == 1 else x


def _fw_matmul(vals, params):
    a, b = vals
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul expects (m,k)@(k,n), got {a.shape} @ {b.shape}")
    return a @ b, None


def _bw_matmul(g, vals, out, ctx, params):
    a, b = vals
    return [g @ b.T, a.T @ g]


def _fw_add(vals, params):
    a, b = vals
    if a.shape == b.shape:
        return a + b, "same"
    if a.ndim == 2 and (b.shape == (a.shape[1],) or b.shape == (1, a.shape[1])):
        return a + b.reshape(1, -1), "row"
    raise ShapeError(f"add expects equal shapes or a row-broadcast second arg, got {a.shape} + {b.shape}")


def _bw_add(g, vals, out, ctx, params):
    a, b = vals
    if ctx == "same":
        return [g, g]
    return [g, g.sum(axis=0).reshape(b.shape)]


def _fw_scale(vals, params):
    (a,) = vals
    return a * float(params["c"]), None


def _bw_scale(g, vals, out, ctx, params):
    return [g * float(params["c"])]


def _fw_relu(vals, params):
    (a,) = vals
    return np.maximum(a, 0.0), None


def _bw_relu(g, vals, out, ctx, params):
    (a,) = vals
    return [g * (a > 0.0)]


def _fw_row_log_softmax(vals, params):
    (a,) = vals
    if a.ndim not in (1, 2):
        raise ShapeError(f"row_log_softmax expects 1-D or 2-D input, got shape {a.shape}")
    x = _rows_view(a)
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    return out.reshape(a.shape), None


def _bw_row_log_softmax(g, vals, out, ctx, params):
    (a,) = vals
    go = _rows_view(g)
    soft = np.exp(_rows_view(out))
    grad = go - soft * go.sum(axis=1, keepdims=True)
    return [grad.reshape(a.shape)]


def _fw_row_logsumexp(vals, params):
    (a,) = vals
    if a.ndim not in (1, 2):
        raise ShapeError(f"row_logsumexp expects 1-D or 2-D input, got shape {a.shape}")
    x = _rows_view(a)
    m = x.max(axis=1, keepdims=True)
    out = (m + np.log(np.exp(x - m).sum(axis=1, keepdims=True))).reshape(-1)
    if a.ndim == 1:
        return out.reshape(()), None
    return out, None


def _bw_row_logsumexp(g, vals, out, ctx, params):
    (a,) = vals
    x = _rows_view(a)
    soft = np.exp(x - np.asarray(out).reshape(-1, 1))
    grad = soft * np.asarray(g).reshape(-1, 1)
    return [grad.reshape(a.shape)]


def _fw_row_l2_normalize(vals, params):
    (a,) = vals
    if a.ndim not in (1, 2):
        raise ShapeError(f"row_l2_normalize expects 1-D or 2-D input, got shape {a.shape}")
    x = _rows_view(a)
    norm = np.sqrt((x * x).sum(axis=1, keepdims=True) + L2_NORM_EPS)
    return (x / norm).reshape(a.shape), norm


def _bw_row_l2_normalize(g, vals, out, ctx, params):
    (a,) = vals
    x = _rows_view(a)
    norm = ctx
    go = _rows_view(g)
    dot = (go * x).sum(axis=1, keepdims=True)
    grad = go / norm - x * dot / norm**3
    return [grad.reshape(a.shape)]


def _fw_exp(vals, params):
    (a,) = vals
    return np.exp(a), None


def _bw_exp(g, vals, out, ctx, params):
    return [g * out]


def _fw_log(vals, params):
    (a,) = vals
    return np.log(a), None


def _bw_log(g, vals, out, ctx, params):
    (a,) = vals
    return [g / a]


def _fw_sum(vals, params):
    (a,) = vals
    return np.asarray(a.sum()), None


def _bw_sum(g, vals, out, ctx, params):
    (a,) = vals
    return [np.full(a.shape, float(g))]


def _fw_mean(vals, params):
    (a,) = vals
    return np.asarray(a.mean()), None


def _bw_mean(g, vals, out, ctx, params):
    (a,) = vals
    return [np.full(a.shape, float(g) / a.size)]


def _fw_gather_rows(vals, params):
    (a,) = vals
    rows = params["rows"]
    if a.ndim < 1:
        raise ShapeError("gather_rows expects at least 1-D input")
    if len(rows) == 0:
        raise ShapeError("gather_rows needs at least one index")
    if any(r < 0 or r >= a.shape[0] for r in rows):
        raise ShapeError(f"gather_rows index out of range for axis of length {a.shape[0]}")
    return a[np.asarray(rows, dtype=np.intp)], None


def _bw_gather_rows(g, vals, out, ctx, params):
    (a,) = vals
    grad = np.zeros_like(a)
    np.add.at(grad, np.asarray(params["rows"], dtype=np.intp), g)
    return [grad]


def _fw_concat_rows(vals, params):
    a, b = vals
    if a.ndim != b.ndim or a.ndim < 1 or a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"concat_rows expects matching trailing dims, got {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=0), None


def _bw_concat_rows(g, vals, out, ctx, params):
    a, b = vals
    return [g[: a.shape[0]], g[a.shape[0] :]]


def _fw_dot_rows(vals, params):
    a, b = vals
    if a.shape != b.shape or a.ndim not in (1, 2):
        raise ShapeError(f"dot_rows expects two equal 1-D or 2-D arrays, got {a.shape} and {b.shape}")
    if a.ndim == 1:
        return np.asarray(a @ b), None
    return (a * b).sum(axis=1), None


def _bw_dot_rows(g, vals, out, ctx, params):
    a, b = vals
    if a.ndim == 1:
        return [b * float(g), a * float(g)]
    gc = np.asarray(g).reshape(-1, 1)
    return [b * gc, a * gc]


_PRIMITIVES: dict[str, tuple] = {
    "matmul": (_fw_matmul, _bw_matmul, 2),
    "add": (_fw_add, _bw_add, 2),
    "scale": (_fw_scale, _bw_scale, 1),
    "relu": (_fw_relu, _bw_relu, 1),
    "row_log_softmax": (_fw_row_log_softmax, _bw_row_log_softmax, 1),
    "row_logsumexp": (_fw_row_logsumexp, _bw_row_logsumexp, 1),
    "row_l2_normalize": (_fw_row_l2_normalize, _bw_row_l2_normalize, 1),
    "exp": (_fw_exp, _bw_exp, 1),
    "log": (_fw_log, _bw_log, 1),
    "sum": (_fw_sum, _bw_sum, 1),
    "mean": (_fw_mean, _bw_mean, 1),
    "gather_rows": (_fw_gather_rows, _bw_gather_rows, 1),
    "concat_rows": (_fw_concat_rows, _bw_concat_rows, 2),
    "dot_rows": (_fw_dot_rows, _bw_dot_rows, 2),
}


def register_primitive(name: str, forward, backward, arity: int) -> None:
    """Extension point for composite ops (with hand-derived VJPs) that other
    modules need but that the core set does not express, e.g. batch norm."""
    _PRIMITIVES[name] = (forward, backward, arity)


class Tape:
    """Ordered record of primitive applications; node references only point
    backwards, so creation order is a valid topological order."""

    def __init__(self):
        self.records: list[_Record] = []

    def _push(self, prim, inputs, value, params=None, ctx=None, is_param=False) -> Node:
        buf = TensorBuf(value=_as_f64(value))
        self.records.append(
            _Record(prim=prim, inputs=inputs, buf=buf, params=params or {}, ctx=ctx or {}, is_param=is_param)
        )
        return Node(self, len(self.records) - 1)

    def constant(self, value) -> Node:
        """Leaf node that never receives a gradient of interest."""
        return self._push("const", (), value)

    def parameter(self, value) -> Node:
        """Leaf node marked as a parameter; backward() fills its grad."""
        return self._push("const", (), value, is_param=True)

    def apply(self, primitive: str, *inputs: Node, **params) -> Node:
        if primitive not in _PRIMITIVES:
            raise ShapeError(f"unknown primitive {primitive!r}")
        fw, _, arity = _PRIMITIVES[primitive]
        if len(inputs) != arity:
            raise ShapeError(f"{primitive} takes {arity} input(s), got {len(inputs)}")
        for node in inputs:
            if node.tape is not self:
                raise ShapeError("input node belongs to a different tape")
        vals = [node.value for node in inputs]
        out, ctx = fw(vals, params)
        out = _as_f64(out)
        if not np.all(np.isfinite(out)):
            raise NumericError(f"{primitive} produced a non-finite value")
        return self._push(primitive, tuple(n.index for n in inputs), out, params=params, ctx={"v": ctx})

    def parameters(self) -> list[Node]:
        return [Node(self, i) for i, r in enumerate(self.records) if r.is_param]

    def backward(self, loss: Node) -> None:
        """Accumulate d(loss)/d(node) into every record's grad buffer.

        Grads are reset first, so calling backward twice on an unchanged tape
        yields identical results.
        """
        if loss.tape is not self:
            raise ShapeError("loss node belongs to a different tape")
        if loss.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        for rec in self.records:
            rec.buf.grad = np.zeros_like(rec.buf.value)
        self.records[loss.index].buf.grad = np.ones_like(loss.value)
        for idx in range(loss.index, -1, -1):
            rec = self.records[idx]
            if rec.prim == "const" or not rec.inputs:
                continue
            _, bw, _ = _PRIMITIVES[rec.prim]
            vals = [self.records[i].buf.value for i in rec.inputs]
            grads = bw(rec.buf.grad, vals, rec.buf.value, rec.ctx.get("v"), rec.params)
            for src, g in zip(rec.inputs, grads):
                self.records[src].buf.grad += g


def backward(tape: Tape, loss: Node) -> None:
    tape.backward(loss)


@dataclass
class GradCheckReport:
    max_abs_err: float
    max_rel_err: float
    passed: bool


# coordinates whose analytic and numeric gradients both sit below this are
# compared absolutely, not relatively
GRAD_CHECK_ATOL = 1e-8


def grad_check(fn, point, step: float, tol: float) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn`` against central differences.

    ``fn(tape, x_node) -> loss_node`` must build a scalar loss from the single
    input node. The numeric gradient is (f(x + step*e) - f(x - step*e)) /
    (2*step) per coordinate; a coordinate passes when the absolute error is
    at most GRAD_CHECK_ATOL or the relative error is at most ``tol``.
    """
    if step <= 0 or tol <= 0:
        raise ShapeError("grad_check needs step > 0 and tol > 0")
    point = _as_f64(point)

    tape = Tape()
    x = tape.parameter(point)
    loss = fn(tape, x)
    if loss.shape != ():
        raise ShapeError(f"grad_check fn must return a scalar, got shape {loss.shape}")
    tape.backward(loss)
    analytic = x.grad.copy()

    def value_at(p: np.ndarray) -> float:
        t = Tape()
        return float(fn(t, t.parameter(p)).value)

    numeric = np.zeros_like(point)
    flat = point.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = value_at(point)
        flat[i] = orig - step
        lo = value_at(point)
        flat[i] = orig
        num_flat[i] = (hi - lo) / (2.0 * step)

    abs_err = np.abs(analytic - numeric)
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    max_abs = float(abs_err.max()) if abs_err.size else 0.0
    big = denom > GRAD_CHECK_ATOL
    max_rel = float((abs_err[big] / denom[big]).max()) if big.any() else 0.0
    passed = bool(np.all((abs_err <= GRAD_CHECK_ATOL) | (abs_err <= tol * denom)))
    return GradCheckReport(max_abs_err=max_abs, max_rel_err=max_rel, passed=passed)
