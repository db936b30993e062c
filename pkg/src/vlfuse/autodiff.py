"""Dense numpy tensors with reverse-mode automatic differentiation.

Only what the toy vision-language model needs is here: 2-D matmul,
elementwise arithmetic, SiLU, row softmax, layer norm, embedding gather,
row concatenation and a fused cross-entropy.  Broadcasting is limited to
``matrix + row-vector``; every other binary op wants identical shapes.

Recording is off by default.  Wrap a forward pass in ``with record():``
to build a graph, then call ``loss.backward()`` once.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass

import numpy as np

_RECORDING = False
_ids = itertools.count()


class DimensionError(ValueError):
    pass


class GraphError(RuntimeError):
    """Raised for backward on a non-scalar or an already-consumed graph."""


class OracleInvalidError(RuntimeError):
    pass


class DegenerateBatchError(ValueError):
    pass


@contextlib.contextmanager
def record(enabled: bool = True):
    """Turn graph recording on (or off) inside the block."""
    global _RECORDING
    prev = _RECORDING
    _RECORDING = enabled
    try:
        yield
    finally:
        _RECORDING = prev


def is_recording() -> bool:
    return _RECORDING


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "name",
                 "_parents", "_backward", "_released")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.name = name
        self._parents = ()
        self._backward = None
        self._released = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data.copy()

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def assign_(self, values):
        """Parameter-update entry point; the only sanctioned in-place write."""
        values = np.asarray(values, dtype=self.data.dtype)
        if values.shape != self.data.shape:
            raise DimensionError(f"assign_ shape {values.shape} != {self.data.shape}")
        self.data[...] = values

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad,
                      name=self.name)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return hadamard(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self):
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def parameter(data, name=None, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True, name=name)


def _result(data, parents, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = next(_ids)
    out.name = None
    out._released = False
    needs = _RECORDING and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _result(a.data @ b.data, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, g.T)

    return _result(a.data.T.copy(), (a,), bw)


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may be a row vector broadcast over ``a``'s rows."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        def bw(g):
            _accum(a, g)
            _accum(b, g)
    elif a.data.ndim == 2 and b.shape in ((a.shape[1],), (1, a.shape[1])):
        def bw(g):
            _accum(a, g)
            _accum(b, g.sum(axis=0).reshape(b.shape))
    else:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not conform")
    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    return add(a, scale(as_tensor(b), -1.0))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        _accum(a, c * g)

    return _result(a.data * a.data.dtype.type(c), (a,), bw)


def hadamard(a: Tensor, b, constant_b: bool = False) -> Tensor:
    """Elementwise product.

    When ``b`` is an ndarray, or ``constant_b`` is set, ``b`` is treated as a
    fixed mask: no gradient is ever written to it.
    """
    a = as_tensor(a)
    if isinstance(b, np.ndarray):
        b = Tensor(b.astype(a.dtype, copy=False))
        constant_b = True
    _check_same(a, b, "hadamard")
    bd = b.data.astype(a.dtype, copy=False)

    def bw(g):
        _accum(a, g * bd)
        if not constant_b:
            _accum(b, g * a.data)

    parents = (a,) if constant_b else (a, b)
    return _result(a.data * bd, parents, bw)


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _silu_grad(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def silu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    xd = x.data

    def bw(g):
        _accum(x, g * _silu_grad(xd))

    return _result(xd * _sigmoid(xd), (x,), bw)


def softmax_rows(x: Tensor, additive_mask=None) -> Tensor:
    """Row-wise softmax with max subtraction.

    ``additive_mask`` is a constant array added before normalisation
    (``-inf`` entries drop out); each row needs at least one finite entry.
    """
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got {x.shape}")
    if np.isnan(x.data).any():
        raise FloatingPointError("softmax_rows: NaN in input")
    z = x.data if additive_mask is None else x.data + additive_mask
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        _accum(x, p * (g - (g * p).sum(axis=1, keepdims=True)))

    return _result(p, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs width {d}")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        _accum(gain, (g * xhat).sum(axis=0))
        _accum(bias, g.sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data
            dx = inv * (gh - gh.mean(axis=1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=1, keepdims=True))
            _accum(x, dx)

    return _result(xhat * gain.data + bias.data, (x, gain, bias), bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; gradients scatter-add back."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or (ids.size and (ids.min() < 0 or ids.max() >= table.shape[0])):
        raise IndexError(f"embedding ids out of range for table {table.shape}")

    def bw(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            _accum(table, full)

    return _result(table.data[ids], (table,), bw)


def concat_rows(parts) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    width = parts[0].shape[1]
    for p in parts:
        if p.data.ndim != 2 or p.shape[1] != width:
            raise DimensionError(f"concat_rows: widths differ ({p.shape} vs width {width})")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            _accum(p, g[lo:hi])

    return _result(np.concatenate([p.data for p in parts], axis=0), parts, bw)


def diag_scale_cols(x: Tensor, v: Tensor) -> Tensor:
    """``x @ diag(v)``: scale column j of ``x`` by ``v[j]``."""
    x, v = as_tensor(x), as_tensor(v)
    if v.data.ndim != 1 or x.data.ndim != 2 or x.shape[1] != v.shape[0]:
        raise DimensionError(f"diag_scale_cols: {x.shape} with diagonal {v.shape}")

    def bw(g):
        _accum(x, g * v.data)
        _accum(v, (g * x.data).sum(axis=0))

    return _result(x.data * v.data, (x, v), bw)


def sum_all(x: Tensor) -> Tensor:
    def bw(g):
        _accum(x, np.full_like(x.data, g))

    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), bw)


def add_scalars(terms) -> Tensor:
    """Sum of scalar tensors (used to pool per-sample losses)."""
    terms = list(terms)

    def bw(g):
        for t in terms:
            _accum(t, g)

    total = np.asarray(sum(t.data for t in terms), dtype=terms[0].dtype)
    return _result(total, terms, bw)


def cross_entropy(logits: Tensor, targets, positions) -> Tensor:
    """Mean negative log-softmax of ``targets`` at the given row ``positions``."""
    positions = np.asarray(positions, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    if positions.size == 0:
        raise DegenerateBatchError("cross_entropy: no answer positions selected")
    if targets.shape != positions.shape:
        raise DimensionError("cross_entropy: one target per masked position required")
    rows = logits.data[positions]
    if np.isnan(rows).any():
        raise FloatingPointError("cross_entropy: NaN logits")
    z = rows - rows.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(len(targets)), targets]
    loss = np.mean(lse - picked)
    n = len(targets)

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), targets] -= 1.0
        full = np.zeros_like(logits.data)
        np.add.at(full, positions, p * (g / n))
        _accum(logits, full)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params=None):
    """Propagate d(loss) to every reachable leaf, visiting each node once.

    The graph is released afterwards; a second call on the same loss raises
    ``GraphError`` instead of silently double-counting.  If ``params`` is
    given their gradients start at zero, so unreachable ones end up zero.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._released:
        raise GraphError("graph already consumed by an earlier backward()")
    if params is not None:
        for p in params:
            p.zero_grad()
    if not loss.requires_grad:
        loss._released = True
        return
    order = _topo(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None:
            continue
        g = node.grad if node.grad is not None else np.zeros_like(node.data)
        node._backward(g)
        node.grad = None  # interior buffers are transient
    for node in order:
        node._backward = None
        node._parents = ()
        node._released = True


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

@dataclass
class GradReport:
    max_rel_error: float
    worst_param: str | None
    worst_index: tuple | None
    per_param: dict

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def rel_error(a, n):
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-12)


def finite_diff_check(forward, params, eps: float = 1e-5) -> GradReport:
    """Compare analytic gradients against central differences.

    ``forward`` is a zero-argument callable returning a scalar Tensor; it is
    re-run under ``record()`` for the analytic pass.  Parameters must hold
    float64 data.  Two plain evaluations are compared first so a
    non-deterministic closure is caught before it can fake agreement.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise OracleInvalidError(f"finite_diff_check needs float64 params ({p.name})")
    f0 = float(forward().data)
    f1 = float(forward().data)
    if f0 != f1:
        raise OracleInvalidError(f"forward is non-deterministic: {f0!r} vs {f1!r}")

    with record():
        loss = forward()
    backward(loss, params)
    analytic = [p.grad.copy() for p in params]

    worst, worst_name, worst_idx = -1.0, None, None
    per_param = {}
    for i, (p, ga) in enumerate(zip(params, analytic)):
        name = p.name or f"param{i}"
        flat = p.data.reshape(-1)
        num = np.empty(flat.size)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = float(forward().data)
            flat[j] = orig - eps
            fm = float(forward().data)
            flat[j] = orig
            num[j] = (fp - fm) / (2 * eps)
        err = rel_error(ga.reshape(-1), num)
        k = int(np.argmax(err))
        per_param[name] = float(err[k])
        if err[k] > worst:
            worst, worst_name = float(err[k]), name
            worst_idx = tuple(int(v) for v in np.unravel_index(k, p.shape))
    return GradReport(max(worst, 0.0), worst_name, worst_idx, per_param)
