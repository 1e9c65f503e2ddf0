"""Reverse-mode automatic differentiation over dense 2-D float64 matrices.

A Tensor wraps a (rows, cols) float64 array and, when gradients are
required, remembers its parents and a backward closure on a dynamic tape.
Subexpressions built purely from non-gradient tensors are constant-folded:
no parents are recorded and backward never visits them, so frozen model
components cost only the forward arithmetic.

Backward passes start from a 1x1 scalar root. Gradients accumulate into
`.grad` arrays of the same shape as the data. The finite-difference
checker `gradcheck` is the verification harness used throughout the test
suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError

Array = np.ndarray

_SQRT_HALF = math.sqrt(0.5)
_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    """A 2-D float64 matrix, optionally tracked on the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise DimensionError(f"Tensor must be 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable[[Array], None] | None = None

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, seed: float = 1.0) -> None:
        """Reverse sweep from a scalar root; accumulates into .grad."""
        if self.shape != (1, 1):
            raise DimensionError(f"backward root must be 1x1, got {self.shape}")
        order = _toposort(self)
        self.grad = np.array([[seed]], dtype=np.float64)
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _toposort(root: Tensor) -> list[Tensor]:
    """Nodes reachable from root, root first, parents after children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        nid = id(node)
        if nid in seen:
            continue
        seen.add(nid)
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _accum(t: Tensor, g: Array) -> None:
    if t.grad is None:
        # copy: g may alias a buffer the producing node still owns
        t.grad = np.array(g)
    else:
        t.grad += g


def _make(data: Array, parents: Sequence[Tensor], backward) -> Tensor:
    """Result node; collapses to a constant if no parent needs gradients."""
    out = Tensor(data)
    tracked = tuple(p for p in parents if p.requires_grad or p._parents)
    if tracked:
        out.requires_grad = True
        out._parents = tracked
        out._backward = backward
    return out


def constant(data) -> Tensor:
    return Tensor(data)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# elementwise and linear-algebra operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise DimensionError(f"matmul shapes {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def backward(g: Array) -> None:
        if a.requires_grad or a._parents:
            _accum(a, g @ b.data.T)
        if b.requires_grad or b._parents:
            _accum(b, a.data.T @ g)

    return _make(out_data, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may be a 1 x cols row broadcast over a's rows."""
    if a.shape != b.shape and not (b.rows == 1 and b.cols == a.cols):
        raise DimensionError(f"add shapes {a.shape} + {b.shape}")
    out_data = a.data + b.data

    def backward(g: Array) -> None:
        if a.requires_grad or a._parents:
            _accum(a, g)
        if b.requires_grad or b._parents:
            _accum(b, g if b.shape == a.shape else g.sum(axis=0, keepdims=True))

    return _make(out_data, (a, b), backward)


def linear(a: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused affine map a @ w + b with a 1 x cols bias row."""
    if a.cols != w.rows:
        raise DimensionError(f"linear shapes {a.shape} x {w.shape}")
    if b.shape != (1, w.cols):
        raise DimensionError(f"linear bias must be 1x{w.cols}, got {b.shape}")
    out_data = a.data @ w.data + b.data

    def backward(g: Array) -> None:
        if a.requires_grad or a._parents:
            _accum(a, g @ w.data.T)
        if w.requires_grad or w._parents:
            _accum(w, a.data.T @ g)
        if b.requires_grad or b._parents:
            _accum(b, g.sum(axis=0, keepdims=True))

    return _make(out_data, (a, w, b), backward)


def add_const(a: Tensor, c: Array | float) -> Tensor:
    out_data = a.data + c

    def backward(g: Array) -> None:
        _accum(a, g)

    return _make(out_data, (a,), backward)


def scale(a: Tensor, s: float) -> Tensor:
    out_data = a.data * s

    def backward(g: Array) -> None:
        _accum(a, g * s)

    return _make(out_data, (a,), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes {a.shape} * {b.shape}")
    out_data = a.data * b.data

    def backward(g: Array) -> None:
        if a.requires_grad or a._parents:
            _accum(a, g * b.data)
        if b.requires_grad or b._parents:
            _accum(b, g * a.data)

    return _make(out_data, (a, b), backward)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(g: Array) -> None:
        _accum(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation (smooth everywhere)."""
    x = a.data
    # x*x*x, not x**3: np.power's generic path is ~75x slower
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def backward(g: Array) -> None:
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        _accum(a, g * local)

    return _make(out_data, (a,), backward)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=1, keepdims=True)

    def backward(g: Array) -> None:
        dot = (g * out_data).sum(axis=1, keepdims=True)
        _accum(a, out_data * (g - dot))

    return _make(out_data, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise normalization to zero mean, unit variance, then affine."""
    if gain.shape != (1, a.cols) or bias.shape != (1, a.cols):
        raise DimensionError(
            f"layer_norm affine must be 1x{a.cols}, got {gain.shape} and {bias.shape}"
        )
    mu = a.data.mean(axis=1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def backward(g: Array) -> None:
        if gain.requires_grad or gain._parents:
            _accum(gain, (g * xhat).sum(axis=0, keepdims=True))
        if bias.requires_grad or bias._parents:
            _accum(bias, g.sum(axis=0, keepdims=True))
        if a.requires_grad or a._parents:
            n = a.cols
            gx = g * gain.data
            term = gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(
                axis=1, keepdims=True
            )
            _accum(a, inv * term)

    return _make(out_data, (a, gain, bias), backward)


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean over positions of -log softmax(logits)[target]."""
    ids = np.asarray(targets, dtype=np.int64)
    if len(ids) != logits.rows:
        raise DimensionError(
            f"cross_entropy targets length {len(ids)} vs logits rows {logits.rows}"
        )
    if len(ids) and (ids.min() < 0 or ids.max() >= logits.cols):
        raise IndexError(
            f"target id out of range [0, {logits.cols}): {ids.min()}..{ids.max()}"
        )
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logprobs = shifted - logsumexp
    n = len(ids)
    loss = -logprobs[np.arange(n), ids].mean()

    def backward(g: Array) -> None:
        p = np.exp(logprobs)
        p[np.arange(n), ids] -= 1.0
        _accum(logits, (g[0, 0] / n) * p)

    return _make(np.array([[loss]]), (logits,), backward)


def take_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of a table by integer id (embedding lookup)."""
    idx = np.asarray(ids, dtype=np.int64)
    if len(idx) and (idx.min() < 0 or idx.max() >= table.rows):
        raise IndexError(f"row id out of range [0, {table.rows})")
    out_data = table.data[idx]

    def backward(g: Array) -> None:
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx, g)

    return _make(out_data, (table,), backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    cols = parts[0].cols
    for p in parts:
        if p.cols != cols:
            raise DimensionError("concat_rows requires equal column counts")
    out_data = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.rows for p in parts])

    def backward(g: Array) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad or p._parents:
                _accum(p, g[lo:hi])

    return _make(out_data, tuple(parts), backward)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    out_data = a.data[start:stop]

    def backward(g: Array) -> None:
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[start:stop] += g

    return _make(out_data, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    out_data = np.array([[a.data.sum()]])

    def backward(g: Array) -> None:
        _accum(a, np.full_like(a.data, g[0, 0]))

    return _make(out_data, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def multi_head_attention(
    q: Tensor, k: Tensor, v: Tensor, n_heads: int, mask: Array | None = None
) -> Tensor:
    """Scaled dot-product attention over column-sliced heads.

    q is (n, d); k and v are (m, d); d must divide by n_heads. mask, when
    given, is an (n, m) additive constant (use large negatives, not -inf,
    to keep outputs finite). Returns (n, d). Fused into one tape node so
    composed models stay cheap; the backward rule is the standard
    attention gradient, vectorized over heads.
    """
    n, d = q.shape
    m = k.rows
    if d % n_heads != 0:
        raise DimensionError(f"model dim {d} not divisible by {n_heads} heads")
    if k.cols != d or v.cols != d or v.rows != m:
        raise DimensionError(
            f"attention shapes q={q.shape} k={k.shape} v={v.shape}"
        )
    dh = d // n_heads
    alpha = 1.0 / math.sqrt(dh)

    qh = q.data.reshape(n, n_heads, dh).transpose(1, 0, 2)
    kh = k.data.reshape(m, n_heads, dh).transpose(1, 0, 2)
    vh = v.data.reshape(m, n_heads, dh).transpose(1, 0, 2)

    scores = alpha * (qh @ kh.transpose(0, 2, 1))
    if mask is not None:
        scores = scores + mask
    scores -= scores.max(axis=2, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=2, keepdims=True)
    ctx = attn @ vh
    out_data = ctx.transpose(1, 0, 2).reshape(n, d)

    def backward(g: Array) -> None:
        dctx = g.reshape(n, n_heads, dh).transpose(1, 0, 2)
        need_qk = (q.requires_grad or q._parents) or (k.requires_grad or k._parents)
        if v.requires_grad or v._parents:
            _accum(v, (attn.transpose(0, 2, 1) @ dctx).transpose(1, 0, 2).reshape(m, d))
        if need_qk:
            dattn = dctx @ vh.transpose(0, 2, 1)
            dscores = attn * (dattn - (dattn * attn).sum(axis=2, keepdims=True))
            dscores *= alpha
            if q.requires_grad or q._parents:
                _accum(q, (dscores @ kh).transpose(1, 0, 2).reshape(n, d))
            if k.requires_grad or k._parents:
                _accum(
                    k,
                    (dscores.transpose(0, 2, 1) @ qh).transpose(1, 0, 2).reshape(m, d),
                )

    return _make(out_data, (q, k, v), backward)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradcheckEntry:
    name: str
    max_rel_err: float
    passed: bool


@dataclass
class GradcheckReport:
    entries: list[GradcheckEntry] = field(default_factory=list)
    tolerance: float = 1e-6
    note: str = ""

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)


def gradcheck(
    fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    tolerance: float = 1e-6,
    h: float = 1e-5,
) -> GradcheckReport:
    """Compare analytic gradients of a scalar function to central differences.

    fn must rebuild its graph on every call and return a 1x1 Tensor.
    Failures are reported per parameter, never raised.
    """
    for p in params.values():
        p.zero_grad()
    out = fn()
    out.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    report = GradcheckReport(tolerance=tolerance)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = fn().item()
            flat[i] = orig - h
            f_minus = fn().item()
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2.0 * h)
        num = numeric.reshape(p.data.shape)
        ana = analytic[name]
        denom = np.maximum(1.0, np.maximum(np.abs(ana), np.abs(num)))
        rel = float(np.max(np.abs(ana - num) / denom)) if ana.size else 0.0
        report.entries.append(GradcheckEntry(name, rel, rel < tolerance))
    return report
