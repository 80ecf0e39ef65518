"""Minimal reverse-mode differentiation over float64 numpy arrays.

Exactly the primitives the banded-retrieval policy and its log-probability
need: matmul, limited-broadcast elementwise arithmetic, row softmax, layer
norm, a small family of scalar specials, and column slice/concat for
multi-head attention. Nothing else.

Recording is define-by-run: opening a ``Tape`` as a context manager makes
it the active tape for the current thread, and every op whose inputs are
differentiable (a ``requires_grad`` leaf, or a tensor produced under the
same tape) appends a node. ``backward`` replays the nodes in reverse once;
a second backward over the same tape raises ``UsageError`` rather than
silently re-accumulating. Forward math outside any tape is plain numpy.

All reductions delegate to numpy's deterministic summation, so identical
inputs give bit-identical outputs on a fixed platform. Tensors and tapes
are confined to one thread; independent tapes on read-only parameter
snapshots may run in parallel.
"""

from __future__ import annotations

import threading
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import specials
from .errors import UsageError


class ShapeError(ValueError):
    """Operand shapes incompatible with the op's contract."""


class DomainError(ValueError):
    """Input outside the op's documented domain (e.g. log of x <= 0)."""


_LOCAL = threading.local()


def _active_tape() -> Optional["Tape"]:
    return getattr(_LOCAL, "tape", None)


class Tensor:
    """A float64 array with an optional gradient slot.

    ``requires_grad`` marks a leaf (a learnable parameter); gradients
    accumulate into ``grad`` during ``backward``. Non-leaf tensors carry a
    back-reference to the tape they were recorded on so the engine can
    route upstream gradients through them, but their grads are discarded.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional["Tape"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of op nodes for one backward pass."""

    def __init__(self):
        self._nodes: List[Tuple[Callable, Tuple[Tensor, ...], Tensor]] = []
        self._spent = False

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise UsageError("nested tapes are not supported")
        _LOCAL.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _LOCAL.tape = None

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, fn: Callable, inputs: Tuple[Tensor, ...], out: Tensor) -> None:
        out._tape = self
        self._nodes.append((fn, inputs, out))


def _tracked(t: Tensor, tape: Tape) -> bool:
    return t.requires_grad or t._tape is tape


def _make(inputs: Tuple[Tensor, ...], out_data: np.ndarray, fn: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(_tracked(t, tape) for t in inputs):
        tape._record(fn, inputs, out)
    return out


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise DomainError(f"{op} produced a non-finite value")


# ---------------------------------------------------------------------------
# broadcasting support: same shape, matrix + row vector, anything + scalar


def _binary_shapes_ok(a: np.ndarray, b: np.ndarray) -> bool:
    if a.shape == b.shape:
        return True
    if a.shape == () or b.shape == ():
        return True
    if a.ndim == 2 and b.shape == (a.shape[1],):
        return True
    if b.ndim == 2 and a.shape == (b.shape[1],):
        return True
    return False


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    if len(shape) == 1 and g.ndim == 2 and shape[0] == g.shape[1]:
        return g.sum(axis=0)
    raise ShapeError(f"cannot reduce gradient of shape {g.shape} to {shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    if not _binary_shapes_ok(a.data, b.data):
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    sa, sb = a.shape, b.shape

    def fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make((a, b), a.data + b.data, fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if not _binary_shapes_ok(a.data, b.data):
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    sa, sb = a.shape, b.shape

    def fn(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return _make((a, b), a.data - b.data, fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if not _binary_shapes_ok(a.data, b.data):
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def fn(g):
        return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)

    return _make((a, b), ad * bd, fn)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def fn(g):
        return (c * g,)

    return _make((a,), c * a.data, fn)


def neg(a: Tensor) -> Tensor:
    def fn(g):
        return (-g,)

    return _make((a,), -a.data, fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ ({a.shape} x {b.shape})")
    ad, bd = a.data, b.data

    def fn(g):
        return g @ bd.T, ad.T @ g

    return _make((a, b), ad @ bd, fn)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w + b with a row-broadcast bias; one tape node."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} x {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
    xd, wd = x.data, w.data

    def fn(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return _make((x, w, b), xd @ wd + b.data, fn)


def attention_heads(q: Tensor, k: Tensor, v: Tensor, n_heads: int,
                    batch: int = 1) -> Tensor:
    """All heads of scaled-dot-product self-attention, outputs concatenated.

    Inputs are the full (batch*N, d) query/key/value projections; columns
    split into n_heads blocks of d/n_heads, rows into ``batch`` blocks of
    equal length that never attend to each other. No masking within a
    block, no positions.
    """
    rows, d = q.shape
    if k.shape != (rows, d) or v.shape != (rows, d):
        raise ShapeError("attention_heads: q, k, v must share one shape")
    if d % n_heads != 0:
        raise ShapeError("attention_heads: width not divisible by head count")
    if rows % batch != 0:
        raise ShapeError("attention_heads: rows not divisible by batch")
    n = rows // batch
    dh = d // n_heads
    inv = 1.0 / np.sqrt(dh)

    def split(x):  # (batch*n, d) -> (batch, heads, n, dh)
        return x.reshape(batch, n, n_heads, dh).transpose(0, 2, 1, 3)

    def join(x4):  # inverse of split
        return np.ascontiguousarray(x4.transpose(0, 2, 1, 3)).reshape(rows, d)

    q4, k4, v4 = split(q.data), split(k.data), split(v.data)
    s = np.matmul(q4, k4.transpose(0, 1, 3, 2)) * inv
    s -= s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    att = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        g4 = split(g)
        dv4 = np.matmul(att.transpose(0, 1, 3, 2), g4)
        datt = np.matmul(g4, v4.transpose(0, 1, 3, 2))
        ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
        dq4 = np.matmul(ds, k4) * inv
        dk4 = np.matmul(ds.transpose(0, 1, 3, 2), q4) * inv
        return join(dq4), join(dk4), join(dv4)

    return _make((q, k, v), join(np.matmul(att, v4)), fn)


def pool_rows(weights: Tensor, values: Tensor) -> Tensor:
    """Per-block weighted sum: (B, N) weights against (B*N, d) rows -> (B, d)."""
    if weights.data.ndim != 2 or values.data.ndim != 2:
        raise ShapeError("pool_rows expects 2-D operands")
    b, n = weights.shape
    rows, d = values.shape
    if rows != b * n:
        raise ShapeError(f"pool_rows: {rows} rows cannot split into {b}x{n}")
    w = weights.data
    h3 = values.data.reshape(b, n, d)

    def fn(g):
        dw = np.matmul(g[:, None, :], h3.transpose(0, 2, 1))[:, 0, :]
        dh = (w[:, :, None] * g[:, None, :]).reshape(rows, d)
        return dw, dh

    out = np.matmul(w[:, None, :], h3)[:, 0, :]
    return _make((weights, values), out, fn)


def beta_log_density(alpha: Tensor, beta: Tensor, x) -> Tensor:
    """log Beta pdf at the constant x, differentiable in (alpha, beta).

    x may be a scalar or an array matching the parameter shapes (one
    action per row). log B(alpha, beta) is built from lgamma; the
    gradients run through digamma. Fused into one node because the policy
    evaluates it per sampled action.
    """
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0.0) or np.any(x >= 1.0):
        raise DomainError("beta_log_density requires x in the open interval (0, 1)")
    ad, bd = alpha.data, beta.data
    if ad.shape != bd.shape or (x.shape != () and x.shape != ad.shape):
        raise ShapeError("beta_log_density: operand shapes differ")
    if np.any(ad <= 0.0) or np.any(bd <= 0.0):
        raise DomainError("beta_log_density requires positive shape parameters")
    lx = np.log(x)
    l1x = np.log1p(-x)
    out = ((ad - 1.0) * lx + (bd - 1.0) * l1x
           - (specials.lgamma(ad) + specials.lgamma(bd) - specials.lgamma(ad + bd)))

    def fn(g):
        psi_ab = specials.digamma(ad + bd)
        da = g * (lx - specials.digamma(ad) + psi_ab)
        db = g * (l1x - specials.digamma(bd) + psi_ab)
        return da, db

    return _make((alpha, beta), out, fn)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a 2-D operand")

    def fn(g):
        return (np.ascontiguousarray(g.T),)

    return _make((a,), np.ascontiguousarray(a.data.T), fn)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = a.shape

    def fn(g):
        return (g.reshape(old),)

    return _make((a,), a.data.reshape(shape).copy(), fn)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("slice_cols expects a 2-D operand")
    if not (0 <= start < stop <= a.shape[1]):
        raise ShapeError(f"slice_cols: bad range [{start}, {stop}) for {a.shape}")
    full = a.shape

    def fn(g):
        z = np.zeros(full)
        z[:, start:stop] = g
        return (z,)

    return _make((a,), a.data[:, start:stop].copy(), fn)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols needs at least one part")
    if any(p.data.ndim != 2 for p in parts):
        raise ShapeError("concat_cols expects 2-D operands")
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def fn(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(widths)))

    return _make(tuple(parts), np.concatenate([p.data for p in parts], axis=1), fn)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape

    def fn(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _make((a,), np.asarray(a.data.sum()), fn)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction for stability."""
    if x.data.ndim != 2:
        raise ShapeError("softmax_rows expects a 2-D operand")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def fn(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return _make((x,), y, fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float) -> Tensor:
    """Normalize the last axis to zero mean and unit (population) variance."""
    if eps <= 0.0:
        raise DomainError("layer_norm requires eps > 0")
    xd = x.data
    if xd.ndim not in (1, 2):
        raise ShapeError("layer_norm expects a 1-D or 2-D operand")
    n = xd.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError("layer_norm: gain/bias must match the last axis")
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gain.data

    def fn(g):
        if g.ndim == 1:
            dgain = g * xhat
            dbias = g.copy()
        else:
            dgain = (g * xhat).sum(axis=0)
            dbias = g.sum(axis=0)
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgain, dbias

    return _make((x, gain, bias), xhat * gd + bias.data, fn)


# ---------------------------------------------------------------------------
# elementwise scalar specials


def _unary(a: Tensor, out_data: np.ndarray, dfn: Callable[[], np.ndarray]) -> Tensor:
    def fn(g):
        return (g * dfn(),)

    return _make((a,), out_data, fn)


def sin(a: Tensor) -> Tensor:
    ad = a.data
    return _unary(a, np.sin(ad), lambda: np.cos(ad))


def cos(a: Tensor) -> Tensor:
    ad = a.data
    return _unary(a, np.cos(ad), lambda: -np.sin(ad))


def log(a: Tensor) -> Tensor:
    ad = a.data
    if np.any(ad <= 0.0):
        raise DomainError("log requires strictly positive input")
    return _unary(a, np.log(ad), lambda: 1.0 / ad)


def softplus(a: Tensor) -> Tensor:
    ad = a.data
    return _unary(a, specials.softplus(ad), lambda: specials.sigmoid(ad))


def sigmoid(a: Tensor) -> Tensor:
    y = specials.sigmoid(a.data)
    return _unary(a, y, lambda: y * (1.0 - y))


def gelu(a: Tensor) -> Tensor:
    # Cache the forward tanh; recomputing it dominates the backward cost.
    ad = a.data
    t = np.tanh(specials._GELU_C * (ad + 0.044715 * ad * ad * ad))
    out = 0.5 * ad * (1.0 + t)

    def dfn():
        dinner = specials._GELU_C * (1.0 + 3.0 * 0.044715 * ad * ad)
        return 0.5 * (1.0 + t) + 0.5 * ad * (1.0 - t * t) * dinner

    return _unary(a, out, dfn)


def lgamma(a: Tensor) -> Tensor:
    ad = a.data
    if np.any(ad <= 0.0):
        raise DomainError("lgamma requires strictly positive input")
    return _unary(a, specials.lgamma(ad), lambda: specials.digamma(ad))


# ---------------------------------------------------------------------------
# backward


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def backward(tape: Tape, loss: Tensor,
             params: Optional[Mapping[str, Tensor]] = None) -> Dict[str, np.ndarray]:
    """Accumulate gradients of ``loss`` into every touched leaf.

    Returns a name -> gradient map. When ``params`` is given, every entry
    is present in the result, with zeros for parameters the loss does not
    depend on; otherwise only touched named leaves appear. A tape can be
    walked once; a second call raises ``UsageError``.
    """
    if loss.data.size != 1:
        raise UsageError("backward requires a scalar loss")
    if tape._spent:
        raise UsageError("tape already consumed by a previous backward")
    if loss._tape is not tape and not loss.requires_grad:
        raise UsageError("loss is not a node on this tape")
    tape._spent = True

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: Dict[int, Tensor] = {}
    if loss.requires_grad:
        _leaf_accumulate(loss, np.ones_like(loss.data), touched)

    for fn, inputs, out in reversed(tape._nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, fn(g)):
            if gi is None:
                continue
            if inp.requires_grad:
                _leaf_accumulate(inp, gi, touched)
            elif inp._tape is tape:
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi

    result: Dict[str, np.ndarray] = {}
    if params is not None:
        for name, p in params.items():
            result[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    else:
        for t in touched.values():
            if t.name is not None:
                result[t.name] = t.grad
    return result


def _leaf_accumulate(leaf: Tensor, g: np.ndarray, touched: Dict[int, Tensor]) -> None:
    g = np.asarray(g, dtype=np.float64)
    if g.shape != leaf.data.shape:
        g = g.reshape(leaf.data.shape)
    if leaf.grad is None:
        leaf.grad = g.copy()
    else:
        leaf.grad += g
    touched[id(leaf)] = leaf
