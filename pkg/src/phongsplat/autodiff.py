"""Reverse-mode automatic differentiation on numpy arrays.

The engine records elementary array operations on a tape and supports two
backward modes: a fast raw-numpy pass for first-order gradients, and a
recording pass whose adjoint computation is itself taped, which is what makes
gradients of gradients (one inner descent step inside an outer loss) work.

Everything runs in float64. Functions written against this module's
primitives accept either `Var` or plain ndarray inputs; with plain arrays
they are ordinary numpy code with no recording overhead, which is the code
path used for inference-style rendering.
"""

from __future__ import annotations

import hashlib
import threading
from typing import Callable, NamedTuple, Sequence

import numpy as np

__all__ = [
    "Tape", "Var", "NonFiniteError", "grad", "grad_var",
    "grad_through_inner_step", "finite_diff_check", "FdCheck",
    "stop_gradient", "structure_log", "log_structure",
    "freeze_stopgrads", "replay_stopgrads",
]


class NonFiniteError(RuntimeError):
    """A non-finite value appeared during a forward or backward pass."""

    def __init__(self, phase: str, kind: str):
        super().__init__(f"non-finite value in {phase} pass at op '{kind}'")
        self.phase = phase
        self.kind = kind


class Tape:
    """Append-only issue counter for node ids; one per evaluation, one thread."""

    __slots__ = ("n_nodes", "root_id")

    def __init__(self):
        self.n_nodes = 0
        self.root_id = None

    def _next_id(self) -> int:
        i = self.n_nodes
        self.n_nodes = i + 1
        return i

    def leaf(self, value) -> "Var":
        return Var(np.asarray(value, dtype=np.float64), self)


class Var:
    """One tape node: a value plus the recipe for its parent adjoints."""

    __slots__ = ("value", "tape", "idx", "parents", "vjp", "op")

    def __init__(self, value, tape, parents=(), vjp=None, op="leaf"):
        self.value = value
        self.tape = tape
        self.idx = tape._next_id()
        self.parents = parents
        self.vjp = vjp
        self.op = op

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Var(op={self.op}, shape={np.shape(self.value)}, idx={self.idx})"

    # arithmetic sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __pow__(self, c): return power(self, c)
    def __neg__(self): return neg(self)


def val(x):
    """Raw ndarray/scalar behind `x`, whether taped or not."""
    return x.value if isinstance(x, Var) else x


def _is_var(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


def _node(value, inputs: tuple, vjp_all: Callable, op: str) -> Var:
    # vjp_all(g, out_handle, input_handles) -> one contribution per input
    # (None for inputs that take no gradient).
    var_pos = [i for i, x in enumerate(inputs) if isinstance(x, Var)]
    tape = inputs[var_pos[0]].tape

    def vjp(g, out_h, parent_hs):
        hs = list(inputs)
        for i, h in zip(var_pos, parent_hs):
            hs[i] = h
        outs = vjp_all(g, out_h, hs)
        return [outs[i] for i in var_pos]

    parents = tuple(inputs[i] for i in var_pos)
    return Var(value, tape, parents=parents, vjp=vjp, op=op)


# ---------------------------------------------------------------------------
# structure log: digests of every data-dependent discrete choice (branch
# masks, sort orders, hit sets) made during an evaluation, used to flag
# finite-difference samples that straddle a kink.

_TLS = threading.local()


def _digest(arr) -> bytes:
    a = np.ascontiguousarray(arr)
    h = hashlib.blake2b(digest_size=8)
    h.update(str(a.shape).encode())
    h.update(a.tobytes())
    return h.digest()


class structure_log:
    """Context manager collecting discrete-structure digests; `.entries` after."""

    def __enter__(self):
        self.entries = []
        stack = getattr(_TLS, "structure", None)
        if stack is None:
            stack = _TLS.structure = []
        stack.append(self.entries)
        return self

    def __exit__(self, *exc):
        _TLS.structure.pop()
        return False


def _slog_active() -> bool:
    return bool(getattr(_TLS, "structure", None))


def log_structure(tag: str, arr) -> None:
    stack = getattr(_TLS, "structure", None)
    if stack:
        entry = (tag, _digest(arr))
        for entries in stack:
            entries.append(entry)


# ---------------------------------------------------------------------------
# stop-gradient with capture/replay, so a finite-difference probe can hold
# the stopped branch fixed at the expansion point exactly like the analytic
# gradient does.

class freeze_stopgrads:
    """Capture every stop_gradient value (in call order) into `.store`."""

    def __enter__(self):
        self.store = []
        _TLS.sg_mode = ("capture", self.store, 0)
        return self

    def __exit__(self, *exc):
        _TLS.sg_mode = None
        return False


class replay_stopgrads:
    def __init__(self, store):
        self.store = store

    def __enter__(self):
        _TLS.sg_mode = ("replay", self.store, 0)
        return self

    def __exit__(self, *exc):
        _TLS.sg_mode = None
        return False


def stop_gradient(x):
    """Value of `x` detached from the tape (always returned as raw data)."""
    v = val(x)
    mode = getattr(_TLS, "sg_mode", None)
    if mode is not None:
        kind, store, pos = mode
        if kind == "capture":
            store.append(np.array(v, copy=True))
        else:  # replay
            if pos >= len(store):
                raise IndexError("stop_gradient replay exhausted")
            v = store[pos]
            _TLS.sg_mode = (kind, store, pos + 1)
    return v


# ---------------------------------------------------------------------------
# primitives

def _sum_to(g, shape: tuple):
    """Reduce adjoint `g` down to `shape` (inverse of numpy broadcasting)."""
    gshape = np.shape(val(g))
    if gshape == shape:
        return g
    lead = len(gshape) - len(shape)
    if lead > 0:
        g = sum_(g, axis=tuple(range(lead)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and np.shape(val(g))[i] != 1)
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    if np.shape(val(g)) != shape:
        g = reshape(g, shape)
    return g


def add(a, b):
    if not _is_var(a, b):
        return np.add(a, b)
    sa, sb = np.shape(val(a)), np.shape(val(b))
    out = np.add(val(a), val(b))

    def vjp_all(g, o, hs):
        return (_sum_to(g, sa), _sum_to(g, sb))

    return _node(out, (a, b), vjp_all, "add")


def sub(a, b):
    if not _is_var(a, b):
        return np.subtract(a, b)
    sa, sb = np.shape(val(a)), np.shape(val(b))
    out = np.subtract(val(a), val(b))

    def vjp_all(g, o, hs):
        return (_sum_to(g, sa), _sum_to(neg(g), sb))

    return _node(out, (a, b), vjp_all, "sub")


def neg(a):
    if not _is_var(a):
        return np.negative(a)

    def vjp_all(g, o, hs):
        return (neg(g),)

    return _node(np.negative(a.value), (a,), vjp_all, "neg")


def mul(a, b):
    if not _is_var(a, b):
        return np.multiply(a, b)
    sa, sb = np.shape(val(a)), np.shape(val(b))
    out = np.multiply(val(a), val(b))
    na, nb = isinstance(a, Var), isinstance(b, Var)

    def vjp_all(g, o, hs):
        ah, bh = hs
        return (_sum_to(mul(g, bh), sa) if na else None,
                _sum_to(mul(g, ah), sb) if nb else None)

    return _node(out, (a, b), vjp_all, "mul")


def div(a, b):
    if not _is_var(a, b):
        return np.divide(a, b)
    sa, sb = np.shape(val(a)), np.shape(val(b))
    out = np.divide(val(a), val(b))
    na, nb = isinstance(a, Var), isinstance(b, Var)

    def vjp_all(g, o, hs):
        ah, bh = hs
        return (_sum_to(div(g, bh), sa) if na else None,
                _sum_to(neg(div(mul(g, o), bh)), sb) if nb else None)

    return _node(out, (a, b), vjp_all, "div")


def power(a, c):
    """a ** c for a constant exponent c."""
    c = float(c)
    if not _is_var(a):
        return np.power(a, c)
    out = np.power(a.value, c)

    def vjp_all(g, o, hs):
        (ah,) = hs
        if c == 2.0:
            return (mul(g, mul(2.0, ah)),)
        return (mul(g, mul(c, power(ah, c - 1.0))),)

    return _node(out, (a,), vjp_all, "power")


def exp(a):
    if not _is_var(a):
        return np.exp(a)

    def vjp_all(g, o, hs):
        return (mul(g, o),)

    return _node(np.exp(a.value), (a,), vjp_all, "exp")


def log(a):
    if not _is_var(a):
        return np.log(a)

    def vjp_all(g, o, hs):
        return (div(g, hs[0]),)

    return _node(np.log(a.value), (a,), vjp_all, "log")


def sqrt(a):
    if not _is_var(a):
        return np.sqrt(a)

    def vjp_all(g, o, hs):
        return (div(g, mul(2.0, o)),)

    return _node(np.sqrt(a.value), (a,), vjp_all, "sqrt")


def _sigmoid_raw(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    v = np.asarray(val(a), dtype=np.float64)
    out = _sigmoid_raw(v)
    if not _is_var(a):
        return out if v.ndim else float(out)

    def vjp_all(g, o, hs):
        return (mul(g, mul(o, sub(1.0, o))),)

    return _node(out, (a,), vjp_all, "sigmoid")


def maximum(a, b):
    av, bv = val(a), val(b)
    if _slog_active():
        log_structure("maximum", np.greater(av, bv))
    if not _is_var(a, b):
        return np.maximum(av, bv)
    sa, sb = np.shape(av), np.shape(bv)
    out = np.maximum(av, bv)
    # subgradient: ties get zero on both sides (max(0, x) has slope 0 at x=0)
    ma = (av > bv).astype(np.float64)
    mb = (bv > av).astype(np.float64)

    def vjp_all(g, o, hs):
        return (_sum_to(mul(g, ma), sa), _sum_to(mul(g, mb), sb))

    return _node(out, (a, b), vjp_all, "maximum")


def minimum(a, b):
    av, bv = val(a), val(b)
    if _slog_active():
        log_structure("minimum", np.less(av, bv))
    if not _is_var(a, b):
        return np.minimum(av, bv)
    sa, sb = np.shape(av), np.shape(bv)
    out = np.minimum(av, bv)
    ma = (av < bv).astype(np.float64)
    mb = (bv < av).astype(np.float64)

    def vjp_all(g, o, hs):
        return (_sum_to(mul(g, ma), sa), _sum_to(mul(g, mb), sb))

    return _node(out, (a, b), vjp_all, "minimum")


def absolute(a):
    av = val(a)
    s = np.sign(av)  # sign(0) == 0: flat subgradient at the kink
    if _slog_active():
        log_structure("abs", s)
    if not _is_var(a):
        return np.abs(av)

    def vjp_all(g, o, hs):
        return (mul(g, s),)

    return _node(np.abs(av), (a,), vjp_all, "abs")


def where(cond, a, b):
    """Select with a raw boolean mask; the mask never carries gradient."""
    cond = np.asarray(cond, dtype=bool)
    if _slog_active():
        log_structure("where", cond)
    if not _is_var(a, b):
        return np.where(cond, a, b)
    sa, sb = np.shape(val(a)), np.shape(val(b))
    out = np.where(cond, val(a), val(b))
    cf = cond.astype(np.float64)
    na, nb = isinstance(a, Var), isinstance(b, Var)

    def vjp_all(g, o, hs):
        return (None,
                _sum_to(mul(g, cf), sa) if na else None,
                _sum_to(mul(g, 1.0 - cf), sb) if nb else None)

    return _node(out, (cond, a, b), vjp_all, "where")


def sum_(a, axis=None, keepdims=False):
    if not _is_var(a):
        return np.sum(a, axis=axis, keepdims=keepdims)
    sa = np.shape(a.value)
    out = np.sum(a.value, axis=axis, keepdims=keepdims)

    def vjp_all(g, o, hs):
        gg = g
        if not keepdims and axis is not None:
            axes = axis if isinstance(axis, tuple) else (axis,)
            kshape = tuple(1 if i in {ax % len(sa) for ax in axes} else d
                           for i, d in enumerate(sa))
            gg = reshape(gg, kshape)
        elif not keepdims:
            gg = reshape(gg, (1,) * len(sa))
        return (broadcast_to(gg, sa),)

    return _node(out, (a,), vjp_all, "sum")


def mean(a, axis=None, keepdims=False):
    sa = np.shape(val(a))
    if axis is None:
        n = int(np.size(val(a)))
    elif isinstance(axis, tuple):
        n = int(np.prod([sa[ax] for ax in axis]))
    else:
        n = sa[axis]
    return div(sum_(a, axis=axis, keepdims=keepdims), float(n))


def min_reduce(a, axis):
    """Exact min along `axis`; subgradient goes to the lowest-index minimum."""
    av = val(a)
    if _slog_active():
        log_structure("min_reduce", np.argmin(av, axis=axis))
    if not _is_var(a):
        return np.min(av, axis=axis)
    out = np.min(av, axis=axis)
    arg = np.argmin(av, axis=axis)  # lowest index on ties
    onehot = np.zeros_like(av)
    np.put_along_axis(onehot, np.expand_dims(arg, axis), 1.0, axis=axis)
    sa = av.shape

    def vjp_all(g, o, hs):
        gg = reshape(g, tuple(1 if i == axis % len(sa) else d for i, d in enumerate(sa)))
        return (mul(broadcast_to(gg, sa), onehot),)

    return _node(out, (a,), vjp_all, "min_reduce")


def reshape(a, shape):
    shape = tuple(shape)
    if not _is_var(a):
        return np.reshape(a, shape)
    sa = np.shape(a.value)
    out = np.reshape(a.value, shape)

    def vjp_all(g, o, hs):
        return (reshape(g, sa),)

    return _node(out, (a,), vjp_all, "reshape")


def broadcast_to(a, shape):
    shape = tuple(shape)
    if not _is_var(a):
        return np.broadcast_to(a, shape)
    sa = np.shape(a.value)
    out = np.broadcast_to(a.value, shape)

    def vjp_all(g, o, hs):
        return (_sum_to(g, sa),)

    return _node(out, (a,), vjp_all, "broadcast_to")


def swap_last2(a):
    if not _is_var(a):
        return np.swapaxes(a, -1, -2)

    def vjp_all(g, o, hs):
        return (swap_last2(g),)

    return _node(np.swapaxes(a.value, -1, -2), (a,), vjp_all, "swap_last2")


def matmul(a, b):
    if not _is_var(a, b):
        return np.matmul(a, b)
    sa, sb = np.shape(val(a)), np.shape(val(b))
    out = np.matmul(val(a), val(b))
    na, nb = isinstance(a, Var), isinstance(b, Var)

    def vjp_all(g, o, hs):
        ah, bh = hs
        ga = _sum_to(matmul(g, swap_last2(bh)), sa) if na else None
        gb = _sum_to(matmul(swap_last2(ah), g), sb) if nb else None
        return (ga, gb)

    return _node(out, (a, b), vjp_all, "matmul")


def take(a, indices, axis=0):
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % max(np.ndim(val(a)), 1)
    if not _is_var(a):
        return np.take(a, idx, axis=ax)
    out = np.take(a.value, idx, axis=ax)
    n = np.shape(a.value)[ax]

    def vjp_all(g, o, hs):
        return (scatter_add(g, idx, n, axis=ax),)

    return _node(out, (a,), vjp_all, "take")


def _scatter_raw(values, idx, length, axis):
    values = np.asarray(values, dtype=np.float64)
    shape = list(values.shape)
    shape[axis] = length
    if values.ndim == 1 and axis == 0:
        return np.bincount(idx, weights=values, minlength=length)
    if values.ndim == 2 and axis == 0:
        out = np.empty(shape, dtype=np.float64)
        for c in range(values.shape[1]):
            out[:, c] = np.bincount(idx, weights=values[:, c], minlength=length)
        return out
    out = np.zeros(shape, dtype=np.float64)
    sl = (slice(None),) * axis + (idx,)
    np.add.at(out, sl, values)
    return out


def scatter_add(values, indices, length, axis=0):
    """Sum `values` into a zero array of size `length` along `axis` at `indices`."""
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % max(np.ndim(val(values)), 1)
    if not _is_var(values):
        return _scatter_raw(values, idx, length, ax)
    out = _scatter_raw(values.value, idx, length, ax)

    def vjp_all(g, o, hs):
        return (take(g, idx, axis=ax),)

    return _node(out, (values,), vjp_all, "scatter_add")


def cumsum(a, axis=0):
    if not _is_var(a):
        return np.cumsum(a, axis=axis)

    def vjp_all(g, o, hs):
        return (flip(cumsum(flip(g, axis), axis), axis),)

    return _node(np.cumsum(a.value, axis=axis), (a,), vjp_all, "cumsum")


def flip(a, axis=0):
    if not _is_var(a):
        return np.flip(a, axis=axis)

    def vjp_all(g, o, hs):
        return (flip(g, axis),)

    return _node(np.flip(a.value, axis=axis), (a,), vjp_all, "flip")


def concatenate(xs: Sequence, axis=0):
    if not _is_var(*xs):
        return np.concatenate([np.asarray(x) for x in xs], axis=axis)
    sizes = [np.shape(val(x))[axis] for x in xs]
    out = np.concatenate([val(x) for x in xs], axis=axis)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def vjp_all(g, o, hs):
        return tuple(take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
                     for i in range(len(xs)))

    return _node(out, tuple(xs), vjp_all, "concatenate")


def stack(xs: Sequence, axis=0):
    expanded = []
    for x in xs:
        s = list(np.shape(val(x)))
        s.insert(axis if axis >= 0 else len(s) + 1 + axis, 1)
        expanded.append(reshape(x, s))
    return concatenate(expanded, axis=axis)


# convenience wrappers ------------------------------------------------------

def dot(a, b, axis=-1, keepdims=False):
    return sum_(mul(a, b), axis=axis, keepdims=keepdims)


def norm(a, axis=-1, keepdims=False):
    return sqrt(sum_(mul(a, a), axis=axis, keepdims=keepdims))


def normalize(a, axis=-1, eps=0.0):
    n = norm(a, axis=axis, keepdims=True)
    if eps:
        n = maximum(n, eps)
    return div(a, n)


def clamp(a, lo=None, hi=None):
    if lo is not None:
        a = maximum(a, lo)
    if hi is not None:
        a = minimum(a, hi)
    return a


# ---------------------------------------------------------------------------
# backward passes

def _reachable_desc(root: Var):
    seen = {root.idx}
    order = [root]
    stack = [root]
    while stack:
        v = stack.pop()
        for p in v.parents:
            if p.idx not in seen:
                seen.add(p.idx)
                order.append(p)
                stack.append(p)
    order.sort(key=lambda v: v.idx, reverse=True)
    return order


def _backward(root: Var, wrt: Sequence[Var], create_graph: bool, seed=None):
    if seed is None:
        seed = np.ones(np.shape(root.value), dtype=np.float64)
    adjoint = {root.idx: seed}
    wanted = {w.idx for w in wrt}
    kept = {}
    for v in _reachable_desc(root):
        g = adjoint.pop(v.idx, None)
        if g is None:
            continue
        if v.idx in wanted:
            kept[v.idx] = g  # full adjoint: all consumers already visited
        if v.vjp is None:
            continue
        if create_graph:
            contribs = v.vjp(g, v, v.parents)
        else:
            graw = val(g)
            contribs = v.vjp(graw, v.value, tuple(p.value for p in v.parents))
        for p, c in zip(v.parents, contribs):
            if c is None:
                continue
            acc = adjoint.get(p.idx)
            adjoint[p.idx] = c if acc is None else add(acc, c)
    out = []
    for w in wrt:
        g = kept.get(w.idx)
        if g is None:
            g = np.zeros(np.shape(w.value), dtype=np.float64)
            if create_graph:
                g = Var(g, root.tape, op="zero_grad")
        out.append(g)
    return out


def grad_var(loss: Var, wrt, create_graph=False):
    """Gradient of a scalar Var w.r.t. one Var or a list of Vars.

    With create_graph=True the returned gradients are themselves taped and
    can be differentiated again.
    """
    single = isinstance(wrt, Var)
    outs = _backward(loss, [wrt] if single else list(wrt), create_graph)
    return outs[0] if single else outs


def _param_values(params) -> np.ndarray:
    v = getattr(params, "values", params)
    return np.asarray(v, dtype=np.float64)


def _first_nonfinite_kind(root: Var) -> str:
    for v in sorted(_reachable_desc(root), key=lambda v: v.idx):
        if not np.all(np.isfinite(v.value)):
            return v.op
    return "unknown"


def grad(loss_fn: Callable, params) -> np.ndarray:
    """Flat gradient of a scalar loss function of a flat parameter vector."""
    vals = _param_values(params)
    tape = Tape()
    p = tape.leaf(vals)
    loss = loss_fn(p)
    if not isinstance(loss, Var):
        return np.zeros_like(vals)
    tape.root_id = loss.idx
    if not np.all(np.isfinite(loss.value)):
        raise NonFiniteError("forward", _first_nonfinite_kind(loss))
    g = _backward(loss, [p], create_graph=False)[0]
    g = np.asarray(val(g), dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("backward", _first_nonfinite_kind(loss))
    return g


def grad_through_inner_step(outer_loss: Callable, inner_loss: Callable, params,
                            inner_lr: float, inner_mask=None) -> np.ndarray:
    """d/dp of outer_loss(p - inner_lr * mask * grad(inner_loss)(p)).

    The inner gradient is recorded on the same tape, so the result carries
    the full second-order (Hessian-vector) term. inner_mask selects which
    coordinates the inner step updates (None = all).
    """
    vals = _param_values(params)
    tape = Tape()
    p = tape.leaf(vals)
    inner = inner_loss(p)
    if not np.all(np.isfinite(val(inner))):
        raise NonFiniteError("forward", "inner_loss")
    g_in = grad_var(inner, p, create_graph=True)
    step = g_in if inner_mask is None else mul(g_in, np.asarray(inner_mask, dtype=np.float64))
    p_adapted = sub(p, mul(float(inner_lr), step))
    outer = outer_loss(p_adapted)
    if not np.all(np.isfinite(val(outer))):
        raise NonFiniteError("forward", "outer_loss")
    g = np.asarray(val(_backward(outer, [p], create_graph=False)[0]), dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("backward", _first_nonfinite_kind(outer))
    return g


class FdCheck(NamedTuple):
    max_rel_err: float
    n_checked: int
    n_flagged: int
    worst_coord: int


def finite_diff_check(loss_fn: Callable, params, epsilon: float = 1e-6,
                      samples: int = 100, rng=None, coords=None) -> FdCheck:
    """Compare the analytic gradient against central differences.

    Coordinates whose +/- epsilon probes take a different discrete branch
    (clamp, sort order, hit set, ...) sit on a kink and are flagged and
    excluded rather than compared. Relative error uses denominator
    max(|analytic|, |fd|, 1e-8).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    vals = _param_values(params).copy()
    g = grad(loss_fn, vals)
    if coords is None:
        rng = np.random.default_rng(0) if rng is None else rng
        coords = rng.choice(vals.size, size=min(samples, vals.size), replace=False)

    with freeze_stopgrads() as frozen, structure_log() as center_log:
        loss_fn(vals)
    center_digest = tuple(center_log.entries)

    def probe(v):
        with replay_stopgrads(frozen.store), structure_log() as slog:
            f = float(val(loss_fn(v)))
        return f, tuple(slog.entries)

    max_rel, worst, flagged, checked = 0.0, -1, 0, 0
    for i in coords:
        i = int(i)
        vp = vals.copy(); vp[i] += epsilon
        vm = vals.copy(); vm[i] -= epsilon
        try:
            fp, dp = probe(vp)
            fm, dm = probe(vm)
        except (IndexError, ValueError):
            flagged += 1
            continue
        if dp != dm or dp != center_digest:
            flagged += 1
            continue
        fd = (fp - fm) / (2.0 * epsilon)
        rel = abs(g[i] - fd) / max(abs(g[i]), abs(fd), 1e-8)
        checked += 1
        if rel > max_rel:
            max_rel, worst = rel, i
    return FdCheck(max_rel, checked, flagged, worst)
