"""Minimal reverse-mode gradient tape over dense numpy arrays.

One :class:`Tape` is recorded per optimization step.  Nodes are appended in
execution order, so insertion order is already a topological order and the
backward sweep is a single reverse pass that visits each node once.  Values
and adjoints share the tape dtype (float32 in the pipeline; tests run a
float64 shadow tape for finite-difference checks).

Fused rendering primitives (ordered alpha compositing) register their numba
kernels through :func:`fused_primitive`; everything else is plain numpy.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when an op receives incompatible operand shapes."""


class _Node:
    __slots__ = ("value", "parents", "vjps")

    def __init__(self, value, parents, vjps):
        self.value = value
        self.parents = parents
        self.vjps = vjps


class Tape:
    """Append-only record of array ops with per-node adjoint rules."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes: list[_Node] = []

    def _record(self, value: np.ndarray, parents=(), vjps=()) -> "Var":
        value = np.ascontiguousarray(value, dtype=self.dtype)
        self.nodes.append(_Node(value, tuple(parents), tuple(vjps)))
        return Var(self, len(self.nodes) - 1)

    def var(self, value) -> "Var":
        """Create a leaf variable (a gradient target)."""
        return self._record(np.asarray(value))

    def const(self, value) -> "Var":
        """Create a leaf the caller does not intend to differentiate.

        Mechanically identical to :meth:`var`; the distinction is
        documentation for call sites.
        """
        return self._record(np.asarray(value))

    def __len__(self) -> int:
        return len(self.nodes)


class Var:
    """Handle to one tape node; shape is fixed at creation."""

    __slots__ = ("tape", "nid")

    def __init__(self, tape: Tape, nid: int):
        self.tape = tape
        self.nid = nid

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.nid].value

    @property
    def shape(self):
        return self.value.shape

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            if other.tape is not self.tape:
                raise ValueError("cannot mix variables from different tapes")
            return other
        return self.tape.const(np.asarray(other))

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return mul(self._lift(other), self)

    def __truediv__(self, other):
        return div(self, self._lift(other))

    def __rtruediv__(self, other):
        return div(self._lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self):
        return f"Var(nid={self.nid}, shape={self.shape})"


class Gradients:
    """Result of a backward pass: adjoints keyed by node id."""

    def __init__(self, tape: Tape, adjoints: dict[int, np.ndarray]):
        self._tape = tape
        self._adjoints = adjoints

    def wrt(self, v: Var) -> np.ndarray:
        g = self._adjoints.get(v.nid)
        if g is None:
            return np.zeros_like(v.value)
        return g


def backward(loss: Var) -> Gradients:
    """Reverse sweep from a scalar loss; unreachable nodes report zero."""
    tape = loss.tape
    if loss.value.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.value.shape}")
    adjoints: dict[int, np.ndarray] = {loss.nid: np.ones_like(loss.value)}
    for nid in range(loss.nid, -1, -1):
        g = adjoints.get(nid)
        if g is None:
            continue
        node = tape.nodes[nid]
        for pid, vjp in zip(node.parents, node.vjps):
            contrib = vjp(g)
            prev = adjoints.get(pid)
            if prev is None:
                # copy: vjps may return views of cached values or of g itself
                adjoints[pid] = np.array(contrib, dtype=tape.dtype)
            else:
                prev += contrib
    return Gradients(tape, adjoints)


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(name: str, a: np.ndarray, b: np.ndarray):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------


def add(a: Var, b: Var) -> Var:
    _check_broadcast("add", a.value, b.value)
    return a.tape._record(
        a.value + b.value,
        (a.nid, b.nid),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
    )


def sub(a: Var, b: Var) -> Var:
    _check_broadcast("sub", a.value, b.value)
    return a.tape._record(
        a.value - b.value,
        (a.nid, b.nid),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(-g, b.shape)),
    )


def mul(a: Var, b: Var) -> Var:
    _check_broadcast("mul", a.value, b.value)
    av, bv = a.value, b.value
    return a.tape._record(
        av * bv,
        (a.nid, b.nid),
        (lambda g: _unbroadcast(g * bv, a.shape), lambda g: _unbroadcast(g * av, b.shape)),
    )


def div(a: Var, b: Var) -> Var:
    _check_broadcast("div", a.value, b.value)
    av, bv = a.value, b.value
    out = av / bv
    return a.tape._record(
        out,
        (a.nid, b.nid),
        (lambda g: _unbroadcast(g / bv, a.shape), lambda g: _unbroadcast(-g * out / bv, b.shape)),
    )


def neg(a: Var) -> Var:
    return a.tape._record(-a.value, (a.nid,), (lambda g: -g,))


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return a.tape._record(out, (a.nid,), (lambda g: g * out,))


def log(a: Var) -> Var:
    av = a.value
    return a.tape._record(np.log(av), (a.nid,), (lambda g: g / av,))


def sqrt(a: Var) -> Var:
    out = np.sqrt(a.value)
    return a.tape._record(out, (a.nid,), (lambda g: g * (0.5 / out),))


def sigmoid(a: Var) -> Var:
    out = 1.0 / (1.0 + np.exp(-a.value))
    return a.tape._record(out, (a.nid,), (lambda g: g * out * (1.0 - out),))


def tanh(a: Var) -> Var:
    out = np.tanh(a.value)
    return a.tape._record(out, (a.nid,), (lambda g: g * (1.0 - out * out),))


def absolute(a: Var) -> Var:
    av = a.value
    sign = np.sign(av)  # subgradient 0 at the kink
    return a.tape._record(np.abs(av), (a.nid,), (lambda g: g * sign,))


def softmax(a: Var, axis: int = -1) -> Var:
    av = a.value
    shifted = av - av.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return out * (g - dot)

    return a.tape._record(out, (a.nid,), (vjp,))


# ---------------------------------------------------------------------------
# reductions / structure
# ---------------------------------------------------------------------------


def sum_(a: Var, axis=None, keepdims: bool = False) -> Var:
    av = a.value
    out = av.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, av.shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape).copy()

    return a.tape._record(out, (a.nid,), (vjp,))


def mean(a: Var, axis=None, keepdims: bool = False) -> Var:
    n = a.value.size if axis is None else np.prod([a.value.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), a.tape.const(1.0 / float(n)))


def reshape(a: Var, shape) -> Var:
    av = a.value
    return a.tape._record(av.reshape(shape), (a.nid,), (lambda g: g.reshape(av.shape),))


def transpose(a: Var, axes=None) -> Var:
    av = a.value
    if axes is None:
        axes = tuple(reversed(range(av.ndim)))
    inv = tuple(np.argsort(axes))
    return a.tape._record(av.transpose(axes), (a.nid,), (lambda g: g.transpose(inv),))


def getitem(a: Var, key) -> Var:
    av = a.value
    out = av[key]

    def vjp(g):
        full = np.zeros_like(av)
        np.add.at(full, key, g)
        return full

    return a.tape._record(out, (a.nid,), (vjp,))


def gather(a: Var, idx: np.ndarray, axis: int = 0) -> Var:
    idx = np.asarray(idx)
    av = a.value
    out = np.take(av, idx, axis=axis)

    def vjp(g):
        full = np.zeros_like(av)
        sl = [slice(None)] * av.ndim
        sl[axis] = idx
        np.add.at(full, tuple(sl), g)
        return full

    return a.tape._record(out, (a.nid,), (vjp,))


def index_add(base: Var, idx: np.ndarray, updates: Var, axis: int = 0) -> Var:
    """out = base with updates scatter-added at idx along axis."""
    idx = np.asarray(idx)
    out = base.value.copy()
    sl = [slice(None)] * out.ndim
    sl[axis] = idx
    np.add.at(out, tuple(sl), updates.value)

    def vjp_updates(g):
        return np.take(g, idx, axis=axis)

    return base.tape._record(out, (base.nid, updates.nid), (lambda g: g, vjp_updates))


def concat(vs: Sequence[Var], axis: int = 0) -> Var:
    tape = vs[0].tape
    values = [v.value for v in vs]
    out = np.concatenate(values, axis=axis)
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return tape._record(out, tuple(v.nid for v in vs), tuple(make_vjp(i) for i in range(len(vs))))


def stack(vs: Sequence[Var], axis: int = 0) -> Var:
    expanded = [reshape(v, v.shape[:axis] + (1,) + v.shape[axis:]) for v in vs]
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def _swap_last2(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {av.shape} @ {bv.shape}")
    out = np.matmul(av, bv)

    def vjp_a(g):
        return _unbroadcast(np.matmul(g, _swap_last2(bv)), av.shape)

    def vjp_b(g):
        return _unbroadcast(np.matmul(_swap_last2(av), g), bv.shape)

    return a.tape._record(out, (a.nid, b.nid), (vjp_a, vjp_b))


def normalize_rows(a: Var, eps: float = 0.0) -> Var:
    """x / ||x|| along the last axis."""
    av = a.value
    n = np.sqrt(np.sum(av * av, axis=-1, keepdims=True) + eps)
    out = av / n

    def vjp(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        return (g - out * dot) / n

    return a.tape._record(out, (a.nid,), (vjp,))


# ---------------------------------------------------------------------------
# rotation primitives
# ---------------------------------------------------------------------------


def quaternion_to_matrix(q: Var) -> Var:
    """Unit quaternion(s) (...,4) -> rotation matrices (...,3,3).

    The input is assumed normalized; compose with :func:`normalize_rows`
    for raw parameters.
    """
    qv = q.value
    if qv.shape[-1] != 4:
        raise ShapeError(f"quaternion_to_matrix: last dim must be 4, got {qv.shape}")
    w, x, y, z = np.moveaxis(qv, -1, 0)
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1)
    out = np.stack([row0, row1, row2], axis=-2)

    def vjp(g):
        g00, g01, g02 = g[..., 0, 0], g[..., 0, 1], g[..., 0, 2]
        g10, g11, g12 = g[..., 1, 0], g[..., 1, 1], g[..., 1, 2]
        g20, g21, g22 = g[..., 2, 0], g[..., 2, 1], g[..., 2, 2]
        dw = 2 * (-g01 * z + g02 * y + g10 * z - g12 * x - g20 * y + g21 * x)
        dx = 2 * (g01 * y + g02 * z + g10 * y - 2 * g11 * x - g12 * w + g20 * z + g21 * w - 2 * g22 * x)
        dy = 2 * (-2 * g00 * y + g01 * x + g02 * w + g10 * x + g12 * z - g20 * w + g21 * z - 2 * g22 * y)
        dz = 2 * (-2 * g00 * z - g01 * w + g02 * x + g10 * w - 2 * g11 * z + g12 * y + g20 * x + g21 * y)
        return np.stack([dw, dx, dy, dz], axis=-1)

    return q.tape._record(out, (q.nid,), (vjp,))


def quat_multiply(a: Var, b: Var) -> Var:
    """Hamilton product over the last axis; broadcasts leading axes."""
    av, bv = a.value, b.value
    if av.shape[-1] != 4 or bv.shape[-1] != 4:
        raise ShapeError(f"quat_multiply: last dims must be 4, got {av.shape}, {bv.shape}")
    aw, ax, ay, az = np.moveaxis(av, -1, 0)
    bw, bx, by, bz = np.moveaxis(bv, -1, 0)
    out = np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )

    def vjp_a(g):
        gw, gx, gy, gz = np.moveaxis(g, -1, 0)
        daw = gw * bw + gx * bx + gy * by + gz * bz
        dax = -gw * bx + gx * bw - gy * bz + gz * by
        day = -gw * by + gx * bz + gy * bw - gz * bx
        daz = -gw * bz - gx * by + gy * bx + gz * bw
        return _unbroadcast(np.stack([daw, dax, day, daz], axis=-1), av.shape)

    def vjp_b(g):
        gw, gx, gy, gz = np.moveaxis(g, -1, 0)
        dbw = gw * aw + gx * ax + gy * ay + gz * az
        dbx = -gw * ax + gx * aw + gy * az - gz * ay
        dby = -gw * ay - gx * az + gy * aw + gz * ax
        dbz = -gw * az + gx * ay - gy * ax + gz * aw
        return _unbroadcast(np.stack([dbw, dbx, dby, dbz], axis=-1), bv.shape)

    return a.tape._record(out, (a.nid, b.nid), (vjp_a, vjp_b))


def quat_exp(v: Var) -> Var:
    """Axis-angle tangent (...,3) -> unit quaternion (...,4).

    q = [cos(t/2), sin(t/2)/t * v] with series expansion below t=1e-4 so the
    map and its gradient are exact at the identity.
    """
    vv = v.value
    if vv.shape[-1] != 3:
        raise ShapeError(f"quat_exp: last dim must be 3, got {vv.shape}")
    t2 = np.sum(vv * vv, axis=-1, keepdims=True)
    t = np.sqrt(t2)
    small = t < 1e-4
    tsafe = np.where(small, 1.0, t)
    half = 0.5 * t
    s = np.where(small, 0.5 - t2 / 48.0, np.sin(half) / tsafe)
    w = np.cos(half)
    out = np.concatenate([w, s * vv], axis=-1)

    # ds/dt / t, guarded by the series  (s'(t) = cos(t/2)/(2t) - sin(t/2)/t^2)
    ds_over_t = np.where(
        small,
        -1.0 / 24.0 + t2 / 960.0,
        (0.5 * np.cos(half) * tsafe - np.sin(half)) / (tsafe**3),
    )

    def vjp(g):
        gw = g[..., :1]
        gv = g[..., 1:]
        # dw/dv = -0.5 sin(t/2) * v/t = -0.5 * s * v  (exact incl. limit)
        grad = -0.5 * s * vv * gw
        # d(s v_i)/dv_j = s delta_ij + v_i v_j * (s'(t)/t)
        grad = grad + s * gv + vv * np.sum(gv * vv, axis=-1, keepdims=True) * ds_over_t
        return grad

    return v.tape._record(out, (v.nid,), (vjp,))


# ---------------------------------------------------------------------------
# convolution support (3x3, zero padding, stride 1)
# ---------------------------------------------------------------------------


def unfold3x3(a: Var) -> Var:
    """(H, W, C) -> (H, W, 9C) patch extraction with zero padding."""
    av = a.value
    if av.ndim != 3:
        raise ShapeError(f"unfold3x3 expects (H, W, C), got {av.shape}")
    H, W, C = av.shape
    padded = np.zeros((H + 2, W + 2, C), dtype=av.dtype)
    padded[1:-1, 1:-1] = av
    cols = np.empty((H, W, 9, C), dtype=av.dtype)
    for k, (dy, dx) in enumerate([(i, j) for i in range(3) for j in range(3)]):
        cols[:, :, k, :] = padded[dy : dy + H, dx : dx + W]
    out = cols.reshape(H, W, 9 * C)

    def vjp(g):
        g = g.reshape(H, W, 9, C)
        gpad = np.zeros((H + 2, W + 2, C), dtype=g.dtype)
        for k, (dy, dx) in enumerate([(i, j) for i in range(3) for j in range(3)]):
            gpad[dy : dy + H, dx : dx + W] += g[:, :, k, :]
        return gpad[1:-1, 1:-1]

    return a.tape._record(out, (a.nid,), (vjp,))


# ---------------------------------------------------------------------------
# fused primitives (registered by other modules, e.g. the rasterizer)
# ---------------------------------------------------------------------------


def fused_primitive(tape: Tape, value: np.ndarray, parents: Sequence[Var], vjps: Sequence[Callable]) -> Var:
    """Record an externally computed op with caller-supplied adjoint rules."""
    return tape._record(value, tuple(p.nid for p in parents), tuple(vjps))


# ---------------------------------------------------------------------------
# finite differences (test oracle)
# ---------------------------------------------------------------------------


def finite_difference(fn: Callable[..., np.ndarray], inputs: list[np.ndarray], eps: float = 1e-4):
    """Central finite differences of a scalar-valued fn at `inputs` (float64)."""
    work = [np.array(x, dtype=np.float64) for x in inputs]
    grads = []
    for i, x in enumerate(work):
        g = np.zeros_like(x)
        flat = x.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            fp = float(np.asarray(fn(*work)).reshape(()))
            flat[k] = orig - eps
            fm = float(np.asarray(fn(*work)).reshape(()))
            flat[k] = orig
            gflat[k] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads
