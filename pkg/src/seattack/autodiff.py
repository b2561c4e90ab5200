"""Tape-based reverse-mode differentiation over real arrays and complex (re, im) pairs.

Every primitive accepts either :class:`Var` objects or plain numpy arrays.  When
no argument is a Var the primitive simply returns the numpy result, so the same
graph-building function can be evaluated with or without a tape.

Complex tensors are :class:`DualTensor` pairs of real planes; the gradient of a
real loss with respect to a complex input is returned as the pair
``(dL/d re, dL/d im)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np


class AutodiffError(Exception):
    pass


class UnregisteredPrimitive(AutodiffError, TypeError):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class ExternalStateError(AutodiffError):
    """A checkpoint region touched a differentiable value it was not given as input."""


@dataclass
class Node:
    op: str
    parents: tuple            # var id per argument, None for constants
    outputs: tuple            # var ids produced by this node
    out_shapes: tuple
    saved: tuple = ()
    vjp: Callable | None = None


@dataclass
class Region:
    node_index: int
    n_inputs: int


@dataclass
class Tape:
    nodes: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    inputs: list = field(default_factory=list)
    output: Any = None
    _next: int = 0

    def _new_id(self) -> int:
        self._next += 1
        return self._next

    def leaf(self, value) -> "Var":
        value = np.asarray(value, dtype=np.float64)
        v = Var(value, self, self._new_id())
        self.nodes.append(Node("input", (), (v.id,), (value.shape,)))
        return v

    def leaf_pair(self, re, im) -> "DualTensor":
        re = np.asarray(re, dtype=np.float64)
        im = np.asarray(im, dtype=np.float64)
        a, b = Var(re, self, self._new_id()), Var(im, self, self._new_id())
        self.nodes.append(Node("input", (), (a.id, b.id), (re.shape, im.shape)))
        return DualTensor(a, b)

    def record(self, op, args, values, saved, vjp) -> list["Var"]:
        parents = tuple(a.id if isinstance(a, Var) else None for a in args)
        outs = [Var(np.asarray(val, dtype=np.float64), self, self._new_id()) for val in values]
        self.nodes.append(Node(op, parents, tuple(o.id for o in outs),
                               tuple(o.value.shape for o in outs), tuple(saved), vjp))
        return outs

    def _retained(self) -> dict:
        # arrays shared between nodes (a region output feeding the next region,
        # a conditioning input reused by every step) are held once
        out = {}
        for n in self.nodes:
            for s in n.saved:
                if isinstance(s, np.ndarray):
                    out[id(s)] = s
        return out

    def saved_tensor_count(self) -> int:
        """Number of distinct arrays retained for the backward pass."""
        return len(self._retained())

    def saved_bytes(self) -> int:
        return sum(s.nbytes for s in self._retained().values())


class Var:
    __slots__ = ("value", "tape", "id")

    def __init__(self, value: np.ndarray, tape: Tape, vid: int):
        self.value = value
        self.tape = tape
        self.id = vid

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"

    # numpy functions are not registered primitives
    def __array_ufunc__(self, ufunc, method, *args, **kwargs):
        raise UnregisteredPrimitive(f"numpy ufunc {ufunc.__name__!r} is not a registered primitive")

    def __array_function__(self, func, types, args, kwargs):
        raise UnregisteredPrimitive(f"numpy function {func.__name__!r} is not a registered primitive")

    def __array__(self, *a, **k):
        raise UnregisteredPrimitive("implicit conversion of a Var to ndarray")

    def __add__(self, o):
        return add(self, o) if _is_tensor(o) else affine(self, 1.0, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o) if _is_tensor(o) else affine(self, 1.0, -o)

    def __rsub__(self, o):
        return sub(o, self) if _is_tensor(o) else affine(self, -1.0, o)

    def __mul__(self, o):
        return mul(self, o) if _is_tensor(o) else affine(self, o, 0.0)

    __rmul__ = __mul__

    def __neg__(self):
        return affine(self, -1.0, 0.0)


def _is_tensor(x) -> bool:
    return isinstance(x, Var) or (isinstance(x, np.ndarray) and x.ndim > 0)


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ExternalStateError(
                    "operation mixes values from different tapes; pass every tensor "
                    "a checkpoint region needs as an explicit input")
    return tape


def _apply(op, args, fwd, vjp, saved_fn=None, n_out=1):
    """Evaluate ``fwd`` on raw values and, if any argument is taped, record a node."""
    raw = [value_of(a) if isinstance(a, Var) else a for a in args]
    out = fwd(*raw)
    outs = out if n_out > 1 else (out,)
    tape = _tape_of(args)
    if tape is None:
        return out
    saved = saved_fn(raw, outs) if saved_fn else ()
    rec = tape.record(op, args, outs, saved, vjp)
    return rec if n_out > 1 else rec[0]


def _same_shape(op, a, b):
    sa, sb = np.shape(value_of(a)), np.shape(value_of(b))
    if sa != sb:
        raise ShapeError(f"{op}: shape mismatch {sa} vs {sb}")


# -- real primitives -----------------------------------------------------------

def add(a, b):
    _same_shape("add", a, b)
    return _apply("add", (a, b), lambda x, y: x + y, lambda s, g, need: (g[0], g[0]))


def sub(a, b):
    _same_shape("sub", a, b)
    return _apply("sub", (a, b), lambda x, y: x - y, lambda s, g, need: (g[0], -g[0]))


def mul(a, b):
    _same_shape("mul", a, b)

    def vjp(s, g, need):
        x, y = s
        return (g[0] * y if need[0] else None, g[0] * x if need[1] else None)

    return _apply("mul", (a, b), lambda x, y: x * y, vjp, lambda r, o: (r[0], r[1]))


def affine(a, scale=1.0, shift=0.0):
    """Per-element ``scale * a + shift`` with constant ``scale`` and ``shift``."""
    scale = np.asarray(scale, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    shp = np.shape(value_of(a))
    if np.broadcast_shapes(shp, scale.shape, shift.shape) != shp:
        raise ShapeError(f"affine: constants {scale.shape}/{shift.shape} do not fit {shp}")

    def vjp(s, g, need):
        return (g[0] * s[0],)

    saved = (lambda r, o: (scale,)) if scale.ndim else (lambda r, o: (float(scale),))
    return _apply("affine", (a,), lambda x: scale * x + shift, vjp, saved)


def tanh(a):
    def vjp(s, g, need):
        return (g[0] * (1.0 - s[0] ** 2),)

    return _apply("tanh", (a,), np.tanh, vjp, lambda r, o: (o[0],))


def square(a):
    return _apply("square", (a,), lambda x: x * x, lambda s, g, need: (2.0 * s[0] * g[0],),
                  lambda r, o: (r[0],))


def sum_all(a):
    shp = np.shape(value_of(a))
    return _apply("sum", (a,), lambda x: np.asarray(np.sum(x)),
                  lambda s, g, need: (np.full(shp, float(g[0])),))


def dense(x, w, b=None):
    """Row-wise affine layer ``x @ w + b`` for x of shape (rows, n_in)."""
    xs, ws = np.shape(value_of(x)), np.shape(value_of(w))
    if len(xs) != 2 or len(ws) != 2 or xs[1] != ws[0]:
        raise ShapeError(f"dense: cannot multiply {xs} by {ws}")
    if b is None:
        b = np.zeros(ws[1])
    if np.shape(value_of(b)) != (ws[1],):
        raise ShapeError(f"dense: bias shape {np.shape(value_of(b))} != ({ws[1]},)")

    def vjp(s, g, need):
        xv, wv = s
        g = g[0]
        return (g @ wv.T if need[0] else None,
                xv.T @ g if need[1] else None,
                g.sum(axis=0) if need[2] else None)

    def saved(r, o):
        # x is needed only for the weight gradient
        return (r[0] if isinstance(w, Var) else None, r[1])

    return _apply("dense", (x, w, b), lambda xv, wv, bv: xv @ wv + bv, vjp, saved)


def scale_rows(a, s):
    """Multiply row ``i`` of a 2-D tensor by ``s[i]`` (both differentiable)."""
    ash, ssh = np.shape(value_of(a)), np.shape(value_of(s))
    if len(ash) != 2 or ssh != (ash[0],):
        raise ShapeError(f"scale_rows: {ssh} does not match rows of {ash}")

    def vjp(sv, g, need):
        av, s_ = sv
        return (g[0] * s_[:, None] if need[0] else None,
                np.sum(g[0] * av, axis=1) if need[1] else None)

    return _apply("scale_rows", (a, s), lambda x, y: x * y[:, None], vjp, lambda r, o: (r[0], r[1]))


def transpose(a):
    if np.ndim(value_of(a)) != 2:
        raise ShapeError("transpose expects a 2-D tensor")
    return _apply("transpose", (a,), lambda x: x.T.copy(), lambda s, g, need: (g[0].T,))


def concat(parts: Sequence, axis: int = 0):
    shapes = [np.shape(value_of(p)) for p in parts]
    sizes = [s[axis] for s in shapes]
    splits = np.cumsum(sizes)[:-1]
    for s in shapes[1:]:
        if len(s) != len(shapes[0]) or any(s[i] != shapes[0][i] for i in range(len(s)) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {shapes}")

    def vjp(s, g, need):
        return tuple(np.split(g[0], splits, axis=axis))

    return _apply("concat", tuple(parts), lambda *xs: np.concatenate(xs, axis=axis), vjp)


def slice_axis(a, axis: int, start: int, stop: int):
    shp = np.shape(value_of(a))
    index = tuple(slice(start, stop) if i == axis else slice(None) for i in range(len(shp)))

    def vjp(s, g, need):
        out = np.zeros(shp)
        out[index] = g[0]
        return (out,)

    return _apply("slice", (a,), lambda x: x[index].copy(), vjp)


def pointwise_gain(u2, g, a, b, w, scales, tau: float = 0.0):
    """Per-bin gain layer on an F x T grid ``u2``:

    h = (g + tanh(sum_j w[j] tanh(scales[j] u2) + a tau + b)) / 2,

    with g, a, b of shape (F,) and w of shape (J, F) broadcast along columns.
    Fused so that a reverse step records a single node for it.
    """
    us = np.shape(value_of(u2))
    scales = np.asarray(scales, dtype=np.float64)
    if len(us) != 2:
        raise ShapeError("pointwise_gain: u2 must be 2-D")
    for name, v, shp in (("g", g, (us[0],)), ("a", a, (us[0],)), ("b", b, (us[0],)),
                         ("w", w, (scales.size, us[0]))):
        if np.shape(value_of(v)) != shp:
            raise ShapeError(f"pointwise_gain: {name} has shape {np.shape(value_of(v))}, expected {shp}")

    keep = {}

    def fwd(uv, gv, av, bv, wv):
        phi = np.tanh(scales[:, None, None] * uv[None])
        th = np.tanh(np.einsum("jf,jft->ft", wv, phi) + (av * tau + bv)[:, None])
        keep["phi"], keep["th"] = phi, th
        return 0.5 * (gv[:, None] + th)

    def vjp(s, gs, need):
        phi, th, wv = s
        gh = gs[0]
        dacc = 0.5 * gh * (1.0 - th ** 2)
        du = None
        if need[0]:
            du = np.einsum("jf,jft->ft", wv * scales[:, None], 1.0 - phi ** 2) * dacc
        rows = dacc.sum(axis=1)
        return (du,
                0.5 * gh.sum(axis=1) if need[1] else None,
                tau * rows if need[2] else None,
                rows if need[3] else None,
                np.einsum("ft,jft->jf", dacc, phi) if need[4] else None)

    return _apply("pointwise_gain", (u2, g, a, b, w), fwd, vjp,
                  lambda r, o: (keep.pop("phi"), keep.pop("th"), r[4]))


# -- complex tensors -------------------------------------------------------------

@dataclass
class DualTensor:
    """Complex tensor as two real planes (Var or ndarray each)."""

    re: Any
    im: Any

    def __post_init__(self):
        if np.shape(value_of(self.re)) != np.shape(value_of(self.im)):
            raise ShapeError("re and im planes must share a shape")

    @classmethod
    def from_complex(cls, z) -> "DualTensor":
        z = np.asarray(z, dtype=np.complex128)
        return cls(z.real.copy(), z.imag.copy())

    @property
    def shape(self):
        return np.shape(value_of(self.re))

    def value(self) -> np.ndarray:
        return value_of(self.re) + 1j * value_of(self.im)

    def __add__(self, o: "DualTensor"):
        return DualTensor(add(self.re, o.re), add(self.im, o.im))

    def __sub__(self, o: "DualTensor"):
        return DualTensor(sub(self.re, o.re), sub(self.im, o.im))

    def __mul__(self, o: "DualTensor"):
        return cmul(self, o)

    def conj(self) -> "DualTensor":
        return DualTensor(self.re, affine(self.im, -1.0))

    def scale(self, c) -> "DualTensor":
        return DualTensor(affine(self.re, c), affine(self.im, c))

    def abs2(self):
        return add(square(self.re), square(self.im))


def cmul(a: DualTensor, b: DualTensor) -> DualTensor:
    return DualTensor(sub(mul(a.re, b.re), mul(a.im, b.im)),
                      add(mul(a.re, b.im), mul(a.im, b.re)))


def sum_abs2(z: DualTensor):
    return sum_all(z.abs2())


@dataclass
class Gradient:
    d_re: np.ndarray
    d_im: np.ndarray

    def __post_init__(self):
        if np.shape(self.d_re) != np.shape(self.d_im):
            raise ShapeError("gradient planes must share a shape")

    @property
    def complex(self) -> np.ndarray:
        return np.asarray(self.d_re) + 1j * np.asarray(self.d_im)


# -- driving the tape ------------------------------------------------------------

def _flatten(obj) -> list:
    if isinstance(obj, DualTensor):
        return [obj.re, obj.im]
    if isinstance(obj, (list, tuple)):
        return [x for o in obj for x in _flatten(o)]
    return [obj]


def _rebuild(template, flat: list):
    """Inverse of :func:`_flatten`; consumes ``flat`` from the front."""
    if isinstance(template, DualTensor):
        return DualTensor(flat.pop(0), flat.pop(0))
    if isinstance(template, (list, tuple)):
        return type(template)(_rebuild(t, flat) for t in template)
    return flat.pop(0)


def _leafify(tape: Tape, x):
    if isinstance(x, DualTensor):
        return tape.leaf_pair(value_of(x.re), value_of(x.im))
    arr = np.asarray(getattr(x, "bins", x))
    if np.iscomplexobj(arr):
        return tape.leaf_pair(arr.real, arr.imag)
    return tape.leaf(arr)


def _plain(x):
    if isinstance(x, DualTensor):
        return x.value()
    if isinstance(x, (list, tuple)):
        return type(x)(_plain(o) for o in x)
    return value_of(x)


def forward(graph_builder: Callable, *inputs):
    """Run ``graph_builder`` on taped copies of ``inputs``; returns ``(value, tape)``.

    Complex arrays (or ComplexSpectrogram-like objects with ``.bins``) become
    DualTensor leaves, real arrays become Var leaves.
    """
    tape = Tape()
    leaves = [_leafify(tape, x) for x in inputs]
    tape.inputs = leaves
    out = graph_builder(*leaves)
    tape.output = out
    return _plain(out), tape


def backprop(tape: Tape, seeds: dict) -> dict:
    """Accumulate gradients for every var id reachable from ``seeds`` (id -> array)."""
    grads = {k: np.asarray(v, dtype=np.float64) for k, v in seeds.items()}
    for node in reversed(tape.nodes):
        if node.vjp is None:
            continue
        gs = [grads.get(o) for o in node.outputs]
        if all(g is None for g in gs):
            continue
        gs = [np.zeros(s) if g is None else g for g, s in zip(gs, node.out_shapes)]
        need = tuple(p is not None for p in node.parents)
        pgs = node.vjp(node.saved, gs, need)
        for pid, pg in zip(node.parents, pgs):
            if pid is None or pg is None:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = np.asarray(pg, dtype=np.float64)
    return grads


def _seed_map(out, seed) -> dict:
    outs = _flatten(out)
    if seed is None:
        if len(outs) != 1 or np.shape(value_of(outs[0])) != ():
            raise ShapeError("a seed is required for non-scalar outputs")
        seeds = [np.asarray(1.0)]
    elif isinstance(seed, Gradient):
        seeds = [np.asarray(seed.d_re, dtype=np.float64), np.asarray(seed.d_im, dtype=np.float64)]
    elif isinstance(seed, (list, tuple)):
        seeds = [np.asarray(s, dtype=np.float64) for s in seed]
    else:
        seeds = [np.asarray(seed, dtype=np.float64)]
    if len(seeds) != len(outs):
        raise ShapeError("seed structure does not match the output")
    result = {}
    for o, s in zip(outs, seeds):
        if np.shape(value_of(o)) != np.shape(s):
            raise ShapeError(f"seed shape {np.shape(s)} != output shape {np.shape(value_of(o))}")
        if isinstance(o, Var):
            result[o.id] = result.get(o.id, 0.0) + s
    return result


def _collect(leaf, grads):
    if isinstance(leaf, DualTensor):
        return Gradient(_collect(leaf.re, grads), _collect(leaf.im, grads))
    return grads.get(leaf.id, np.zeros(leaf.shape))


def backward(tape: Tape, seed=None) -> list:
    """Gradients of the tape output (contracted with ``seed``) for every input."""
    grads = backprop(tape, _seed_map(tape.output, seed))
    return [_collect(leaf, grads) for leaf in tape.inputs]


def grad_of(fn: Callable, *inputs):
    """Convenience: value and input gradients of a scalar-valued ``fn``."""
    value, tape = forward(fn, *inputs)
    return value, backward(tape)


# -- checkpoint regions ----------------------------------------------------------

def checkpoint_region(region_fn: Callable, *inputs):
    """Call ``region_fn(*inputs)`` storing only its inputs on the enclosing tape.

    Intermediates are discarded after the forward pass and rebuilt by re-running
    ``region_fn`` during backpropagation.  ``region_fn`` must be a deterministic
    function of its inputs; any randomness has to be passed in explicitly.
    Using a taped value that is not among ``inputs`` raises ExternalStateError.
    """
    flat_in = _flatten(list(inputs))
    tape = _tape_of(flat_in)
    if tape is None:
        return region_fn(*inputs)

    def run(values):
        inner = Tape()
        leaves = []
        for v, orig in zip(values, flat_in):
            leaves.append(inner.leaf(v) if isinstance(orig, Var) else v)
        rebuilt = _rebuild(list(inputs), list(leaves))
        out = region_fn(*rebuilt)
        return inner, leaves, out

    values = [value_of(x) for x in flat_in]
    inner, leaves, out = run(values)
    flat_out = _flatten(out)
    n_leaf_nodes = sum(isinstance(x, Var) for x in flat_in)
    if len(inner.nodes) == n_leaf_nodes:
        # region recorded nothing: map outputs back onto the enclosing tape
        by_id = {l.id: o for l, o in zip(leaves, flat_in) if isinstance(l, Var)}
        mapped = [by_id.get(o.id, o) if isinstance(o, Var) else o for o in flat_out]
        return _rebuild(out, mapped)

    skeleton = _skeleton(out)
    out_vals = [value_of(o) for o in flat_out]
    out_is_var = [isinstance(o, Var) for o in flat_out]
    del inner, leaves, out, flat_out

    def vjp(saved, gs, need):
        inner2, leaves2, out2 = run(list(saved))
        seeds = {}
        for o, g in zip(_flatten(out2), gs):
            if isinstance(o, Var):
                seeds[o.id] = seeds.get(o.id, 0.0) + g
        grads = backprop(inner2, seeds)
        return tuple(grads.get(l.id, np.zeros(l.shape)) if isinstance(l, Var) else None
                     for l in leaves2)

    recorded = tape.record("checkpoint", flat_in, out_vals, tuple(values), vjp)
    tape.checkpoints.append(Region(len(tape.nodes) - 1, len(flat_in)))
    mapped = [r if is_var else v for r, v, is_var in zip(recorded, out_vals, out_is_var)]
    return _from_skeleton(skeleton, mapped)


def _skeleton(obj):
    if isinstance(obj, DualTensor):
        return ("dual",)
    if isinstance(obj, (list, tuple)):
        return (type(obj), [_skeleton(o) for o in obj])
    return None


def _from_skeleton(sk, flat: list):
    if sk is None:
        return flat.pop(0)
    if sk[0] == "dual":
        return DualTensor(flat.pop(0), flat.pop(0))
    kind, items = sk
    return kind(_from_skeleton(i, flat) for i in items)
