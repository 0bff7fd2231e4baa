"""Reverse-mode differentiation over a small, fixed operation vocabulary.

Values are float64 numpy arrays. A :class:`Graph` records every operation on
a flat tape in construction order, which is already a topological order, so
the backward pass is a single reverse sweep over the tape. There is no
general autodiff here on purpose: the episode scoring graph only needs the
handful of ops below, and a closed vocabulary keeps every backward rule
auditable.

Conventions:

* tensors entering a graph must be finite; NaN/Inf raises ``NonFiniteError``
* node values are treated as immutable once recorded
* a graph is single threaded; build one graph per training step
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "Graph",
    "Node",
    "GraphError",
    "ShapeMismatchError",
    "NonFiniteError",
    "DetachedLeafError",
    "GradCheckReport",
    "grad_check",
]

_NORM_FLOOR = 1e-12


class GraphError(Exception):
    """Base error for graph construction and execution."""


class ShapeMismatchError(GraphError):
    """Operands have incompatible shapes."""


class NonFiniteError(GraphError):
    """A tensor entering or leaving the graph contains NaN or Inf."""


class DetachedLeafError(GraphError):
    """A gradient was requested for a leaf the loss does not depend on."""


class Node:
    """One record on the tape: an op, its value, and links to its inputs.

    ``parents`` holds ``(input_node, vjp)`` pairs, where ``vjp`` maps the
    gradient at this node to the gradient contribution for that input.
    """

    __slots__ = ("graph", "nid", "op", "value", "parents", "trainable", "name")

    def __init__(self, graph, nid, op, value, parents, trainable=False, name=None):
        self.graph = graph
        self.nid = nid
        self.op = op
        self.value = value
        self.parents = parents
        self.trainable = trainable
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return self.graph.add(self, other)

    def __mul__(self, other):
        return self.graph.mul(self, other)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)

    def __neg__(self):
        return self.graph.neg(self)

    def __repr__(self):
        return f"Node({self.op}, id={self.nid}, shape={self.value.shape})"


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Graph:
    """A tape of ops with one registered backward rule per op."""

    def __init__(self):
        self.nodes: list[Node] = []

    # -- construction ------------------------------------------------------

    def _record(self, op, value, parents, trainable=False, name=None):
        node = Node(self, len(self.nodes), op, value, tuple(parents), trainable, name)
        self.nodes.append(node)
        return node

    def leaf(self, value, name=None, trainable=False):
        """Bind an array to the graph. Raises on non-finite entries."""
        arr = np.asarray(value, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"leaf {name or ''!r} contains NaN/Inf")
        return self._record("leaf", arr, (), trainable=trainable, name=name)

    def constant(self, value, name=None):
        return self.leaf(value, name=name, trainable=False)

    def _check_other(self, other):
        if not isinstance(other, Node) or other.graph is not self:
            raise GraphError("operands must be nodes of the same graph")

    # -- binary ops --------------------------------------------------------

    def matmul(self, a, b):
        self._check_other(a)
        self._check_other(b)
        av, bv = a.value, b.value
        if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
            raise ShapeMismatchError(f"matmul {av.shape} x {bv.shape}")
        return self._record(
            "matmul",
            av @ bv,
            ((a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)),
        )

    def add(self, a, b):
        self._check_other(a)
        self._check_other(b)
        if a.value.shape != b.value.shape:
            raise ShapeMismatchError(f"add {a.value.shape} vs {b.value.shape}")
        return self._record(
            "add", a.value + b.value, ((a, lambda g: g), (b, lambda g: g))
        )

    def mul(self, a, b):
        self._check_other(a)
        self._check_other(b)
        if a.value.shape != b.value.shape:
            raise ShapeMismatchError(f"mul {a.value.shape} vs {b.value.shape}")
        av, bv = a.value, b.value
        return self._record(
            "mul", av * bv, ((a, lambda g: g * bv), (b, lambda g: g * av))
        )

    def add_bias(self, a, b):
        """Add a row vector ``b`` (shape ``(n,)`` or ``(1, n)``) to every row of ``a``."""
        self._check_other(a)
        self._check_other(b)
        av, bv = a.value, b.value
        if av.ndim != 2 or bv.shape[-1] != av.shape[1] or bv.size != av.shape[1]:
            raise ShapeMismatchError(f"add_bias {av.shape} + {bv.shape}")
        return self._record(
            "add_bias",
            av + bv.reshape(1, -1),
            ((a, lambda g: g), (b, lambda g: g.sum(axis=0).reshape(bv.shape))),
        )

    # -- unary ops ---------------------------------------------------------

    def neg(self, a):
        self._check_other(a)
        return self._record("neg", -a.value, ((a, lambda g: -g),))

    def relu(self, a):
        self._check_other(a)
        mask = a.value > 0
        return self._record(
            "relu", np.where(mask, a.value, 0.0), ((a, lambda g: g * mask),)
        )

    def tanh(self, a):
        self._check_other(a)
        y = np.tanh(a.value)
        return self._record("tanh", y, ((a, lambda g: g * (1.0 - y * y)),))

    def sigmoid(self, a):
        self._check_other(a)
        y = _stable_sigmoid(a.value)
        return self._record("sigmoid", y, ((a, lambda g: g * y * (1.0 - y)),))

    def exp(self, a):
        self._check_other(a)
        y = np.exp(a.value)
        return self._record("exp", y, ((a, lambda g: g * y),))

    def log(self, a):
        self._check_other(a)
        av = a.value
        if np.any(av <= 0):
            raise NonFiniteError("log of a non-positive value")
        return self._record("log", np.log(av), ((a, lambda g: g / av),))

    def scale(self, a, c):
        self._check_other(a)
        c = float(c)
        return self._record("scale", c * a.value, ((a, lambda g: c * g),))

    def add_scalar(self, a, c):
        self._check_other(a)
        return self._record("add_scalar", a.value + float(c), ((a, lambda g: g),))

    def transpose(self, a):
        self._check_other(a)
        if a.value.ndim != 2:
            raise ShapeMismatchError("transpose expects a 2-d tensor")
        return self._record("transpose", a.value.T.copy(), ((a, lambda g: g.T),))

    # -- reductions and normalizers ----------------------------------------

    def softmax(self, a, scale=1.0):
        """Row-wise softmax of ``scale * a`` with mandatory max subtraction."""
        self._check_other(a)
        scale = float(scale)
        z = scale * a.value
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)

        def vjp(g):
            inner = (g * y).sum(axis=-1, keepdims=True)
            return scale * y * (g - inner)

        return self._record("softmax", y, ((a, vjp),))

    def row_l2_normalize(self, a):
        """Scale each row to unit L2 norm; all-zero rows stay all-zero.

        The divisor is ``max(norm, 1e-12)``, so rows with norm at or below
        the floor pass through with a constant divisor.
        """
        self._check_other(a)
        av = a.value
        norms = np.sqrt((av * av).sum(axis=-1, keepdims=True))
        denom = np.maximum(norms, _NORM_FLOOR)
        y = av / denom
        active = norms > _NORM_FLOOR

        def vjp(g):
            inner = (g * av).sum(axis=-1, keepdims=True)
            return g / denom - np.where(active, av * inner / denom**3, 0.0)

        return self._record("row_l2_normalize", y, ((a, vjp),))

    def reduce_sum(self, a):
        self._check_other(a)
        av = a.value
        return self._record(
            "reduce_sum",
            np.asarray(av.sum()),
            ((a, lambda g: np.broadcast_to(g, av.shape)),),
        )

    def logsumexp(self, a):
        """log(sum(exp(entries))) over the whole tensor, as a scalar node."""
        self._check_other(a)
        av = a.value
        m = av.max()
        e = np.exp(av - m)
        s = e.sum()
        return self._record(
            "logsumexp", np.asarray(np.log(s) + m), ((a, lambda g: g * (e / s)),)
        )

    # -- indexing and layout -----------------------------------------------

    def concat_cols(self, parts: Sequence[Node]):
        """Concatenate along the last axis (vectors or matrices)."""
        parts = list(parts)
        for p in parts:
            self._check_other(p)
        if not parts:
            raise GraphError("concat of zero tensors")
        lead = parts[0].value.shape[:-1]
        if any(p.value.shape[:-1] != lead for p in parts):
            raise ShapeMismatchError("concat_cols leading dims differ")
        value = np.concatenate([p.value for p in parts], axis=-1)
        links = []
        off = 0
        for p in parts:
            w = p.value.shape[-1]
            links.append((p, lambda g, o=off, w=w: g[..., o : o + w]))
            off += w
        return self._record("concat_cols", value, links)

    def concat_rows(self, parts: Sequence[Node]):
        """Stack 2-d tensors along axis 0."""
        parts = list(parts)
        for p in parts:
            self._check_other(p)
        if not parts:
            raise GraphError("concat of zero tensors")
        if any(p.value.ndim != 2 for p in parts):
            raise ShapeMismatchError("concat_rows expects 2-d tensors")
        width = parts[0].value.shape[1]
        if any(p.value.shape[1] != width for p in parts):
            raise ShapeMismatchError("concat_rows widths differ")
        value = np.concatenate([p.value for p in parts], axis=0)
        links = []
        off = 0
        for p in parts:
            h = p.value.shape[0]
            links.append((p, lambda g, o=off, h=h: g[o : o + h]))
            off += h
        return self._record("concat_rows", value, links)

    def slice_rows(self, a, start, stop):
        self._check_other(a)
        av = a.value
        if av.ndim != 2 or not (0 <= start < stop <= av.shape[0]):
            raise ShapeMismatchError(f"slice_rows [{start}:{stop}] of {av.shape}")

        def vjp(g):
            out = np.zeros_like(av)
            out[start:stop] = g
            return out

        return self._record("slice_rows", av[start:stop].copy(), ((a, vjp),))

    def slice_cols(self, a, start, stop):
        self._check_other(a)
        av = a.value
        if av.ndim != 2 or not (0 <= start < stop <= av.shape[1]):
            raise ShapeMismatchError(f"slice_cols [{start}:{stop}] of {av.shape}")

        def vjp(g):
            out = np.zeros_like(av)
            out[:, start:stop] = g
            return out

        return self._record("slice_cols", av[:, start:stop].copy(), ((a, vjp),))

    def reshape(self, a, shape):
        shape = tuple(int(s) for s in shape)
        self._check_other(a)
        av = a.value
        if int(np.prod(shape)) != av.size:
            raise ShapeMismatchError(f"reshape {av.shape} -> {shape}")
        return self._record(
            "reshape", av.reshape(shape), ((a, lambda g: g.reshape(av.shape)),)
        )

    def tile_rows(self, a, k):
        """Stack ``k`` copies of a 2-d tensor along axis 0."""
        self._check_other(a)
        av = a.value
        if av.ndim != 2 or k < 1:
            raise ShapeMismatchError("tile_rows expects a 2-d tensor and k >= 1")
        m, n = av.shape
        return self._record(
            "tile_rows",
            np.tile(av, (k, 1)),
            ((a, lambda g: g.reshape(k, m, n).sum(axis=0)),),
        )

    def repeat_rows(self, a, k):
        """Repeat each row of a 2-d tensor ``k`` times (row 0 k times, then row 1, ...)."""
        self._check_other(a)
        av = a.value
        if av.ndim != 2 or k < 1:
            raise ShapeMismatchError("repeat_rows expects a 2-d tensor and k >= 1")
        m, n = av.shape
        return self._record(
            "repeat_rows",
            np.repeat(av, k, axis=0),
            ((a, lambda g: g.reshape(m, k, n).sum(axis=1)),),
        )

    def sum_cols(self, a):
        """Row sums of a 2-d tensor, kept as an (m, 1) column."""
        self._check_other(a)
        av = a.value
        if av.ndim != 2:
            raise ShapeMismatchError("sum_cols expects a 2-d tensor")
        return self._record(
            "sum_cols",
            av.sum(axis=1, keepdims=True),
            ((a, lambda g: np.broadcast_to(g, av.shape)),),
        )

    def mul_colvec(self, a, c):
        """Scale each row of ``a`` (m, n) by the matching entry of ``c`` (m, 1)."""
        self._check_other(a)
        self._check_other(c)
        av, cv = a.value, c.value
        if av.ndim != 2 or cv.shape != (av.shape[0], 1):
            raise ShapeMismatchError(f"mul_colvec {av.shape} * {cv.shape}")
        return self._record(
            "mul_colvec",
            av * cv,
            (
                (a, lambda g: g * cv),
                (c, lambda g: (g * av).sum(axis=1, keepdims=True)),
            ),
        )

    def segment_sum_rows(self, a, group):
        """Sum consecutive groups of ``group`` rows: (m, n) -> (m // group, n)."""
        self._check_other(a)
        av = a.value
        if av.ndim != 2 or group < 1 or av.shape[0] % group:
            raise ShapeMismatchError(
                f"segment_sum_rows of {av.shape} with group {group}"
            )
        m, n = av.shape
        return self._record(
            "segment_sum_rows",
            av.reshape(m // group, group, n).sum(axis=1),
            ((a, lambda g: np.repeat(g, group, axis=0)),),
        )

    def take_rows(self, a, indices):
        """Gather rows by index; backward scatter-adds (duplicates allowed)."""
        self._check_other(a)
        idx = np.asarray(indices, dtype=np.intp)
        av = a.value
        if av.ndim != 2:
            raise ShapeMismatchError("take_rows expects a 2-d tensor")
        if idx.size and (idx.min() < 0 or idx.max() >= av.shape[0]):
            raise ShapeMismatchError("take_rows index out of range")

        def vjp(g):
            out = np.zeros_like(av)
            np.add.at(out, idx, g)
            return out

        return self._record("take_rows", av[idx], ((a, vjp),))

    def pick(self, a, index):
        """Select a single entry as a scalar node. ``index`` is a flat or nd index."""
        self._check_other(a)
        av = a.value
        idx = np.unravel_index(index, av.shape) if np.isscalar(index) else tuple(index)

        def vjp(g):
            out = np.zeros_like(av)
            out[idx] = g
            return out

        return self._record("pick", np.asarray(av[idx]), ((a, vjp),))

    # -- backward -----------------------------------------------------------

    def backward(self, loss):
        """Gradients of a scalar ``loss`` node w.r.t. every node it depends on.

        Returns ``{node: grad}`` for all visited nodes. The tape is swept in
        exact reverse recording order, which makes accumulation deterministic.
        """
        self._check_other(loss)
        if loss.value.size != 1:
            raise GraphError(f"loss must be scalar, got shape {loss.value.shape}")
        grads: list = [None] * (loss.nid + 1)
        grads[loss.nid] = np.ones_like(loss.value)
        out = {}
        for node in reversed(self.nodes[: loss.nid + 1]):
            g = grads[node.nid]
            if g is None:
                continue
            out[node] = g
            for parent, vjp in node.parents:
                contrib = vjp(g)
                prev = grads[parent.nid]
                grads[parent.nid] = contrib if prev is None else prev + contrib
        return out

    def leaf_gradients(self, loss, leaves: dict):
        """Gradients for named leaves; raises if a leaf is detached from the loss."""
        table = self.backward(loss)
        result = {}
        for name, node in leaves.items():
            if node not in table:
                raise DetachedLeafError(f"loss does not depend on leaf {name!r}")
            result[name] = table[node]
        return result


# -- finite-difference checking ---------------------------------------------


@dataclass
class GradCheckReport:
    """Per-parameter worst relative error between analytic and numeric grads."""

    h: float
    tol: float
    per_param: dict = field(default_factory=dict)

    @property
    def max_rel_error(self):
        return max(self.per_param.values(), default=0.0)

    @property
    def passed(self):
        return self.max_rel_error <= self.tol

    def __str__(self):
        lines = [f"grad check (h={self.h:g}, tol={self.tol:g})"]
        for name, err in sorted(self.per_param.items()):
            mark = "ok " if err <= self.tol else "FAIL"
            lines.append(f"  [{mark}] {name}: max rel err {err:.3e}")
        return "\n".join(lines)


def _rel_err(a, n):
    """Tensor-level relative error ``|a - n| / max(|a|, |n|, 1e-8)``.

    ``|.|`` is the L2 norm over the whole tensor. A per-entry quotient would
    be meaningless here: single entries can carry exactly-zero gradients (a
    uniform shift of all episode scores cancels in the softmax), where finite
    differences see nothing but rounding noise.
    """
    diff = float(np.linalg.norm(a - n))
    return diff / max(float(np.linalg.norm(a)), float(np.linalg.norm(n)), 1e-8)


def grad_check(f, params, h=1e-5, tol=1e-4, loss_fn=None):
    """Compare analytic gradients of ``f`` against central finite differences.

    ``f(params) -> (loss, grads)`` where ``params`` and ``grads`` are dicts of
    arrays with matching keys and shapes. The report carries one relative
    error per parameter tensor. ``loss_fn(params) -> loss`` may be passed as
    a cheaper forward-only path for the many finite-difference evaluations;
    it must compute the same value as ``f``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    _, analytic = f(params)
    probe = loss_fn if loss_fn is not None else (lambda p: f(p)[0])
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    report = GradCheckReport(h=h, tol=tol)
    for name in params:
        flat = work[name].reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = float(probe(work))
            flat[i] = orig - h
            lo = float(probe(work))
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * h)
        analytic_flat = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        report.per_param[name] = _rel_err(analytic_flat, numeric)
    return report
