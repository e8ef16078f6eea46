"""Dense float64 operations with a minimal reverse-mode gradient tape.

Only the operations the GNN models need are implemented.  Every op works in
two modes: called on plain numpy arrays it just computes the value; called
with at least one :class:`Tensor` it also records a backward rule on that
tensor's tape.  ``GradTape.backward`` replays the records once and returns
gradients for every tensor created on the tape, in particular the
checkpointed per-layer hidden matrices.

Conventions: ReLU/|x| use subgradient 0 at 0; softmax subtracts the row max;
scalars are shape (1, 1).
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .errors import ShapeError, TapeError

# number of completed backward passes, for cost-contract assertions
BACKWARD_CALLS = 0

# validate op inputs for NaN/Inf on the taped path (cheap at desk scale)
FINITE_CHECKS = True


class Tensor:
    """A float64 array produced on a gradient tape."""

    __slots__ = ("value", "tape", "sparse_alias")

    def __init__(self, value: np.ndarray, tape: "GradTape", sparse_alias=None):
        self.value = value
        self.tape = tape
        # optional scipy CSR holding the same numbers, used to speed up matmul
        self.sparse_alias = sparse_alias

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"


class Grads:
    """Gradient lookup for every tensor of a consumed tape."""

    def __init__(self, table: dict[int, np.ndarray], tape: "GradTape"):
        self._table = table
        self._tape = tape

    def of(self, t: Tensor) -> np.ndarray:
        """d(scalar)/d(t); zeros when the scalar does not depend on t."""
        g = self._table.get(id(t))
        if g is None:
            return np.zeros_like(t.value)
        return g

    def checkpoint(self, name: str) -> np.ndarray:
        return self.of(self._tape.checkpoints[name])


class GradTape:
    """Ordered record of primitive ops; single forward writer, single backward pass."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple, callable]] = []
        self._consumed = False
        self.checkpoints: dict[str, Tensor] = {}

    def input(self, value: np.ndarray, sparse_alias=None) -> Tensor:
        value = np.asarray(value, dtype=np.float64)
        _check_finite(value)
        return Tensor(value, self, sparse_alias)

    def checkpoint(self, name: str, t: Tensor) -> Tensor:
        self.checkpoints[name] = t
        return t

    def _record(self, out_value: np.ndarray, parents: tuple, backward) -> Tensor:
        out = Tensor(out_value, self)
        self._records.append((out, parents, backward))
        return out

    def backward(self, scalar: Tensor) -> Grads:
        """Gradients of a 1x1 output w.r.t. everything recorded on this tape."""
        global BACKWARD_CALLS
        if self._consumed:
            raise TapeError("tape already consumed by a previous backward pass")
        if not isinstance(scalar, Tensor) or scalar.tape is not self:
            raise TapeError("backward target must be a tensor from this tape")
        if scalar.value.size != 1:
            raise TapeError(f"backward needs a scalar output, got shape {scalar.value.shape}")
        self._consumed = True
        table: dict[int, np.ndarray] = {id(scalar): np.ones_like(scalar.value)}

        def accumulate(t: Tensor, g: np.ndarray):
            key = id(t)
            if key in table:
                table[key] = table[key] + g
            else:
                table[key] = np.asarray(g, dtype=np.float64)

        for out, parents, rule in reversed(self._records):
            g = table.get(id(out))
            if g is None:
                continue
            rule(g, accumulate)
        BACKWARD_CALLS += 1
        return Grads(table, self)


# --- helpers -------------------------------------------------------------


def _check_finite(value: np.ndarray):
    if FINITE_CHECKS and not np.isfinite(value).all():
        raise ShapeError("non-finite input to tensor op")


def _val(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _tape(*xs) -> GradTape | None:
    tapes = {x.tape for x in xs if isinstance(x, Tensor)}
    if not tapes:
        return None
    if len(tapes) > 1:
        raise TapeError("operands come from different tapes")
    return tapes.pop()


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _taped(xs_in, out_value, backward):
    t = _tape(*xs_in)
    if t is None:
        return out_value
    for x in xs_in:
        if isinstance(x, Tensor):
            _check_finite(x.value)
    return t._record(out_value, tuple(xs_in), backward)


# --- primitive ops -------------------------------------------------------


def matmul(a, b):
    """a @ b.  Honors a CSR ``sparse_alias`` on the left operand."""
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    a_sp = a.sparse_alias if isinstance(a, Tensor) else None
    out = (a_sp @ bv) if a_sp is not None else (av @ bv)

    def backward(g, acc):
        if isinstance(a, Tensor):
            acc(a, g @ bv.T)
        if isinstance(b, Tensor):
            acc(b, (a_sp.T @ g) if a_sp is not None else (av.T @ g))

    return _taped((a, b), out, backward)


def add(a, b):
    av, bv = _val(a), _val(b)
    out = av + bv

    def backward(g, acc):
        if isinstance(a, Tensor):
            acc(a, _unbroadcast(g, av.shape))
        if isinstance(b, Tensor):
            acc(b, _unbroadcast(g, bv.shape))

    return _taped((a, b), out, backward)


def sub(a, b):
    return add(a, scale(b, -1.0))


def mul(a, b):
    av, bv = _val(a), _val(b)
    out = av * bv

    def backward(g, acc):
        if isinstance(a, Tensor):
            acc(a, _unbroadcast(g * bv, av.shape))
        if isinstance(b, Tensor):
            acc(b, _unbroadcast(g * av, bv.shape))

    return _taped((a, b), out, backward)


def scale(a, c: float):
    av = _val(a)
    out = av * c

    def backward(g, acc):
        acc(a, g * c)

    return _taped((a,), out, backward)


def relu(a):
    av = _val(a)
    out = np.maximum(av, 0.0)

    def backward(g, acc):
        acc(a, g * (av > 0.0))

    return _taped((a,), out, backward)


def leaky_relu(a, slope: float = 0.2):
    av = _val(a)
    out = np.where(av > 0.0, av, slope * av)

    def backward(g, acc):
        acc(a, g * np.where(av > 0.0, 1.0, slope))

    return _taped((a,), out, backward)


def absolute(a):
    av = _val(a)
    out = np.abs(av)

    def backward(g, acc):
        acc(a, g * np.sign(av))

    return _taped((a,), out, backward)


def sigmoid(a):
    av = _val(a)
    out = np.empty_like(av)
    pos = av >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    ez = np.exp(av[~pos])
    out[~pos] = ez / (1.0 + ez)

    def backward(g, acc):
        acc(a, g * out * (1.0 - out))

    return _taped((a,), out, backward)


def softmax_rows(a):
    """Row-wise softmax with max subtraction (no overflow on extreme logits)."""
    av = _val(a)
    z = av - av.max(axis=1, keepdims=True)
    ez = np.exp(z)
    out = ez / ez.sum(axis=1, keepdims=True)

    def backward(g, acc):
        dot = (g * out).sum(axis=1, keepdims=True)
        acc(a, out * (g - dot))

    return _taped((a,), out, backward)


def sum_all(a):
    av = _val(a)
    out = np.array([[av.sum()]])

    def backward(g, acc):
        acc(a, np.full_like(av, g[0, 0]))

    return _taped((a,), out, backward)


def column_sums(a):
    """Sum over the row axis; (n, c) -> (1, c)."""
    av = _val(a)
    out = av.sum(axis=0, keepdims=True)

    def backward(g, acc):
        acc(a, np.broadcast_to(g, av.shape).copy())

    return _taped((a,), out, backward)


def row_sums(a):
    """Sum over the column axis; (n, c) -> (n, 1)."""
    av = _val(a)
    out = av.sum(axis=1, keepdims=True)

    def backward(g, acc):
        acc(a, np.broadcast_to(g, av.shape).copy())

    return _taped((a,), out, backward)


def gather_rows(a, idx: np.ndarray):
    av = _val(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = av[idx]

    def backward(g, acc):
        full = np.zeros_like(av)
        np.add.at(full, idx, g)
        acc(a, full)

    return _taped((a,), out, backward)


# --- sparse aggregation ---------------------------------------------------


class AggSlots:
    """Directed aggregation slots grouped by destination row.

    ``src[indptr[i]:indptr[i+1]]`` are the sources feeding node i (its
    neighbors plus, when the builder included them, node i itself).
    """

    __slots__ = ("num_nodes", "indptr", "src", "dst", "deg")

    def __init__(self, num_nodes: int, indptr: np.ndarray, src: np.ndarray,
                 dst: np.ndarray, deg: np.ndarray):
        self.num_nodes = num_nodes
        self.indptr = indptr
        self.src = src
        self.dst = dst
        self.deg = deg  # self-loop-free degree of each node in the (viewed) graph

    @property
    def num_slots(self) -> int:
        return self.src.shape[0]

    def matrix(self, coeffs: np.ndarray) -> sp.csr_matrix:
        return sp.csr_matrix(
            (coeffs, self.src, self.indptr), shape=(self.num_nodes, self.num_nodes)
        )


def agg_slots(gv, with_self_loops: bool = True) -> AggSlots:
    """Aggregation slots for a Graph or RemovalView.

    For a view, every slot touching the removed node (including its
    self-slot) is dropped and degrees are decremented accordingly.
    """
    from .graph import Graph, RemovalView  # local import to avoid a cycle

    if isinstance(gv, Graph):
        if with_self_loops:
            indptr, src, dst = gv.csr_with_self_loops()
        else:
            indptr, src = gv.indptr, gv.indices
            dst = np.repeat(np.arange(gv.num_nodes), gv.degrees)
        return AggSlots(gv.num_nodes, indptr, src, dst, gv.degrees)
    if isinstance(gv, RemovalView):
        base, r = gv.base, gv.removed
        if with_self_loops:
            indptr0, src0, dst0 = base.csr_with_self_loops()
        else:
            indptr0, src0 = base.indptr, base.indices
            dst0 = np.repeat(np.arange(base.num_nodes), base.degrees)
        keep = (src0 != r) & (dst0 != r)
        src, dst = src0[keep], dst0[keep]
        counts = np.bincount(dst, minlength=base.num_nodes)
        indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        return AggSlots(base.num_nodes, indptr, src, dst, gv.degrees)
    raise ShapeError(f"expected Graph or RemovalView, got {type(gv).__name__}")


def spmm_aggregate(agg: AggSlots, coeffs, h):
    """out[i] = sum over slots with dst == i of coeff * h[src].

    ``coeffs`` has one entry per slot (shape (num_slots,) or (num_slots, 1))
    and may itself be taped (attention coefficients).
    """
    hv = _val(h)
    cv = _val(coeffs).reshape(-1)
    if cv.shape[0] != agg.num_slots:
        raise ShapeError(f"{cv.shape[0]} coefficients for {agg.num_slots} slots")
    mat = agg.matrix(cv)
    out = mat @ hv

    def backward(g, acc):
        if isinstance(h, Tensor):
            acc(h, mat.T @ g)
        if isinstance(coeffs, Tensor):
            gc = np.einsum("ij,ij->i", g[agg.dst], hv[agg.src])
            acc(coeffs, gc.reshape(_val(coeffs).shape))

    return _taped((coeffs, h), out, backward)


def _segment_reduce(values: np.ndarray, indptr: np.ndarray, ufunc, empty: float) -> np.ndarray:
    """Per-segment reduction that tolerates empty segments anywhere."""
    lens = np.diff(indptr)
    out = np.full(lens.shape[0], empty, dtype=np.float64)
    nonempty = lens > 0
    if values.size and nonempty.any():
        # reduceat over starts of non-empty segments spans exactly each segment,
        # because the in-between empty segments contribute zero length
        out[nonempty] = ufunc.reduceat(values, indptr[:-1][nonempty])
    return out


def edge_softmax(logits, agg: AggSlots):
    """Softmax of per-slot logits over each destination's incoming slots."""
    lv = _val(logits).reshape(-1)
    if lv.shape[0] != agg.num_slots:
        raise ShapeError(f"{lv.shape[0]} logits for {agg.num_slots} slots")
    seg_max = _segment_reduce(lv, agg.indptr, np.maximum, -np.inf)
    ez = np.exp(lv - seg_max[agg.dst])
    seg_sum = _segment_reduce(ez, agg.indptr, np.add, 1.0)
    alpha = ez / seg_sum[agg.dst]
    out = alpha.reshape(_val(logits).shape)

    def backward(g, acc):
        gf = g.reshape(-1)
        seg_dot = _segment_reduce(alpha * gf, agg.indptr, np.add, 0.0)
        grad = alpha * (gf - seg_dot[agg.dst])
        acc(logits, grad.reshape(_val(logits).shape))

    return _taped((logits,), out, backward)


# --- fused losses ----------------------------------------------------------


def cross_entropy_with_logits(logits, labels: np.ndarray, idx: np.ndarray,
                              label_smoothing: float = 0.0):
    """Mean cross entropy of logits[idx] against integer labels[idx].

    With smoothing eps the target distribution is (1-eps)*onehot + eps/c.
    """
    zv = _val(logits)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ShapeError("cross entropy over an empty index set")
    c = zv.shape[1]
    rows = zv[idx]
    m = rows.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(rows - m).sum(axis=1))
    picked = (1.0 - label_smoothing) * rows[np.arange(idx.size), labels[idx]]
    if label_smoothing:
        picked = picked + label_smoothing * rows.mean(axis=1)
    out = np.array([[float(np.mean(lse - picked))]])

    def backward(g, acc):
        p = np.exp(rows - m)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(idx.size), labels[idx]] -= 1.0 - label_smoothing
        if label_smoothing:
            p -= label_smoothing / c
        full = np.zeros_like(zv)
        np.add.at(full, idx, p * (g[0, 0] / idx.size))
        acc(logits, full)

    return _taped((logits,), out, backward)


def bce_with_logits(logits, targets: np.ndarray):
    """Mean binary cross entropy; stable for large |logit|."""
    zv = _val(logits).reshape(-1)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if zv.size == 0:
        raise ShapeError("bce over an empty set")
    if zv.shape != y.shape:
        raise ShapeError(f"bce shape mismatch: {zv.shape} vs {y.shape}")
    loss = np.maximum(zv, 0.0) - zv * y + np.log1p(np.exp(-np.abs(zv)))
    out = np.array([[float(loss.mean())]])

    def backward(g, acc):
        s = np.where(zv >= 0, 1.0 / (1.0 + np.exp(-zv)), np.exp(zv) / (1.0 + np.exp(zv)))
        grad = ((s - y) * (g[0, 0] / zv.size)).reshape(_val(logits).shape)
        acc(logits, grad)

    return _taped((logits,), out, backward)
