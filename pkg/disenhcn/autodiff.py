"""Minimal reverse-mode differentiation over dense float64 matrices.

A `Tape` records one forward evaluation as a topologically ordered list of
`Node`s. Each primitive stores its value and a closure mapping the output
gradient to input gradients; `Tape.backward` walks the list in reverse.
Sparse operators enter only as constants through `spmm_const`.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from disenhcn import sparse
from disenhcn.errors import ShapeError, TapeError, VerificationError
from disenhcn.sparse import CsrMatrix

logger = logging.getLogger(__name__)

SQRT_EPS = 1e-10
DIST_ROUNDOFF = 1e-12

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, value: np.ndarray, parents=(), backward_fn: BackwardFn = None,
                 requires_grad: bool = False, name: str = None):
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.parents: Tuple["Node", ...] = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, int]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __repr__(self) -> str:
        label = self.name or ("leaf" if self.is_leaf else "op")
        return f"Node({label}, shape={self.shape})"


def _matrix(value) -> np.ndarray:
    value = np.asarray(value, dtype=np.float64)
    if value.ndim != 2:
        raise ShapeError(f"tape values must be 2-D, got shape {value.shape}")
    return value


def _same_shape(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


class Tape:
    def __init__(self):
        self.nodes: List[Node] = []
        self._consumed = False

    def reset(self) -> None:
        self.nodes = []
        self._consumed = False

    # Leaves
    def leaf(self, value, name: str = None) -> Node:
        node = Node(_matrix(value), requires_grad=True, name=name)
        self.nodes.append(node)
        return node

    def constant(self, value, name: str = None) -> Node:
        node = Node(_matrix(value), requires_grad=False, name=name)
        self.nodes.append(node)
        return node

    def _record(self, value: np.ndarray, parents: Sequence[Node], backward_fn: BackwardFn) -> Node:
        requires_grad = any(p.requires_grad for p in parents)
        node = Node(value, parents, backward_fn if requires_grad else None, requires_grad)
        self.nodes.append(node)
        return node

    # Primitives
    def spmm_const(self, a: CsrMatrix, x: Node) -> Node:
        return self._record(sparse.spmm_dense(a, x.value), (x,),
                            lambda g: (sparse.spmm_dense_transposed(a, g),))

    def matmul(self, a: Node, b: Node) -> Node:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: shape mismatch {a.shape} x {b.shape}")
        av, bv = a.value, b.value
        return self._record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))

    def add(self, a: Node, b: Node) -> Node:
        _same_shape("add", a, b)
        return self._record(a.value + b.value, (a, b), lambda g: (g, g))

    def sub(self, a: Node, b: Node) -> Node:
        _same_shape("sub", a, b)
        return self._record(a.value - b.value, (a, b), lambda g: (g, -g))

    def scale(self, a: Node, c: float) -> Node:
        c = float(c)
        return self._record(a.value * c, (a,), lambda g: (g * c,))

    def hadamard_dense(self, a: Node, b: Node) -> Node:
        _same_shape("hadamard_dense", a, b)
        av, bv = a.value, b.value
        return self._record(av * bv, (a, b), lambda g: (g * bv, g * av))

    def div(self, a: Node, b: Node) -> Node:
        _same_shape("div", a, b)
        av, bv = a.value, b.value
        return self._record(av / bv, (a, b), lambda g: (g / bv, -g * av / (bv * bv)))

    def concat_cols(self, parts: Sequence[Node]) -> Node:
        if not parts:
            raise ShapeError("concat_cols needs at least one input")
        rows = parts[0].shape[0]
        if any(p.shape[0] != rows for p in parts):
            raise ShapeError("concat_cols: row counts differ")
        bounds = np.cumsum([0] + [p.shape[1] for p in parts])

        def backward(g):
            return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

        return self._record(np.concatenate([p.value for p in parts], axis=1), parts, backward)

    def slice_cols(self, a: Node, start: int, stop: int) -> Node:
        if not 0 <= start <= stop <= a.shape[1]:
            raise ShapeError(f"slice_cols: [{start}, {stop}) outside {a.shape[1]} columns")

        def backward(g):
            out = np.zeros_like(a.value)
            out[:, start:stop] = g
            return (out,)

        return self._record(a.value[:, start:stop].copy(), (a,), backward)

    def row_select(self, a: Node, index) -> Node:
        index = np.asarray(index, dtype=np.int64)
        if len(index) and (index.min() < 0 or index.max() >= a.shape[0]):
            raise ShapeError(f"row_select: index outside {a.shape[0]} rows")

        def backward(g):
            out = np.zeros_like(a.value)
            np.add.at(out, index, g)
            return (out,)

        return self._record(a.value[index], (a,), backward)

    def tanh(self, a: Node) -> Node:
        y = np.tanh(a.value)
        return self._record(y, (a,), lambda g: (g * (1.0 - y * y),))

    def sigmoid_logloss(self, a: Node) -> Node:
        """-ln σ(x), evaluated as softplus(-x)."""
        x = a.value
        return self._record(np.logaddexp(0.0, -x), (a,), lambda g: (-g * expit(-x),))

    def softmax_rows(self, a: Node) -> Node:
        if a.shape[1] == 0:
            raise ShapeError("softmax over an empty axis")
        z = a.value - a.value.max(axis=1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=1, keepdims=True)
        return self._record(y, (a,), lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),))

    def maximum(self, parts: Sequence[Node]) -> Node:
        """Entrywise max; the gradient goes to the first maximal input."""
        if not parts:
            raise ShapeError("maximum needs at least one input")
        for p in parts[1:]:
            _same_shape("maximum", parts[0], p)
        stacked = np.stack([p.value for p in parts])
        winner = np.argmax(stacked, axis=0)

        def backward(g):
            return tuple(np.where(winner == k, g, 0.0) for k in range(len(parts)))

        return self._record(stacked.max(axis=0), parts, backward)

    def clip(self, a: Node, lo: float = -np.inf, hi: float = np.inf) -> Node:
        x = a.value
        inside = (x >= lo) & (x <= hi)
        return self._record(np.clip(x, lo, hi), (a,), lambda g: (np.where(inside, g, 0.0),))

    def mean_all(self, a: Node) -> Node:
        n = a.value.size
        if n == 0:
            raise ShapeError("mean over an empty matrix")
        return self._record(np.array([[a.value.mean()]]), (a,),
                            lambda g: (np.full(a.shape, g[0, 0] / n),))

    def sum_all(self, a: Node) -> Node:
        return self._record(np.array([[a.value.sum()]]), (a,), lambda g: (np.full(a.shape, g[0, 0]),))

    def square(self, a: Node) -> Node:
        x = a.value
        return self._record(x * x, (a,), lambda g: (2.0 * g * x,))

    def sqrt(self, a: Node) -> Node:
        """Plain square root; the gradient at 0 is taken as 0."""
        if np.any(a.value < 0):
            raise ShapeError("sqrt of a negative entry")
        y = np.sqrt(a.value)
        safe = np.where(y > 0, y, 1.0)
        return self._record(y, (a,), lambda g: (np.where(y > 0, g / (2.0 * safe), 0.0),))

    def sqrt_eps(self, a: Node, eps: float = SQRT_EPS) -> Node:
        y = np.sqrt(a.value + eps)
        return self._record(y, (a,), lambda g: (g / (2.0 * y),))

    def pairwise_sq_dists(self, x: Node) -> Node:
        """n x n matrix of squared Euclidean distances between the rows of x."""
        xv = x.value
        sq = (xv * xv).sum(axis=1)
        scale = sq[:, None] + sq[None, :]
        d = scale - 2.0 * (xv @ xv.T)
        # Entries at rounding level of the norms belong to coincident rows.
        flat = d <= DIST_ROUNDOFF * scale
        d[flat] = 0.0
        np.fill_diagonal(d, 0.0)

        def backward(g):
            g = np.where(flat, 0.0, g)
            s = g + g.T
            return (2.0 * (s.sum(axis=1)[:, None] * xv - s @ xv),)

        return self._record(d, (x,), backward)

    def double_center(self, m: Node) -> Node:
        return self._record(_double_center(m.value), (m,), lambda g: (_double_center(g),))

    # Reverse sweep
    def backward(self, root: Node) -> None:
        if root.shape != (1, 1):
            raise TapeError(f"backward needs a scalar root, got shape {root.shape}")
        if self._consumed:
            raise TapeError("backward already ran on this tape; reset it before the next step")
        self._consumed = True

        root.grad = np.ones((1, 1))
        for node in reversed(self.nodes):
            if node.grad is None or node.backward_fn is None:
                continue
            for parent, g in zip(node.parents, node.backward_fn(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64, copy=True)
                else:
                    parent.grad += g


def _double_center(m: np.ndarray) -> np.ndarray:
    # Invariant to a uniform shift; removing one leaves constant inputs exactly zero.
    if m.size:
        m = m - m.flat[0]
    return m - m.mean(axis=1, keepdims=True) - m.mean(axis=0, keepdims=True) + m.mean()


@dataclass
class GradCheckReport:
    max_rel_error: float
    mean_rel_error: float
    worst_parameter: str
    worst_index: Tuple[int, ...]
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def to_json_dict(self) -> dict:
        return {
            "passed": self.passed,
            "max_rel_error": self.max_rel_error,
            "mean_rel_error": self.mean_rel_error,
            "worst_parameter": self.worst_parameter,
            "worst_index": list(self.worst_index),
            "n_checked": self.n_checked,
            "tolerance": self.tolerance,
        }


LossFn = Callable[[Dict[str, np.ndarray]], Tuple[float, Dict[str, np.ndarray]]]


def finite_diff_check(
    loss_fn: LossFn,
    params: Dict[str, np.ndarray],
    h: float = 1e-5,
    tolerance: float = 1e-4,
    max_entries: int = 10_000,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences, entry by entry.

    ``loss_fn(params)`` returns ``(loss, grads)``; it is called with ``params``
    perturbed in place and must be deterministic. Above ``max_entries`` total
    entries a seeded random subsample is checked.
    """
    if h <= 0:
        raise VerificationError("finite-difference step must be positive")

    loss, grads = loss_fn(params)
    if not np.isfinite(loss):
        raise VerificationError("non-finite loss at the unperturbed point")

    entries = [(name, idx) for name, p in params.items() for idx in np.ndindex(p.shape)]
    if len(entries) > max_entries:
        pick = np.sort(np.random.default_rng(seed).choice(len(entries), size=max_entries, replace=False))
        entries = [entries[i] for i in pick]

    errors = []
    worst = (-1.0, "", ())
    for name, idx in entries:
        p = params[name]
        original = p[idx]
        p[idx] = original + h
        f_plus, _ = loss_fn(params)
        p[idx] = original - h
        f_minus, _ = loss_fn(params)
        p[idx] = original
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise VerificationError(f"non-finite loss while perturbing {name}{list(idx)}")

        g_fd = (f_plus - f_minus) / (2.0 * h)
        g_ad = float(grads[name][idx]) if grads.get(name) is not None else 0.0
        rel = abs(g_ad - g_fd) / max(abs(g_ad), abs(g_fd), 1e-8)
        errors.append(rel)
        if rel > worst[0]:
            worst = (rel, name, tuple(int(i) for i in idx))

    report = GradCheckReport(
        max_rel_error=float(max(errors)) if errors else 0.0,
        mean_rel_error=float(np.mean(errors)) if errors else 0.0,
        worst_parameter=worst[1],
        worst_index=worst[2],
        n_checked=len(errors),
        tolerance=tolerance,
    )
    logger.info("Gradient check: max rel err %.3e over %d entries (worst %s%s)",
                report.max_rel_error, report.n_checked, report.worst_parameter, list(report.worst_index))
    return report
