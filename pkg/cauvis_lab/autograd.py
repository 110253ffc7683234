"""
Reverse-mode gradients over the fixed set of matrix operations used by the Cauvis layers.

A `Tape` records one forward pass. Every recorded value is a 2-D float64 array; scalars are 1x1.
`backward` walks the tape in reverse and returns one gradient per trainable `Parameter`.

The tail penalty back-propagates the gradient of a sum of singular values, U_tail @ V_tail^T. Rank
truncation back-propagates the full derivative of the truncated SVD.
"""

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics
from .errors import GraphError, NumericError, ShapeError
from .numerics import FrequencyMask

SUPPORTED_OPS = frozenset(
    {
        'param',
        'const',
        'matmul',
        'add',
        'add_row',
        'sub',
        'mul',
        'scale',
        'scale_by',
        'sigmoid',
        'row_softmax',
        'transpose',
        'reshape',
        'sum',
        'mean',
        'abs_sum',
        'row_norms',
        'spectral_filter',
        'tail_penalty',
        'truncate_rank',
        'cross_entropy',
    }
)
# Relative squared-gap below which a kept and a dropped singular value count as equal
GAP_TOL = 1e-12


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function, evaluated without overflow on either tail."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class Parameter:
    """A named trainable matrix with its accumulated gradient."""

    id: str
    value: np.ndarray
    trainable: bool = True
    grad: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.value = numerics.as_matrix(self.value, self.id).copy()
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


@dataclass
class _Node:
    op: str
    parents: tuple[int, ...]
    value: np.ndarray
    vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None
    param: Parameter | None = None


class Var:
    """Handle to a value recorded on a tape."""

    __slots__ = ('tape', 'index')

    def __init__(self, tape: 'Tape', index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def T(self) -> 'Var':
        return self.tape.transpose(self)

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __add__(self, other):
        return self.tape.add(self, other)

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Var):
            return self.tape.mul(self, other)
        return self.tape.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.scale(self, -1.0)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __repr__(self):
        return f'Var({self.tape.nodes[self.index].op}, shape={self.shape})'


def _same_shape(op: str, a: Var, b: Var):
    if a.shape != b.shape:
        raise ShapeError(f'{op}: shapes {a.shape} and {b.shape} differ')


def _blocks(a: np.ndarray, groups: int) -> np.ndarray:
    if groups < 1 or a.shape[0] % groups:
        raise ShapeError(f'{a.shape[0]} rows cannot be split into {groups} blocks')
    return a.reshape(groups, a.shape[0] // groups, a.shape[1])


def _truncation_vjp(u: np.ndarray, sigma: np.ndarray, vt: np.ndarray, k: int, g: np.ndarray) -> np.ndarray:
    """
    Cotangent of A -> U_k S_k V_k^T for one block, from its thin SVD.

    In the singular basis a kept index t and a dropped index o couple through
    (s_t^2 g_to + s_t s_o g_ot) / (s_t^2 - s_o^2); kept-kept entries pass unchanged and dropped-dropped
    entries vanish. The parts of `g` outside the column or row space pass through the kept directions.
    """
    r = sigma.size
    if k >= r:
        return g
    v = vt.T
    s2 = sigma**2
    kept = np.arange(r) < k
    mixed = kept[:, None] != kept[None, :]
    gap = np.abs(s2[:, None] - s2[None, :])
    resolved = mixed & (gap > GAP_TOL * max(s2[0], np.finfo(np.float64).tiny))
    safe = np.where(resolved, gap, 1.0)
    kept_s2 = np.where(kept[:, None], s2[:, None], s2[None, :])
    c = np.where(mixed, np.where(resolved, kept_s2 / safe, 0.0), np.outer(kept, kept).astype(np.float64))
    d = np.where(resolved, np.outer(sigma, sigma) / safe, 0.0)
    gr = u.T @ g @ v
    out = u @ (c * gr + d * gr.T) @ vt
    uk, vk = u[:, :k], v[:, :k]
    out += (g @ vk - u @ (u.T @ g @ vk)) @ vk.T
    out += uk @ (uk.T @ g - (uk.T @ g @ v) @ vt)
    return out


class Tape:
    """Records a single forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._params: dict[str, int] = {}

    def _record(self, op: str, parents: Sequence[Var], value: np.ndarray, vjp=None, param=None) -> Var:
        if op not in SUPPORTED_OPS:
            raise GraphError(f'unsupported op {op!r}')
        for p in parents:
            if p.tape is not self:
                raise GraphError(f'{op}: operand recorded on another tape')
        value = np.asarray(value, dtype=np.float64)
        if value.ndim != 2:
            raise GraphError(f'{op} produced a {value.ndim}-D value')
        self.nodes.append(_Node(op, tuple(p.index for p in parents), value, vjp, param))
        return Var(self, len(self.nodes) - 1)

    def param(self, p: Parameter) -> Var:
        """Place a parameter on the tape; repeated calls return the same handle."""
        if p.id in self._params:
            return Var(self, self._params[p.id])
        v = self._record('param', (), p.value, param=p)
        self._params[p.id] = v.index
        return v

    def const(self, a) -> Var:
        return self._record('const', (), numerics.as_matrix(a, 'constant'))

    def matmul(self, a: Var, b: Var) -> Var:
        av, bv = a.value, b.value
        if av.shape[1] != bv.shape[0]:
            raise ShapeError(f'matmul: cannot multiply {av.shape} by {bv.shape}')
        return self._record('matmul', (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))

    def add(self, a: Var, b: Var) -> Var:
        _same_shape('add', a, b)
        return self._record('add', (a, b), a.value + b.value, lambda g: (g, g))

    def add_row(self, a: Var, b: Var) -> Var:
        """Add a 1 x C row vector to every row of `a`."""
        if b.shape != (1, a.shape[1]):
            raise ShapeError(f'add_row: bias {b.shape} does not fit {a.shape}')
        return self._record('add_row', (a, b), a.value + b.value, lambda g: (g, g.sum(axis=0, keepdims=True)))

    def sub(self, a: Var, b: Var) -> Var:
        _same_shape('sub', a, b)
        return self._record('sub', (a, b), a.value - b.value, lambda g: (g, -g))

    def mul(self, a: Var, b: Var) -> Var:
        _same_shape('mul', a, b)
        av, bv = a.value, b.value
        return self._record('mul', (a, b), av * bv, lambda g: (g * bv, g * av))

    def scale(self, a: Var, c: float) -> Var:
        return self._record('scale', (a,), a.value * c, lambda g: (g * c,))

    def scale_by(self, a: Var, s: Var) -> Var:
        """Multiply `a` by the 1x1 value `s`."""
        if s.shape != (1, 1):
            raise ShapeError(f'scale_by: factor must be 1x1, got {s.shape}')
        av, sv = a.value, s.value[0, 0]
        return self._record('scale_by', (a, s), av * sv, lambda g: (g * sv, np.array([[(g * av).sum()]])))

    def sigmoid(self, a: Var) -> Var:
        s = sigmoid(a.value)
        return self._record('sigmoid', (a,), s, lambda g: (g * s * (1.0 - s),))

    def row_softmax(self, a: Var) -> Var:
        s = numerics.row_softmax(a.value)
        return self._record('row_softmax', (a,), s, lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),))

    def transpose(self, a: Var) -> Var:
        return self._record('transpose', (a,), a.value.T.copy(), lambda g: (g.T,))

    def reshape(self, a: Var, rows: int, cols: int) -> Var:
        shape = a.shape
        if rows * cols != a.value.size:
            raise ShapeError(f'reshape: cannot view {shape} as {rows}x{cols}')
        return self._record('reshape', (a,), a.value.reshape(rows, cols), lambda g: (g.reshape(shape),))

    def sum(self, a: Var) -> Var:
        shape = a.shape
        return self._record('sum', (a,), np.array([[a.value.sum()]]), lambda g: (np.full(shape, g[0, 0]),))

    def mean(self, a: Var) -> Var:
        shape, size = a.shape, a.value.size
        return self._record('mean', (a,), np.array([[a.value.mean()]]), lambda g: (np.full(shape, g[0, 0] / size),))

    def abs_sum(self, a: Var) -> Var:
        sign = np.sign(a.value)
        return self._record('abs_sum', (a,), np.array([[np.abs(a.value).sum()]]), lambda g: (g[0, 0] * sign,))

    def row_norms(self, a: Var, eps: float = 1e-12) -> Var:
        """Euclidean norm of each row as an m x 1 column, with `eps` inside the square root."""
        av = a.value
        r = np.sqrt((av * av).sum(axis=1, keepdims=True) + eps)
        return self._record('row_norms', (a,), r, lambda g: (g * av / r,))

    def spectral_filter(self, a: Var, mask: FrequencyMask, h: int, w: int) -> Var:
        """Per-channel Fourier gating over an h x w token grid (see `numerics.filter_grid`)."""
        if not mask.is_symmetric():
            raise GraphError('spectral_filter needs a negation-symmetric mask')
        out = numerics.filter_grid(a.value, mask, h, w)
        # A real symmetric gate makes the filter self-adjoint
        return self._record('spectral_filter', (a,), out, lambda g: (numerics.filter_grid(g, mask, h, w),))

    def tail_penalty(self, a: Var, ks: Sequence[int], lam: float = 1.0) -> Var:
        """
        `lam` times the sum of singular values beyond rank `ks[b]` in each row block b of `a`.

        `a` stacks len(ks) blocks of equal height.
        """
        blocks = _blocks(a.value, len(ks))
        u, sigma, vt = numerics.svd(blocks, full_matrices=False)
        total = 0.0
        grad = np.zeros_like(blocks)
        for b, k in enumerate(ks):
            total += sigma[b, k:].sum()
            grad[b] = u[b, :, k:] @ vt[b, k:, :]
        grad = grad.reshape(a.shape)
        return self._record('tail_penalty', (a,), np.array([[lam * total]]), lambda g: (g[0, 0] * lam * grad,))

    def truncate_rank(self, a: Var, ks: Sequence[int]) -> Var:
        """
        Keep the top `ks[b]` singular triplets of each row block.

        The backward pass is the exact derivative of rank-k truncation, including the rotation of the kept
        singular vectors towards the dropped ones. It is undefined when a kept and a dropped singular value
        coincide; such pairs contribute no coupling term.
        """
        blocks = _blocks(a.value, len(ks))
        u, sigma, vt = numerics.svd(blocks, full_matrices=False)
        out = np.zeros_like(blocks)
        for b, k in enumerate(ks):
            out[b] = (u[b, :, :k] * sigma[b, :k]) @ vt[b, :k, :]
        shape = a.shape

        def vjp(g):
            gb = _blocks(g, len(ks))
            parts = [_truncation_vjp(u[b], sigma[b], vt[b], k, gb[b]) for b, k in enumerate(ks)]
            return (np.stack(parts).reshape(shape),)

        return self._record('truncate_rank', (a,), out.reshape(shape), vjp)

    def cross_entropy(self, logits: Var, labels: np.ndarray) -> Var:
        """Mean negative log-likelihood of integer `labels` under row-softmax of `logits`."""
        labels = np.asarray(labels, dtype=np.int64)
        z = logits.value
        if labels.shape != (z.shape[0],):
            raise ShapeError(f'cross_entropy: {labels.shape[0]} labels for {z.shape[0]} rows')
        shifted = z - z.max(axis=1, keepdims=True)
        log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        rows = np.arange(z.shape[0])
        loss = -log_p[rows, labels].mean()
        onehot = np.zeros_like(z)
        onehot[rows, labels] = 1.0
        grad = (np.exp(log_p) - onehot) / z.shape[0]
        return self._record('cross_entropy', (logits,), np.array([[loss]]), lambda g: (g[0, 0] * grad,))


def backward(tape: Tape, loss: Var) -> dict[str, np.ndarray]:
    """
    Gradients of the scalar `loss` with respect to every trainable parameter on `tape`.

    Each parameter's `grad` is overwritten; the returned map is ordered by parameter id.
    """
    if loss.tape is not tape:
        raise GraphError('loss was recorded on another tape')
    if loss.value.size != 1:
        raise GraphError(f'loss must be scalar, got shape {loss.shape}')
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[loss.index] = np.ones_like(loss.value)
    for i in range(loss.index, -1, -1):
        node, g = tape.nodes[i], grads[i]
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            grads[parent] = pg if grads[parent] is None else grads[parent] + pg
    out = {}
    for pid in sorted(tape._params):
        index = tape._params[pid]
        p = tape.nodes[index].param
        if not p.trainable:
            continue
        g = grads[index]
        p.grad = np.zeros_like(p.value) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape)
        out[pid] = p.grad
    return out


def finite_diff_check(f: Callable[[Tape], Var], params: Sequence[Parameter], eps: float = 1e-5) -> float:
    """
    Compare `backward` with central differences on every coordinate of `params`.

    `f` records the scalar objective on the tape it is given. Returns the largest
    |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
    """
    if eps <= 0:
        raise ValueError('eps must be positive')
    tape = Tape()
    analytic = backward(tape, f(tape))

    def evaluate() -> float:
        t = Tape()
        value = f(t).item()
        if not np.isfinite(value):
            raise NumericError('objective evaluated to a non-finite value')
        return value

    worst = 0.0
    for p in sorted(params, key=lambda q: q.id):
        g_ad = analytic.get(p.id, np.zeros_like(p.value))
        p.value = np.ascontiguousarray(p.value)
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = evaluate()
            flat[i] = orig - eps
            down = evaluate()
            flat[i] = orig
            g_fd = (up - down) / (2 * eps)
            g = g_ad.reshape(-1)[i]
            worst = max(worst, abs(g - g_fd) / max(1e-8, abs(g) + abs(g_fd)))
    return worst
