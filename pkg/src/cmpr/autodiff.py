"""Dense float64 arrays with a minimal reverse-mode gradient tape.

Only the operations the model and losses actually need are implemented;
this is not a general autodiff framework.  Broadcasting is deliberately
restricted to scalar<->array and equal shapes (plus the dedicated
``add_bias`` op for trailing-shape biases).  Every forward op checks its
result for NaN/Inf and raises instead of propagating garbage.

A ``Tape`` records nodes in execution order, so topological order holds by
construction; ``backward`` walks the node list once, in reverse.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    DomainError,
    NonFiniteError,
)

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

Scalar = (int, float)


class Node:
    """One recorded operation: kind, input node ids, and the backward rule.

    Forward values needed by the backward rule are captured in the
    ``backward_fn`` closure.  Leaves have ``backward_fn is None``.
    """

    __slots__ = ("op", "parents", "backward_fn")

    def __init__(
        self,
        op: str,
        parents: tuple[int, ...],
        backward_fn: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None,
    ):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    """A float64 array recorded on a tape.

    Tensors are immutable views into the tape: they pair a node index with
    the forward value computed for that node.
    """

    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: "Tape", index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Tensor(node={self.index}, shape={self.value.shape})"

    # arithmetic sugar; semantics live in the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap_scalar(self.tape, other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of operations; one backward pass per recorded root."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, value, name: str = "leaf") -> Tensor:
        arr = np.asarray(value, dtype=np.float64)
        _check_finite(arr, name)
        self.nodes.append(Node(name, (), None))
        return Tensor(self, len(self.nodes) - 1, arr)

    def record(
        self,
        op: str,
        value: np.ndarray,
        parents: tuple[int, ...],
        backward_fn: Callable[[np.ndarray], tuple[np.ndarray, ...]],
    ) -> Tensor:
        value = np.asarray(value, dtype=np.float64)
        _check_finite(value, op)
        self.nodes.append(Node(op, parents, backward_fn))
        return Tensor(self, len(self.nodes) - 1, value)


class Gradients:
    """Per-node gradients from one backward pass."""

    def __init__(self, by_node: list[np.ndarray | None]):
        self._by_node = by_node

    def of(self, t: Tensor) -> np.ndarray:
        """Gradient w.r.t. ``t``; zeros if the root does not depend on it."""
        g = self._by_node[t.index]
        if g is None:
            return np.zeros_like(t.value)
        return g

    def reached(self, t: Tensor) -> bool:
        return self._by_node[t.index] is not None


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


def _wrap_scalar(tape: Tape, x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return tape.leaf(np.float64(x), name="const")


def _same_tape(*ts: Tensor) -> Tape:
    tape = ts[0].tape
    for t in ts[1:]:
        if t.tape is not tape:
            raise ContractError("tensors belong to different tapes")
    return tape


def backward(tape: Tape, root: Tensor) -> Gradients:
    """Gradient of a scalar root w.r.t. every node that feeds it.

    Visits each node exactly once, in reverse recording order, which is a
    valid topological order because inputs always precede their consumers.
    """
    if root.tape is not tape:
        raise ContractError("root tensor was not recorded on this tape")
    if root.value.ndim != 0:
        raise ContractError(
            f"backward root must be scalar, got shape {root.value.shape}"
        )
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[root.index] = np.ones((), dtype=np.float64)
    for i in range(root.index, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = tape.nodes[i]
        if node.backward_fn is None:
            continue
        for pidx, pg in zip(node.parents, node.backward_fn(g)):
            if grads[pidx] is None:
                grads[pidx] = pg
            else:
                grads[pidx] = grads[pidx] + pg
    return Gradients(grads)


# ---------------------------------------------------------------------------
# elementwise ops (scalar<->array and equal-shape broadcasting only)
# ---------------------------------------------------------------------------


def _binary_shapes_ok(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape or a.ndim == 0 or b.ndim == 0


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        if not isinstance(b, Scalar):
            raise ContractError(f"cannot add {type(b).__name__} to Tensor")
        out = a.value + float(b)
        return a.tape.record("add", out, (a.index,), lambda g: (g,))
    tape = _same_tape(a, b)
    if not _binary_shapes_ok(a.value, b.value):
        raise DimensionError(f"add shapes {a.shape} vs {b.shape}")
    out = a.value + b.value

    def bwd(g):
        ga = g if a.value.ndim else np.sum(g)
        gb = g if b.value.ndim else np.sum(g)
        return ga, gb

    return tape.record("add", out, (a.index, b.index), bwd)


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        if not isinstance(b, Scalar):
            raise ContractError(f"cannot subtract {type(b).__name__} from Tensor")
        out = a.value - float(b)
        return a.tape.record("sub", out, (a.index,), lambda g: (g,))
    tape = _same_tape(a, b)
    if not _binary_shapes_ok(a.value, b.value):
        raise DimensionError(f"sub shapes {a.shape} vs {b.shape}")
    out = a.value - b.value

    def bwd(g):
        ga = g if a.value.ndim else np.sum(g)
        gb = -g if b.value.ndim else -np.sum(g)
        return ga, gb

    return tape.record("sub", out, (a.index, b.index), bwd)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        if not isinstance(b, Scalar):
            raise ContractError(f"cannot multiply Tensor by {type(b).__name__}")
        s = float(b)
        out = a.value * s
        return a.tape.record("scale", out, (a.index,), lambda g: (g * s,))
    tape = _same_tape(a, b)
    if not _binary_shapes_ok(a.value, b.value):
        raise DimensionError(f"mul shapes {a.shape} vs {b.shape}")
    out = a.value * b.value
    av, bv = a.value, b.value

    def bwd(g):
        ga = g * bv
        gb = g * av
        if av.ndim == 0 and bv.ndim != 0:
            ga = np.sum(ga)
        if bv.ndim == 0 and av.ndim != 0:
            gb = np.sum(gb)
        return ga, gb

    return tape.record("mul", out, (a.index, b.index), bwd)


def neg(a: Tensor) -> Tensor:
    return a.tape.record("neg", -a.value, (a.index,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError
        out = np.exp(a.value)
    return a.tape.record("exp", out, (a.index,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.value <= 0.0):
        raise DomainError("log of non-positive value")
    av = a.value
    out = np.log(av)
    return a.tape.record("log", out, (a.index,), lambda g: (g / av,))


def gelu(a: Tensor) -> Tensor:
    """GELU activation, tanh approximation."""
    x = a.value
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner),)

    return a.tape.record("gelu", out, (a.index,), bwd)


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    out = av @ bv

    def bwd(g):
        return g @ bv.T, av.T @ g

    return tape.record("matmul", out, (a.index, b.index), bwd)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over matching leading dimension: (B,M,K)@(B,K,N)."""
    tape = _same_tape(a, b)
    if a.value.ndim != 3 or b.value.ndim != 3:
        raise DimensionError(f"bmm expects 3-D operands, got {a.shape}, {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"bmm shapes {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    out = av @ bv

    def bwd(g):
        return g @ bv.transpose(0, 2, 1), av.transpose(0, 2, 1) @ g

    return tape.record("bmm", out, (a.index, b.index), bwd)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(int(i) for i in np.argsort(axes))
    out = a.value.transpose(axes)
    return a.tape.record(
        "transpose", out, (a.index,), lambda g: (g.transpose(inv),)
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.value.size:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}")
    orig = a.value.shape
    out = a.value.reshape(shape)
    return a.tape.record("reshape", out, (a.index,), lambda g: (g.reshape(orig),))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a bias whose shape equals the trailing dims of ``x``.

    The backward rule sums the gradient over the broadcast leading axes;
    this is the one sanctioned exception to the equal-shape rule.
    """
    tape = _same_tape(x, b)
    k = b.value.ndim
    if k == 0 or k > x.value.ndim or x.shape[x.value.ndim - k :] != b.shape:
        raise DimensionError(f"bias shape {b.shape} does not trail {x.shape}")
    lead = tuple(range(x.value.ndim - k))
    out = x.value + b.value

    def bwd(g):
        return g, g.sum(axis=lead) if lead else g

    return tape.record("add_bias", out, (x.index, b.index), bwd)


def row_l2_normalize(x: Tensor) -> Tensor:
    """Scale every row of an N x D matrix to unit Euclidean norm."""
    if x.value.ndim != 2:
        raise DimensionError(f"row_l2_normalize expects 2-D, got {x.shape}")
    norms = np.linalg.norm(x.value, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateInputError("zero-norm row cannot be normalized")
    y = x.value / norms

    def bwd(g):
        dot = np.sum(y * g, axis=1, keepdims=True)
        return ((g - y * dot) / norms,)

    return x.tape.record("row_l2_normalize", y, (x.index,), bwd)


def row_logsumexp(x: Tensor) -> Tensor:
    """log(sum(exp(row))) per row, with max-subtraction for stability."""
    if x.value.ndim != 2:
        raise DimensionError(f"row_logsumexp expects 2-D, got {x.shape}")
    m = np.max(x.value, axis=1, keepdims=True)
    e = np.exp(x.value - m)
    s = np.sum(e, axis=1, keepdims=True)
    out = (m + np.log(s)).reshape(-1)
    soft = e / s

    def bwd(g):
        return (soft * g[:, None],)

    return x.tape.record("row_logsumexp", out, (x.index,), bwd)


def take_diagonal(x: Tensor) -> Tensor:
    if x.value.ndim != 2 or x.shape[0] != x.shape[1]:
        raise DimensionError(f"take_diagonal expects square matrix, got {x.shape}")
    n = x.shape[0]
    out = np.diagonal(x.value).copy()

    def bwd(g):
        full = np.zeros((n, n), dtype=np.float64)
        np.fill_diagonal(full, g)
        return (full,)

    return x.tape.record("take_diagonal", out, (x.index,), bwd)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    m = np.max(x.value, axis=-1, keepdims=True)
    e = np.exp(x.value - m)
    s = e / np.sum(e, axis=-1, keepdims=True)

    def bwd(g):
        inner = np.sum(g * s, axis=-1, keepdims=True)
        return (s * (g - inner),)

    return x.tape.record("softmax", s, (x.index,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply learnable scale and shift."""
    tape = _same_tape(x, gamma, beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm affine params must have shape ({d},), "
            f"got {gamma.shape} and {beta.shape}"
        )
    mu = x.value.mean(axis=-1, keepdims=True)
    var = ((x.value - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.value - mu) * inv
    out = gamma.value * xhat + beta.value
    lead = tuple(range(x.value.ndim - 1))
    gv = gamma.value

    def bwd(g):
        dgamma = (g * xhat).sum(axis=lead) if lead else g * xhat
        dbeta = g.sum(axis=lead) if lead else g
        dxhat = g * gv
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return tape.record("layer_norm", out, (x.index, gamma.index, beta.index), bwd)


def mean_axis(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    out = x.value.mean(axis=axis)

    def bwd(g):
        return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),)

    return x.tape.record("mean_axis", out, (x.index,), bwd)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.value.sum(), dtype=np.float64)
    shape = x.value.shape

    def bwd(g):
        return (np.broadcast_to(g, shape).copy(),)

    return x.tape.record("sum_all", out, (x.index,), bwd)


def mean_all(x: Tensor) -> Tensor:
    n = x.value.size
    out = np.asarray(x.value.mean(), dtype=np.float64)
    shape = x.value.shape

    def bwd(g):
        return (np.broadcast_to(g / n, shape).copy(),)

    return x.tape.record("mean_all", out, (x.index,), bwd)


# ---------------------------------------------------------------------------
# transposed convolution
# ---------------------------------------------------------------------------


def _deconv_check(x: np.ndarray, k: np.ndarray, stride: int) -> tuple[int, int]:
    if k.ndim != 4 or k.shape[2] != k.shape[3]:
        raise DimensionError(f"kernel must be CxC'xkxk, got {k.shape}")
    if x.shape[-3] != k.shape[0]:
        raise DimensionError(
            f"input channels {x.shape[-3]} != kernel in-channels {k.shape[0]}"
        )
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    kh = k.shape[2]
    h, w = x.shape[-2], x.shape[-1]
    return (h - 1) * stride + kh, (w - 1) * stride + kh


def transposed_conv2d(x: Tensor, kernel: Tensor, stride: int) -> Tensor:
    """Fractionally-strided convolution.

    Accepts a single sample (C,H,W) or a batch (N,C,H,W); the kernel is
    (C, C', k, k) and output spatial size is (H-1)*stride + k.
    """
    tape = _same_tape(x, kernel)
    single = x.value.ndim == 3
    xv = x.value[None] if single else x.value
    if xv.ndim != 4:
        raise DimensionError(f"input must be (C,H,W) or (N,C,H,W), got {x.shape}")
    kv = kernel.value
    ho, wo = _deconv_check(xv, kv, stride)
    n, c, h, w = xv.shape
    co, kh = kv.shape[1], kv.shape[2]

    t = np.einsum("nchw,cokl->nohwkl", xv, kv)
    out = np.zeros((n, co, ho, wo), dtype=np.float64)
    for di in range(kh):
        for dj in range(kh):
            out[:, :, di : di + (h - 1) * stride + 1 : stride,
                dj : dj + (w - 1) * stride + 1 : stride] += t[:, :, :, :, di, dj]

    def bwd(g):
        if single:
            g = g[None]
        dx = np.zeros_like(xv)
        dk = np.zeros_like(kv)
        for di in range(kh):
            for dj in range(kh):
                gsub = g[:, :, di : di + (h - 1) * stride + 1 : stride,
                         dj : dj + (w - 1) * stride + 1 : stride]
                dx += np.einsum("nohw,co->nchw", gsub, kv[:, :, di, dj])
                dk[:, :, di, dj] = np.einsum("nchw,nohw->co", xv, gsub)
        return (dx[0] if single else dx), dk

    return tape.record(
        "transposed_conv2d",
        out[0] if single else out,
        (x.index, kernel.index),
        bwd,
    )


# ---------------------------------------------------------------------------
# finite differences (the independent gradient oracle)
# ---------------------------------------------------------------------------


def finite_difference_gradient(
    f: Callable[[dict[str, np.ndarray]], float],
    params: dict[str, np.ndarray],
    h: float = 1e-5,
    adaptive: bool = False,
    coords: dict[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Central-difference gradient (f(t+h) - f(t-h)) / 2h per coordinate.

    With ``adaptive`` the step is scaled per coordinate as h*(1+|theta|).
    ``coords`` optionally restricts each parameter to a set of flat indices
    (untouched coordinates come back as NaN so callers cannot mistake them
    for computed zeros).
    """
    if h <= 0.0:
        raise DomainError(f"finite-difference step must be positive, got {h}")
    grads: dict[str, np.ndarray] = {}
    work = {k: v.astype(np.float64).copy() for k, v in params.items()}
    for name, theta in work.items():
        flat = theta.reshape(-1)
        if coords is not None and name in coords:
            idxs = np.asarray(coords[name], dtype=np.int64)
            g = np.full(flat.shape, np.nan, dtype=np.float64)
        else:
            idxs = np.arange(flat.size)
            g = np.zeros(flat.shape, dtype=np.float64)
        for i in idxs:
            orig = flat[i]
            step = h * (1.0 + abs(orig)) if adaptive else h
            flat[i] = orig + step
            f_plus = f(work)
            flat[i] = orig - step
            f_minus = f(work)
            flat[i] = orig
            g[i] = (f_plus - f_minus) / (2.0 * step)
        grads[name] = g.reshape(theta.shape)
    return grads
