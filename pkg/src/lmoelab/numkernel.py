"""Dense float64 tensors with a reverse-mode tape.

Every differentiable op is a plain function that computes its forward value
with numpy and attaches a vector-Jacobian product closure to the result.
``backward`` replays the closures in reverse topological order.

Ops registered with :func:`differentiable` are the ones covered by the
finite-difference sweep in the test-suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

EPS_NORM = 1e-12
EPS_PROB = 1e-7

DIFFERENTIABLE_OPS: dict[str, Callable] = {}


def differentiable(name: str):
    def register(fn):
        DIFFERENTIABLE_OPS[name] = fn
        return fn

    return register


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class Tensor:
    """An immutable array node on the tape.

    Leaves built directly from user data are checked for NaN/Inf. Results of
    ops carry ``op`` (the op identifier), ``parents`` and a ``vjp`` closure
    holding whatever forward intermediates the backward rule needs.
    """

    __slots__ = ("data", "op", "parents", "vjp", "requires_grad")

    def __init__(self, data, *, check: bool = True):
        arr = np.array(data, dtype=np.float64)
        if check and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor input contains NaN or Inf")
        arr.flags.writeable = False
        self.data = arr
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self.vjp = None
        self.requires_grad = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    __array_priority__ = 100

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """A trainable leaf. ``data`` is updated in place by optimizers."""

    __slots__ = ("grad", "name", "m", "v")

    def __init__(self, data, name: str = ""):
        super().__init__(data)
        self.data.flags.writeable = True
        self.requires_grad = True
        self.grad = np.zeros_like(self.data)
        self.name = name
        self.m = None
        self.v = None

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str, vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    data = np.asarray(data, dtype=np.float64)
    data.flags.writeable = False
    out.data = data
    out.op = op
    out.parents = tuple(parents)
    out.requires_grad = any(p.requires_grad for p in parents)
    out.vjp = vjp if out.requires_grad else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _require_matrix(x: Tensor, what: str) -> None:
    if x.ndim != 2:
        raise ShapeError(f"{what} expects a matrix, got shape {x.shape}")


# --------------------------------------------------------------------------
# backward


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into ``.grad`` of every reachable Parameter.

    Gradients of the reachable parameters are reset first.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    for node in order:
        if isinstance(node, Parameter):
            node.zero_grad()

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad = node.grad + g
            continue
        if node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# --------------------------------------------------------------------------
# elementwise / structural ops


@differentiable("add")
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data + b.data,
        (a, b),
        "add",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


@differentiable("sub")
def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data - b.data,
        (a, b),
        "sub",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


@differentiable("mul")
def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        "mul",
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


@differentiable("matmul")
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _require_matrix(a, "matmul")
    _require_matrix(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, (a, b), "matmul", lambda g: (g @ b.data.T, a.data.T @ g))


@differentiable("transpose")
def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    _require_matrix(a, "transpose")
    return _node(a.data.T, (a,), "transpose", lambda g: (g.T,))


@differentiable("reshape")
def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(a.shape),))


@differentiable("relu")
def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(a.data * mask, (a,), "relu", lambda g: (g * mask,))


@differentiable("abs")
def absolute(a: Tensor) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _node(np.abs(a.data), (a,), "abs", lambda g: (g * sign,))


@differentiable("exp")
def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), "exp", lambda g: (g * out,))


@differentiable("log")
def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


@differentiable("sigmoid")
def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out[~pos] = e / (1.0 + e)
    return _node(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


@differentiable("sum")
def total(a: Tensor, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        return _node(a.data.sum(), (a,), "sum", lambda g: (np.broadcast_to(g, a.shape).copy(),))
    return _node(
        a.data.sum(axis=axis),
        (a,),
        "sum",
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),),
    )


def mean(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return total(a) * (1.0 / a.data.size)


@differentiable("take")
def take(a: Tensor, index) -> Tensor:
    """Advanced indexing ``a[index]``; repeated indices accumulate on backward."""
    a = as_tensor(a)

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _node(a.data[index], (a,), "take", vjp)


@differentiable("scatter_rows")
def scatter_rows(a: Tensor, rows: np.ndarray, n_rows: int) -> Tensor:
    """Place row ``i`` of ``a`` at output row ``rows[i]`` (summing repeats)."""
    a = as_tensor(a)
    out = np.zeros((n_rows,) + a.shape[1:])
    np.add.at(out, rows, a.data)
    return _node(out, (a,), "scatter_rows", lambda g: (g[rows],))


@differentiable("concat_rows")
def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = np.cumsum([p.shape[0] for p in parts])[:-1]
    return _node(
        np.concatenate([p.data for p in parts], axis=0),
        parts,
        "concat_rows",
        lambda g: tuple(np.split(g, sizes, axis=0)),
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# --------------------------------------------------------------------------
# normalization, similarity, probability ops


@differentiable("row_softmax")
def row_softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _node(s, (x,), "row_softmax", vjp)


@differentiable("l2_normalize_rows")
def l2_normalize_rows(x: Tensor, return_flags: bool = False):
    """Scale each row to unit L2 norm.

    Rows whose norm is below ``EPS_NORM`` pass through unchanged; with
    ``return_flags`` a boolean mask of those rows is returned as well.
    """
    x = as_tensor(x)
    norms = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    degenerate = norms < EPS_NORM
    safe = np.where(degenerate, 1.0, norms)
    y = x.data / safe

    def vjp(g):
        gx = (g - y * (g * y).sum(axis=-1, keepdims=True)) / safe
        return (np.where(degenerate, g, gx),)

    out = _node(y, (x,), "l2_normalize_rows", vjp)
    if return_flags:
        return out, degenerate[..., 0]
    return out


@differentiable("cosine_similarity")
def cosine_similarity(a, b) -> Tensor:
    """Pairwise cosine between the rows of ``a`` (p x d) and ``b`` (q x d)."""
    a, b = as_tensor(a), as_tensor(b)
    _require_matrix(a, "cosine_similarity")
    _require_matrix(b, "cosine_similarity")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_similarity feature dimensions disagree: {a.shape} vs {b.shape}")
    return matmul(l2_normalize_rows(a), transpose(l2_normalize_rows(b)))


def topk_rows(x, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and values of the ``k`` largest entries per row, descending.

    Ties go to the lower column index. Not differentiable; callers gather
    the selected entries with :func:`take` when gradients are needed.
    """
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"topk_rows expects a matrix, got shape {arr.shape}")
    if not 1 <= k <= arr.shape[1]:
        raise ValueError(f"k={k} out of range for {arr.shape[1]} columns")
    idx = np.argsort(-arr, axis=1, kind="stable")[:, :k]
    return idx, np.take_along_axis(arr, idx, axis=1)


def _check_prob_rows(p: np.ndarray, what: str) -> None:
    if np.any(p < -1e-12) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError(f"{what} is not a probability row (nonnegative, sums to 1)")


@differentiable("kl_divergence")
def kl_divergence(p, q) -> Tensor:
    """KL(p || q) per row: sum p*log(p/q), 0*log 0 = 0, q floored at EPS_PROB.

    A 1-D input gives a scalar; a matrix gives one value per row.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"kl_divergence shapes disagree: {p.shape} vs {q.shape}")
    _check_prob_rows(p.data, "p")
    _check_prob_rows(q.data, "q")
    pd = np.clip(p.data, 0.0, None)
    qd = np.maximum(q.data, EPS_PROB)
    pos = pd > 0
    logratio = np.zeros_like(pd)
    logratio[pos] = np.log(pd[pos]) - np.log(qd[pos])
    value = (pd * logratio).sum(axis=-1)
    q_active = q.data > EPS_PROB

    def vjp(g):
        g = np.expand_dims(g, -1)
        gp = np.where(pos, g * (logratio + 1.0), 0.0)
        gq = np.where(q_active, -g * pd / qd, 0.0)
        return gp, gq

    return _node(value, (p, q), "kl_divergence", vjp)


@differentiable("focal_term")
def focal_term(p, y, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Elementwise binary focal loss for probabilities ``p`` and targets ``y``.

    y=1: -alpha (1-p)^gamma log p; y=0: -(1-alpha) p^gamma log(1-p).
    ``p`` is clamped to [EPS_PROB, 1-EPS_PROB].
    """
    p = as_tensor(p)
    y = np.broadcast_to(np.asarray(y, dtype=np.float64), p.shape)
    if np.any((y != 0) & (y != 1)):
        raise ValueError("focal targets must be 0 or 1")
    if np.any(p.data < 0) or np.any(p.data > 1):
        raise ValueError("focal_term expects probabilities in [0, 1]")
    pc = np.clip(p.data, EPS_PROB, 1.0 - EPS_PROB)
    inside = (p.data > EPS_PROB) & (p.data < 1.0 - EPS_PROB)
    one_m = 1.0 - pc
    pos_val = -alpha * one_m**gamma * np.log(pc)
    neg_val = -(1.0 - alpha) * pc**gamma * np.log(one_m)
    value = np.where(y == 1, pos_val, neg_val)

    def vjp(g):
        # d/dp of the positive and negative branches
        if gamma == 0:
            dpos = -alpha / pc
            dneg = (1.0 - alpha) / one_m
        else:
            dpos = alpha * (gamma * one_m ** (gamma - 1) * np.log(pc) - one_m**gamma / pc)
            dneg = -(1.0 - alpha) * (gamma * pc ** (gamma - 1) * np.log(one_m) - pc**gamma / one_m)
        d = np.where(y == 1, dpos, dneg)
        return (np.where(inside, g * d, 0.0),)

    return _node(value, (p,), "focal_term", vjp)


# --------------------------------------------------------------------------
# verification oracle


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def failures(self) -> list[str]:
        return [name for name, e in self.errors.items() if e > self.tol]


def check_gradient(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Parameter],
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare tape gradients with central differences, one parameter at a time.

    The error for a parameter is ``max|analytic - numeric|`` divided by the
    larger of the two gradients' max magnitudes (floored at 1e-8).
    """
    params = list(params)
    loss = loss_fn()
    for p in params:
        p.zero_grad()
    backward(loss)
    analytic = [p.grad.copy() for p in params]

    report = GradCheckReport(tol=tol)
    for i, (p, a) in enumerate(zip(params, analytic)):
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = loss_fn().item()
            flat[j] = orig - eps
            down = loss_fn().item()
            flat[j] = orig
            nflat[j] = (up - down) / (2 * eps)
        scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
        err = float(np.abs(a - numeric).max(initial=0.0) / scale)
        report.errors[p.name or f"param{i}"] = err
    return report


# --------------------------------------------------------------------------
# optimizer


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def adam_step(
    params: Iterable[Parameter],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    t: int = 1,
) -> None:
    """One bias-corrected Adam update using the moments stored on each parameter."""
    if t < 1:
        raise ValueError("adam step index starts at 1")
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p in params:
        if p.m is None:
            p.m = np.zeros_like(p.data)
            p.v = np.zeros_like(p.data)
        p.m = beta1 * p.m + (1.0 - beta1) * p.grad
        p.v = beta2 * p.v + (1.0 - beta2) * p.grad * p.grad
        p.data -= lr * (p.m / c1) / (np.sqrt(p.v / c2) + eps)
