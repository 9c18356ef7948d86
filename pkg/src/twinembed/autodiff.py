"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op records its inputs and a closure mapping the output gradient to
input gradients. ``backward`` walks the reachable nodes in reverse creation
order, so a node is always processed after every node that consumes it.

Shapes are explicit: binary ops require equal shapes. The only broadcasting
forms are scalar scaling, ``add_bias`` over the last axis, and the ``*_const``
ops whose second operand is a non-differentiable numpy array (masks).
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DegenerateInputError, DomainError, ShapeError

NORM_FLOOR = 1e-12

_counter = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the graph (evaluation mode)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"
        self.node_id = next(_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    # operator sugar; all routes go through the explicit functions below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        out.op = op
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- graph walk

def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that need gradients, in creation order."""
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t.node_id in seen or not t.requires_grad:
            continue
        seen[t.node_id] = t
        stack.extend(t.parents)
    return [seen[k] for k in sorted(seen)]


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf.

    Intermediate gradients live only for the duration of the call, so running
    it twice on the same graph adds the leaf gradients twice.
    """
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    order = topological_order(root)
    grads: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    out = a.data / b.data
    return _node(out, (a, b), lambda g: (g / b.data, -g * out / b.data), "div")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(x.data * c, (x,), lambda g: (g * c,), "scale")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x[..., d] + bias[d]."""
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_bias: shape mismatch {x.shape} vs {bias.shape}")
    lead = tuple(range(x.ndim - 1))
    return _node(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=lead)), "add_bias")


def mul_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a constant array broadcastable to ``x`` (e.g. a dropout mask)."""
    c = np.asarray(c, dtype=np.float64)
    if np.broadcast_shapes(x.shape, c.shape) != x.shape:
        raise ShapeError(f"mul_const: shape mismatch {x.shape} vs {c.shape}")
    return _node(x.data * c, (x,), lambda g: (g * c,), "mul_const")


def add_const(x: Tensor, c: np.ndarray) -> Tensor:
    c = np.asarray(c, dtype=np.float64)
    if np.broadcast_shapes(x.shape, c.shape) != x.shape:
        raise ShapeError(f"add_const: shape mismatch {x.shape} vs {c.shape}")
    return _node(x.data + c, (x,), lambda g: (g,), "add_const")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log: input must be strictly positive; clamp first")
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise DomainError("sqrt: input must be nonnegative")
    out = np.sqrt(x.data)
    return _node(out, (x,), lambda g: (g * 0.5 / np.sqrt(x.data + NORM_FLOOR),), "sqrt")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x: Tensor) -> Tensor:
    return _node(np.maximum(x.data, 0.0), (x,), lambda g: (g * (x.data > 0),), "relu")


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU as in BERT."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
    return _node(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),), "gelu")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clamp")


# ---------------------------------------------------------------- structure

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Supported forms: ``[m,k] @ [k,n]``; ``[...,m,k] @ [k,n]`` (shared weight);
    ``[...,m,k] @ [...,k,n]`` with identical leading axes.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    if b.ndim == 2:
        out = a.data @ b.data

        def bw(g):
            k, n = b.shape
            return g @ b.data.T, a.data.reshape(-1, k).T @ g.reshape(-1, n)

        return _node(out, (a, b), bw, "matmul")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    out = a.data @ b.data
    return _node(
        out,
        (a, b),
        lambda g: (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g),
        "matmul",
    )


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    out = x.data.reshape(shape)
    if out.size != x.data.size:
        raise ShapeError(f"reshape: cannot map {src} to {tuple(shape)}")
    return _node(out, (x,), lambda g: (g.reshape(src),), "reshape")


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(np.array(out, dtype=np.float64), (x,), bw, "getitem")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``; the gradient scatters back into the table."""
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return _node(weight.data[ids], (weight,), bw, "embedding")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]
    return _node(
        np.concatenate([t.data for t in xs], axis=axis),
        tuple(xs),
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------- fused ops

def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    return _node(out, (x,), lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),), "softmax")


def logsumexp(x: Tensor) -> Tensor:
    """log(sum(exp(x))) over the last axis, stabilised."""
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s))[..., 0]
    soft = e / s
    return _node(out, (x,), lambda g: (g[..., None] * soft,), "logsumexp")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: shape mismatch {x.shape} vs {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(out, (x, gain, bias), bw, "layer_norm")


def l2_norm(x: Tensor, axis: int | None = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis`` (``None``: whole tensor).

    The forward value is exact; the backward divides by sqrt(sum + NORM_FLOOR)
    so the gradient stays finite at the origin.
    """
    sq = (x.data * x.data).sum(axis=axis, keepdims=True)
    n = np.sqrt(sq)
    out = n if keepdims else (n.reshape(()) if axis is None else np.squeeze(n, axis=axis))
    safe = np.sqrt(sq + NORM_FLOOR)

    def bw(g):
        if not keepdims:
            g = np.reshape(g, safe.shape)
        return (g * x.data / safe,)

    return _node(np.asarray(out), (x,), bw, "l2_norm")


def frobenius_norm(x: Tensor) -> Tensor:
    return l2_norm(x, axis=None)


def _require_nonzero(n: np.ndarray, name: str) -> None:
    if np.any(n == 0.0):
        raise DegenerateInputError(f"{name}: zero-norm input")


def normalize_rows(x: Tensor) -> Tensor:
    """Scale each vector along the last axis to unit length."""
    n = l2_norm(x, axis=-1, keepdims=True)
    _require_nonzero(n.data, "normalize_rows")
    inv = _node(1.0 / n.data, (n,), lambda g: (-g / (n.data * n.data),), "reciprocal")
    return _node(
        x.data * inv.data,
        (x, inv),
        lambda g: (g * inv.data, (g * x.data).sum(axis=-1, keepdims=True)),
        "rowscale",
    )


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity along the last axis; vectors give a scalar, [B,d] gives [B]."""
    _same_shape("cosine_sim", a, b)
    return sum(mul(normalize_rows(a), normalize_rows(b)), axis=-1)


def pairwise_cosine(a: Tensor, b: Tensor) -> Tensor:
    """[B,d] x [C,d] -> [B,C] matrix of cosine similarities."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_cosine: shape mismatch {a.shape} vs {b.shape}")
    return matmul(normalize_rows(a), transpose(normalize_rows(b), (1, 0)))


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; ``rng=None`` or ``p=0`` is the identity."""
    if rng is None or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul_const(x, keep)


# ---------------------------------------------------------------- oracle

def _relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    return np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + floor)


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, step: float) -> np.ndarray:
    """Central differences of a scalar function of a float array."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        g[i] = (hi - lo) / (2.0 * step)
    return out


def check_gradients(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> float:
    """Max relative error between backward and central differences of ``f`` at ``x``."""
    x = np.array(getattr(x, "data", x), dtype=np.float64)
    leaf = Tensor(x.copy(), requires_grad=True)
    backward(f(leaf))
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x)

    def scalar(v):
        with no_grad():
            return float(f(Tensor(v)).data)

    numeric = numeric_gradient(scalar, x, step)
    return float(_relative_error(analytic, numeric).max(initial=0.0))


def check_param_gradients(
    loss_fn: Callable[[], Tensor], params: dict[str, Tensor], step: float = 1e-4, floor: float = 1e-12
) -> dict[str, float]:
    """Per-parameter max relative error of a closure's gradient.

    ``loss_fn`` must rebuild its graph from the current ``params`` on every
    call and be deterministic (fixed dropout seeds). ``floor`` is added to the
    error denominator; see ``fd_resolution_floor``.
    """
    for p in params.values():
        p.grad = None
    backward(loss_fn())
    errors = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)

        def scalar(v, p=p):
            saved = p.data
            p.data = v
            try:
                with no_grad():
                    return float(loss_fn().data)
            finally:
                p.data = saved

        numeric = numeric_gradient(scalar, p.data.copy(), step)
        errors[name] = float(_relative_error(analytic, numeric, floor).max(initial=0.0))
    return errors


def fd_resolution_floor(loss_value: float, step: float, rtol: float) -> float:
    """Smallest gradient magnitude a central difference can check to ``rtol``.

    Rounding in the two loss evaluations leaves an absolute error of about
    eps * |loss| / step in each numeric component. Components well below
    that divided by ``rtol`` (for example gradients that vanish by symmetry)
    cannot be resolved to ``rtol`` relative; using this as the error floor
    checks them in absolute terms instead.
    """
    return float(np.finfo(np.float64).eps * abs(loss_value) / step / rtol)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
