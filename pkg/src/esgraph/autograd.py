"""Dense float64 tensors with reverse-mode gradient propagation.

A small numpy-backed computation graph: `Tensor` nodes record the ops that
produced them, `backward` walks the graph in reverse topological order and
accumulates gradients into every reachable `Parameter`. Also home to the
public kernels the model layers share (softmax, leaky_relu, max_pool_seq)
and the finite-difference gradient checker used to verify all of it.

Conventions:
  * everything is float64; speed is not a goal at desk scale
  * Parameter gradients accumulate across backward calls, the caller
    zeroes them between optimizer steps
  * boolean masks mark VALID entries (True = participates)
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operands with incompatible shapes."""


class MaskError(ValueError):
    """A softmax mask left no valid entry."""


class EvaluationError(ValueError):
    """A checked function produced a non-finite value."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / oracles)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float64 array plus the bookkeeping for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad and _grad_enabled
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def T(self):
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def backward(self):
        backward(self)

    def _accumulate(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named leaf tensor whose gradient buffer persists across steps."""

    __slots__ = ("name", "decay")

    def __init__(self, data, name: str, decay: bool = True):
        super().__init__(data, requires_grad=True)
        self.requires_grad = True  # parameters track gradients even under no_grad
        self.name = name
        self.decay = decay  # weight decay applies (False for biases / norm gains)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Create a graph node; skips recording when grad is disabled."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def backward(loss: Tensor):
    """Populate gradients of every Parameter reachable from a scalar loss.

    Gradients accumulate into existing buffers; callers zero them between
    optimizer steps. Raises ShapeError for a non-scalar loss.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    # iterative topological sort (graphs can be deep)
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    loss._accumulate(np.ones((), dtype=np.float64))
    for node in reversed(order):
        if node._backward_fn is not None:
            node._backward_fn(node.grad)


def zero_grads(params):
    for p in params:
        p.zero_grad()


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _node(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _node(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _node(a.data * b.data, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(a.data / b.data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a._accumulate(-g)

    return _node(-a.data, (a,), bwd)


def power(a: Tensor, exponent: float) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * exponent * a.data ** (exponent - 1))

    return _node(a.data ** exponent, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * out_data)

    return _node(out_data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _node(np.log(a.data), (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / out_data)

    return _node(out_data, (a,), bwd)


# ---------------------------------------------------------------------------
# nonlinearities

def relu(a: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0))

    return _node(np.maximum(a.data, 0.0), (a,), bwd)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    """x for x >= 0, slope * x otherwise. slope must lie in (0, 1)."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0, 1), got {slope}")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * np.where(a.data >= 0, 1.0, slope))

    return _node(np.where(a.data >= 0, a.data, slope * a.data), (a,), bwd)


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    out_data = np.where(a.data >= 0, a.data, alpha * (np.exp(a.data) - 1.0))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * np.where(a.data >= 0, 1.0, out_data + alpha))

    return _node(out_data, (a,), bwd)


# ---------------------------------------------------------------------------
# shape manipulation

def transpose(a: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.T)

    return _node(a.data.T, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    return _node(a.data.reshape(shape), (a,), bwd)


def take(a: Tensor, key) -> Tensor:
    """Index/slice a tensor. Integer-array keys (embedding lookups, position
    picks) scatter-add on the way back, so repeated indices accumulate."""
    advanced = isinstance(key, np.ndarray) or (
        isinstance(key, tuple) and any(isinstance(k, np.ndarray) for k in key)
    )

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            if advanced:
                np.add.at(full, key, g)
            else:
                full[key] += g
            a._accumulate(full)

    return _node(a.data[key], (a,), bwd)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _node(np.concatenate(datas, axis=axis), tuple(tensors), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ShapeError(f"matmul supports 1-D/2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims of {a.data.shape} and {b.data.shape} differ")

    def bwd(g):
        ad, bd = a.data, b.data
        if a.data.ndim == 1 and b.data.ndim == 1:       # (n,)·(n,) -> ()
            ga, gb = g * bd, g * ad
        elif a.data.ndim == 2 and b.data.ndim == 2:     # (m,n)@(n,k) -> (m,k)
            ga, gb = g @ bd.T, ad.T @ g
        elif a.data.ndim == 1:                          # (n,)@(n,k) -> (k,)
            ga, gb = bd @ g, np.outer(ad, g)
        else:                                           # (m,n)@(n,) -> (m,)
            ga, gb = np.outer(g, bd), ad.T @ g
        if a.requires_grad:
            a._accumulate(ga)
        if b.requires_grad:
            b._accumulate(gb)

    return _node(a.data @ b.data, (a, b), bwd)


# ---------------------------------------------------------------------------
# reductions

def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bwd(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.full_like(a.data, 1.0) * g)
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(ge, a.data.shape).copy())

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / n))


def tensor_max(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along an axis; ties route the gradient to the first argmax."""
    idx = np.argmax(a.data, axis=axis)

    def bwd(g):
        if not a.requires_grad:
            return
        full = np.zeros_like(a.data)
        grid = np.indices(idx.shape)
        key = list(grid)
        key.insert(axis, idx)
        full[tuple(key)] = g if not keepdims else np.squeeze(g, axis=axis)
        a._accumulate(full)

    return _node(a.data.max(axis=axis, keepdims=keepdims), (a,), bwd)


def max_pool_seq(h: Tensor) -> Tensor:
    """Elementwise max over the sequence axis of an (L, d) matrix."""
    if h.data.ndim != 2:
        raise ShapeError(f"max_pool_seq expects an (L, d) matrix, got shape {h.data.shape}")
    if h.data.shape[0] < 1:
        raise ShapeError("max_pool_seq: empty sequence")
    return tensor_max(h, axis=0)


# ---------------------------------------------------------------------------
# softmax family

def _masked_softmax_data(x: np.ndarray, mask, axis: int, allow_empty: bool):
    if mask is None:
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=axis, keepdims=True)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"softmax: mask shape {mask.shape} does not match logits shape {x.shape}")
    any_valid = mask.any(axis=axis, keepdims=True)
    if not allow_empty and not any_valid.all():
        raise MaskError("softmax: all entries masked")
    neg = np.where(mask, x, -np.inf)
    mx = np.max(np.where(mask, x, -np.inf), axis=axis, keepdims=True)
    mx = np.where(any_valid, mx, 0.0)  # keep fully-masked rows finite
    e = np.where(mask, np.exp(neg - mx), 0.0)
    denom = e.sum(axis=axis, keepdims=True)
    denom = np.where(any_valid, denom, 1.0)
    return e / denom


def softmax(x: Tensor, mask=None, axis: int = -1) -> Tensor:
    """Numerically-stabilized softmax. True mask entries participate; masked
    entries come out exactly 0. Raises MaskError when a row has no valid entry.
    """
    return _softmax_impl(x, mask, axis, allow_empty=False)


def masked_softmax_rows(x: Tensor, mask, axis: int = -1) -> Tensor:
    """Internal softmax variant where fully-masked rows yield all-zero rows
    (used for isolated pad nodes) instead of raising."""
    return _softmax_impl(x, mask, axis, allow_empty=True)


def _softmax_impl(x: Tensor, mask, axis: int, allow_empty: bool) -> Tensor:
    out_data = _masked_softmax_data(x.data, mask, axis, allow_empty)

    def bwd(g):
        if not x.requires_grad:
            return
        # d softmax: s * (g - sum(g * s)); masked entries contribute nothing
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        x._accumulate(out_data * (g - inner))

    return _node(out_data, (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    soft = np.exp(out_data)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return _node(out_data, (x,), bwd)


# ---------------------------------------------------------------------------
# composed helpers

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    mu = mean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = power(add(var, Tensor(eps)), -0.5)
    return add(mul(mul(centered, inv), gain), bias)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w (+ b). Weights are stored input-major: shape (d_in, d_out)."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    worst_index: int
    per_param: dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def grad_check(f, params, eps: float = 1e-5, coords_per_param: int | None = None,
               seed: int = 0, corrupt: float = 0.0) -> GradCheckResult:
    """Compare analytic gradients of a scalar function against central
    finite differences, coordinate by coordinate.

    f: zero-argument callable returning a scalar Tensor (closure over params).
    coords_per_param caps how many coordinates per parameter are probed
    (None = all). `corrupt` shifts the analytic gradient, a negative-control
    hook for self-tests. Relative error per coordinate is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError(f"grad_check eps must lie in [1e-6, 1e-4], got {eps}")
    for p in params:
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data):
        raise EvaluationError("grad_check: function value is not finite")
    backward(loss)
    analytic = {p.name: p.grad.copy() + corrupt for p in params}

    rng = np.random.default_rng(seed)
    worst = 0.0
    worst_param = ""
    worst_index = -1
    per_param: dict[str, float] = {}
    with no_grad():
        for p in params:
            size = p.data.size
            if coords_per_param is None or coords_per_param >= size:
                coords = np.arange(size)
            else:
                coords = rng.choice(size, size=coords_per_param, replace=False)
            flat = p.data.reshape(-1)
            param_worst = 0.0
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = float(f().data)
                flat[i] = orig - eps
                f_minus = float(f().data)
                flat[i] = orig
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise EvaluationError(f"grad_check: non-finite evaluation at {p.name}[{i}]")
                numeric = (f_plus - f_minus) / (2.0 * eps)
                a = analytic[p.name].reshape(-1)[i]
                rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
                param_worst = max(param_worst, rel)
                if rel > worst:
                    worst, worst_param, worst_index = rel, p.name, int(i)
            per_param[p.name] = param_worst
    return GradCheckResult(worst, worst_param, worst_index, per_param)
