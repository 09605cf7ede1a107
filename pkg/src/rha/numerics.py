"""Dense double-precision tensors with reverse-mode automatic differentiation.

Each op builds a node holding its parents and a closure that maps the
upstream gradient to parent gradients. ``Tensor.backward`` walks the graph
in reverse topological order, visiting every node once.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_CLAMP = 1e-12
LN_EPS = 1e-5

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # construction helpers
    @classmethod
    def _make(cls, data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

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

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data - b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor._make(ad * bd, (a, b),
                        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                        "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape))

    return Tensor._make(out, (a, b), backward, "div")


def scale(x: Tensor, c: float) -> Tensor:
    return Tensor._make(x.data * c, (x,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._make(ad @ bd, (a, b), backward, "matmul")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor, clamp: float = LOG_CLAMP) -> Tensor:
    """Natural log of ``max(x, clamp)``; the clamped region has zero gradient."""
    xd = x.data
    safe = np.maximum(xd, clamp)
    return Tensor._make(np.log(safe), (x,), lambda g: (np.where(xd >= clamp, g / safe, 0.0),), "log")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def softplus(x: Tensor) -> Tensor:
    """``log(1 + exp(x))`` evaluated without overflow."""
    xd = x.data
    out = np.maximum(xd, 0.0) + np.log1p(np.exp(-np.abs(xd)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * xd))
    return Tensor._make(out, (x,), lambda g: (g * sig,), "softplus")


# ---------------------------------------------------------------- reductions / shape

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape
    ax = _norm_axis(axis, x.ndim)

    def backward(g):
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.sum(x.data, axis=ax, keepdims=keepdims), (x,), backward, "sum")


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    ax = _norm_axis(axis, x.ndim)
    n = x.data.size if ax is None else int(np.prod([x.shape[a] for a in ax]))
    return scale(tsum(x, ax, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return Tensor._make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return Tensor._make(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._make(np.array(x.data[idx], dtype=np.float64), (x,), backward, "getitem")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat: nothing to concatenate")
    nd = xs[0].ndim
    ax = axis % nd
    for x in xs[1:]:
        if x.ndim != nd or any(x.shape[i] != xs[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat along axis {axis}: mismatched shapes {[t.shape for t in xs]}")
    sizes = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=ax))

    return Tensor._make(np.concatenate([x.data for x in xs], axis=ax), tuple(xs), backward, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    return concat([reshape(x, x.shape[:axis % (x.ndim + 1)] + (1,) + x.shape[axis % (x.ndim + 1):])
                   for x in xs], axis=axis)


def max_pool(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max along ``axis``; the gradient goes to the first maximal index."""
    ax = axis % x.ndim
    if x.shape[ax] == 0:
        raise ShapeError("max_pool over an empty axis")
    arg = np.argmax(x.data, axis=ax)
    idx = np.expand_dims(arg, ax)
    out = np.take_along_axis(x.data, idx, axis=ax)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        full = np.zeros(shape)
        np.put_along_axis(full, idx, g, axis=ax)
        return (full,)

    return Tensor._make(out if keepdims else np.squeeze(out, axis=ax), (x,), backward, "max_pool")


# ---------------------------------------------------------------- normalisation

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), backward, "softmax")


def masked_softmax(x: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax restricted to entries where ``mask`` is true; masked entries are exactly 0."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not np.all(mask.any(axis=axis)):
        raise ShapeError("masked_softmax: a slice has no unmasked entries")
    z = np.where(mask, x.data, -np.inf)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), backward, "masked_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then apply ``gain`` and ``bias``."""
    d = x.shape[-1]
    if d < 2:
        raise ShapeError("layer_norm needs a last axis of at least 2 (degenerate normalisation)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    return Tensor._make(xhat * gd + bias.data, (x, gain, bias), backward, "layer_norm")


def dropout(x: Tensor, rate: float, seed: int | Sequence[int] | None, training: bool) -> Tensor:
    """Inverted dropout with an explicit per-call seed; identity when not training."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if seed is None:
        raise ValueError("dropout in training mode needs an explicit seed")
    rng = np.random.Generator(np.random.PCG64(seed))
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Tensor._make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def cross_entropy(probs: Tensor, target: int) -> Tensor:
    """``-log(probs[target])`` on a probability vector, clamped at 1e-12."""
    n = probs.shape[-1]
    if not 0 <= target < n:
        raise IndexError(f"cross_entropy target {target} outside [0, {n})")
    return -log(probs[..., target])


# ---------------------------------------------------------------- verification

FD_STEP = 1e-5
_REL_TOL = 1e-4


def _settle(stencil: Callable[[float], float], h: float, noise: Callable[[float], float],
            halvings: int) -> tuple[float, bool]:
    """Halve ``h`` until two successive stencil values agree within tolerance and round-off.

    A step that straddles a kink of a piecewise smooth objective disagrees with
    the half step, so this walks inside the nearest kink. Returns the value at
    the longer step of the first agreeing pair and True, or the last value and
    False if no pair agrees.
    """
    prev = stencil(h)
    for _ in range(halvings):
        h /= 2.0
        cur = stencil(h)
        if abs(cur - prev) <= 0.1 * _REL_TOL * max(abs(cur), abs(prev)) + noise(h) + noise(2.0 * h):
            return prev, True
        prev = cur
    return prev, False


def fd_derivative(g: Callable[[float], float], scale: float, eps: float = FD_STEP) -> float:
    """Finite-difference derivative at 0 of a scalar function ``g`` whose values are about ``scale``.

    Central differences start at ``eps`` and shrink past any nearby kink. If
    the result is too small for round-off (about ``ulp(scale) / eps``) to allow
    1e-4 relative accuracy, a five-point stencil from a 1e-3 step takes over,
    shrinking the same way. Its value is used only if two of its steps agree;
    otherwise kinks are too close for a longer step and the central difference
    stands.
    """
    ulp = np.finfo(np.float64).eps * max(scale, 1.0)
    d, _ = _settle(lambda h: (g(h) - g(-h)) / (2.0 * h), eps, lambda h: 4.0 * ulp / h, 6)
    if 4.0 * ulp / eps <= 0.1 * _REL_TOL * abs(d):
        return d
    five = lambda h: (8.0 * (g(h) - g(-h)) - (g(2.0 * h) - g(-2.0 * h))) / (12.0 * h)
    d5, settled = _settle(five, 1e-3, lambda h: 6.0 * ulp / h, 6)
    return d5 if settled else d


def relative_errors(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = FD_STEP) -> list[float]:
    """Worst per-parameter relative error between autodiff and finite differences.

    Every coordinate is estimated by :func:`fd_derivative`, which looks only at
    objective values, never at the analytic gradient. The relative error of a
    coordinate is ``|a - b| / max(|a|, |b|, 1e-8)``. ``f`` must be
    deterministic and rebuild its graph on every call.
    """
    params = list(params)
    for p in params:
        p.grad = None
    out = f()
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("grad_check: objective is not finite")
    out.backward()
    scale = abs(out.item())

    errors = []
    with no_grad():
        for p in params:
            analytic = np.zeros(p.shape) if p.grad is None else p.grad.reshape(p.shape)
            numeric = np.empty(p.shape)
            flat, nflat = p.data.reshape(-1), numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]

                def shifted(dx, i=i, orig=orig):
                    flat[i] = orig + dx
                    v = f().item()
                    flat[i] = orig
                    if not np.isfinite(v):
                        raise FloatingPointError("grad_check: objective is not finite")
                    return v

                nflat[i] = fd_derivative(shifted, scale, eps)
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
            errors.append(float(np.max(np.abs(analytic - numeric) / denom)) if p.data.size else 0.0)
    return errors


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = FD_STEP) -> float:
    """Max relative error over every coordinate of ``params`` (see :func:`relative_errors`)."""
    errs = relative_errors(f, list(params), eps)
    return max(errs, default=0.0)
