"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything runs on numpy. Matrix products go through ``np.einsum`` with
``optimize=False``: unlike BLAS they are bitwise reproducible per row, so
a row computed inside a large batch is identical to the same row computed
alone. Several contracts elsewhere in the package (per-candidate
independence, fast path == definitional path) rely on this.

Gradients are built lazily: each op records its parents and a vector-
Jacobian closure; ``backward`` walks the tape in reverse topological
order. Wrap inference code in ``no_grad()`` to skip tape construction.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import NumericError, UsageError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the context (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _row_stable_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # einsum(optimize=False) accumulates each output element in a fixed
    # order independent of the number of rows; BLAS does not.
    return np.einsum("ij,jk->ik", a, b, optimize=False)


def _row_stable_bmm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("bij,bjk->bik", a, b, optimize=False)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    """A numpy float64 array plus an optional gradient tape entry."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, _coerce(other) * -1.0)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("tensor/tensor division is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method sugar ---------------------------------------------------

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def log(self):
        return log(self)

    def sum(self):
        return total_sum(self)

    def mean(self):
        return total_mean(self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


# -- elementwise ops ------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), vjp)


def mul(a: Tensor, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    data = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def vjp(g):
        return (g * (a.data > 0.0),)

    return _make(data, (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    # split by sign for stability at large |x|
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), vjp)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _make(data, (a,), vjp)


# -- reductions -----------------------------------------------------------


def total_sum(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum())

    def vjp(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(data, (a,), vjp)


def total_mean(a: Tensor) -> Tensor:
    n = a.data.size
    data = np.asarray(a.data.sum() / n)

    def vjp(g):
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(data, (a,), vjp)


# -- shape ops ------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    data = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(old),)

    return _make(data, (a,), vjp)


def transpose_last2(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise UsageError(f"transpose_last2 needs ndim >= 2, got shape {a.shape}")
    data = np.swapaxes(a.data, -1, -2)

    def vjp(g):
        return (np.swapaxes(g, -1, -2),)

    return _make(data, (a,), vjp)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise UsageError("concat of an empty sequence")
    parts = tuple(_coerce(p) for p in parts)
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make(data, parts, vjp)


def repeat_rows(a: Tensor, times: int) -> Tensor:
    """Repeat each row `times` times consecutively: [r0,r0,..,r1,r1,..]."""
    if a.ndim != 2:
        raise UsageError(f"repeat_rows needs a matrix, got shape {a.shape}")
    n = a.shape[0]
    data = np.repeat(a.data, times, axis=0)

    def vjp(g):
        return (g.reshape(n, times, -1).sum(axis=1),)

    return _make(data, (a,), vjp)


def tile_rows(a: Tensor, times: int) -> Tensor:
    """Stack `times` copies of the whole matrix: [r0,..,rn,r0,..,rn,..]."""
    if a.ndim != 2:
        raise UsageError(f"tile_rows needs a matrix, got shape {a.shape}")
    n = a.shape[0]
    data = np.tile(a.data, (times, 1))

    def vjp(g):
        return (g.reshape(times, n, -1).sum(axis=0),)

    return _make(data, (a,), vjp)


# -- linear algebra -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2:
        raise UsageError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise UsageError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    data = _row_stable_matmul(a.data, b.data)

    def vjp(g):
        # gradient accumulation has no per-row bit contract, BLAS is fine
        return g @ b.data.T, a.data.T @ g

    return _make(data, (a, b), vjp)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul: [B,n,m] @ [B,m,p] -> [B,n,p]."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise UsageError(f"bmm: incompatible shapes {a.shape} and {b.shape}")
    data = _row_stable_bmm(a.data, b.data)

    def vjp(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _make(data, (a, b), vjp)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows of a matrix by integer index (rows may repeat)."""
    a = _coerce(a)
    idx = np.asarray(idx)
    if a.ndim != 2:
        raise UsageError(f"gather_rows needs a matrix, got shape {a.shape}")
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise UsageError("gather_rows index must be a 1-D integer array")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise UsageError(f"gather_rows index out of range [0, {a.shape[0]})")
    data = a.data[idx]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(data, (a,), vjp)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Look up rows of `table` ([vocab, dim]) by integer ids (any shape)."""
    table = _coerce(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise UsageError("embedding ids must be integers")
    if table.ndim != 2:
        raise UsageError(f"embedding table must be a matrix, got shape {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise UsageError(
            f"embedding id out of range [0, {table.shape[0]}): min={ids.min()}, max={ids.max()}"
        )
    data = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.ravel(), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(data, (table,), vjp)


# -- neural-net specific ops ----------------------------------------------


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis, computed with max subtraction."""
    x = a.data
    if x.size == 0 or x.shape[-1] == 0:
        raise UsageError("softmax of an empty vector")
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax input contains NaN/Inf")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _coerce(x), _coerce(gain), _coerce(bias)
    d = x.shape[-1]
    if d < 2:
        raise UsageError(f"layer_norm needs at least 2 features, got {d}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise UsageError(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} do not match feature dim {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=lead)
        g_bias = g.sum(axis=lead)
        gx_hat = g * gain.data
        gx = inv / d * (
            d * gx_hat
            - gx_hat.sum(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx, g_gain, g_bias

    return _make(out, (x, gain, bias), vjp)


def binary_cross_entropy(p: Tensor, labels: np.ndarray) -> Tensor:
    """Mean of -(y*ln p + (1-y)*ln(1-p)) with p clamped to [1e-12, 1-1e-12]."""
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise UsageError(f"binary_cross_entropy: shapes {p.shape} vs {y.shape}")
    pc = np.clip(p.data, 1e-12, 1.0 - 1e-12)
    n = pc.size
    data = np.asarray(-(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)).sum() / n)
    if not np.isfinite(data):
        raise NumericError("binary_cross_entropy produced a non-finite loss")

    def vjp(g):
        return (g * (pc - y) / (pc * (1.0 - pc) * n),)

    return _make(data, (p,), vjp)


# -- reverse pass ----------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar `loss` into every reachable tensor."""
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, grads):
            if not parent.requires_grad or g is None:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g


# -- named-leaf computation graphs ----------------------------------------


class Graph:
    """A computation over named leaf tensors.

    `build` maps a dict of leaf tensors to an output tensor. The graph is
    re-executed eagerly on every `forward`; `backward` then returns one
    gradient array per leaf (zeros for leaves the output never touched).
    """

    def __init__(self, build: Callable[[Mapping[str, Tensor]], Tensor], leaves: Iterable[str]):
        self.build = build
        self.leaves = tuple(leaves)
        self._bound: dict[str, Tensor] | None = None
        self.output: Tensor | None = None

    def forward(self, bindings: Mapping[str, "Tensor | np.ndarray"]) -> Tensor:
        missing = [name for name in self.leaves if name not in bindings]
        if missing:
            raise UsageError(f"forward: missing bindings for leaves {missing}")
        bound = {}
        for name in self.leaves:
            v = bindings[name]
            t = v if isinstance(v, Tensor) else Tensor(v)
            t.requires_grad = True
            t.name = name
            t.grad = None
            bound[name] = t
        out = self.build(bound)
        if not np.all(np.isfinite(out.data)):
            raise NumericError("forward produced non-finite values")
        self._bound = bound
        self.output = out
        return out

    def backward(self) -> dict[str, np.ndarray]:
        if self.output is None or self._bound is None:
            raise UsageError("backward before forward")
        backward(self.output)
        return {
            name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in self._bound.items()
        }


def forward(graph: Graph, bindings: Mapping[str, "Tensor | np.ndarray"]) -> Tensor:
    return graph.forward(bindings)


def backward_graph(graph: Graph) -> dict[str, np.ndarray]:
    return graph.backward()


# -- optimizers -------------------------------------------------------------

SGD = "sgd"
ADAM = "adam"


class Optimizer:
    """Plain SGD or bias-corrected adaptive-moment updates over named tensors."""

    def __init__(
        self,
        kind: str = ADAM,
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if kind not in (SGD, ADAM):
            raise UsageError(f"unknown optimizer kind {kind!r}")
        self.kind = kind
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> None:
        """Apply one update. Validates all gradients before touching any parameter."""
        for name in params:
            g = grads.get(name)
            if g is None:
                continue
            if g.shape != params[name].shape:
                raise UsageError(f"gradient shape mismatch for {name!r}")
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
        self.step_count += 1
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if self.kind == SGD:
                p.data -= self.lr * g
                continue
            m = self._m.setdefault(name, np.zeros_like(p.data))
            v = self._v.setdefault(name, np.zeros_like(p.data))
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            mhat = m / (1.0 - self.beta1**self.step_count)
            vhat = v / (1.0 - self.beta2**self.step_count)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# -- finite-difference gradient checking ------------------------------------


def gradient_check(
    build_loss: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    epsilon: float = 1e-6,
    max_coords_per_tensor: int = 64,
    seed: int = 0,
) -> float:
    """Compare analytic gradients against central finite differences.

    Returns the max over sampled coordinates of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    At most `max_coords_per_tensor` coordinates are probed per tensor to
    bound runtime.
    """
    if not 0.0 < epsilon <= 1e-3:
        raise UsageError(f"epsilon must be in (0, 1e-3], got {epsilon}")
    for p in params.values():
        p.grad = None
    loss = build_loss(params)
    if not np.isfinite(loss.data).all():
        raise NumericError("gradient_check: loss is not finite")
    backward(loss)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in sorted(params):
        p = params[name]
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        n = flat.size
        if n <= max_coords_per_tensor:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords_per_tensor, replace=False)
        for idx in coords:
            keep = flat[idx]
            flat[idx] = keep + epsilon
            f_plus = build_loss(params).item()
            flat[idx] = keep - epsilon
            f_minus = build_loss(params).item()
            flat[idx] = keep
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(f"gradient_check: non-finite loss while perturbing {name!r}")
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = float(analytic.reshape(-1)[idx])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
