"""Small reverse-mode autodiff engine over numpy arrays.

Every op records its parents and a closure mapping the output gradient to
parent gradients.  Binary elementwise ops are broadcast-free: operands must
have identical shapes.  Broadcasting that the model needs is spelled out with
explicit ops (``add_bias``, ``expand``) so that gradient reductions are never
implicit.

``matmul`` accepts stacked operands (``(..., m, k) @ (..., k, n)``) and reduces
gradients over broadcast leading axes; on 2-D inputs it is the plain matrix
product.
"""

from __future__ import annotations

import contextlib
from collections.abc import Callable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (decoding, evaluation)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """A dense array with an optional gradient and a recorded history."""

    __slots__ = ("values", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.asarray(values)
        if self.values.dtype.kind != "f":
            self.values = self.values.astype(np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = np.zeros_like(self.values) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(values: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(values)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.values, b.values
    try:
        out = np.matmul(av, bv)
    except ValueError as exc:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.values.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return _record(out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(x.values, axes), (x,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis``; all other extents must agree."""
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.values for t in tensors], axis=ax)
    return _record(out, tensors, lambda g: tuple(np.split(g, splits, axis=ax)))


def concat_last_axis(*tensors: Tensor) -> Tensor:
    return concat(tensors, axis=-1)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    for t in tensors[1:]:
        _same_shape("stack", tensors[0], t)
    out = np.stack([t.values for t in tensors], axis=axis)
    n = len(tensors)
    return _record(out, tensors, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    full = x.shape

    def backward(g):
        gx = np.zeros(full, dtype=g.dtype)
        gx[..., start:stop] = g
        return (gx,)

    return _record(x.values[..., start:stop], (x,), backward)


def expand(x: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``n`` times."""
    out = np.repeat(np.expand_dims(x.values, axis), n, axis=axis)
    return _record(out, (x,), lambda g: (g.sum(axis=axis),))


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"embedding: token id out of range [0, {table.shape[0]})")

    def backward(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record(table.values[ids], (table,), backward)


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _record(a.values + b.values, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _record(a.values - b.values, (a, b), lambda g: (g, -g))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("hadamard", a, b)
    av, bv = a.values, b.values
    return _record(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(x: Tensor, factor: float) -> Tensor:
    return _record(x.values * factor, (x,), lambda g: (g * factor,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _record(x.values + c, (x,), lambda g: (g,))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """``x + bias`` where ``bias`` matches the trailing axes of ``x``."""
    if bias.ndim > x.ndim or x.shape[x.ndim - bias.ndim:] != bias.shape:
        raise DimensionError(f"add_bias: bias {bias.shape} does not match trailing axes of {x.shape}")
    lead = tuple(range(x.ndim - bias.ndim))
    return _record(x.values + bias.values, (x, bias), lambda g: (g, g.sum(axis=lead) if lead else g))


def sigmoid(x: Tensor) -> Tensor:
    # tanh form never overflows
    out = 0.5 * (1.0 + np.tanh(0.5 * x.values))
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.values)
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),))


def elementwise(op: str, *operands: Tensor, factor: float = 1.0) -> Tensor:
    """Name-dispatched access to the elementwise family."""
    if op == "add":
        return add(*operands)
    if op == "hadamard":
        return hadamard(*operands)
    if op == "sigmoid":
        return sigmoid(*operands)
    if op == "tanh":
        return tanh(*operands)
    if op == "concat_last_axis":
        return concat(operands, axis=-1)
    if op == "scale":
        return scale(operands[0], factor)
    raise ConfigError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# reductions and normalizers


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record(np.asarray(x.values.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_axis(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return _record(x.values.mean(axis=axis), (x,), backward)


def _softmax(v: np.ndarray) -> np.ndarray:
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    if np.isnan(x.values).any():
        raise NumericError("softmax_rows: NaN in input")
    out = _softmax(x.values)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record(out, (x,), backward)


def log_softmax_values(v: np.ndarray) -> np.ndarray:
    shifted = v - v.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain * . + bias``."""
    d = x.shape[-1]
    if d < 2:
        raise DimensionError("layer_norm: need at least 2 features")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs features {d}")
    v = x.values
    mu = v.mean(axis=-1, keepdims=True)
    centered = v - mu
    # rounding in the mean must not leak into constant rows
    centered[np.broadcast_to(np.ptp(v, axis=-1, keepdims=True) == 0, centered.shape)] = 0.0
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    gv = gain.values
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx = gxh = None
        if x.requires_grad:
            gxh = g * gv
            gx = inv_std * (
                gxh
                - gxh.mean(axis=-1, keepdims=True)
                - xhat * (gxh * xhat).mean(axis=-1, keepdims=True)
            )
        ggain = (g * xhat).sum(axis=lead) if lead else g * xhat
        gbias = g.sum(axis=lead) if lead else g
        return gx, ggain, gbias

    return _record(xhat * gv + bias.values, (x, gain, bias), backward)


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-p)`` at train time."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in train mode needs a seeded generator")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _record(x.values * mask, (x,), lambda g: (g * mask,))


def cross_entropy_logits(logits: Tensor, targets, weights, floor: float = 1e-12) -> Tensor:
    """``sum_b w_b * -log(max(softmax(logits_b)[t_b], floor))`` as a scalar.

    Entries whose probability falls below ``floor`` contribute a constant and
    therefore no gradient.
    """
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=logits.dtype)
    logp = log_softmax_values(logits.values)
    rows = np.arange(logits.shape[0])
    picked = logp[rows, targets]
    clamped = picked < np.log(floor)
    nll = -np.where(clamped, np.log(floor), picked)
    out = np.asarray((weights * nll).sum(), dtype=logits.dtype)

    def backward(g):
        probs = np.exp(logp)
        onehot = np.zeros_like(probs)
        onehot[rows, targets] = 1.0
        w = np.where(clamped, 0.0, weights)[:, None]
        return (g * w * (probs - onehot),)

    return _record(out, (logits,), backward)


# ---------------------------------------------------------------------------
# backward pass


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d leaf`` into every reachable leaf's ``grad``.

    Leaves keep accumulating across calls; clear them with
    ``ParameterStore.zero_grad``.
    """
    if loss.values.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.values)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# parameters


class ParameterStore:
    """Named learnable tensors, iterated in sorted-name order."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, values, requires_grad: bool = True) -> Tensor:
        if name in self._params:
            raise ContractError(f"parameter {name!r} registered twice")
        t = Tensor(np.array(values, dtype=self.dtype), requires_grad=requires_grad, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(n, self._params[n]) for n in self.names()]

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.items() if t.requires_grad]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def num_scalars(self) -> int:
        return sum(t.values.size for t in self._params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.values.copy() for n, t in self.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, values in state.items():
            target = self._params[name]
            if target.shape != np.shape(values):
                raise DimensionError(f"{name}: checkpoint shape {np.shape(values)} vs model {target.shape}")
            target.values[...] = values


def finite_difference_grad(
    f: Callable[[], float],
    store: ParameterStore,
    h: float = 1e-5,
    names: Sequence[str] | None = None,
) -> dict[str, np.ndarray]:
    """Central differences ``(f(p + h) - f(p - h)) / 2h`` for every entry."""
    if h <= 0:
        raise ConfigError("finite difference step must be positive")
    result = {}
    for name in names if names is not None else [n for n, _ in store.trainable()]:
        values = store[name].values
        flat = values.reshape(-1)
        numeric = np.zeros(flat.shape, dtype=np.float64)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            up = float(f())
            flat[i] = saved - h
            down = float(f())
            flat[i] = saved
            numeric[i] = (up - down) / (2.0 * h)
        result[name] = numeric.reshape(values.shape)
    return result


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-based relative error ``|a - n| / max(|a| + |n|, floor)``."""
    diff = float(np.linalg.norm(np.ravel(analytic) - np.ravel(numeric)))
    scale_ = float(np.linalg.norm(np.ravel(analytic)) + np.linalg.norm(np.ravel(numeric)))
    return diff / max(scale_, floor)
