"""Small reverse-mode automatic differentiation engine on float64 numpy arrays.

Only the operators used by the encoder, the classifier heads, the GAN players
and their losses are provided. Each operation returns a new :class:`Tensor`
that remembers its parents and a closure mapping the output gradient to the
parents' gradients. :meth:`Tensor.backward` walks the graph in reverse
topological order, so every node is visited exactly once.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import CheckpointError, GradientStateError, ShapeError

__all__ = [
    "Tensor",
    "parameter",
    "constant",
    "add",
    "matmul",
    "linear",
    "relu",
    "sigmoid",
    "reshape",
    "take_rows",
    "sum_all",
    "mean_all",
    "weighted_bce",
    "multiclass_ce",
    "grad_reverse",
    "discriminator_loss",
    "generator_loss",
    "sgd_step",
    "zero_grad",
    "save_checkpoint",
    "load_checkpoint",
]


class Tensor:
    """Dense float64 array participating in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Sequence["Tensor"] = (),
        backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        name: str | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __matmul__(self, other):
        return matmul(self, other)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def backward(self, grad: np.ndarray | float | None = None) -> None:
        """Accumulate d(self)/d(node) into ``node.grad`` for every upstream node.

        ``grad`` defaults to ones, which for a scalar loss is the usual seed.
        """
        if grad is None:
            grad = np.ones_like(self.data)
        grad = np.broadcast_to(np.asarray(grad, dtype=np.float64), self.shape).copy()

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if id(parent) not in seen and _needs_grad(parent):
                stack.append((parent, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward) -> Tensor:
    tracked = any(_needs_grad(p) for p in parents)
    if not tracked:
        return Tensor(data)
    return Tensor(data, parents=parents, backward=backward)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    return _result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs [n x a] @ [a x b], got {a.shape} @ {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ W + b`` for ``x`` [n x a], ``W`` [a x b], ``b`` [b]."""
    if x.data.ndim != 2 or W.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError(f"linear expects 2-D x, 2-D W, 1-D b; got {x.shape}, {W.shape}, {b.shape}")
    if x.shape[1] != W.shape[0]:
        raise ShapeError(f"linear: x has {x.shape[1]} columns but W has {W.shape[0]} rows")
    if W.shape[1] != b.shape[0]:
        raise ShapeError(f"linear: W has {W.shape[1]} columns but b has length {b.shape[0]}")
    out = x.data @ W.data + b.data

    def backward(g):
        return g @ W.data.T, x.data.T @ g, g.sum(axis=0)

    return _result(out, (x, W, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum keeps NaN visible so divergence is not silently zeroed
    return _result(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows ``x[index]``; the backward pass scatter-adds into place."""
    index = np.asarray(index, dtype=np.intp)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _result(x.data[index], (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _result(x.data.mean(), (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def _sigmoid(s: np.ndarray) -> np.ndarray:
    # exp(-|s|) never overflows
    e = np.exp(-np.abs(s))
    return np.where(s >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _softplus(s: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, s)


def weighted_bce(logit: Tensor, y, pos_weight: float = 1.0) -> Tensor:
    """Mean of ``-[w*y*log(sigmoid(s)) + (1-y)*log(1-sigmoid(s))]``.

    Uses ``-log(sigmoid(s)) = softplus(-s)`` and ``-log(1-sigmoid(s)) = softplus(s)``
    so any finite logit is safe.
    """
    if pos_weight <= 0:
        raise ValueError("pos_weight must be positive")
    s = logit.data
    y = np.asarray(y, dtype=np.float64)
    if y.shape != s.shape:
        raise ShapeError(f"weighted_bce: logits {s.shape} vs labels {y.shape}")
    n = s.size
    loss = np.mean(pos_weight * y * _softplus(-s) + (1.0 - y) * _softplus(s))

    def backward(g):
        p = _sigmoid(s)
        return (g * (pos_weight * y * (p - 1.0) + (1.0 - y) * p) / n,)

    return _result(loss, (logit,), backward)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def multiclass_ce(logits: Tensor, d) -> Tensor:
    """Mean negative log-softmax probability of the true class index ``d``."""
    z = logits.data
    if z.ndim != 2:
        raise ShapeError(f"multiclass_ce expects [n x K] logits, got {z.shape}")
    d = np.asarray(d, dtype=np.intp)
    n, k = z.shape
    if d.shape != (n,):
        raise ShapeError(f"multiclass_ce: {n} rows but {d.shape} targets")
    if n and (d.min() < 0 or d.max() >= k):
        raise IndexError(f"class index out of range [0, {k})")
    logp = _log_softmax(z)
    rows = np.arange(n)
    loss = -logp[rows, d].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, d] -= 1.0
        return (g * p / n,)

    return _result(loss, (logits,), backward)


def grad_reverse(x: Tensor, lam: float) -> Tensor:
    """Identity forward; multiplies the incoming gradient by ``-lam`` backward."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return _result(x.data.copy(), (x,), lambda g: (-lam * g,))


def discriminator_loss(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    """Negated GAN value: ``-(mean log D(x) + mean log(1 - D(G(z))))``.

    Minimizing this is the discriminator's ascent on the minimax objective.
    """
    r, f = real_logits.data, fake_logits.data
    nr, nf = r.size, f.size
    loss = np.mean(_softplus(-r)) + np.mean(_softplus(f))

    def backward(g):
        return g * (_sigmoid(r) - 1.0) / nr, g * _sigmoid(f) / nf

    return _result(loss, (real_logits, fake_logits), backward)


def generator_loss(fake_logits: Tensor, saturating: bool = False) -> Tensor:
    """Generator objective on discriminator logits of generated samples.

    ``saturating=True`` gives the literal ``mean log(1 - D(G(z)))``; the default
    is the non-saturating ``-mean log D(G(z))``.
    """
    f = fake_logits.data
    n = f.size
    if saturating:
        loss = -np.mean(_softplus(f))
        return _result(loss, (fake_logits,), lambda g: (-g * _sigmoid(f) / n,))
    loss = np.mean(_softplus(-f))
    return _result(loss, (fake_logits,), lambda g: (g * (_sigmoid(f) - 1.0) / n,))


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def sgd_step(params: Iterable[Tensor], lr: float, weight_decay: float = 0.0) -> None:
    """In-place ``p <- p - lr * (grad + weight_decay * p)``, then clear gradients."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise GradientStateError(f"parameter {p.name or '?'} has no gradient")
    for p in params:
        p.data = p.data - lr * (p.grad + weight_decay * p.data)
        p.grad = None


# Checkpoint container, little-endian throughout:
#   magic b"MSCK" | version u8 | count u32 |
#   per tensor: name_len u16 | name utf-8 | ndim u8 | dims u32*ndim | float64*prod(dims)
CHECKPOINT_MAGIC = b"MSCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: Mapping[str, np.ndarray | Tensor]) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<BI", CHECKPOINT_VERSION, len(params))]
    for name, value in params.items():
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic header")
    version, count = struct.unpack_from("<BI", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 9
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(dims)
            pos += 8 * size
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after {count} tensors")
    return out
