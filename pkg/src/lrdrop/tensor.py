"""Dense float64 tensors with a tape-based reverse-mode gradient engine.

A :class:`Tensor` wraps a numpy array. Tensors created from leaves registered
on a :class:`GradientTape` (via :meth:`GradientTape.watch`) record every
operation applied to them on that tape, in application order. Calling
:func:`backward` walks the tape in reverse and returns one gradient array per
watched parameter block.

Operations outside a tape (constants only) record nothing, so inference
costs no bookkeeping.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np

__all__ = [
    "NonFiniteError",
    "Tensor",
    "GradientTape",
    "RngStream",
    "backward",
    "as_tensor",
]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def _check_finite(data: np.ndarray, what: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {what}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # sum out axes that were broadcast in the forward op
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "name", "_tape", "_parents", "_backward", "_op")

    def __init__(self, data, *, name: str | None = None, _tape=None, _parents=(), _op="const"):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, _op)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape = _tape
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = _op

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    # -- graph construction ------------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: tuple["Tensor", ...], op: str, backward_fn) -> "Tensor":
        tape = None
        for p in parents:
            if p._tape is not None:
                tape = p._tape
                break
        out = Tensor(data, _tape=tape, _parents=parents if tape is not None else (), _op=op)
        if tape is not None:
            out._backward = backward_fn
            tape._record(out)
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if self._tape is None:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # -- elementwise arithmetic -------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def _bw(g):
            a._accumulate(_unbroadcast(g, a.shape))
            b._accumulate(_unbroadcast(g, b.shape))

        return Tensor._make(a.data + b.data, (a, b), "add", _bw)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        a = self
        return Tensor._make(-a.data, (a,), "neg", lambda g: a._accumulate(-g))

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def _bw(g):
            a._accumulate(_unbroadcast(g, a.shape))
            b._accumulate(_unbroadcast(-g, b.shape))

        return Tensor._make(a.data - b.data, (a, b), "sub", _bw)

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def _bw(g):
            a._accumulate(_unbroadcast(g * b.data, a.shape))
            b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Tensor._make(a.data * b.data, (a, b), "mul", _bw)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        out = a.data / b.data

        def _bw(g):
            a._accumulate(_unbroadcast(g / b.data, a.shape))
            b._accumulate(_unbroadcast(-g * out / b.data, b.shape))

        return Tensor._make(out, (a, b), "div", _bw)

    def __pow__(self, exponent: float) -> "Tensor":
        a = self
        e = float(exponent)

        def _bw(g):
            a._accumulate(g * e * a.data ** (e - 1.0))

        return Tensor._make(a.data**e, (a,), "pow", _bw)

    def square(self) -> "Tensor":
        a = self
        return Tensor._make(a.data * a.data, (a,), "square", lambda g: a._accumulate(2.0 * g * a.data))

    def exp(self) -> "Tensor":
        a = self
        out = np.exp(a.data)
        return Tensor._make(out, (a,), "exp", lambda g: a._accumulate(g * out))

    def log(self) -> "Tensor":
        a = self
        return Tensor._make(np.log(a.data), (a,), "log", lambda g: a._accumulate(g / a.data))

    def relu(self) -> "Tensor":
        a = self
        active = a.data > 0
        return Tensor._make(np.where(active, a.data, 0.0), (a,), "relu", lambda g: a._accumulate(g * active))

    def clamp_min(self, floor: float) -> "Tensor":
        a = self
        keep = a.data >= floor
        return Tensor._make(np.maximum(a.data, floor), (a,), "clamp_min", lambda g: a._accumulate(g * keep))

    # -- linear algebra and shape ops ------------------------------------
    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def _bw(g):
            if a._tape is not None:
                a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
            if b._tape is not None:
                b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

        return Tensor._make(a.data @ b.data, (a, b), "matmul", _bw)

    def transpose(self, *axes: int) -> "Tensor":
        a = self
        axes = axes or tuple(reversed(range(a.ndim)))
        inverse = np.argsort(axes)
        return Tensor._make(
            np.transpose(a.data, axes), (a,), "transpose", lambda g: a._accumulate(np.transpose(g, inverse))
        )

    def swapaxes(self, i: int, j: int) -> "Tensor":
        a = self
        return Tensor._make(np.swapaxes(a.data, i, j), (a,), "swapaxes", lambda g: a._accumulate(np.swapaxes(g, i, j)))

    def reshape(self, *shape: int) -> "Tensor":
        a = self
        return Tensor._make(a.data.reshape(*shape), (a,), "reshape", lambda g: a._accumulate(g.reshape(a.shape)))

    def __getitem__(self, index) -> "Tensor":
        a = self

        def _bw(g):
            full = np.zeros_like(a.data)
            np.add.at(full, index, g)
            a._accumulate(full)

        return Tensor._make(a.data[index], (a,), "getitem", _bw)

    def take_rows(self, ids: np.ndarray) -> "Tensor":
        """Gather rows of a 2-D table (embedding lookup)."""
        a = self
        ids = np.asarray(ids, dtype=np.intp)

        def _bw(g):
            full = np.zeros_like(a.data)
            np.add.at(full, ids, g)
            a._accumulate(full)

        return Tensor._make(a.data[ids], (a,), "take_rows", _bw)

    # -- reductions --------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self

        def _bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape))

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", _bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))

    # -- fused numerically-sensitive ops ------------------------------------
    def softmax(self, axis: int = -1) -> "Tensor":
        a = self
        z = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=axis, keepdims=True)

        def _bw(g):
            a._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

        return Tensor._make(out, (a,), "softmax", _bw)

    def log_softmax(self, axis: int = -1) -> "Tensor":
        a = self
        out = _log_softmax(a.data, axis)
        probs = np.exp(out)

        def _bw(g):
            a._accumulate(g - probs * g.sum(axis=axis, keepdims=True))

        return Tensor._make(out, (a,), "log_softmax", _bw)

    def layer_norm(self, gain: "Tensor", bias: "Tensor", eps: float = 1e-5) -> "Tensor":
        """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
        x, gain, bias = self, as_tensor(gain), as_tensor(bias)
        mu = x.data.mean(axis=-1, keepdims=True)
        centered = x.data - mu
        rstd = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
        xhat = centered * rstd
        n = x.shape[-1]

        def _bw(g):
            gain._accumulate(_unbroadcast(g * xhat, gain.shape))
            bias._accumulate(_unbroadcast(g, bias.shape))
            if x._tape is not None:
                dxhat = g * gain.data
                x._accumulate(
                    rstd
                    / n
                    * (
                        n * dxhat
                        - dxhat.sum(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
                    )
                )

        return Tensor._make(xhat * gain.data + bias.data, (x, gain, bias), "layer_norm", _bw)


def _log_softmax(x: np.ndarray, axis: int) -> np.ndarray:
    # log-sum-exp with the max term split out so log1p keeps small tails exact
    m = x.max(axis=axis, keepdims=True)
    z = x - m
    e = np.exp(z)
    first_max = np.zeros_like(z, dtype=bool)
    idx = np.expand_dims(np.argmax(z, axis=axis), axis)
    np.put_along_axis(first_max, idx, True, axis=axis)
    rest = np.where(first_max, 0.0, e).sum(axis=axis, keepdims=True)
    return z - np.log1p(rest)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class GradientTape:
    """Records operations on watched parameter blocks for one backward pass.

    A tape is single-owner and single-use: after :func:`backward` it is
    consumed and cannot be replayed.
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self.params: dict[str, Tensor] = {}
        self.consumed = False

    def watch(self, params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        leaves = {}
        for name, value in params.items():
            leaf = Tensor(value, name=name, _tape=self, _op="param")
            self.params[name] = leaf
            leaves[name] = leaf
        return leaves

    def _record(self, node: Tensor) -> None:
        if self.consumed:
            raise RuntimeError("gradient tape already consumed")
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, tape: GradientTape) -> dict[str, np.ndarray]:
    """Propagate d(loss)/d(node) back through ``tape``.

    Returns a gradient for every watched parameter block, zero-filled for
    blocks the loss does not depend on.
    """
    if tape.consumed:
        raise RuntimeError("gradient tape already consumed")
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    if loss._tape is not tape:
        raise ValueError("loss was not recorded on this tape")
    tape.consumed = True
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.grad is None or node._backward is None:
            continue
        node._backward(node.grad)
    grads = {}
    for name, leaf in tape.params.items():
        grads[name] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        _check_finite(grads[name], f"gradient of {name}")
    # drop references so the graph can be collected
    tape.nodes = []
    return grads


class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by the Philox generator, whose output depends only on its key, so
    a given key reproduces the same sequence on every platform. ``child``
    derives independent sub-streams (per pass, layer, dropout site).
    """

    __slots__ = ("seed", "stream_id", "path")

    def __init__(self, seed: int, stream_id: int = 0, path: tuple[int, ...] = ()):
        if seed < 0 or stream_id < 0:
            raise ValueError("seed and stream_id must be non-negative")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self.path = tuple(int(p) for p in path)

    def child(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.path + tuple(keys))

    def generator(self) -> np.random.Generator:
        entropy = [self.seed, self.stream_id, len(self.path), *self.path]
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def uniform(self, shape: Iterable[int]) -> np.ndarray:
        return self.generator().random(tuple(shape))

    def normal(self, shape: Iterable[int]) -> np.ndarray:
        return self.generator().standard_normal(tuple(shape))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, path={self.path})"
