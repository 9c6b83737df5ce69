"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor` that remembers its inputs and a
backward rule. ``backward(loss)`` orders the recorded operations into a
:class:`Tape` (topological order) and walks it in reverse once.

Broadcasting is restricted to prefix expansion: the smaller operand's shape
must be a suffix of the larger one's (e.g. a bias of shape ``(d,)`` added to
activations of shape ``(B, T, d)``).
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import ndtr


class ShapeError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """A float64 array that can take part in gradient computation."""

    __slots__ = ("_data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        arr.flags.writeable = False
        self._data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward: BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        data = np.ascontiguousarray(data, dtype=np.float64)
        data.flags.writeable = False
        out._data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out.name = None
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self._data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def assign(self, values) -> None:
        """Replace the stored values in place (used by optimizers only)."""
        arr = np.array(values, dtype=np.float64, order="C", copy=True)
        if arr.shape != self._data.shape:
            raise ShapeError(f"cannot assign array of shape {arr.shape} to tensor of shape {self.shape}")
        arr.flags.writeable = False
        self._data = arr

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self._data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Recorded operations reachable from a loss, in topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            return
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
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


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` on every leaf tensor with ``requires_grad`` that feeds ``loss``.

    Leaf gradients accumulate into an existing ``.grad``; call ``zero_grad`` between steps.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    (tape or Tape.from_loss(loss)).backward(loss)


# ---------------------------------------------------------------------------
# broadcasting helpers

def _check_prefix_broadcast(a: tuple[int, ...], b: tuple[int, ...], op: str) -> None:
    short, long = (a, b) if len(a) <= len(b) else (b, a)
    if long[len(long) - len(short):] != short:
        raise ShapeError(f"{op}: shapes {a} and {b} are not prefix-broadcast compatible")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_prefix_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_prefix_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), -_reduce_to(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_prefix_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)

    return Tensor._from_op(ad * bd, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from exc
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose needs at least 2 dims, got shape {a.shape}")
        axes = list(range(a.ndim - 2)) + [a.ndim - 1, a.ndim - 2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor._from_op(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor, axis: int) -> Tensor:
    axis = axis % a.ndim
    n = a.shape[axis]
    shape = a.shape

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return Tensor._from_op(a.data.mean(axis=axis), (a,), bw)


def mean_pool_over_tokens(x: Tensor) -> Tensor:
    """Average ``[B, T, d]`` token activations over ``T``."""
    return mean(x, axis=-2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, with numpy batch broadcasting.

    A 2-D right operand is shared by every leading index of ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2 and a.ndim > 2:
        # fold leading axes so the weight gradient is a single GEMM
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(*lead, bd.shape[-1])

        def bw_shared(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return Tensor._from_op(out, (a, b), bw_shared)
    out = np.matmul(ad, bd)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbatch(ga, ad.shape), _unbatch(gb, bd.shape)

    return Tensor._from_op(out, (a, b), bw)


def _unbatch(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    g = _reduce_to(g, shape)
    for axis, size in enumerate(shape[:-2]):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as ``[out, in]``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    y = matmul(x, transpose(weight))
    return add(y, bias) if bias is not None else y


# ---------------------------------------------------------------------------
# nonlinearities and normalization

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _gelu_derivative(x: np.ndarray, cdf: np.ndarray | None = None) -> np.ndarray:
    if cdf is None:
        cdf = ndtr(x)
    return cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with Phi the standard normal CDF."""
    xd = x.data
    cdf = ndtr(xd)
    return Tensor._from_op(xd * cdf, (x,), lambda g: (g * _gelu_derivative(xd, cdf),))


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: last dim {d} vs gamma {gamma.shape}, beta {beta.shape}")
    if eps <= 0:
        raise ConfigurationError("layernorm eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gx_hat = g * gd
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return Tensor._from_op(out, (x, gamma, beta), bw)


def _softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    s = _softmax_np(x.data)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(s, (x,), bw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``)."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [batch, classes] logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    batch, classes = logits.shape
    if labels.shape[0] != batch:
        raise ShapeError(f"cross_entropy: {labels.shape[0]} labels for batch of {batch}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(batch)
    loss = np.mean(logsumexp - z[rows, labels])

    def bw(g):
        p = np.exp(z - logsumexp[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / batch),)

    return Tensor._from_op(np.asarray(loss), (logits,), bw)


# ---------------------------------------------------------------------------
# convolution

def depthwise_conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel 2-D cross-correlation with zero "same" padding.

    ``x`` is ``[C, H, W]`` or ``[B, C, H, W]``; ``kernels`` is ``[C, f, f]`` with odd ``f``.
    """
    if kernels.ndim != 3 or kernels.shape[1] != kernels.shape[2]:
        raise ShapeError(f"depthwise_conv2d: kernels must be [C, f, f], got {kernels.shape}")
    f = kernels.shape[1]
    if f % 2 == 0:
        raise ConfigurationError(f"depthwise_conv2d needs an odd filter size, got {f}")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or xd.shape[1] != kernels.shape[0]:
        raise ShapeError(f"depthwise_conv2d: input {x.shape} does not match kernels {kernels.shape}")
    B, C, H, W = xd.shape
    r = f // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (r, r), (r, r)))
    kd = kernels.data
    out = np.zeros_like(xd)
    for u in range(f):
        for v in range(f):
            out += xp[:, :, u:u + H, v:v + W] * kd[None, :, u, v, None, None]
    if bias is not None:
        out += bias.data[None, :, None, None]
    if squeeze:
        out = out[0]

    def bw(g):
        g4 = g[None] if squeeze else g
        gk = np.empty_like(kd)
        gxp = np.zeros_like(xp)
        for u in range(f):
            for v in range(f):
                gk[:, u, v] = (g4 * xp[:, :, u:u + H, v:v + W]).sum(axis=(0, 2, 3))
                gxp[:, :, u:u + H, v:v + W] += g4 * kd[None, :, u, v, None, None]
        gx = gxp[:, :, r:r + H, r:r + W]
        if squeeze:
            gx = gx[0]
        gb = g4.sum(axis=(0, 2, 3))
        return (gx, gk, gb) if bias is not None else (gx, gk)

    parents = (x, kernels, bias) if bias is not None else (x, kernels)
    return Tensor._from_op(out, parents, bw)


def patchify(images: Tensor, patch: int) -> Tensor:
    """Split ``[B, C, H, W]`` images into ``[B, (H/P)*(W/P), C*P*P]`` patch vectors."""
    B, C, H, W = images.shape
    if H % patch or W % patch:
        raise ShapeError(f"patch size {patch} does not divide image {H}x{W}")
    h, w = H // patch, W // patch
    x = reshape(images, (B, C, h, patch, w, patch))
    x = transpose(x, (0, 2, 4, 1, 3, 5))
    return reshape(x, (B, h * w, C * patch * patch))


def parameters_requiring_grad(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
