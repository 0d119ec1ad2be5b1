"""Dense float64 tensors with define-by-run reverse-mode differentiation.

The graph is rebuilt on every forward pass: each operation returns a new
Tensor holding references to its parents and a closure that routes the
incoming gradient to them. `backward` linearizes the graph in topological
order and accumulates gradients; `reverse_grad` and
`finite_difference_check` are the verification surface on top of it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse mode."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor {name or '<unnamed>'} contains NaN or Inf")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @classmethod
    def _result(
        cls,
        data: np.ndarray,
        parents: tuple["Tensor", ...],
        backward: Callable[[np.ndarray], None] | None,
    ) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out.name = ""
        if out.requires_grad:
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

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros(self.data.shape, dtype=np.float64)
        self.grad += g

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; everything routes through the module-level primitives.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, multiply(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), multiply(self, -1.0))

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a supported primitive")
        return multiply(self, 1.0 / float(other))

    def __neg__(self):
        return multiply(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return Tensor._result(out_data, (a, b), backward)


def multiply(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        scale = float(b)
        out_data = a.data * scale

        def backward_scalar(g: np.ndarray) -> None:
            if a.requires_grad:
                a._accum(g * scale)

        return Tensor._result(out_data, (a,), backward_scalar)

    out_data = a.data * b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return Tensor._result(out_data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")
    out_data = a.data @ b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accum(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accum(_unbroadcast(gb, b.data.shape))

    return Tensor._result(out_data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out_data = np.maximum(x.data, 0.0)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accum(g * (x.data > 0.0))

    return Tensor._result(out_data, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out_data = x.data * cdf

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
            x._accum(g * (cdf + x.data * pdf))

    return Tensor._result(out_data, (x,), backward)


def _sigmoid_values(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out_data = _sigmoid_values(x.data)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accum(g * out_data * (1.0 - out_data))

    return Tensor._result(out_data, (x,), backward)


def layer_norm(x: Tensor, scale: Tensor, offset: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply learnable scale and offset."""
    x, scale, offset = _as_tensor(x), _as_tensor(scale), _as_tensor(offset)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * scale.data + offset.data

    def backward(g: np.ndarray) -> None:
        reduce_axes = tuple(range(g.ndim - 1))
        if offset.requires_grad:
            offset._accum(g.sum(axis=reduce_axes))
        if scale.requires_grad:
            scale._accum((g * xhat).sum(axis=reduce_axes))
        if x.requires_grad:
            gh = g * scale.data
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
            x._accum(gx)

    return Tensor._result(out_data, (x, scale, offset), backward)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padding stride-1 convolution on (batch, height, width, channel)."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be 4-D (batch, h, w, c), got {x.shape}")
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ValueError(f"conv2d kernel must be (k, k, c_in, c_out), got {kernel.shape}")
    k = kernel.shape[0]
    if k % 2 != 1:
        raise ValueError("conv2d kernel size must be odd for same padding")
    if kernel.shape[2] != x.shape[3]:
        raise ValueError(
            f"conv2d channel mismatch: input has {x.shape[3]}, kernel expects {kernel.shape[2]}"
        )
    b, h, w, _ = x.shape
    c_out = kernel.shape[3]
    pad = k // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    out_data = np.zeros((b, h, w, c_out), dtype=np.float64)
    for di in range(k):
        for dj in range(k):
            out_data += xp[:, di : di + h, dj : dj + w, :] @ kernel.data[di, dj]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (c_out,):
            raise ValueError(f"conv2d bias must have shape ({c_out},), got {bias.shape}")
        out_data += bias.data
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g: np.ndarray) -> None:
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=(0, 1, 2)))
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            for di in range(k):
                for dj in range(k):
                    gk[di, dj] = np.einsum(
                        "bhwc,bhwo->co", xp[:, di : di + h, dj : dj + w, :], g
                    )
            kernel._accum(gk)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for di in range(k):
                for dj in range(k):
                    gxp[:, di : di + h, dj : dj + w, :] += g @ kernel.data[di, dj].T
            x._accum(gxp[:, pad : pad + h, pad : pad + w, :])

    return Tensor._result(out_data, parents, backward)


def mean_pool(x: Tensor, axes: int | Sequence[int] | None = None) -> Tensor:
    """Arithmetic mean over `axes` (all axes when None)."""
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    else:
        axes = tuple(axes)
    axes = tuple(a % x.ndim for a in axes)
    count = 1
    for a in axes:
        count *= x.shape[a]
    out_data = x.data.mean(axis=axes)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            ge = np.expand_dims(g, axes) if axes else g
            x._accum(np.broadcast_to(ge / count, x.data.shape))

    return Tensor._result(out_data, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    out_data = ez / ez.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            x._accum(out_data * (g - dot))

    return Tensor._result(out_data, (x,), backward)


def sparsemax_values(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Euclidean projection of score vectors onto the probability simplex.

    Sorting-based closed form: with scores sorted descending, the support
    size is the largest k with 1 + k*z_(k) > sum_{j<=k} z_(j), and the
    threshold tau is (sum over the support - 1)/k.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape[axis] < 1:
        raise ValueError("sparsemax requires at least one entry along the axis")
    z = z - z.max(axis=axis, keepdims=True)
    zs = np.flip(np.sort(z, axis=axis), axis=axis)
    cumsum = np.cumsum(zs, axis=axis) - 1.0
    rank_shape = [1] * z.ndim
    rank_shape[axis] = z.shape[axis]
    ranks = np.arange(1, z.shape[axis] + 1, dtype=np.float64).reshape(rank_shape)
    support = ranks * zs > cumsum
    k = support.sum(axis=axis, keepdims=True)
    tau = np.take_along_axis(cumsum, k - 1, axis=axis) / k
    return np.maximum(z - tau, 0.0)


def sparsemax(x: Tensor, axis: int = -1) -> Tensor:
    """Sparse simplex-projection normalization (differentiable a.e.).

    Backward uses the generalized Jacobian of the support set found in the
    forward pass; exactly at support-change boundaries this picks one valid
    element of the subdifferential.
    """
    x = _as_tensor(x)
    out_data = sparsemax_values(x.data, axis=axis)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            support = out_data > 0.0
            k = support.sum(axis=axis, keepdims=True)
            v = (g * support).sum(axis=axis, keepdims=True) / k
            x._accum(np.where(support, g - v, 0.0))

    return Tensor._result(out_data, (x,), backward)


def concatenate(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concatenate requires at least one tensor")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def backward(g: np.ndarray) -> None:
        offset = 0
        for t, size in zip(tensors, sizes):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + size)
                t._accum(g[tuple(idx)])
            offset += size

    return Tensor._result(out_data, tuple(tensors), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    out_data = x.data.reshape(shape)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accum(g.reshape(x.data.shape))

    return Tensor._result(out_data, (x,), backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out_data = np.transpose(x.data, axes)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accum(np.transpose(g, inverse))

    return Tensor._result(out_data, (x,), backward)


def bce_with_logits(logits: Tensor, targets: np.ndarray, pos_weight: float = 1.0) -> Tensor:
    """Elementwise binary cross-entropy from logits, log-sum-exp stabilized.

    loss = y*w*(max(z,0) - z + log1p(e^-|z|)) + (1-y)*(max(z,0) + log1p(e^-|z|)),
    which for w=1 reduces to max(z,0) - z*y + log1p(e^-|z|).
    """
    logits = _as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise ValueError(f"targets shape {y.shape} must match logits shape {logits.shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("binary cross-entropy targets must be 0 or 1")
    z = logits.data
    zmax = np.maximum(z, 0.0)
    softplus = np.log1p(np.exp(-np.abs(z)))
    out_data = y * pos_weight * (zmax - z + softplus) + (1.0 - y) * (zmax + softplus)

    def backward(g: np.ndarray) -> None:
        if logits.requires_grad:
            s = _sigmoid_values(z)
            logits._accum(g * (y * pos_weight * (s - 1.0) + (1.0 - y) * s))

    return Tensor._result(out_data, (logits,), backward)


def cross_entropy_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-row multi-class cross-entropy; `labels` are integer class indices."""
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ValueError("cross_entropy_with_logits expects (rows, classes) logits")
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError("labels out of range for the given number of classes")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    out_data = lse - z[np.arange(n), labels]

    def backward(g: np.ndarray) -> None:
        if logits.requires_grad:
            p = np.exp(z - zmax)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(n), labels] -= 1.0
            logits._accum(g[:, None] * p)

    return Tensor._result(out_data, (logits,), backward)


# ---------------------------------------------------------------------------
# reverse pass and verification
# ---------------------------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(output: Tensor) -> None:
    """Populate `.grad` of every reachable node with d(output)/d(node)."""
    if output.data.shape != ():
        raise ValueError(f"backward requires a scalar output, got shape {output.data.shape}")
    order = _toposort(output)
    for node in order:
        node.grad = None
    output.grad = np.ones((), dtype=np.float64)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def reverse_grad(output: Tensor, leaves: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradient of a scalar output for every named leaf; zeros if unused."""
    backward(output)
    grads: dict[str, np.ndarray] = {}
    for name, leaf in leaves.items():
        if leaf.grad is None:
            grads[name] = np.zeros(leaf.data.shape, dtype=np.float64)
        else:
            grads[name] = leaf.grad.copy()
    return grads


@dataclass
class GradientReport:
    """Max relative analytic-vs-central-difference error per parameter."""

    per_parameter: dict[str, float]
    eps: float
    worst_coordinate: dict[str, tuple[int, ...]] = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max(self.per_parameter.values()) if self.per_parameter else 0.0


def finite_difference_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    analytic: Mapping[str, np.ndarray] | None = None,
) -> GradientReport:
    """Compare reverse-mode gradients of `f` against central differences.

    `f` maps named leaf tensors to a scalar Tensor. Relative error per
    coordinate uses the denominator max(|analytic|, |numeric|, 1e-8).
    """
    if eps <= 0:
        raise ValueError("finite difference step must be positive")
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(values: Mapping[str, np.ndarray], where: str) -> float:
        leaves = {k: Tensor(v, name=k) for k, v in values.items()}
        out = f(leaves)
        if out.data.shape != ():
            raise ValueError("finite_difference_check requires a scalar-valued function")
        val = float(out.data)
        if not math.isfinite(val):
            raise FloatingPointError(f"non-finite function value at {where}")
        return val

    if analytic is None:
        leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
        out = f(leaves)
        if out.data.shape != ():
            raise ValueError("finite_difference_check requires a scalar-valued function")
        analytic = reverse_grad(out, leaves)

    per_parameter: dict[str, float] = {}
    worst: dict[str, tuple[int, ...]] = {}
    for name, base in arrays.items():
        ana = np.asarray(analytic[name], dtype=np.float64)
        worst_err = 0.0
        worst_idx: tuple[int, ...] = ()
        it = np.nditer(base, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            perturbed = dict(arrays)
            plus = base.copy()
            plus[idx] += eps
            perturbed[name] = plus
            f_plus = evaluate(perturbed, f"{name}{idx}+eps")
            minus = base.copy()
            minus[idx] -= eps
            perturbed[name] = minus
            f_minus = evaluate(perturbed, f"{name}{idx}-eps")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(ana[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if err > worst_err:
                worst_err = err
                worst_idx = idx
            it.iternext()
        per_parameter[name] = worst_err
        worst[name] = worst_idx
    return GradientReport(per_parameter=per_parameter, eps=eps, worst_coordinate=worst)
