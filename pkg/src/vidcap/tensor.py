"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation used by the captioning model lives here:
affine maps, attention softmax, spatial resizing, 3-d average pooling,
embedding lookups, layer normalisation and the loss reductions, plus a
central-difference gradient checker. Arrays are numpy; float32 is the
training default and float64 is used for verification, where finite
differences are actually trustworthy.

Operations act on the trailing axes and tolerate arbitrary leading batch
dimensions. Broadcasting is supported only where the model needs it
(bias adds, per-row gate values).
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_NEG_INF = -1e9  # additive attention-mask surrogate; underflows exp() in both dtypes


class DimensionError(ValueError):
    """Operand shapes cannot be combined."""


class ResizeError(ValueError):
    """Spatial resize factor is not an integer."""


class PoolingError(ValueError):
    """Pooling window does not tile the input evenly."""


class GradCheckError(RuntimeError):
    """A gradient check could not be completed."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense n-d float array plus an optional gradient tape node.

    Tensors are immutable once produced by an operation; the tape for one
    forward/backward pass belongs to a single thread.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = np.ascontiguousarray(arr, dtype=dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad})"

    # Scalar-or-tensor arithmetic used pervasively by the model code.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("tensor division only supports scalars")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self) -> None:
        """Run reverse-mode accumulation from a scalar output."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar output, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if g.base is not None or g.flags.writeable is False else g
    else:
        t.grad = t.grad + g


def _node(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)

        def _backward():
            grad_fn(out.grad)

        out._backward = _backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and affine operations
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def grad_fn(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(data, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def grad_fn(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), grad_fn)


def scale(a: Tensor, s: float) -> Tensor:
    data = a.data * a.data.dtype.type(s)

    def grad_fn(g):
        _accumulate(a, g * a.data.dtype.type(s))

    return _node(data, (a,), grad_fn)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: x[..., in] @ w[in, out] (+ b[out])."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(
            f"linear: input shape {x.shape} does not match weight shape {w.shape}"
        )
    data = x.data @ w.data
    if b is not None:
        if b.shape != (w.shape[1],):
            raise DimensionError(
                f"linear: bias shape {b.shape} does not match weight shape {w.shape}"
            )
        data = data + b.data
    parents = (x, w) if b is None else (x, w, b)

    def grad_fn(g):
        if x.requires_grad:
            _accumulate(x, g @ w.data.T)
        if w.requires_grad:
            xm = x.data.reshape(-1, x.shape[-1])
            gm = g.reshape(-1, w.shape[1])
            _accumulate(w, xm.T @ gm)
        if b is not None and b.requires_grad:
            _accumulate(b, g.reshape(-1, w.shape[1]).sum(axis=0))

    return _node(data, parents, grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Stacked matrix product over the last two axes; leading dims must match."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data @ b.data

    def grad_fn(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.swapaxes(-1, -2))
        if b.requires_grad:
            _accumulate(b, a.data.swapaxes(-1, -2) @ g)

    return _node(data, (a, b), grad_fn)


def sigmoid(x: Tensor) -> Tensor:
    # Stable two-branch form; avoids overflow for large |x|.
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def grad_fn(g):
        _accumulate(x, g * out * (1.0 - out))

    return _node(out, (x,), grad_fn)


_GELU_K = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Smooth gated activation (tanh form), kink-free for finite differencing."""
    d = x.data
    inner = _GELU_K * (d + 0.044715 * d**3)
    t = np.tanh(inner)
    out = 0.5 * d * (1.0 + t)

    def grad_fn(g):
        local = 0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * _GELU_K * (1.0 + 0.134145 * d * d)
        _accumulate(x, g * local)

    return _node(out, (x,), grad_fn)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        _accumulate(x, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _node(s, (x,), grad_fn)


def log_softmax_rows(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def grad_fn(g):
        _accumulate(x, g - np.exp(out) * g.sum(axis=-1, keepdims=True))

    return _node(out, (x,), grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine."""
    n = x.shape[-1]
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def grad_fn(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).reshape(-1, n).sum(axis=0))
        if beta.requires_grad:
            _accumulate(beta, g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            _accumulate(
                x,
                inv
                * (
                    gx
                    - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
                ),
            )

    return _node(out, (x, gamma, beta), grad_fn)


# ---------------------------------------------------------------------------
# shape movement
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    data = x.data.reshape(tuple(shape))

    def grad_fn(g):
        _accumulate(x, g.reshape(x.shape))

    return _node(data, (x,), grad_fn)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    data = np.ascontiguousarray(x.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        _accumulate(x, np.ascontiguousarray(g.transpose(inverse)))

    return _node(data, (x,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate along one axis; the gradient splits back."""
    axis = axis % tensors[0].ndim
    data = np.concatenate([t.data for t in tensors], axis=axis)
    widths = [t.shape[axis] for t in tensors]

    def grad_fn(g):
        offset = 0
        for t, w in zip(tensors, widths):
            index = tuple(
                slice(offset, offset + w) if ax == axis else slice(None)
                for ax in range(g.ndim)
            )
            _accumulate(t, g[index])
            offset += w

    return _node(data, tuple(tensors), grad_fn)


def concat_last(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    return concat(tensors, axis=-1)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; gradient zero-pads back."""
    axis = axis % x.ndim
    index = tuple(
        slice(start, start + length) if ax == axis else slice(None) for ax in range(x.ndim)
    )
    data = np.ascontiguousarray(x.data[index])

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[index] = g
        _accumulate(x, full)

    return _node(data, (x,), grad_fn)


# ---------------------------------------------------------------------------
# gathers
# ---------------------------------------------------------------------------


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: ids of any shape pick rows from table[rows, dim]."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding id out of range [0, {table.shape[0]}): min={ids.min()}, max={ids.max()}"
        )
    data = table.data[ids]

    def grad_fn(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
            _accumulate(table, gt)

    return _node(data, (table,), grad_fn)


def pick(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Gather x[rows[i], cols[i]] from a 2-d tensor into a vector."""
    if x.ndim != 2:
        raise DimensionError(f"pick expects a 2-d tensor, got shape {x.shape}")
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    data = x.data[rows, cols]

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, cols), g)
        _accumulate(x, gx)

    return _node(data, (x,), grad_fn)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum(), dtype=x.dtype)

    def grad_fn(g):
        _accumulate(x, np.broadcast_to(g, x.shape).copy())

    return _node(data, (x,), grad_fn)


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.size)


def mean_tensors(tensors: Sequence[Tensor]) -> Tensor:
    """Arithmetic mean of same-shape tensors."""
    if not tensors:
        raise ValueError("mean_tensors needs at least one tensor")
    acc = tensors[0]
    for t in tensors[1:]:
        acc = add(acc, t)
    return scale(acc, 1.0 / len(tensors))


# ---------------------------------------------------------------------------
# spatial operations (channels-last, arbitrary leading dims)
# ---------------------------------------------------------------------------


def _resize_axis(x: Tensor, axis: int, new: int) -> Tensor:
    old = x.shape[axis]
    if new == old:
        return x
    pos = axis % x.ndim
    if new > old:
        if new % old != 0:
            raise ResizeError(f"cannot enlarge extent {old} to {new}: non-integral factor")
        f = new // old
        data = np.repeat(x.data, f, axis=pos)
        split = x.shape[:pos] + (old, f) + x.shape[pos + 1 :]

        def grad_fn(g):
            _accumulate(x, g.reshape(split).sum(axis=pos + 1))

        return _node(data, (x,), grad_fn)
    if old % new != 0:
        raise ResizeError(f"cannot reduce extent {old} to {new}: non-integral factor")
    f = old // new
    split = x.shape[:pos] + (new, f) + x.shape[pos + 1 :]
    data = x.data.reshape(split).mean(axis=pos + 1)

    def grad_fn(g):
        _accumulate(x, np.repeat(g / f, f, axis=pos).reshape(x.shape))

    return _node(data, (x,), grad_fn)


def resize_spatial(x: Tensor, target: tuple[int, int]) -> Tensor:
    """Resize the (height, width) axes of a [..., h, w, c] map.

    Enlargement replicates nearest neighbours; reduction block-averages.
    Identity when the sizes already match.
    """
    if x.ndim < 3:
        raise DimensionError(f"resize_spatial expects [..., h, w, c], got shape {x.shape}")
    h2, w2 = target
    return _resize_axis(_resize_axis(x, -3, h2), -2, w2)


def avg_pool3d(
    x: Tensor, kernel: tuple[int, int, int], stride: tuple[int, int, int]
) -> Tensor:
    """Mean pooling over (t, h, w) of a [..., t, h, w, c] tensor."""
    if x.ndim < 4:
        raise DimensionError(f"avg_pool3d expects [..., t, h, w, c], got shape {x.shape}")
    kt, kh, kw = kernel
    st, sh, sw = stride
    t, h, w = x.shape[-4], x.shape[-3], x.shape[-2]
    for extent, k, s, name in ((t, kt, st, "t"), (h, kh, sh, "h"), (w, kw, sw, "w")):
        if extent < k or (extent - k) % s != 0:
            raise PoolingError(
                f"avg_pool3d: axis {name} extent {extent} incompatible with kernel {k}, stride {s}"
            )
    to = (t - kt) // st + 1
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    window = kt * kh * kw
    slices = [
        (
            Ellipsis,
            slice(dt, dt + st * (to - 1) + 1, st),
            slice(dh, dh + sh * (ho - 1) + 1, sh),
            slice(dw, dw + sw * (wo - 1) + 1, sw),
            slice(None),
        )
        for dt in range(kt)
        for dh in range(kh)
        for dw in range(kw)
    ]
    acc = np.zeros(x.shape[:-4] + (to, ho, wo, x.shape[-1]), dtype=x.dtype)
    for index in slices:
        acc += x.data[index]
    data = acc / window

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        contribution = g / window
        for index in slices:
            gx[index] += contribution
        _accumulate(x, gx)

    return _node(data, (x,), grad_fn)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


class ParamStore:
    """Named trainable tensors with deterministic iteration order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name!r}")
        t = Tensor(np.ascontiguousarray(data), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def to_dtype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for name, t in self._params.items():
            out.add(name, t.data.astype(dtype))
        return out

    def total_parameters(self) -> int:
        return sum(t.size for t in self._params.values())


def init_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int, dtype) -> np.ndarray:
    """Fan-in scaled uniform initialisation; biases should use zeros instead."""
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape)).astype(dtype)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Per-parameter worst relative error of reverse-mode vs central differences."""

    per_param: dict[str, float]
    eps: float
    samples_per_param: int | None

    @property
    def max_rel_error(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def worst_param(self) -> str:
        if not self.per_param:
            return ""
        return max(self.per_param, key=self.per_param.get)

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def grad_check(
    f: Callable[[ParamStore], Tensor],
    store: ParamStore,
    eps: float = 1e-5,
    samples_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of a scalar function against central differences.

    Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
    When ``samples_per_param`` is set, that many coordinates of each
    parameter are probed (seeded by ``rng``) instead of every element.
    Parameters must be float64; finite differences are unreliable below that.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside the trusted range [1e-6, 1e-3]")
    for name, t in store.items():
        if t.dtype != np.float64:
            raise GradCheckError(f"parameter {name!r} is {t.dtype}; grad_check needs float64")
    store.zero_grad()
    out = f(store)
    if out.size != 1:
        raise GradCheckError(f"function under check returned shape {out.shape}, not a scalar")
    if not np.isfinite(out.data).all():
        raise GradCheckError(f"function under check produced a non-finite value: {out.item()}")
    out.backward()
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in store.items()
    }
    if rng is None:
        rng = np.random.default_rng(0)

    per_param: dict[str, float] = {}
    for name, t in store.items():
        flat = t.data.reshape(-1)
        if samples_per_param is None or samples_per_param >= flat.size:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=samples_per_param, replace=False)
        worst = 0.0
        for idx in coords:
            original = flat[idx]
            flat[idx] = original + eps
            with no_grad():
                f_plus = f(store).item()
            flat[idx] = original - eps
            with no_grad():
                f_minus = f(store).item()
            flat[idx] = original
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise GradCheckError(
                    f"non-finite value while perturbing {name}[{idx}]: {f_plus}, {f_minus}"
                )
            numeric = (f_plus - f_minus) / (2.0 * eps)
            exact = float(analytic[name].reshape(-1)[idx])
            rel = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8)
            worst = max(worst, rel)
        per_param[name] = worst
    return GradCheckReport(per_param=per_param, eps=eps, samples_per_param=samples_per_param)
