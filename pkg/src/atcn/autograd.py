"""Dense float64 tensors with reverse-mode differentiation.

Every operation records its inputs and a closure that maps the output
gradient to input gradients.  ``backward`` walks the recorded graph in
reverse topological order.  Layout convention for sequence data is
``batch x channels x frames``.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError, StateError, WindowTooShortError

DTYPE = np.float64
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Tensor:
    __slots__ = ("_backward", "_parents", "data", "grad", "name", "requires_grad")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple[Tensor, ...] = (),
        _backward: Callable[[np.ndarray], None] | None = None,
        name: str | None = None,
    ):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return tmean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes if axes else None)


class Param(Tensor):
    """Named trainable array; ``grad`` is always allocated."""

    __slots__ = ()

    def __init__(self, name: str, values):
        super().__init__(values, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out_data / b.data, b.shape))

    return _make(out_data, (a, b), bw)


def square(x: Tensor) -> Tensor:
    def bw(g):
        x._accumulate(2.0 * g * x.data)

    return _make(x.data * x.data, (x,), bw)


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def bw(g):
        x._accumulate(g * out_data)

    return _make(out_data, (x,), bw)


def log(x: Tensor) -> Tensor:
    def bw(g):
        x._accumulate(g / x.data)

    return _make(np.log(x.data), (x,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        x._accumulate(g * mask)

    return _make(np.where(mask, x.data, 0.0), (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    # tanh form is overflow-free and gives exactly 0.5 at 0
    out_data = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def bw(g):
        x._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        x._accumulate(out_data * (g - inner))

    return _make(out_data, (x,), bw)


def activation(x: Tensor, kind: str, axis: int = -1) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax":
        return softmax(x, axis)
    raise ConfigError(f"unknown activation {kind!r}")


def norm(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at 0 is taken as 0."""
    n = np.sqrt((x.data * x.data).sum(axis=axis))

    def bw(g):
        safe = np.where(n > 0, n, 1.0)
        scale = np.where(n > 0, g / safe, 0.0)
        x._accumulate(np.expand_dims(scale, axis) * x.data)

    return _make(n, (x,), bw)


# ---------------------------------------------------------------- reductions / shape


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.data.ndim)
    out_data = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(out_data, (x,), bw)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.data.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axes, keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        x._accumulate(g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), bw)


def transpose(x: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))

    def bw(g):
        x._accumulate(np.transpose(g, inv))

    return _make(np.transpose(x.data, axes), (x,), bw)


def getitem(x: Tensor, idx) -> Tensor:
    key = idx if isinstance(idx, tuple) else (idx,)
    fancy = any(isinstance(k, (list, np.ndarray)) for k in key)

    def bw(g):
        full = np.zeros_like(x.data)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        x._accumulate(full)

    return _make(x.data[idx], (x,), bw)


def crop_frames(x: Tensor, length: int, align: str = "center") -> Tensor:
    """Keep ``length`` frames of the last axis, centered or right-aligned."""
    total = x.shape[-1]
    if length > total:
        raise ShapeError(f"cannot crop {total} frames to {length}")
    if length == total:
        return x
    start = (total - length) // 2 if align == "center" else total - length
    return getitem(x, (Ellipsis, slice(start, start + length)))


def stack(items: Sequence[Tensor], axis: int = 0) -> Tensor:
    items = [as_tensor(t) for t in items]
    out_data = np.stack([t.data for t in items], axis=axis)

    def bw(g):
        parts = np.moveaxis(g, axis, 0)
        for t, part in zip(items, parts):
            if t.requires_grad:
                t._accumulate(part)

    return _make(out_data, items, bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            if b.data.ndim == 1:
                ga = np.multiply.outer(g, b.data)
            else:
                ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            if b.data.ndim == 1:
                gb = (a.data * g[..., None]).reshape(-1, b.shape[0]).sum(axis=0)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), bw)


# ---------------------------------------------------------------- layers


def linear(x, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``y = W x + b`` applied over the trailing axis of ``x``."""
    x = as_tensor(x)
    if w.data.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ConfigError(f"linear: input width {x.shape[-1]} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ConfigError(f"linear: bias shape {b.shape} does not match weight {w.shape}")
    y = matmul(x, transpose(w))
    return add(y, b) if b is not None else y


def _pad_amounts(padding: str, span: int, k: int) -> tuple[int, int]:
    if padding == "valid":
        return 0, 0
    if padding == "same":
        if k % 2 == 0:
            raise ConfigError("same padding needs an odd kernel")
        return span // 2, span // 2
    if padding == "causal":
        return span, 0
    raise ConfigError(f"unknown padding {padding!r}")


def conv1d_dilated(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    dilation: int = 1,
    groups: int = 1,
    padding: str = "valid",
) -> Tensor:
    """Grouped dilated 1-D convolution over the frame axis.

    ``x`` is ``B x C_in x F`` (or ``C_in x F``), ``w`` is ``C_out x C_in/G x k``.
    """
    x = as_tensor(x)
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or w.data.ndim != 3:
        raise ConfigError(f"conv1d: expected 3-d input and weight, got {x.shape} and {w.shape}")
    B, c_in, F = xd.shape
    c_out, cin_g, k = w.shape
    if dilation < 1 or groups < 1:
        raise ConfigError("conv1d: dilation and groups must be >= 1")
    if c_in % groups or c_out % groups or cin_g * groups != c_in:
        raise ConfigError(f"conv1d: channels {c_in}->{c_out} incompatible with {groups} groups and weight {w.shape}")
    if b is not None and b.shape != (c_out,):
        raise ConfigError(f"conv1d: bias shape {b.shape} != ({c_out},)")
    span = dilation * (k - 1)
    left, right = _pad_amounts(padding, span, k)
    f_out = F + left + right - span
    if f_out <= 0:
        raise WindowTooShortError(f"conv1d: {F} frames too short for kernel {k} at dilation {dilation}")
    xp = np.pad(xd, ((0, 0), (0, 0), (left, right))) if (left or right) else xd
    cols = np.stack([xp[:, :, j * dilation : j * dilation + f_out] for j in range(k)], axis=2)
    cols = cols.reshape(B, groups, cin_g * k, f_out)
    cog = c_out // groups
    wm = w.data.reshape(groups, cog, cin_g * k)
    out = np.matmul(wm, cols).reshape(B, c_out, f_out)
    if b is not None:
        out = out + b.data[None, :, None]
    if squeeze:
        out = out[0]

    def bw(g):
        g4 = (g[None] if squeeze else g).reshape(B, groups, cog, f_out)
        if w.requires_grad:
            gw = np.matmul(g4, np.swapaxes(cols, -1, -2)).sum(axis=0)
            w._accumulate(gw.reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g4.sum(axis=(0, 3)).reshape(c_out))
        if x.requires_grad:
            gcols = np.matmul(np.swapaxes(wm, -1, -2), g4).reshape(B, c_in, k, f_out)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, :, j * dilation : j * dilation + f_out] += gcols[:, :, j, :]
            gx = gxp[:, :, left : left + F]
            x._accumulate(gx[0] if squeeze else gx)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw)


def global_average_pool(x: Tensor) -> Tensor:
    """Mean over the trailing frame axis."""
    if x.shape[-1] == 0:
        raise ShapeError("global average pool over zero frames")
    return tmean(x, axis=-1)


class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, channels: int):
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    train: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalization of ``B x C x F`` (or ``B x C``) input."""
    xd = x.data
    axes = (0, 2) if xd.ndim == 3 else (0,)
    shape = (1, -1, 1) if xd.ndim == 3 else (1, -1)
    n = int(np.prod([xd.shape[a] for a in axes]))
    if train:
        if n < 2:
            raise ShapeError("batch norm in train mode needs at least 2 values per channel")
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        # biased running variance: eval on the training batch reproduces train-mode output
        state.running_mean = (1 - momentum) * state.running_mean + momentum * mean
        state.running_var = (1 - momentum) * state.running_var + momentum * var
    else:
        mean, var = state.running_mean, state.running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean.reshape(shape)) * inv.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def bw(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gx_hat = g * gamma.data.reshape(shape)
            if train:
                s1 = gx_hat.sum(axis=axes, keepdims=True)
                s2 = (gx_hat * xhat).sum(axis=axes, keepdims=True)
                gx = inv.reshape(shape) / n * (n * gx_hat - s1 - xhat * s2)
            else:
                gx = gx_hat * inv.reshape(shape)
            x._accumulate(gx)

    return _make(out, (x, gamma, beta), bw)


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability {p} outside [0, 1)")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise StateError("train-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, Tensor(mask))


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable ``Param.grad``."""
    if not isinstance(loss, Tensor) or (loss._backward is None and not loss.requires_grad):
        raise StateError("backward called without a recorded forward pass")
    if loss.size != 1:
        raise StateError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    # intermediate buffers are released; leaves keep their gradients
    for node in order:
        if node._backward is not None:
            node.grad = None


def zero_grad(params: Iterable[Param]) -> None:
    for p in params:
        p.zero_grad()


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Param],
    eps: float = 1e-5,
    n_samples: int = 100,
    rng: np.random.Generator | None = None,
) -> float:
    """Max of |analytic - central difference| / max(1, |analytic|) over sampled entries.

    ``loss_fn`` must rebuild the graph on each call and be deterministic.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    zero_grad(params)
    loss = loss_fn()
    backward(loss)
    again = loss_fn()
    if again.data.tobytes() != loss.data.tobytes():
        raise StateError("finite-difference check needs a deterministic forward pass")
    analytic = [p.grad.copy() for p in params]
    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    if total == 0:
        return 0.0
    flat = rng.choice(total, size=min(n_samples, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for f in flat:
        pi = int(np.searchsorted(offsets, f, side="right") - 1)
        p = params[pi]
        idx = np.unravel_index(int(f - offsets[pi]), p.shape)
        orig = p.data[idx]
        p.data[idx] = orig + eps
        up = loss_fn().item()
        p.data[idx] = orig - eps
        down = loss_fn().item()
        p.data[idx] = orig
        numeric = (up - down) / (2 * eps)
        a = analytic[pi][idx]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
