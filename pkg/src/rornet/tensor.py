"""Dense tensors with taped reverse-mode automatic differentiation.

Every network primitive lives here: convolution, batch normalization, ReLU,
n-ary addition, pooling, the affine classifier head and the classification
loss. Ops compute eagerly with numpy and record a tape node on the output
so :func:`backward` can sweep the graph in reverse topological order.

Conventions:
  * image layout is N x C x H x W,
  * convolutions use cross-correlation semantics and carry no bias,
  * default precision is float32; gradient checking runs at float64,
  * every op validates that its output is finite and raises
    :class:`NumericError` otherwise, so NaN/Inf never propagate silently.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .exceptions import ConfigError, NumericError

__all__ = [
    "Tensor",
    "Parameter",
    "BatchNormState",
    "conv2d",
    "batch_norm",
    "relu",
    "add_n",
    "scale",
    "reduce_sum",
    "global_avg_pool",
    "max_pool2d",
    "linear",
    "softmax_cross_entropy",
    "backward",
    "he_init",
    "enable_buffer_reuse",
]

_buffer_reuse_enabled = False


def enable_buffer_reuse() -> bool:
    """Keep large numpy buffers on the heap so repeated steps reuse pages.

    By default glibc serves multi-megabyte allocations with fresh mmap
    regions, so every training step pays a page-fault storm for its im2col
    buffers. Retaining them on the heap roughly halves step time. Idempotent;
    returns False when the allocator does not support the knobs (non-glibc).
    """
    global _buffer_reuse_enabled
    if _buffer_reuse_enabled:
        return True
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
        m_mmap_max, m_trim_threshold = -4, -1
        ok = libc.mallopt(m_mmap_max, 0) == 1 and libc.mallopt(m_trim_threshold, -1) == 1
    except OSError:
        return False
    _buffer_reuse_enabled = bool(ok)
    return _buffer_reuse_enabled


class Tensor:
    """A dense n-dimensional array that can participate in the gradient tape.

    ``grad`` accumulates across repeated backward passes; callers reset it
    explicitly (the optimizer does this after each step).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Parameter:
    """A named, trainable tensor plus its optimizer momentum buffer.

    Names are hierarchical paths ("group2.block003.conv1.weight"); a model's
    parameter table iterates them lexicographically so runs are reproducible.
    """

    __slots__ = ("name", "tensor", "momentum_buffer")

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.tensor = Tensor(data, requires_grad=True)
        self.momentum_buffer: Optional[np.ndarray] = None

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


class BatchNormState:
    """Per-channel affine parameters and running statistics for one BN node."""

    __slots__ = ("gamma", "beta", "running_mean", "running_var", "momentum", "epsilon")

    def __init__(self, name: str, channels: int, dtype=np.float32,
                 momentum: float = 0.1, epsilon: float = 1e-5):
        if not 0.0 < momentum < 1.0:
            raise ConfigError(f"batch norm momentum must lie in (0, 1), got {momentum}")
        self.gamma = Parameter(name + ".gamma", np.ones(channels, dtype=dtype))
        self.beta = Parameter(name + ".beta", np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.epsilon = epsilon

    @property
    def channels(self) -> int:
        return self.gamma.data.shape[0]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {op}")


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], vjp) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._vjp = vjp
    return out


# ---------------------------------------------------------------------------
# im2col machinery for convolution and max pooling
# ---------------------------------------------------------------------------

def _out_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int,
            fill: float = 0.0) -> np.ndarray:
    """Unfold x (N,C,H,W) into sliding-window columns (N, C*kh*kw, OH*OW)."""
    n, c, h, w = x.shape
    oh = _out_extent(h, kh, stride, pad)
    ow = _out_extent(w, kw, stride, pad)
    if pad:
        xp = np.full((n, c, h + 2 * pad, w + 2 * pad), fill, dtype=x.dtype)
        xp[:, :, pad:pad + h, pad:pad + w] = x
    else:
        xp = x
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(cols: np.ndarray, x_shape: tuple[int, ...], kh: int, kw: int,
            stride: int, pad: int) -> np.ndarray:
    """Fold columns back onto the input grid, summing overlapping windows."""
    n, c, h, w = x_shape
    oh = _out_extent(h, kh, stride, pad)
    ow = _out_extent(w, kw, stride, pad)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    if pad:
        return xp[:, :, pad:pad + h, pad:pad + w].copy()
    return xp


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Bias-free 2-D cross-correlation.

    x: (N, Cin, H, W); weight: (Cout, Cin, kh, kw) with odd kernel extents.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ConfigError("conv2d expects 4-d input and weight")
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ConfigError(f"conv2d channel mismatch: input has {cin}, weight expects {cin_w}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    oh = _out_extent(h, kh, stride, padding)
    ow = _out_extent(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ConfigError(f"conv2d output would be empty for input {h}x{w}, kernel {kh}x{kw}, "
                          f"stride {stride}, padding {padding}")

    cols = _im2col(x.data, kh, kw, stride, padding)
    w2 = weight.data.reshape(cout, -1)
    out = np.matmul(w2, cols).reshape(n, cout, oh, ow)
    del cols  # recomputed on backward: cheaper than pinning ~100MB per conv

    def vjp(g: np.ndarray):
        gm = g.reshape(n, cout, oh * ow)
        gx = gw = None
        if weight.requires_grad:
            cols_b = _im2col(x.data, kh, kw, stride, padding)
            gw = np.matmul(gm, cols_b.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
            del cols_b
        if x.requires_grad:
            gcols = np.matmul(w2.T, gm)
            gx = _col2im(gcols, x.shape, kh, kw, stride, padding)
        return gx, gw

    return _make(out, "conv2d", (x, weight), vjp)


def batch_norm(x: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Channel-wise batch normalization with affine transform.

    Train mode normalizes by batch statistics and folds them into the running
    averages; eval mode normalizes by the stored running statistics. The
    running variance uses the same biased estimator as normalization, so
    freezing the running stats to a batch's statistics reproduces that
    batch's train-mode output exactly.
    """
    x = _as_tensor(x)
    if mode not in ("train", "eval"):
        raise ConfigError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")
    if x.data.ndim != 4:
        raise ConfigError("batch_norm expects N,C,H,W input")
    n, c, h, w = x.shape
    if c != state.channels:
        raise ConfigError(f"batch_norm channel mismatch: input has {c}, state has {state.channels}")
    gamma, beta = state.gamma.tensor, state.beta.tensor
    m = n * h * w
    axes = (0, 2, 3)

    if mode == "train":
        if m < 2:
            raise NumericError("batch_norm in train mode needs N*H*W >= 2 (variance undefined)")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        mom = state.momentum
        state.running_mean = ((1.0 - mom) * state.running_mean + mom * mean).astype(x.dtype)
        state.running_var = ((1.0 - mom) * state.running_var + mom * var).astype(x.dtype)
    else:
        mean = state.running_mean
        var = state.running_var

    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    if mode == "train":
        def vjp(g: np.ndarray):
            gxh = g * gamma.data[None, :, None, None]
            gx = None
            if x.requires_grad:
                sum_gxh = gxh.sum(axis=axes)
                sum_gxh_xhat = (gxh * xhat).sum(axis=axes)
                gx = (inv_std[None, :, None, None] / m) * (
                    m * gxh
                    - sum_gxh[None, :, None, None]
                    - xhat * sum_gxh_xhat[None, :, None, None]
                )
            ggamma = (g * xhat).sum(axis=axes)
            gbeta = g.sum(axis=axes)
            return gx, ggamma, gbeta
    else:
        def vjp(g: np.ndarray):
            gx = None
            if x.requires_grad:
                gx = g * (gamma.data * inv_std)[None, :, None, None]
            ggamma = (g * xhat).sum(axis=axes)
            gbeta = g.sum(axis=axes)
            return gx, ggamma, gbeta

    return _make(out, "batch_norm", (x, gamma, beta), vjp)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x). The subgradient at exactly zero is zero."""
    x = _as_tensor(x)
    out = np.maximum(x.data, 0)

    def vjp(g: np.ndarray):
        return (g * (x.data > 0),)

    return _make(out, "relu", (x,), vjp)


def add_n(inputs: Sequence[Tensor]) -> Tensor:
    """Sum two or more same-shape tensors; gradients pass through unchanged."""
    tensors = [_as_tensor(t) for t in inputs]
    if len(tensors) < 2:
        raise ConfigError("add_n needs at least two inputs")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ConfigError(f"add_n shape mismatch: {shape} vs {t.shape}")
    out = tensors[0].data.copy()
    for t in tensors[1:]:
        out += t.data

    def vjp(g: np.ndarray):
        return tuple(g if t.requires_grad else None for t in tensors)

    return _make(out, "add_n", tuple(tensors), vjp)


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a python scalar (used for survival-probability scaling)."""
    x = _as_tensor(x)
    out = x.data * factor

    def vjp(g: np.ndarray):
        return (g * factor,)

    return _make(out, "scale", (x,), vjp)


def reduce_sum(x: Tensor) -> Tensor:
    """Sum all elements to a scalar; the gradient broadcasts back as ones."""
    x = _as_tensor(x)
    out = np.asarray(x.data.sum())

    def vjp(g: np.ndarray):
        return (np.broadcast_to(g, x.shape),)

    return _make(out, "reduce_sum", (x,), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: (N,C,H,W) -> (N,C)."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ConfigError("global_avg_pool expects N,C,H,W input")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def vjp(g: np.ndarray):
        gx = np.broadcast_to(g[:, :, None, None] / (h * w), x.shape)
        return (np.ascontiguousarray(gx),)

    return _make(out, "global_avg_pool", (x,), vjp)


def max_pool2d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    """Max pooling over square windows; gradient routes to the window argmax."""
    x = _as_tensor(x)
    n, c, h, w = x.shape
    oh = _out_extent(h, kernel, stride, padding)
    ow = _out_extent(w, kernel, stride, padding)
    neg = np.finfo(x.dtype).min if np.issubdtype(x.dtype, np.floating) else -np.inf
    cols = _im2col(x.data, kernel, kernel, stride, padding, fill=neg)
    cols = cols.reshape(n, c, kernel * kernel, oh * ow)
    arg = cols.argmax(axis=2)
    out = np.take_along_axis(cols, arg[:, :, None, :], axis=2)[:, :, 0, :].reshape(n, c, oh, ow)

    def vjp(g: np.ndarray):
        gcols = np.zeros((n, c, kernel * kernel, oh * ow), dtype=g.dtype)
        np.put_along_axis(gcols, arg[:, :, None, :], g.reshape(n, c, 1, oh * ow), axis=2)
        gx = _col2im(gcols.reshape(n, c * kernel * kernel, oh * ow),
                     x.shape, kernel, kernel, stride, padding)
        return (gx,)

    return _make(out, "max_pool2d", (x,), vjp)


def subsample_pad(x: Tensor, stride: int, out_channels: int) -> Tensor:
    """Parameter-free projection: spatial subsampling plus zero channel padding.

    Keeps rows/columns at indices {0, stride, 2*stride, ...} and appends
    zero-filled channels up to ``out_channels``.
    """
    x = _as_tensor(x)
    n, c, h, w = x.shape
    if out_channels < c:
        raise ConfigError(f"zero-padding projection cannot shrink channels ({c} -> {out_channels})")
    sub = x.data[:, :, ::stride, ::stride]
    out = np.zeros((n, out_channels) + sub.shape[2:], dtype=x.dtype)
    out[:, :c] = sub

    def vjp(g: np.ndarray):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, ::stride, ::stride] = g[:, :c]
        return (gx,)

    return _make(out, "subsample_pad", (x,), vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map (N,D) @ (K,D)^T + (K,)."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ConfigError("linear expects 2-d input and weight")
    n, d = x.shape
    k, d_w = weight.shape
    if d != d_w:
        raise ConfigError(f"linear dimension mismatch: input has {d} features, weight expects {d_w}")
    if bias.shape != (k,):
        raise ConfigError(f"linear bias must have shape ({k},), got {bias.shape}")
    out = x.data @ weight.data.T + bias.data

    def vjp(g: np.ndarray):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _make(out, "linear", (x, weight, bias), vjp)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits).

    Stabilized by max subtraction; the backward pass is (softmax - onehot)/N.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ConfigError("softmax_cross_entropy expects (N, K) logits")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ConfigError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ConfigError(f"labels must lie in [0, {k}), got range "
                          f"[{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n), labels].mean()

    def vjp(g: np.ndarray):
        soft = np.exp(logp)
        soft[np.arange(n), labels] -= 1.0
        return (g * soft / n,)

    return _make(np.asarray(loss), "softmax_cross_entropy", (logits,), vjp)


# ---------------------------------------------------------------------------
# backward sweep
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf tensor (Parameters) reachable from ``loss``.

    Repeated calls without clearing grads accumulate; a leaf that does not
    feed the loss keeps ``grad`` as None. Traversal is iterative, so very
    deep tapes do not hit the recursion limit.
    """
    if loss.data.size != 1:
        raise NumericError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    # iterative post-order DFS; reversed, it visits every node before its parents
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = pg.reshape(parent.data.shape)
            if id(parent) in grads:
                grads[id(parent)] += pg
            else:
                # own the buffer: vjps may hand the same array to several parents
                grads[id(parent)] = np.array(pg)


def he_init(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator,
            dtype=np.float32) -> np.ndarray:
    """Zero-mean normal draw with variance 2/fan_in, deterministic per rng state."""
    if fan_in <= 0:
        raise ConfigError(f"fan_in must be positive, got {fan_in}")
    std = math.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=shape).astype(dtype)
