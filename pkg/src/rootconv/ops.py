"""Forward and backward operators: grouped convolution, pooling, batchnorm,
linear layers and the softmax cross-entropy loss.

All functions take NCHW arrays and return new arrays; the only mutable
object is :class:`BatchNormState`, whose running statistics are updated in
training mode.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, gemm, gemm_batched

__all__ = [
    "ConfigError",
    "ConvWeights",
    "BatchNormState",
    "conv_out_size",
    "im2col",
    "col2im",
    "conv_grouped_forward",
    "conv_grouped_backward",
    "embed_block_diag",
    "max_pool_forward",
    "max_pool_backward",
    "avg_pool_forward",
    "avg_pool_backward",
    "global_avg_pool_forward",
    "global_avg_pool_backward",
    "batchnorm_forward",
    "batchnorm_backward",
    "linear_forward",
    "linear_backward",
    "softmax",
    "softmax_cross_entropy",
]

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class ConfigError(ValueError):
    """Layer hyper-parameters are inconsistent (e.g. indivisible groups)."""


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_out_size(size: int, kernel: int, stride: int, pad: int) -> int:
    out = (size + 2 * pad - kernel) // stride + 1
    if out < 1:
        raise ShapeError(f"empty output: size {size}, kernel {kernel}, stride {stride}, pad {pad}")
    return out


# --------------------------------------------------------------------------
# convolution

@dataclass
class ConvWeights:
    """Filters of shape ``(c_out, c_in // groups, kh, kw)`` plus optional bias."""

    filters: np.ndarray
    bias: np.ndarray | None = None
    groups: int = 1

    def __post_init__(self) -> None:
        if self.filters.ndim != 4:
            raise ShapeError(f"filters must be 4-D, got {self.filters.shape}")
        if self.groups < 1:
            raise ConfigError(f"groups must be positive, got {self.groups}")
        if self.out_channels % self.groups:
            raise ConfigError(f"{self.out_channels} output channels not divisible by {self.groups} groups")
        if self.bias is not None and self.bias.shape != (self.out_channels,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({self.out_channels},)")

    @property
    def out_channels(self) -> int:
        return self.filters.shape[0]

    @property
    def in_channels(self) -> int:
        return self.filters.shape[1] * self.groups

    @property
    def kernel(self) -> tuple[int, int]:
        return self.filters.shape[2], self.filters.shape[3]


def im2col(x: np.ndarray, kernel, stride=1, pad=0, channels: slice | None = None) -> np.ndarray:
    """Unroll receptive fields into columns.

    Returns a ``(c * kh * kw, n * h_out * w_out)`` matrix.  Rows run over
    (channel, ky, kx) with kx fastest, columns over (image, oy, ox).  Out of
    bounds taps read zero.  ``channels`` restricts the lowering to a channel
    range.
    """
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    if channels is not None:
        x = x[:, channels]
    n, c, h, w = x.shape
    ho = conv_out_size(h, kh, sh, ph)
    wo = conv_out_size(w, kw, sw, pw)
    xt = x.transpose(1, 0, 2, 3)
    if ph or pw:
        xt = np.pad(xt, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]
    return cols.reshape(c * kh * kw, n * ho * wo)


def col2im(cols: np.ndarray, x_shape, kernel, stride=1, pad=0) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back onto the input grid."""
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    n, c, h, w = x_shape
    ho = conv_out_size(h, kh, sh, ph)
    wo = conv_out_size(w, kw, sw, pw)
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    xt = np.zeros((c, n, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xt[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += cols[:, i, j]
    return np.ascontiguousarray(xt[:, :, ph:ph + h, pw:pw + w].transpose(1, 0, 2, 3))


def _check_conv(x: np.ndarray, w: ConvWeights) -> None:
    if x.ndim != 4:
        raise ShapeError(f"input must be NCHW, got {x.shape}")
    if x.shape[1] % w.groups:
        raise ConfigError(f"{x.shape[1]} input channels not divisible by {w.groups} groups")
    if x.shape[1] != w.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, filters expect {w.in_channels}")


def conv_grouped_forward(x: np.ndarray, w: ConvWeights, stride=1, pad=0,
                         return_cols: bool = False):
    """Grouped 2-D convolution (cross-correlation) with zero padding.

    Group ``i`` maps input channels ``[i*c_in/g, (i+1)*c_in/g)`` to output
    channels ``[i*c_out/g, (i+1)*c_out/g)``.  The ``g`` per-group products
    are issued as a single :func:`gemm_batched` call.
    """
    _check_conv(x, w)
    g = w.groups
    kh, kw = w.kernel
    n, _, h, wd = x.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    ho = conv_out_size(h, kh, sh, ph)
    wo = conv_out_size(wd, kw, sw, pw)
    dt = np.result_type(x.dtype, w.filters.dtype)
    cols = im2col(x.astype(dt, copy=False), (kh, kw), stride, pad)
    k = cols.shape[0] // g
    a = w.filters.astype(dt, copy=False).reshape(g, w.out_channels // g, k)
    b = cols.reshape(g, k, cols.shape[1])
    y = gemm_batched(a, b)
    y = y.reshape(w.out_channels, n, ho, wo).transpose(1, 0, 2, 3)
    if w.bias is not None:
        y = y + w.bias.astype(dt, copy=False).reshape(1, -1, 1, 1)
    y = np.ascontiguousarray(y)
    return (y, cols) if return_cols else y


def conv_grouped_backward(x: np.ndarray, w: ConvWeights, grad_out: np.ndarray,
                          stride=1, pad=0, cols: np.ndarray | None = None):
    """Gradients ``(grad_x, grad_filters, grad_bias)`` of the grouped convolution.

    ``grad_bias`` is ``None`` when the layer carries no bias.  ``cols`` may
    be the lowering returned by the forward call.
    """
    _check_conv(x, w)
    g = w.groups
    kh, kw = w.kernel
    n = x.shape[0]
    c2 = w.out_channels
    dt = np.result_type(x.dtype, w.filters.dtype, grad_out.dtype)
    if cols is None:
        cols = im2col(x.astype(dt, copy=False), (kh, kw), stride, pad)
    k = cols.shape[0] // g
    npix = cols.shape[1]
    if grad_out.shape[0] != n or grad_out.shape[1] != c2 or grad_out.shape[2] * grad_out.shape[3] * n != npix:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match the forward output")
    go = np.ascontiguousarray(grad_out.astype(dt, copy=False).transpose(1, 0, 2, 3)).reshape(g, c2 // g, npix)
    cols_t = np.ascontiguousarray(cols.reshape(g, k, npix).transpose(0, 2, 1))
    gw = gemm_batched(go, cols_t).reshape(w.filters.shape)
    w_t = np.ascontiguousarray(w.filters.astype(dt, copy=False).reshape(g, c2 // g, k).transpose(0, 2, 1))
    gcols = gemm_batched(w_t, go).reshape(g * k, npix)
    gx = col2im(gcols, x.shape, (kh, kw), stride, pad)
    gb = grad_out.sum(axis=(0, 2, 3)).astype(dt) if w.bias is not None else None
    return gx, gw, gb


def embed_block_diag(filters: np.ndarray, groups: int) -> np.ndarray:
    """Expand grouped filters to an equivalent dense ``(c_out, c_in, kh, kw)`` tensor.

    Weights connecting an output channel to input channels outside its
    group are zero.
    """
    c2, cg, kh, kw = filters.shape
    if c2 % groups:
        raise ConfigError(f"{c2} filters not divisible by {groups} groups")
    og = c2 // groups
    full = np.zeros((c2, cg * groups, kh, kw), dtype=filters.dtype)
    for i in range(groups):
        full[i * og:(i + 1) * og, i * cg:(i + 1) * cg] = filters[i * og:(i + 1) * og]
    return full


def extract_block_diag(full: np.ndarray, groups: int, strict: bool = True) -> np.ndarray:
    """Inverse of :func:`embed_block_diag`.

    With ``strict`` a non-zero weight outside the diagonal blocks raises
    ``ValueError``; otherwise such weights are dropped.
    """
    c2, c1, kh, kw = full.shape
    if c2 % groups or c1 % groups:
        raise ConfigError(f"{c2}x{c1} filters do not split into {groups} groups")
    og, cg = c2 // groups, c1 // groups
    out = np.empty((c2, cg, kh, kw), dtype=full.dtype)
    off = full.copy()
    for i in range(groups):
        out[i * og:(i + 1) * og] = full[i * og:(i + 1) * og, i * cg:(i + 1) * cg]
        off[i * og:(i + 1) * og, i * cg:(i + 1) * cg] = 0
    if strict and np.any(off != 0):
        o, c = np.argwhere(off != 0)[0][:2]
        raise ValueError(f"non-zero weight outside the diagonal blocks at filter {o}, input channel {c}")
    return out


# --------------------------------------------------------------------------
# pooling

def _windows(xp: np.ndarray, kh, kw, sh, sw, ho, wo) -> np.ndarray:
    return np.stack([xp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]
                     for i in range(kh) for j in range(kw)])


def max_pool_forward(x: np.ndarray, kernel, stride=None, pad=0):
    """Max pooling; padded cells never win.  Returns ``(y, argmax)``."""
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    ph, pw = _pair(pad)
    if ph >= kh or pw >= kw:
        raise ConfigError("pooling pad must be smaller than the window")
    n, c, h, w = x.shape
    ho, wo = conv_out_size(h, kh, sh, ph), conv_out_size(w, kw, sw, pw)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=-np.inf) if (ph or pw) else x
    win = _windows(xp, kh, kw, sh, sw, ho, wo)
    idx = win.argmax(axis=0)
    y = np.take_along_axis(win, idx[None], axis=0)[0]
    return y, idx


def max_pool_backward(grad_out: np.ndarray, argmax: np.ndarray, x_shape, kernel, stride=None, pad=0):
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    ph, pw = _pair(pad)
    n, c, h, w = x_shape
    ho, wo = grad_out.shape[2:]
    gxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=grad_out.dtype)
    t = 0
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += np.where(argmax == t, grad_out, 0)
            t += 1
    return gxp[:, :, ph:ph + h, pw:pw + w]


def _avg_divisor(shape, kh, kw, sh, sw, ph, pw, ho, wo, count_include_pad, dtype):
    if count_include_pad or not (ph or pw):
        return dtype.type(kh * kw)
    ones = np.pad(np.ones((1, 1) + tuple(shape[2:]), dtype=dtype), ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    return _windows(ones, kh, kw, sh, sw, ho, wo).sum(axis=0)


def avg_pool_forward(x: np.ndarray, kernel, stride=None, pad=0, count_include_pad: bool = True):
    """Average pooling over zero-padded windows.

    With ``count_include_pad=False`` each window is divided by the number of
    real (non-padding) cells it covers.
    """
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    ph, pw = _pair(pad)
    n, c, h, w = x.shape
    ho, wo = conv_out_size(h, kh, sh, ph), conv_out_size(w, kw, sw, pw)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    div = _avg_divisor(x.shape, kh, kw, sh, sw, ph, pw, ho, wo, count_include_pad, x.dtype)
    return _windows(xp, kh, kw, sh, sw, ho, wo).sum(axis=0) / div


def avg_pool_backward(grad_out: np.ndarray, x_shape, kernel, stride=None, pad=0,
                      count_include_pad: bool = True):
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    ph, pw = _pair(pad)
    n, c, h, w = x_shape
    ho, wo = grad_out.shape[2:]
    div = _avg_divisor(x_shape, kh, kw, sh, sw, ph, pw, ho, wo, count_include_pad, grad_out.dtype)
    g = grad_out / div
    gxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=grad_out.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += g
    return gxp[:, :, ph:ph + h, pw:pw + w]


def global_avg_pool_forward(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(grad_out: np.ndarray, x_shape) -> np.ndarray:
    h, w = x_shape[2], x_shape[3]
    return np.broadcast_to(grad_out / (h * w), x_shape).copy()


# --------------------------------------------------------------------------
# batch normalization

@dataclass
class BatchNormState:
    """Per-channel running statistics and the optional learned affine map."""

    running_mean: np.ndarray
    running_var: np.ndarray
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @classmethod
    def create(cls, channels: int, affine: bool = True, dtype=np.float32) -> "BatchNormState":
        return cls(
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            gamma=np.ones(channels, dtype=dtype) if affine else None,
            beta=np.zeros(channels, dtype=dtype) if affine else None,
        )

    def __post_init__(self) -> None:
        if self.eps <= 0:
            raise ConfigError("batchnorm eps must be positive")
        if np.any(self.running_var < 0):
            raise ConfigError("running variance must be non-negative")

    @property
    def channels(self) -> int:
        return self.running_mean.shape[0]


@dataclass
class _BNCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray | None
    train: bool = True


def batchnorm_forward(x: np.ndarray, state: BatchNormState, mode: str = "train"):
    """Normalize per channel.  Returns ``(y, cache)``.

    ``train`` uses batch statistics and folds them into the running
    estimates (``running = momentum * running + (1 - momentum) * batch``,
    unbiased variance); ``eval`` uses the running estimates.
    """
    if x.shape[1] != state.channels:
        raise ShapeError(f"batchnorm expects {state.channels} channels, got {x.shape[1]}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = x.size // x.shape[1]
        unbiased = var * (m / (m - 1)) if m > 1 else var
        mom = state.momentum
        state.running_mean = (mom * state.running_mean + (1 - mom) * mean).astype(state.running_mean.dtype)
        state.running_var = (mom * state.running_var + (1 - mom) * unbiased).astype(state.running_var.dtype)
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
    xhat = (x - mean.astype(x.dtype).reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    y = xhat
    if state.gamma is not None:
        y = xhat * state.gamma.astype(x.dtype).reshape(1, -1, 1, 1) + state.beta.astype(x.dtype).reshape(1, -1, 1, 1)
    return y, _BNCache(xhat, inv_std, state.gamma, mode == "train")


def batchnorm_backward(grad_out: np.ndarray, cache: _BNCache):
    """Returns ``(grad_x, grad_gamma, grad_beta)``; the latter two are ``None``
    without an affine map."""
    xhat, inv_std = cache.xhat, cache.inv_std
    if cache.gamma is not None:
        ggamma = (grad_out * xhat).sum(axis=(0, 2, 3))
        gbeta = grad_out.sum(axis=(0, 2, 3))
        gxhat = grad_out * cache.gamma.astype(grad_out.dtype).reshape(1, -1, 1, 1)
    else:
        ggamma = gbeta = None
        gxhat = grad_out
    if not cache.train:
        return gxhat * inv_std.reshape(1, -1, 1, 1), ggamma, gbeta
    mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True)
    mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
    gx = (gxhat - mean_g - xhat * mean_gx) * inv_std.reshape(1, -1, 1, 1)
    return gx, ggamma, gbeta


# --------------------------------------------------------------------------
# classifier head

def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Affine map of flattened inputs: ``(n, ...) -> (n, out)``."""
    xf = x.reshape(x.shape[0], -1)
    if xf.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear expects {weight.shape[1]} features, got {xf.shape[1]}")
    dt = np.result_type(x.dtype, weight.dtype)
    y = gemm(np.ascontiguousarray(xf, dtype=dt), np.ascontiguousarray(weight.T, dtype=dt))
    if bias is not None:
        y += bias.astype(dt)
    return y


def linear_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray, has_bias: bool = True):
    xf = x.reshape(x.shape[0], -1)
    dt = np.result_type(x.dtype, weight.dtype, grad_out.dtype)
    go = np.ascontiguousarray(grad_out, dtype=dt)
    gx = gemm(go, np.ascontiguousarray(weight, dtype=dt)).reshape(x.shape)
    gw = gemm(np.ascontiguousarray(go.T), np.ascontiguousarray(xf, dtype=dt))
    gb = go.sum(axis=0) if has_bias else None
    return gx, gw, gb


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean negative log-likelihood and its gradient ``(softmax - onehot) / n``."""
    logits = logits.reshape(logits.shape[0], -1)
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(n), labels]))
    grad = np.exp(z - logsum[:, None])
    grad[np.arange(n), labels] -= 1
    return loss, (grad / n).astype(logits.dtype)
