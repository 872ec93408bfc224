"""Neural-network operations and thin layer wrappers.

Convolution is im2col plus one BLAS matmul; the column matrix is kept
alive for the weight gradient. Max pooling scatters gradients back with
a one-hot buffer and k*k strided slice adds, which handles overlapping
windows and keeps everything vectorized.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, ParameterError
from .tensor import Tensor, _accumulate, _from_op, default_dtype, sigmoid


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    """Gaussian init scaled for ReLU-family activations: std = sqrt(2 / fan_in)."""
    if fan_in < 1:
        raise ParameterError(f"fan_in must be positive, got {fan_in}")
    std = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=shape).astype(default_dtype())


def _conv_geometry(h: int, w: int, kh: int, kw: int, stride: int, padding: int):
    if stride < 1:
        raise ParameterError(f"stride must be at least 1, got {stride}")
    if padding < 0:
        raise ParameterError(f"padding must be non-negative, got {padding}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise DimensionError(
            f"kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}"
        )
    return oh, ow


def _im2col(xp: np.ndarray, kh: int, kw: int, oh: int, ow: int, stride: int) -> np.ndarray:
    """(N,C,Hp,Wp) -> (N*OH*OW, C*KH*KW) patch matrix (copies once)."""
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return view.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N,C,H,W) with (F,C,KH,KW) kernels plus bias (F,)."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise DimensionError(f"kernel expects {cw} input channels, input has {c}")
    if b.shape != (f,):
        raise DimensionError(f"bias shape {b.shape} does not match {f} filters")
    oh, ow = _conv_geometry(h, wd, kh, kw, stride, padding)

    def pad(arr):
        if padding == 0:
            return arr
        return np.pad(arr, ((0, 0), (0, 0), (padding, padding), (padding, padding)))

    xp = pad(x.data)
    cols = _im2col(xp, kh, kw, oh, ow, stride)
    wflat = w.data.reshape(f, -1)
    out2 = cols @ wflat.T + b.data
    out_data = out2.reshape(n, oh, ow, f).transpose(0, 3, 1, 2)

    def bwd(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        if b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            # cols is retained from the forward pass; at these model sizes the
            # memory cost is far below the cost of rebuilding it
            _accumulate(w, (g2.T @ cols).reshape(w.data.shape))
        if x.requires_grad:
            gcols = (g2 @ wflat).reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=g.dtype)
            for ki in range(kh):
                for kj in range(kw):
                    dxp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += gcols[:, :, ki, kj]
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + wd]
            _accumulate(x, dxp)

    return _from_op(out_data, (x, w, b), bwd)


def maxpool2d(x: Tensor, ksize: int, stride: int | None = None) -> Tensor:
    """Max over ksize*ksize windows; ties go to the first element in row-major
    window order, so the backward pass routes each window's gradient to exactly
    one input position."""
    if ksize < 1:
        raise ParameterError(f"pool size must be at least 1, got {ksize}")
    stride = ksize if stride is None else stride
    if stride < 1:
        raise ParameterError(f"stride must be at least 1, got {stride}")
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects a 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    oh = (h - ksize) // stride + 1
    ow = (w - ksize) // stride + 1
    if oh < 1 or ow < 1:
        raise DimensionError(f"pool window {ksize} does not fit input {h}x{w}")
    sn, sc, sh, sw = x.data.strides
    view = np.lib.stride_tricks.as_strided(
        x.data,
        shape=(n, c, oh, ow, ksize, ksize),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    windows = view.reshape(n, c, oh, ow, ksize * ksize)
    arg = windows.argmax(axis=4)  # argmax returns the first maximum
    out_data = np.take_along_axis(windows, arg[..., None], axis=4)[..., 0]

    def bwd(g):
        buf = np.zeros((n, c, oh, ow, ksize * ksize), dtype=g.dtype)
        np.put_along_axis(buf, arg[..., None], g[..., None], axis=4)
        buf = buf.reshape(n, c, oh, ow, ksize, ksize)
        dx = np.zeros_like(x.data)
        for ki in range(ksize):
            for kj in range(ksize):
                dx[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += buf[:, :, :, :, ki, kj]
        _accumulate(x, dx)

    return _from_op(out_data, (x,), bwd)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map of (N,D) rows: x @ w + b with w (D,M), b (M,)."""
    if x.ndim != 2 or w.ndim != 2:
        raise DimensionError(f"dense expects 2-d input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise DimensionError(f"dense input width {x.shape[1]} does not match weight rows {w.shape[0]}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"bias shape {b.shape} does not match {w.shape[1]} outputs")
    out_data = x.data @ w.data + b.data

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, g @ w.data.T)
        if w.requires_grad:
            _accumulate(w, x.data.T @ g)
        if b.requires_grad:
            _accumulate(b, g.sum(axis=0))

    return _from_op(out_data, (x, w, b), bwd)


BATCHNORM_EPS = 1e-5
BATCHNORM_MOMENTUM = 0.9


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BATCHNORM_MOMENTUM,
    eps: float = BATCHNORM_EPS,
) -> Tensor:
    """Per-channel normalization of (N,C,H,W).

    Training mode standardizes with biased batch statistics, backpropagates
    through them, and updates the running estimates in place. Eval mode uses
    the running estimates as constants.
    """
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d expects a 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"scale/shift must have shape ({c},)")
    if running_mean.shape != (c,) or running_var.shape != (c,):
        raise DimensionError(f"running statistics must have shape ({c},)")
    m = n * h * w
    if training and m < 2:
        raise ParameterError("batch statistics need at least two values per channel")

    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))  # biased
        running_mean[:] = momentum * running_mean + (1.0 - momentum) * mu
        running_var[:] = momentum * running_var + (1.0 - momentum) * var
    else:
        mu = running_mean.astype(x.data.dtype)
        var = running_var.astype(x.data.dtype)

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bwd(g):
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxh = g * gamma.data[None, :, None, None]
            if training:
                s1 = gxh.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (gxh * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = (inv[None, :, None, None] / m) * (m * gxh - s1 - xhat * s2)
            else:
                gx = gxh * inv[None, :, None, None]
            _accumulate(x, gx)

    return _from_op(out_data, (x, gamma, beta), bwd)


def smooth_l1(x: Tensor) -> Tensor:
    """Elementwise Huber-style penalty: 0.5*x^2 inside |x|<1, |x|-0.5 outside."""
    ax = np.abs(x.data)
    inside = ax < 1.0
    out_data = np.where(inside, 0.5 * x.data * x.data, ax - 0.5)

    def bwd(g):
        _accumulate(x, g * np.where(inside, x.data, np.sign(x.data)))

    return _from_op(out_data, (x,), bwd)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on raw logits, numerically stable."""
    t = np.asarray(targets, dtype=logits.data.dtype)
    if t.shape != logits.shape:
        raise DimensionError(f"targets shape {t.shape} does not match logits {logits.shape}")
    z = logits.data
    out_data = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))

    def bwd(g):
        sig = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        _accumulate(logits, g * (sig - t))

    return _from_op(out_data, (logits,), bwd)


class Conv2d:
    """Convolution layer owning its kernel and bias tensors."""

    def __init__(self, name: str, cin: int, cout: int, ksize: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, weight_std: float | None = None):
        self.name = name
        self.stride = stride
        self.padding = padding
        if weight_std is None:
            wdata = he_normal(rng, (cout, cin, ksize, ksize), cin * ksize * ksize)
        else:
            wdata = rng.normal(0.0, weight_std, size=(cout, cin, ksize, ksize)).astype(default_dtype())
        self.w = Tensor(wdata, requires_grad=True, dtype=wdata.dtype)
        self.b = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, self.stride, self.padding)

    def tensors(self) -> dict[str, Tensor]:
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}


class BatchNorm2d:
    """Batch normalization layer; running statistics ride along as
    non-trainable tensors so checkpoints capture them."""

    def __init__(self, name: str, channels: int):
        self.name = name
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels))
        self.running_var = Tensor(np.ones(channels))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batchnorm2d(x, self.gamma, self.beta,
                           self.running_mean.data, self.running_var.data, training)

    def tensors(self) -> dict[str, Tensor]:
        return {
            f"{self.name}.gamma": self.gamma,
            f"{self.name}.beta": self.beta,
            f"{self.name}.running_mean": self.running_mean,
            f"{self.name}.running_var": self.running_var,
        }


class Dense:
    """Fully connected layer; ``zero_init`` starts at an exact constant map
    (used by regression heads that must begin at a known output)."""

    def __init__(self, name: str, din: int, dout: int, rng: np.random.Generator,
                 zero_init: bool = False, bias_init: np.ndarray | None = None):
        self.name = name
        if zero_init:
            wdata = np.zeros((din, dout), dtype=default_dtype())
        else:
            wdata = he_normal(rng, (din, dout), din)
        bdata = np.zeros(dout) if bias_init is None else np.asarray(bias_init, dtype=default_dtype())
        if bdata.shape != (dout,):
            raise DimensionError(f"bias_init shape {bdata.shape} does not match {dout} outputs")
        self.w = Tensor(wdata, requires_grad=True, dtype=wdata.dtype)
        self.b = Tensor(bdata, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return dense(x, self.w, self.b)

    def tensors(self) -> dict[str, Tensor]:
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}
