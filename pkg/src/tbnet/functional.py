"""Differentiable primitives for the network family.

All image tensors are NCHW. Convolutions use zero padding. Kernels are plain
numpy: a convolution is evaluated as one small matrix product per kernel
offset, which keeps memory at the size of the activations (no im2col buffer)
and makes the summation order fixed, so results are bit-reproducible.
"""

from __future__ import annotations

import numpy as np

from .tensor import Function, Tensor, as_tensor, relu, sigmoid  # noqa: F401  (re-export)

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


def conv_output_size(size: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _offset_slice(i: int, n_out: int, stride: int) -> slice:
    return slice(i, i + stride * (n_out - 1) + 1, stride)


# -- convolution ----------------------------------------------------------------
class Conv2d(Function):
    def forward(self, x, w, b=None, *, stride=1, padding=0, groups=1):
        n, ci, h, wd = x.shape
        co, cig, kh, kw = w.shape
        ho = conv_output_size(h, kh, stride, padding)
        wo = conv_output_size(wd, kw, stride, padding)
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        self.xp, self.w = xp, w
        self.cfg = (stride, padding, groups, ho, wo, x.shape, b is not None)
        depthwise = groups == ci and co == ci
        out = np.zeros((n, co, ho, wo), dtype=x.dtype)
        if depthwise:
            for i in range(kh):
                for j in range(kw):
                    xs = xp[:, :, _offset_slice(i, ho, stride), _offset_slice(j, wo, stride)]
                    out += xs * w[:, 0, i, j].reshape(1, co, 1, 1)
        else:
            g, cog = groups, co // groups
            acc = out.reshape(n, g, cog, ho * wo)
            for i in range(kh):
                for j in range(kw):
                    xs = xp[:, :, _offset_slice(i, ho, stride), _offset_slice(j, wo, stride)]
                    xs = xs.reshape(n, g, cig, ho * wo)
                    acc += np.matmul(w[:, :, i, j].reshape(g, cog, cig), xs)
        if b is not None:
            out += b.reshape(1, co, 1, 1)
        return out

    def backward(self, grad):
        stride, padding, groups, ho, wo, xshape, has_bias = self.cfg
        xp, w = self.xp, self.w
        n, ci, h, wd = xshape
        co, cig, kh, kw = w.shape
        need_x = self.parents[0].requires_grad
        gw = np.zeros_like(w)
        gxp = np.zeros_like(xp) if need_x else None
        if groups == ci and co == ci:
            for i in range(kh):
                for j in range(kw):
                    si, sj = _offset_slice(i, ho, stride), _offset_slice(j, wo, stride)
                    gw[:, 0, i, j] = (grad * xp[:, :, si, sj]).sum(axis=(0, 2, 3))
                    if need_x:
                        gxp[:, :, si, sj] += grad * w[:, 0, i, j].reshape(1, co, 1, 1)
        else:
            g, cog = groups, co // groups
            gr = grad.reshape(n, g, cog, ho * wo)
            for i in range(kh):
                for j in range(kw):
                    si, sj = _offset_slice(i, ho, stride), _offset_slice(j, wo, stride)
                    xs = xp[:, :, si, sj].reshape(n, g, cig, ho * wo)
                    gw[:, :, i, j] = np.matmul(gr, xs.transpose(0, 1, 3, 2)).sum(axis=0).reshape(co, cig)
                    if need_x:
                        wt = w[:, :, i, j].reshape(g, cog, cig).transpose(0, 2, 1)
                        gxp[:, :, si, sj] += np.matmul(wt, gr).reshape(n, ci, ho, wo)
        gx = None
        if need_x:
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
            gx = np.ascontiguousarray(gx)
        if has_bias:
            return gx, gw, grad.sum(axis=(0, 2, 3))
        return gx, gw


def conv2d(input, weight, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation over an NCHW tensor with zero padding.

    ``weight`` has shape ``(Co, Ci // groups, kh, kw)``.
    """
    x, w = as_tensor(input), as_tensor(weight)
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D NCHW, got shape {x.shape}")
    if w.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-D (Co, Ci/g, kh, kw), got shape {w.shape}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be >= 0, got {padding}")
    if groups < 1:
        raise ValueError(f"conv2d: groups must be >= 1, got {groups}")
    n, ci, h, wd = x.shape
    co, cig, kh, kw = w.shape
    if ci % groups:
        raise ValueError(f"conv2d: input channels {ci} not divisible by groups {groups}")
    if co % groups:
        raise ValueError(f"conv2d: output channels {co} not divisible by groups {groups}")
    if cig * groups != ci:
        raise ShapeError(
            f"conv2d: input channel dimension is {ci} but weight expects "
            f"{cig * groups} (weight.shape[1]={cig} x groups={groups})"
        )
    if conv_output_size(h, kh, stride, padding) < 1:
        raise ShapeError(f"conv2d: kernel height {kh} exceeds padded input height {h + 2 * padding}")
    if conv_output_size(wd, kw, stride, padding) < 1:
        raise ShapeError(f"conv2d: kernel width {kw} exceeds padded input width {wd + 2 * padding}")
    if w.dtype != x.dtype:
        raise TypeError(f"conv2d: dtype mismatch input {x.dtype} vs weight {w.dtype}")
    args = (x, w)
    if bias is not None:
        b = as_tensor(bias, like=x)
        if b.shape != (co,):
            raise ShapeError(f"conv2d: bias must have shape ({co},), got {b.shape}")
        args = (x, w, b)
    return Conv2d.apply(*args, stride=stride, padding=padding, groups=groups)


def depthwise_conv2d(input, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel spatial convolution; ``weight`` is ``(C, 1, kh, kw)``."""
    x = as_tensor(input)
    if x.ndim != 4:
        raise ShapeError(f"depthwise_conv2d: input must be 4-D NCHW, got shape {x.shape}")
    return conv2d(x, weight, bias, stride=stride, padding=padding, groups=x.shape[1])


def pointwise_conv2d(input, weight, bias=None, groups: int = 1) -> Tensor:
    """1x1 convolution mixing channels at each pixel."""
    w = as_tensor(weight)
    if w.ndim == 4 and w.shape[2:] != (1, 1):
        raise ShapeError(f"pointwise_conv2d: kernel must be 1x1, got {w.shape[2:]}")
    return conv2d(input, w, bias, stride=1, padding=0, groups=groups)


# -- pooling / resampling ---------------------------------------------------------
class MaxPool2d(Function):
    def forward(self, x, kernel=2, stride=2):
        n, c, h, w = x.shape
        ho = conv_output_size(h, kernel, stride)
        wo = conv_output_size(w, kernel, stride)
        win = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(2, 3))
        win = win[:, :, ::stride, ::stride][:, :, :ho, :wo].reshape(n, c, ho, wo, kernel * kernel)
        arg = win.argmax(axis=-1)  # first occurrence on ties
        out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        rows = np.arange(ho).reshape(1, 1, ho, 1) * stride + arg // kernel
        cols = np.arange(wo).reshape(1, 1, 1, wo) * stride + arg % kernel
        base = np.arange(n * c).reshape(n, c, 1, 1) * (h * w)
        self.flat_idx = (base + rows * w + cols).ravel()
        self.xshape = x.shape
        return np.ascontiguousarray(out)

    def backward(self, grad):
        size = int(np.prod(self.xshape))
        gx = np.bincount(self.flat_idx, weights=grad.ravel(), minlength=size)
        return gx.astype(grad.dtype).reshape(self.xshape)


def maxpool2d(input, kernel: int, stride: int | None = None) -> Tensor:
    x = as_tensor(input)
    stride = kernel if stride is None else stride
    if kernel < 1 or stride < 1:
        raise ValueError(f"maxpool2d: kernel and stride must be >= 1, got {kernel}, {stride}")
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: input must be 4-D NCHW, got shape {x.shape}")
    if kernel > x.shape[2] or kernel > x.shape[3]:
        raise ShapeError(f"maxpool2d: window {kernel} larger than input {x.shape[2]}x{x.shape[3]}")
    return MaxPool2d.apply(x, kernel=kernel, stride=stride)


class NearestUpsample(Function):
    def forward(self, x, factor=2):
        self.factor = factor
        return x.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward(self, grad):
        f = self.factor
        n, c, h, w = grad.shape
        return grad.reshape(n, c, h // f, f, w // f, f).sum(axis=(3, 5))


def nearest_upsample(input, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError(f"nearest_upsample: factor must be >= 1, got {factor}")
    return NearestUpsample.apply(input, factor=factor)


class GlobalAvgPool(Function):
    def forward(self, x):
        self.xshape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        n, c, h, w = self.xshape
        g = grad.reshape(n, c, 1, 1) * grad.dtype.type(1.0 / (h * w))
        return np.broadcast_to(g, self.xshape).copy()


def global_avg_pool(input) -> Tensor:
    x = as_tensor(input)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: input must be 4-D NCHW, got shape {x.shape}")
    return GlobalAvgPool.apply(x)


# -- dense / activations ----------------------------------------------------------
class Dense(Function):
    def forward(self, x, w, b=None):
        self.x, self.w, self.has_bias = x, w, b is not None
        out = x @ w.T
        if b is not None:
            out += b
        return out

    def backward(self, grad):
        gx = grad @ self.w
        gw = grad.T @ self.x
        if self.has_bias:
            return gx, gw, grad.sum(axis=0)
        return gx, gw


def dense(input, weight, bias=None) -> Tensor:
    """Fully-connected layer: ``input @ weight.T + bias``."""
    x, w = as_tensor(input), as_tensor(weight)
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"dense: expected 2-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"dense: input features {x.shape[1]} != weight in-features {w.shape[1]}")
    if bias is None:
        return Dense.apply(x, w)
    b = as_tensor(bias, like=x)
    if b.shape != (w.shape[0],):
        raise ShapeError(f"dense: bias must have shape ({w.shape[0]},), got {b.shape}")
    return Dense.apply(x, w, b)


class Softmax(Function):
    def forward(self, x):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        self.out = e / e.sum(axis=1, keepdims=True)
        return self.out

    def backward(self, grad):
        s = self.out
        return s * (grad - (grad * s).sum(axis=1, keepdims=True))


def softmax(input) -> Tensor:
    x = as_tensor(input)
    if x.ndim != 2:
        raise ShapeError(f"softmax: expected (N, K) input, got {x.shape}")
    return Softmax.apply(x)


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


class SoftmaxCrossEntropy(Function):
    def forward(self, logits, labels=None):
        n = logits.shape[0]
        logp = log_softmax_np(logits)
        self.p = np.exp(logp)
        self.labels = labels
        return np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.dtype)

    def backward(self, grad):
        n = self.p.shape[0]
        g = self.p.copy()
        g[np.arange(n), self.labels] -= 1
        return g * (grad / n)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    x = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if x.ndim != 2 or labels.shape[0] != x.shape[0]:
        raise ShapeError(f"cross entropy: logits {x.shape} vs {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= x.shape[1]):
        bad = labels[(labels < 0) | (labels >= x.shape[1])][0]
        raise ValueError(f"cross entropy: label {bad} outside [0, {x.shape[1] - 1}]")
    return SoftmaxCrossEntropy.apply(x, labels=labels)


# -- batch normalization ----------------------------------------------------------
class BatchNorm2d(Function):
    def forward(self, x, gamma, beta, running_mean=None, running_var=None,
                training=True, momentum=BN_MOMENTUM, eps=BN_EPS):
        c = x.shape[1]
        if training:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = x.size // c
            if running_mean is not None:
                unbiased = var * (m / max(m - 1, 1))
                running_mean *= momentum
                running_mean += (1 - momentum) * mean
                running_var *= momentum
                running_var += (1 - momentum) * unbiased
        else:
            mean, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
        inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
        xhat = (x - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        self.xhat, self.inv_std, self.gamma, self.training = xhat, inv_std, gamma, training
        return xhat * gamma.reshape(1, c, 1, 1) + beta.reshape(1, c, 1, 1)

    def backward(self, grad):
        xhat, inv_std, gamma = self.xhat, self.inv_std, self.gamma
        c = grad.shape[1]
        gbeta = grad.sum(axis=(0, 2, 3))
        ggamma = (grad * xhat).sum(axis=(0, 2, 3))
        dxhat = grad * gamma.reshape(1, c, 1, 1)
        if self.training:
            m = grad.size // c
            gx = (inv_std.reshape(1, c, 1, 1) / m) * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = dxhat * inv_std.reshape(1, c, 1, 1)
        return gx, ggamma, gbeta


def batchnorm2d(x, gamma, beta, running_mean: np.ndarray | None = None,
                running_var: np.ndarray | None = None, training: bool = True,
                momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch moments are used and, when running buffers
    are given, they are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    Inference mode normalizes with the running buffers and mutates nothing.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d: input must be 4-D NCHW, got shape {x.shape}")
    if not training and (running_mean is None or running_var is None):
        raise ValueError("batchnorm2d: inference mode needs running statistics")
    return BatchNorm2d.apply(x, as_tensor(gamma, like=x), as_tensor(beta, like=x),
                             running_mean=running_mean, running_var=running_var,
                             training=training, momentum=momentum, eps=eps)
