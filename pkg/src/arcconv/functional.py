"""Differentiable neural-network primitives on top of `arcconv.tensor`."""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ConfigurationError, DimensionError, Function, Tensor

LAYER_NORM_EPS = 1e-6


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _check_conv_args(x_shape, w_shape, stride, padding, groups):
    if len(x_shape) != 4 or len(w_shape) != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x_shape} and {w_shape}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"invalid stride={stride} / padding={padding}")
    if groups < 1 or x_shape[1] % groups or w_shape[0] % groups:
        raise ConfigurationError(
            f"groups={groups} must divide input channels {x_shape[1]} and output channels {w_shape[0]}"
        )
    if x_shape[1] // groups != w_shape[1]:
        raise DimensionError(
            f"input has {x_shape[1]} channels but weight expects {w_shape[1]} per group x {groups} groups"
        )
    k_h, k_w = w_shape[2:]
    if k_h > x_shape[2] + 2 * padding or k_w > x_shape[3] + 2 * padding:
        raise DimensionError(f"kernel {k_h}x{k_w} larger than padded input {x_shape[2:]} (padding {padding})")


class Conv2d(Function):
    """Grouped 2-D cross-correlation.

    Stride 1 uses a shift-and-GEMM scheme: the padded input is flattened per
    channel so that each of the k*k taps is one GEMM over a shifted slice
    (rows that wrap past the right edge are computed and then discarded).
    Strided convolutions use im2col with a batched GEMM per group.
    """

    def forward(self, x, w, stride=1, padding=0, groups=1):
        _check_conv_args(x.shape, w.shape, stride, padding, groups)
        self.stride, self.padding, self.groups = stride, padding, groups
        self.x_shape, self.w_shape = x.shape, w.shape
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        if stride == 1:
            return self._forward_shift(xp, w)
        return self._forward_im2col(xp, w)

    def backward(self, grad):
        if self.stride == 1:
            grad_x, grad_w = self._backward_shift(grad)
        else:
            grad_x, grad_w = self._backward_im2col(grad)
        return grad_x, grad_w

    # -- stride 1
    def _forward_shift(self, xp, w):
        n, c, hp, wp = xp.shape
        o, cg, kh, kw = w.shape
        g, og = self.groups, o // self.groups
        ho, wo = hp - kh + 1, wp - kw + 1
        m = n * hp * wp
        flat = xp.reshape(1, c, m) if n == 1 else xp.transpose(1, 0, 2, 3)
        flat = np.ascontiguousarray(flat).reshape(g, cg, m)
        span = m - ((kh - 1) * wp + kw - 1)
        taps = np.ascontiguousarray(w.reshape(g, og, cg, kh * kw).transpose(3, 0, 1, 2))
        out = np.zeros((g, og, m), dtype=np.result_type(xp, w))
        offsets = [(t // kw) * wp + t % kw for t in range(kh * kw)]
        self.cols = None
        if cg == 1 and og == 1:
            # depthwise: gather the k*k shifted rows once, then one batched [1 x kk] @ [kk x span] GEMM
            self.cols = np.stack([flat[:, 0, off:off + span] for off in offsets], axis=1)
            np.matmul(w.reshape(g, 1, kh * kw), self.cols, out=out[:, :, :span])
        else:
            tmp = np.empty((g, og, span), dtype=out.dtype)
            for t, off in enumerate(offsets):
                np.matmul(taps[t], flat[:, :, off:off + span], out=tmp)
                out[:, :, :span] += tmp
        self.flat, self.taps, self.span, self.padded = flat, taps, span, (hp, wp)
        y = out.reshape(o, n, hp, wp)[:, :, :ho, :wo]
        return np.ascontiguousarray(y.transpose(1, 0, 2, 3))

    def _backward_shift(self, grad):
        n, c, h, wd = self.x_shape
        o, cg, kh, kw = self.w_shape
        g, og, p = self.groups, o // self.groups, self.padding
        hp, wp = self.padded
        ho, wo = grad.shape[2:]
        m, span = n * hp * wp, self.span
        gfull = np.zeros((o, n, hp, wp), dtype=grad.dtype)
        gfull[:, :, :ho, :wo] = grad.transpose(1, 0, 2, 3)
        gq = gfull.reshape(g, og, m)[:, :, :span]
        grad_taps = np.empty((kh * kw, g, og, cg), dtype=grad.dtype)
        want_x = self.needs_input_grad[0]
        if want_x:
            gflat = np.zeros((g, cg, m), dtype=grad.dtype)
            tmp = np.empty((g, cg, span), dtype=grad.dtype)
        depthwise = self.cols is not None
        if depthwise:
            grad_taps[:, :, 0, 0] = np.matmul(gq, self.cols.transpose(0, 2, 1))[:, 0, :].T
        for t in range(kh * kw):
            off = (t // kw) * wp + t % kw
            if not depthwise:
                shifted = self.flat[:, :, off:off + span]
                np.matmul(gq, shifted.transpose(0, 2, 1), out=grad_taps[t])
            if want_x:
                if depthwise:
                    np.multiply(self.taps[t], gq, out=tmp)
                else:
                    np.matmul(self.taps[t].transpose(0, 2, 1), gq, out=tmp)
                gflat[:, :, off:off + span] += tmp
        grad_w = np.ascontiguousarray(grad_taps.transpose(1, 2, 3, 0)).reshape(self.w_shape)
        if not want_x:
            return None, grad_w
        gx = gflat.reshape(c, n, hp, wp)[:, :, p:p + h, p:p + wd].transpose(1, 0, 2, 3)
        return np.ascontiguousarray(gx), grad_w

    # -- stride > 1
    def _forward_im2col(self, xp, w):
        n, c, h, wd = self.x_shape
        o, cg, kh, kw = w.shape
        stride, padding, groups = self.stride, self.padding, self.groups
        ho = conv_output_size(h, kh, stride, padding)
        wo = conv_output_size(wd, kw, stride, padding)
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        win = win.reshape(n, groups, cg, ho, wo, kh, kw)
        cols = win.transpose(1, 0, 3, 4, 2, 5, 6).reshape(groups, n * ho * wo, cg * kh * kw)
        wg = w.reshape(groups, o // groups, cg * kh * kw)
        out = np.matmul(cols, wg.transpose(0, 2, 1))
        self.cols, self.wg, self.meta = cols, wg, (xp.shape, ho, wo)
        out = out.reshape(groups, n, ho, wo, o // groups).transpose(1, 0, 4, 2, 3)
        return np.ascontiguousarray(out).reshape(n, o, ho, wo)

    def _backward_im2col(self, grad):
        xp_shape, ho, wo = self.meta
        stride, padding, groups = self.stride, self.padding, self.groups
        n = self.x_shape[0]
        o, cg, kh, kw = self.w_shape
        og = o // groups
        g2 = grad.reshape(n, groups, og, ho, wo).transpose(1, 0, 3, 4, 2).reshape(groups, n * ho * wo, og)
        grad_w = np.matmul(g2.transpose(0, 2, 1), self.cols).reshape(self.w_shape)
        if not self.needs_input_grad[0]:
            return None, grad_w
        gcols = np.matmul(g2, self.wg).reshape(groups, n, ho, wo, cg, kh, kw)
        gcols = np.ascontiguousarray(gcols.transpose(5, 6, 1, 0, 4, 2, 3))  # kh, kw, n, g, cg, ho, wo
        gxp = np.zeros((n, groups, cg) + xp_shape[2:], dtype=grad.dtype)
        h_span, w_span = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, :, i:i + h_span:stride, j:j + w_span:stride] += gcols[i, j]
        gxp = gxp.reshape(xp_shape)
        if padding:
            gxp = gxp[:, :, padding:-padding, padding:-padding]
        return np.ascontiguousarray(gxp), grad_w


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    return Conv2d.apply(x, w, stride=stride, padding=padding, groups=1)


def grouped_conv2d(x: Tensor, w: Tensor, groups: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Convolve input channel slab i with kernel slab i; groups == C_in is depthwise."""
    return Conv2d.apply(x, w, stride=stride, padding=padding, groups=groups)


def conv2d_direct(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0, groups: int = 1) -> np.ndarray:
    """Direct-loop reference convolution (slow; for verification only)."""
    _check_conv_args(x.shape, w.shape, stride, padding, groups)
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    og = o // groups
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, o, ho, wo), dtype=np.result_type(x, w))
    for b in range(n):
        for oc in range(o):
            g = oc // og
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(cg):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, g * cg + ic, i * stride + u, j * stride + v] * w[oc, ic, u, v]
                    out[b, oc, i, j] = acc
    return out


class ChannelLayerNorm(Function):
    def forward(self, x, gamma, beta, eps=LAYER_NORM_EPS):
        if eps <= 0:
            raise ConfigurationError("eps must be positive")
        if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
            raise DimensionError(f"layer norm shapes: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
        mu = x.mean(axis=1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=1, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + eps)
        self.xhat = xc * self.inv
        self.gamma = gamma
        return gamma[None, :, None, None] * self.xhat + beta[None, :, None, None]

    def backward(self, grad):
        xhat = self.xhat
        dxhat = grad * self.gamma[None, :, None, None]
        dx = self.inv * (
            dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return dx, (grad * xhat).sum(axis=(0, 2, 3)), grad.sum(axis=(0, 2, 3))


def channel_layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the channel vector at every (n, h, w) position, then apply a per-channel affine."""
    return ChannelLayerNorm.apply(x, gamma, beta, eps=eps)


def _below_one(dtype) -> float:
    return float(np.nextafter(np.asarray(1, dtype=dtype), np.asarray(0, dtype=dtype)))


class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.maximum(x, x.dtype.type(0))

    def backward(self, grad):
        return (grad * self.mask,)


class Softsign(Function):
    # clipped so that the open range (-1, 1) survives rounding
    def forward(self, x):
        self.denom = 1.0 + np.abs(x)
        top = _below_one(x.dtype)
        return np.clip(x / self.denom, -top, top)

    def backward(self, grad):
        return (grad / (self.denom * self.denom),)


class Sigmoid(Function):
    def forward(self, x):
        s = 0.5 * (1.0 + np.tanh(0.5 * x))
        tiny = np.finfo(x.dtype).tiny
        self.s = np.clip(s, tiny, _below_one(x.dtype)).astype(x.dtype)
        return self.s

    def backward(self, grad):
        return (grad * self.s * (1.0 - self.s),)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def softsign(x: Tensor) -> Tensor:
    return Softsign.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


class GlobalAvgPool(Function):
    def forward(self, x):
        if x.ndim != 4:
            raise DimensionError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
        self.shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        n, c, h, w = self.shape
        return (np.broadcast_to((grad / (h * w))[:, :, None, None], self.shape).copy(),)


def global_avg_pool(x: Tensor) -> Tensor:
    return GlobalAvgPool.apply(x)


class Linear(Function):
    def forward(self, x, weight, bias=None):
        if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
            raise DimensionError(f"linear: x {x.shape} incompatible with weight {weight.shape}")
        if bias is not None and bias.shape != (weight.shape[0],):
            raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        self.x, self.weight, self.has_bias = x, weight, bias is not None
        y = x @ weight.T
        return y + bias if bias is not None else y

    def backward(self, grad):
        grads = [grad @ self.weight, grad.T @ self.x]
        if self.has_bias:
            grads.append(grad.sum(axis=0))
        return grads


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if bias is None:
        return Linear.apply(x, weight)
    return Linear.apply(x, weight, bias)


class SoftmaxCrossEntropy(Function):
    def forward(self, logits, labels):
        n, k = logits.shape
        if labels.shape != (n,):
            raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
        if np.any(labels < 0) or np.any(labels >= k):
            raise ValueError(f"labels must lie in [0, {k})")
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_p = shifted - log_z
        self.probs = np.exp(log_p)
        self.labels = labels
        return np.asarray(-log_p[np.arange(n), labels].mean(), dtype=logits.dtype)

    def backward(self, grad):
        n = self.labels.shape[0]
        d = self.probs.copy()
        d[np.arange(n), self.labels] -= 1.0
        return (d * (grad / n),)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer `labels` under softmax(logits)."""
    return SoftmaxCrossEntropy.apply(logits, labels=np.asarray(labels, dtype=np.int64))
