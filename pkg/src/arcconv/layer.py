"""The adaptive rotated convolution layer.

Forward pass: route -> rotate every expert kernel by its per-sample angle ->
combine the rotated kernels with the per-sample weights -> one convolution
per sample with the combined kernel. The per-sample convolutions run as a
single grouped convolution by folding the batch into the channel axis.

`arc_forward_naive` convolves with every rotated kernel separately and sums
the weighted outputs; it is kept as an oracle and as the slow benchmark arm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from . import functional as F
from .rotation import rotate_kernels
from .routing import DEFAULT_ANGLE_COEFFICIENT, RoutingOutput, RoutingParams, routing_forward, routing_init
from .tensor import ConfigurationError, DimensionError, Function, Parameter, Tensor


@dataclass(frozen=True)
class ArcLayerConfig:
    in_channels: int
    out_channels: int
    n: int = 4
    k: int = 3
    stride: int = 1
    padding: int = 1
    angle_coefficient: float = DEFAULT_ANGLE_COEFFICIENT
    spatial_encoding: bool = True
    adaptive_combination: bool = True

    def __post_init__(self):
        if self.n < 1 or self.k < 1 or self.stride < 1 or self.padding < 0:
            raise ConfigurationError(f"invalid ARC layer config: {self}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigurationError("channel counts must be >= 1")


class CombineKernels(Function):
    """out[b] = sum_i lam[b, i] * rotated[b, i]."""

    def forward(self, rotated, lam):
        nb, n = lam.shape
        if rotated.shape[:2] != (nb, n):
            raise DimensionError(f"rotated {rotated.shape} does not match weights {lam.shape}")
        self.rot = rotated.reshape(nb, n, -1)
        self.lam = lam
        self.out_shape = (nb,) + rotated.shape[2:]
        return np.matmul(lam[:, None, :], self.rot).reshape(self.out_shape)

    def backward(self, grad):
        g = grad.reshape(grad.shape[0], 1, -1)
        grad_rot = (self.lam[:, :, None] * g).reshape(self.rot.shape[:2] + self.out_shape[1:])
        grad_lam = np.matmul(self.rot, g.transpose(0, 2, 1))[:, :, 0]
        return grad_rot, grad_lam


def combine_kernels(rotated: Tensor, lam: Tensor) -> Tensor:
    """Weighted sum of per-sample rotated kernels: [N, n, ...] x [N, n] -> [N, ...]."""
    return CombineKernels.apply(rotated, lam)


def per_sample_conv2d(x: Tensor, kernels: Tensor, stride: int, padding: int) -> Tensor:
    """Convolve sample b with kernels[b] using one grouped convolution (groups = N)."""
    nb, ci, h, w = x.shape
    if kernels.shape[0] != nb or kernels.shape[2] != ci:
        raise DimensionError(f"per-sample kernels {kernels.shape} do not match input {x.shape}")
    _, co, _, k, _ = kernels.shape
    folded = F.grouped_conv2d(
        x.reshape(1, nb * ci, h, w), kernels.reshape(nb * co, ci, k, k),
        groups=nb, stride=stride, padding=padding,
    )
    return folded.reshape(nb, co, folded.shape[2], folded.shape[3])


class ArcLayer:
    """n expert kernels [C_out, C_in, k, k] plus the router that steers them."""

    def __init__(self, config: ArcLayerConfig, kernels: np.ndarray, router: RoutingParams, dtype=np.float64):
        c = config
        if kernels.shape != (c.n, c.out_channels, c.in_channels, c.k, c.k):
            raise DimensionError(f"kernel stack {kernels.shape} does not match {c}")
        if router.n != c.n or router.in_channels != c.in_channels:
            raise DimensionError("router size does not match layer config")
        self.config = config
        self.kernels = Parameter(kernels, dtype=dtype)
        self.router = router

    @classmethod
    def create(cls, config: ArcLayerConfig, seed=0, dtype=np.float64, kernel_std: Optional[float] = None):
        """Random layer: He-normal experts and a freshly initialized router."""
        rng = np.random.default_rng(seed)
        c = config
        std = kernel_std if kernel_std is not None else math.sqrt(2.0 / (c.in_channels * c.k * c.k))
        kernels = rng.normal(0.0, std, size=(c.n, c.out_channels, c.in_channels, c.k, c.k))
        router = routing_init(c.in_channels, c.n, c.angle_coefficient, seed=rng, dtype=dtype)
        return cls(config, kernels, router, dtype=dtype)

    def named_parameters(self) -> Dict[str, Parameter]:
        params = {"kernels": self.kernels}
        params.update({f"router.{k}": v for k, v in self.router.named_parameters().items()})
        return params

    def route(self, x: Tensor) -> RoutingOutput:
        c = self.config
        return routing_forward(self.router, x, c.spatial_encoding, c.adaptive_combination)

    def __call__(self, x: Tensor) -> Tensor:
        return arc_forward(self, x)


def _routing(layer: ArcLayer, x: Tensor, theta, lam) -> RoutingOutput:
    if x.ndim != 4 or x.shape[1] != layer.config.in_channels:
        raise DimensionError(f"ARC layer expects [N, {layer.config.in_channels}, H, W], got {x.shape}")
    if theta is None or lam is None:
        routed = layer.route(x)
        theta = routed.theta if theta is None else theta
        lam = routed.lam if lam is None else lam
    as_t = lambda v: v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=x.dtype))
    return RoutingOutput(as_t(theta), as_t(lam))


def arc_forward(layer: ArcLayer, x: Tensor, theta=None, lam=None) -> Tensor:
    """Combine-then-convolve path: a single convolution per sample.

    `theta` / `lam` ([N, n]) override the router's outputs when given.
    """
    r = _routing(layer, x, theta, lam)
    rotated = rotate_kernels(layer.kernels, r.theta)
    combined = combine_kernels(rotated, r.lam)
    c = layer.config
    return per_sample_conv2d(x, combined, c.stride, c.padding)


def arc_forward_naive(layer: ArcLayer, x: Tensor, theta=None, lam=None) -> Tensor:
    """Convolve with each rotated expert separately, then sum the weighted outputs."""
    r = _routing(layer, x, theta, lam)
    rotated = rotate_kernels(layer.kernels, r.theta)
    c = layer.config
    y = None
    for i in range(c.n):
        yi = per_sample_conv2d(x, rotated[:, i], c.stride, c.padding)
        term = yi * r.lam[:, i].reshape(x.shape[0], 1, 1, 1)
        y = term if y is None else y + term
    return y
