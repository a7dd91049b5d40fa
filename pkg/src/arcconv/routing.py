"""Routing function: predict per-sample rotation angles and combination weights.

Pipeline: [depthwise 3x3 -> channel layer norm -> ReLU] -> global average pool,
then two heads on the pooled vector:

* angles  = angle_coefficient * softsign(pooled @ theta_weight.T)   (no bias)
* weights = sigmoid(pooled @ lambda_weight.T + lambda_bias)

The bracketed encoder is the "spatial encoding" toggle. With adaptive
combination off, every expert gets the constant weight 1/n.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict

import numpy as np

from . import functional as F
from .tensor import DimensionError, Parameter, Tensor

INIT_STD = 0.2
DEFAULT_ANGLE_COEFFICIENT = math.pi


def truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD, bound: float = 2.0) -> np.ndarray:
    """Zero-mean normal samples truncated to +-bound*std, by rejection."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > bound * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound * std
    return out


@dataclass
class RoutingOutput:
    theta: Tensor  # [N, n] radians
    lam: Tensor  # [N, n]


class RoutingParams:
    """Parameters of one routing function."""

    def __init__(self, dw_kernel, ln_gamma, ln_beta, theta_weight, lambda_weight, lambda_bias,
                 angle_coefficient: float = DEFAULT_ANGLE_COEFFICIENT, dtype=np.float64):
        self.dw_kernel = Parameter(dw_kernel, dtype=dtype)
        self.ln_gamma = Parameter(ln_gamma, dtype=dtype)
        self.ln_beta = Parameter(ln_beta, dtype=dtype)
        self.theta_weight = Parameter(theta_weight, dtype=dtype)
        self.lambda_weight = Parameter(lambda_weight, dtype=dtype)
        self.lambda_bias = Parameter(lambda_bias, dtype=dtype)
        if not angle_coefficient >= 0:
            raise ValueError("angle_coefficient must be non-negative")
        self.angle_coefficient = float(angle_coefficient)

    @property
    def in_channels(self) -> int:
        return self.theta_weight.shape[1]

    @property
    def n(self) -> int:
        return self.theta_weight.shape[0]

    def named_parameters(self) -> Dict[str, Parameter]:
        return {
            "dw": self.dw_kernel,
            "ln_gamma": self.ln_gamma,
            "ln_beta": self.ln_beta,
            "theta_weight": self.theta_weight,
            "lambda_weight": self.lambda_weight,
            "lambda_bias": self.lambda_bias,
        }


def routing_init(in_channels: int, n: int, angle_coefficient: float = DEFAULT_ANGLE_COEFFICIENT,
                 seed=0, dtype=np.float64) -> RoutingParams:
    """Initialize a router: truncated-normal(0, 0.2) weights, zero biases, identity norm."""
    if in_channels < 1 or n < 1:
        raise ValueError("in_channels and n must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return RoutingParams(
        dw_kernel=truncated_normal(rng, (in_channels, 1, 3, 3)),
        ln_gamma=np.ones(in_channels),
        ln_beta=np.zeros(in_channels),
        theta_weight=truncated_normal(rng, (n, in_channels)),
        lambda_weight=truncated_normal(rng, (n, in_channels)),
        lambda_bias=np.zeros(n),
        angle_coefficient=angle_coefficient,
        dtype=dtype,
    )


def routing_forward(params: RoutingParams, x: Tensor, spatial_encoding: bool = True,
                    adaptive_combination: bool = True) -> RoutingOutput:
    if x.ndim != 4 or x.shape[1] != params.in_channels:
        raise DimensionError(f"router expects [N, {params.in_channels}, H, W], got {x.shape}")
    h = x
    if spatial_encoding:
        h = F.grouped_conv2d(h, params.dw_kernel, groups=params.in_channels, padding=1)
        h = F.channel_layer_norm(h, params.ln_gamma, params.ln_beta)
        h = F.relu(h)
    pooled = F.global_avg_pool(h)
    theta = F.softsign(F.linear(pooled, params.theta_weight)) * params.angle_coefficient
    if adaptive_combination:
        lam = F.sigmoid(F.linear(pooled, params.lambda_weight, params.lambda_bias))
    else:
        lam = Tensor(np.full((x.shape[0], params.n), 1.0 / params.n, dtype=x.dtype))
    return RoutingOutput(theta=theta, lam=lam)
