"""Kernel rotation by bilinear resampling of the kernel space.

A k x k weight plane is treated as samples of a continuous function obtained
by bilinear interpolation. To rotate the kernel counter-clockwise by `theta`,
each target cell's centred coordinate is turned clockwise by `theta` and the
source plane is sampled there. Taps that fall outside the k x k grid read 0.

Conventions: row index grows downward, column index grows to the right, and
"counter-clockwise" is the visual sense on that picture. Rotation is about
((k-1)/2, (k-1)/2). Because resampling is linear in the weights, each angle
is a k^2 x k^2 sampling matrix S(theta) and a rotated plane is S @ w.ravel().
"""

from __future__ import annotations

import numpy as np

from .tensor import DimensionError, Function, Tensor

# trig values this close to 0/±1 are snapped so quarter turns are exact
_SNAP = 1e-15


def _cos_sin(theta: np.ndarray):
    c, s = np.cos(theta), np.sin(theta)
    for v in (c, s):
        v[np.abs(v) < _SNAP] = 0.0
        near = np.abs(np.abs(v) - 1.0) < _SNAP
        v[near] = np.sign(v[near])
    return c, s


def source_coordinates(theta, k: int):
    """Return (rows, cols, d_rows, d_cols) of the sampling points and their theta-derivatives.

    Shapes are theta.shape + (k*k,), indexed by the flattened target cell.
    """
    theta = np.asarray(theta, dtype=np.float64)
    c, s = _cos_sin(np.atleast_1d(theta).copy())
    c, s = c.reshape(theta.shape + (1,)), s.reshape(theta.shape + (1,))
    center = (k - 1) / 2.0
    r, q = np.divmod(np.arange(k * k), k)
    dr, dc = r - center, q - center
    cols = center + c * dc - s * dr
    rows = center + s * dc + c * dr
    d_cols = -s * dc - c * dr
    d_rows = c * dc - s * dr
    return rows, cols, d_rows, d_cols


def sampling_matrix(theta, k: int, with_derivative: bool = False):
    """Bilinear sampling matrix S(theta) of shape theta.shape + (k*k, k*k).

    Row p holds the (up to four) tap weights used for target cell p. With
    `with_derivative`, also returns dS/dtheta, using the derivative of the
    cell [i, i+1) that contains each sample point.
    """
    rows, cols, d_rows, d_cols = source_coordinates(theta, k)
    r0, c0 = np.floor(rows), np.floor(cols)
    fy, fx = rows - r0, cols - c0
    r0, c0 = r0.astype(np.int64), c0.astype(np.int64)
    kk = k * k
    S = np.zeros(rows.shape + (kk,))
    dS = np.zeros_like(S) if with_derivative else None
    lanes = np.arange(kk)
    for a in (0, 1):
        wy, dwy = (1.0 - fy, -1.0) if a == 0 else (fy, 1.0)
        rr = r0 + a
        for b in (0, 1):
            wx, dwx = (1.0 - fx, -1.0) if b == 0 else (fx, 1.0)
            cc = c0 + b
            valid = (rr >= 0) & (rr < k) & (cc >= 0) & (cc < k)
            hit = (np.where(valid, rr * k + cc, -1)[..., None] == lanes)
            S += np.where(hit, (wy * wx)[..., None], 0.0)
            if with_derivative:
                dw = dwy * d_rows * wx + wy * dwx * d_cols
                dS += np.where(hit, dw[..., None], 0.0)
    return (S, dS) if with_derivative else S


def rotate_plane(w, angle: float) -> np.ndarray:
    """Rotate a single k x k plane counter-clockwise by `angle` radians."""
    w = np.asarray(w)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise DimensionError(f"rotate_plane expects a square plane, got {w.shape}")
    k = w.shape[0]
    S = sampling_matrix(np.asarray(angle, dtype=np.float64), k).astype(w.dtype)
    return (S @ w.reshape(k * k)).reshape(k, k)


def _split(W: np.ndarray):
    if W.ndim != 5 or W.shape[-1] != W.shape[-2]:
        raise DimensionError(f"kernel stack must be [n, C_out, C_in, k, k], got {W.shape}")
    n, co, ci, k, _ = W.shape
    return n, co * ci, k


def rotate_kernel_stack(W, theta) -> np.ndarray:
    """Rotate every [k, k] plane of expert i by the single angle theta[i]."""
    W = np.asarray(W)
    n, m, k = _split(W)
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (n,):
        raise DimensionError(f"expected {n} angles, got shape {theta.shape}")
    S = sampling_matrix(theta, k).astype(W.dtype)
    out = np.matmul(W.reshape(n, m, k * k), S.transpose(0, 2, 1))
    return out.reshape(W.shape)


def rotate_vjp(W, theta, upstream):
    """Vector-Jacobian product of `rotate_kernel_stack`: returns (grad_W, grad_theta)."""
    W, upstream = np.asarray(W), np.asarray(upstream)
    n, m, k = _split(W)
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (n,) or upstream.shape != W.shape:
        raise DimensionError("rotate_vjp: shapes do not conform")
    S, dS = sampling_matrix(theta, k, with_derivative=True)
    U = upstream.reshape(n, m, k * k)
    Wf = W.reshape(n, m, k * k)
    grad_W = np.matmul(U, S.astype(W.dtype))
    G = np.matmul(U.transpose(0, 2, 1), Wf)  # [n, k*k(target), k*k(source)]
    grad_theta = (G * dS).sum(axis=(1, 2))
    return grad_W.reshape(W.shape), grad_theta


class RotateKernels(Function):
    """Per-sample rotation: W [n, C_out, C_in, k, k], theta [N, n] -> [N, n, C_out, C_in, k, k]."""

    def forward(self, W, theta):
        n, m, k = _split(W)
        if theta.ndim != 2 or theta.shape[1] != n:
            raise DimensionError(f"theta must be [N, {n}], got {theta.shape}")
        S, dS = sampling_matrix(theta, k, with_derivative=True)
        self.S, self.dS = S.astype(W.dtype), dS
        self.Wf = W.reshape(n, m, k * k)
        self.w_shape = W.shape
        out = np.matmul(self.Wf[None], self.S.transpose(0, 1, 3, 2))
        return out.reshape((theta.shape[0],) + W.shape)

    def backward(self, grad):
        n, m, kk = self.Wf.shape
        U = grad.reshape(grad.shape[0], n, m, kk)
        grad_W = np.matmul(U, self.S).sum(axis=0).reshape(self.w_shape)
        G = np.matmul(U.transpose(0, 1, 3, 2), self.Wf[None])
        grad_theta = (G * self.dS).sum(axis=(2, 3))
        return grad_W, grad_theta


def rotate_kernels(W: Tensor, theta: Tensor) -> Tensor:
    """Differentiable per-sample rotation of a kernel stack by angles theta[N, n]."""
    return RotateKernels.apply(W, theta)
