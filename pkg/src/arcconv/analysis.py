"""Verification and cost tooling: equivalence checks, finite-difference
gradient checks, parameter/FLOP estimation, and wall-clock benchmarks."""

from __future__ import annotations

import hashlib
import itertools
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from threadpoolctl import threadpool_limits

from . import functional as F
from .layer import ArcLayer, ArcLayerConfig, arc_forward, arc_forward_naive
from .model import NetworkDescriptor, SmallNet
from .rotation import rotate_kernels, sampling_matrix
from .routing import routing_forward, routing_init
from .tensor import ConfigurationError, Parameter, Tensor, backward, no_grad


@dataclass
class CheckReport:
    name: str
    status: str  # "pass" | "fail"
    metric: float
    tolerance: float
    fingerprint: str
    details: List[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    def summary(self) -> str:
        return f"{self.name}: {self.status} (worst {self.metric:.3e}, tol {self.tolerance:.1e}) [{self.fingerprint}]"


def _fingerprint(*parts) -> str:
    return hashlib.sha256(repr(parts).encode()).hexdigest()[:12]


def _report(name, metric, tol, fingerprint, details) -> CheckReport:
    status = "pass" if metric <= tol else "fail"
    return CheckReport(name, status, float(metric), float(tol), fingerprint, details)


# ------------------------------------------------------------ equivalence


def default_sweep() -> List[Tuple[ArcLayerConfig, int]]:
    """(config, batch size) pairs: n in {1,2,4}, k in {1,3,5}, N in {1,3}."""
    sweep = []
    for n, k, batch in itertools.product((1, 2, 4), (1, 3, 5), (1, 3)):
        sweep.append((ArcLayerConfig(3, 4, n=n, k=k, padding=k // 2), batch))
    return sweep


def check_equivalence(sweep: Optional[Sequence[Tuple[ArcLayerConfig, int]]] = None, seed: int = 0,
                      tol: Optional[float] = None, dtype=np.float64, corrupt: float = 0.0,
                      size: int = 8) -> CheckReport:
    """Compare combine-then-convolve against convolve-then-combine on random layers.

    binary64 reports the max absolute difference; binary32 the max difference
    relative to the largest output magnitude. `corrupt` perturbs the combination
    weights of the combined path only (a negative control).
    """
    dtype = np.dtype(dtype)
    sweep = list(sweep) if sweep is not None else default_sweep()
    relative = dtype == np.float32
    if tol is None:
        tol = 1e-5 if relative else 1e-12
    worst, details = 0.0, []
    with no_grad():
        for i, (cfg, batch) in enumerate(sweep):
            layer = ArcLayer.create(cfg, seed=seed + i, dtype=dtype)
            rng = np.random.default_rng([seed, i])
            x = Tensor(rng.standard_normal((batch, cfg.in_channels, size, size)), dtype=dtype)
            routed = layer.route(x)
            lam = routed.lam.data + np.asarray(corrupt, dtype=dtype)
            fast = arc_forward(layer, x, routed.theta, Tensor(lam)).data
            slow = arc_forward_naive(layer, x, routed.theta, routed.lam).data
            diff = float(np.max(np.abs(fast.astype(np.float64) - slow)))
            if relative:
                diff /= max(float(np.max(np.abs(slow))), np.finfo(np.float64).tiny)
            worst = max(worst, diff)
            details.append({"n": cfg.n, "k": cfg.k, "batch": batch, "diff": diff})
    return _report(f"equivalence[{dtype.name}]", worst, tol,
                   _fingerprint("equiv", seed, dtype.name, corrupt, [(c, b) for c, b in sweep]), details)


# ------------------------------------------------------------- gradcheck


GRADCHECK_TARGETS = ("rotation", "routing", "arc-layer", "smallnet")


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - f|| / max(||a||, ||f||) over one parameter tensor."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def _finite_difference(loss_fn: Callable[[], float], p: Parameter, idx, eps: float) -> np.ndarray:
    out = np.empty(len(idx))
    flat = p.data.reshape(-1)
    for j, i in enumerate(idx):
        keep = flat[i]
        flat[i] = keep + eps
        up = loss_fn()
        flat[i] = keep - eps
        down = loss_fn()
        flat[i] = keep
        out[j] = (up - down) / (2.0 * eps)
    return out


def _check_params(build: Callable[[], Tuple[Callable[[], Tensor], Dict[str, Parameter]]], eps: float,
                  max_entries: Optional[int], seed: int):
    forward, params = build()
    for p in params.values():
        p.zero_grad()
    backward(forward())

    def loss_value() -> float:
        with no_grad():
            return forward().item()

    rng = np.random.default_rng(seed)
    results = {}
    for name, p in params.items():
        size = p.data.size
        idx = np.arange(size)
        if max_entries is not None and size > max_entries:
            idx = np.sort(rng.choice(size, max_entries, replace=False))
        analytic = p.grad.reshape(-1)[idx].copy()
        numeric = _finite_difference(loss_value, p, idx, eps)
        results[name] = _relative_error(analytic, numeric)
    return results


# generic angles, bounded away from 0 and the quarter turns (kinks of bilinear sampling)
GENERIC_ANGLES = np.array([[0.3, -1.1], [2.2, 0.7]])


def _projection(rng, shape):
    return rng.standard_normal(shape)


def _rotation_case(seed):
    rng = np.random.default_rng(seed)
    W = Parameter(rng.standard_normal((2, 2, 3, 3, 3)))
    theta = Parameter(GENERIC_ANGLES)
    R = _projection(rng, (2, 2, 2, 3, 3, 3))
    forward = lambda: (rotate_kernels(W, theta) * R).sum()
    return forward, {"W": W, "theta": theta}


def _routing_case(seed):
    rng = np.random.default_rng(seed)
    router = routing_init(4, 2, seed=seed)
    x = Parameter(rng.standard_normal((2, 4, 6, 6)))
    r1, r2 = _projection(rng, (2, 2)), _projection(rng, (2, 2))

    def forward():
        out = routing_forward(router, x)
        return (out.theta * r1).sum() + (out.lam * r2).sum()

    return forward, {**{f"router.{k}": v for k, v in router.named_parameters().items()}, "x": x}


def _arc_layer_case(seed):
    rng = np.random.default_rng(seed)
    layer = ArcLayer.create(ArcLayerConfig(4, 4, n=2, k=3), seed=seed)
    x = Parameter(rng.standard_normal((2, 4, 6, 6)))
    R = _projection(rng, (2, 4, 6, 6))
    forward = lambda: (arc_forward(layer, x) * R).sum()
    return forward, {**layer.named_parameters(), "x": x}


def _smallnet_case(seed):
    rng = np.random.default_rng(seed)
    net = SmallNet("arc", n=2, bins=3, widths=(4, 6, 8), seed=seed)
    x = rng.uniform(0.0, 1.0, (2, 1, 8, 8))
    y = np.array([0, 2])
    forward = lambda: F.softmax_cross_entropy(net(Tensor(x)), y)
    return forward, dict(net.named_parameters())


_CASES = {"rotation": _rotation_case, "routing": _routing_case,
          "arc-layer": _arc_layer_case, "smallnet": _smallnet_case}


def gradcheck(target: str = "arc-layer", seed: int = 0, eps: float = 1e-5, tol: float = 1e-5,
              max_entries: Optional[int] = None) -> CheckReport:
    """Central finite differences vs analytic gradients in binary64.

    The metric is the worst per-tensor relative error ||a - f|| / max(||a||, ||f||).
    `max_entries` caps the number of (randomly chosen) entries probed per tensor;
    the toy network defaults to 48 to keep the check fast.
    """
    if target not in _CASES:
        raise ConfigurationError(f"unknown gradcheck target {target!r}; choose from {GRADCHECK_TARGETS}")
    if max_entries is None and target == "smallnet":
        max_entries = 48
    results = _check_params(lambda: _CASES[target](seed), eps, max_entries, seed)
    worst = max(results.values())
    details = [{"tensor": k, "rel_err": v} for k, v in results.items()]
    return _report(f"gradcheck[{target}]", worst, tol, _fingerprint("grad", target, seed, eps, max_entries), details)


# ------------------------------------------------------------ cost model


@dataclass
class CostEstimate:
    params: int = 0
    flops: int = 0
    breakdown: Dict[str, Dict[str, int]] = field(default_factory=dict)
    layers: List[dict] = field(default_factory=list)

    def add(self, kind: str, params: int, flops: int) -> None:
        entry = self.breakdown.setdefault(kind, {"params": 0, "flops": 0})
        entry["params"] += int(params)
        entry["flops"] += int(flops)
        self.params += int(params)
        self.flops += int(flops)


def rotation_taps(k: int, samples: int = 64) -> float:
    """Mean number of in-support bilinear taps per rotated kernel element at generic angles."""
    if k == 1:
        return 1.0
    angles = (np.arange(samples) + 0.5) * (2 * math.pi / samples) + 1e-3
    S = sampling_matrix(angles, k)
    return float(np.count_nonzero(S) / (samples * k * k))


def routing_cost(c_in: int, n: int, h: int, w: int) -> Tuple[int, int]:
    """(params, MACs) of one router: depthwise 3x3 encoder, norm affine, two linear heads."""
    params = c_in * 9 + 2 * c_in + n * c_in + n * c_in + n
    macs = c_in * 9 * h * w + 2 * n * c_in
    return params, macs


def estimate_cost(descriptor: NetworkDescriptor, input_hw: Tuple[int, int]) -> CostEstimate:
    """Parameters and FLOPs (= 2 x multiply-accumulates) for one input image.

    Normalization, activation and pooling FLOPs are not counted. An ARC layer
    contributes its convolution once (independent of n) under "arc-conv",
    plus "arc-routing", "arc-rotation" and "arc-combination" overheads.
    """
    est = CostEstimate()
    h, w = input_hw
    for rec in descriptor:
        ho, wo = h, w
        if rec.kind in ("conv", "arc-conv"):
            ho = F.conv_output_size(h, rec.k, rec.stride, rec.padding)
            wo = F.conv_output_size(w, rec.k, rec.stride, rec.padding)
        elif rec.kind == "pool":
            if rec.k == 0:
                ho = wo = 1
            else:
                ho = F.conv_output_size(h, rec.k, rec.stride, rec.padding)
                wo = F.conv_output_size(w, rec.k, rec.stride, rec.padding)
        elif rec.kind == "linear":
            ho = wo = 1
        for _ in range(rec.count):
            per = _layer_cost(rec, h, w, ho, wo)
            for kind, (params, flops) in per.items():
                est.add(kind, params, flops)
            est.layers.append({"name": rec.name, "kind": rec.kind,
                               "params": sum(p for p, _ in per.values()),
                               "flops": sum(f for _, f in per.values())})
        if not rec.branch:
            h, w = ho, wo
    return est


def _layer_cost(rec, h, w, ho, wo) -> Dict[str, Tuple[int, int]]:
    plane = rec.c_out * (rec.c_in // rec.groups) * rec.k * rec.k
    if rec.kind == "conv":
        bias = rec.c_out if rec.bias else 0
        return {"conv": (plane + bias, 2 * plane * ho * wo)}
    if rec.kind == "arc-conv":
        r_params, r_macs = routing_cost(rec.c_in, rec.n, h, w)
        return {
            "arc-conv": (rec.n * plane, 2 * plane * ho * wo),
            "arc-routing": (r_params, 2 * r_macs),
            "arc-rotation": (0, int(round(2 * rec.n * plane * rotation_taps(rec.k)))),
            "arc-combination": (0, 2 * rec.n * plane),
        }
    if rec.kind == "norm":
        return {"norm": (2 * rec.c_out, 0)}
    if rec.kind == "linear":
        return {"linear": (rec.c_in * rec.c_out + (rec.c_out if rec.bias else 0), 2 * rec.c_in * rec.c_out)}
    return {rec.kind: (0, 0)}


def arc_overhead_flops(est: CostEstimate) -> int:
    return sum(est.breakdown.get(k, {}).get("flops", 0) for k in ("arc-routing", "arc-rotation", "arc-combination"))


def backbone_conv_flops(est: CostEstimate) -> int:
    return sum(est.breakdown.get(k, {}).get("flops", 0) for k in ("conv", "arc-conv"))


# ---------------------------------------------------------------- bench


@dataclass
class BenchReport:
    config: dict
    shape: Tuple[int, ...]
    trials: int
    medians: Dict[str, float]
    ratios: Dict[str, float]
    state_unchanged: bool


def _state_checksum(layer: ArcLayer) -> str:
    h = hashlib.sha256()
    for name, p in sorted(layer.named_parameters().items()):
        h.update(name.encode())
        h.update(p.data.tobytes())
    return h.hexdigest()


def _median_times(paths: Dict[str, Callable[[], object]], trials: int, warmup: int) -> Dict[str, float]:
    """Median wall time per path; paths are interleaved within each round so
    machine-load drift affects all of them alike."""
    for _ in range(warmup):
        for fn in paths.values():
            fn()
    times = {name: [] for name in paths}
    for _ in range(trials):
        for name, fn in paths.items():
            t0 = time.perf_counter()
            fn()
            times[name].append(time.perf_counter() - t0)
    return {name: statistics.median(ts) for name, ts in times.items()}


def bench(config: ArcLayerConfig, shape: Tuple[int, int, int, int], trials: int = 5, warmup: int = 2,
          seed: int = 0, dtype=np.float32) -> BenchReport:
    """Median forward time of a static conv, the combined path, and the naive path.

    Runs single-threaded so that the ratios are stable.
    """
    if trials < 5 or warmup < 2:
        raise ConfigurationError("bench needs trials >= 5 and warmup >= 2")
    if shape[1] != config.in_channels:
        raise ConfigurationError(f"input shape {shape} does not match in_channels={config.in_channels}")
    layer = ArcLayer.create(config, seed=seed, dtype=dtype)
    x = Tensor(np.random.default_rng(seed).standard_normal(shape), dtype=dtype)
    static_w = Tensor(layer.kernels.data[0])
    before = _state_checksum(layer)
    paths = {
        "static": lambda: F.conv2d(x, static_w, config.stride, config.padding),
        "combined": lambda: arc_forward(layer, x),
        "naive": lambda: arc_forward_naive(layer, x),
    }
    with threadpool_limits(limits=1), no_grad():
        medians = _median_times(paths, trials, warmup)
    ratios = {"naive/combined": medians["naive"] / medians["combined"],
              "combined/static": medians["combined"] / medians["static"]}
    return BenchReport(asdict(config), tuple(shape), trials, medians, ratios, before == _state_checksum(layer))
