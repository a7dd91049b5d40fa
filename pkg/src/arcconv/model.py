"""Toy orientation classifier, network descriptors, and the training loop."""

from __future__ import annotations

import logging
import math
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field, fields
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import functional as F
from .layer import ArcLayer, ArcLayerConfig, arc_forward
from .routing import DEFAULT_ANGLE_COEFFICIENT, routing_init
from .tensor import ConfigurationError, Parameter, Tensor, backward, no_grad

logger = logging.getLogger(__name__)

STAGES = ("A", "B", "C")
DEFAULT_WIDTHS = (16, 32, 64)


def param_rng(seed: int, name: str, index: int = 0) -> np.random.Generator:
    """Independent stream per (seed, parameter name, index) so models with
    different layer types still share every common parameter bit-for-bit."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), int(index)])


def parse_stages(spec) -> Tuple[str, ...]:
    if isinstance(spec, str):
        spec = [s for s in spec.replace(",", " ").split() if s]
    stages = tuple(sorted({s.upper() for s in spec}))
    if not stages or any(s not in STAGES for s in stages):
        raise ConfigurationError(f"stage subset must be a non-empty subset of {STAGES}, got {spec!r}")
    return stages


# ---------------------------------------------------------------- layers


class Conv:
    def __init__(self, name, c_in, c_out, k=3, stride=1, padding=1, bias=False, seed=0, dtype=np.float64):
        std = math.sqrt(2.0 / (c_in * k * k))
        self.weight = Parameter(param_rng(seed, f"{name}.weight").normal(0.0, std, (c_out, c_in, k, k)), dtype=dtype)
        self.bias = Parameter(param_rng(seed, f"{name}.bias").normal(0.0, std, (c_out,)), dtype=dtype) if bias else None
        self.stride, self.padding = stride, padding
        self.name = name

    def named_parameters(self):
        params = {f"{self.name}.weight": self.weight}
        if self.bias is not None:
            params[f"{self.name}.bias"] = self.bias
        return params

    def __call__(self, x: Tensor) -> Tensor:
        y = F.conv2d(x, self.weight, self.stride, self.padding)
        if self.bias is not None:
            y = y + self.bias.reshape(1, -1, 1, 1)
        return y


class ArcConv:
    """ARC layer whose expert 0 starts from the same draw a static Conv would use."""

    def __init__(self, name, c_in, c_out, k=3, stride=1, padding=1, n=4,
                 angle_coefficient=DEFAULT_ANGLE_COEFFICIENT, spatial_encoding=True,
                 adaptive_combination=True, seed=0, dtype=np.float64):
        if k < 3:
            raise ConfigurationError("1x1 convolutions are rotation invariant and never wrapped in ARC")
        cfg = ArcLayerConfig(c_in, c_out, n=n, k=k, stride=stride, padding=padding,
                             angle_coefficient=angle_coefficient, spatial_encoding=spatial_encoding,
                             adaptive_combination=adaptive_combination)
        std = math.sqrt(2.0 / (c_in * k * k))
        kernels = np.stack([param_rng(seed, f"{name}.weight", i).normal(0.0, std, (c_out, c_in, k, k))
                            for i in range(n)])
        router = routing_init(c_in, n, angle_coefficient, seed=param_rng(seed, f"{name}.router"), dtype=dtype)
        self.layer = ArcLayer(cfg, kernels, router, dtype=dtype)
        self.name = name

    def named_parameters(self):
        return {f"{self.name}.{k}": v for k, v in self.layer.named_parameters().items()}

    def __call__(self, x: Tensor) -> Tensor:
        return arc_forward(self.layer, x)


class Norm:
    def __init__(self, name, channels, dtype=np.float64):
        self.gamma = Parameter(np.ones(channels), dtype=dtype)
        self.beta = Parameter(np.zeros(channels), dtype=dtype)
        self.name = name

    def named_parameters(self):
        return {f"{self.name}.gamma": self.gamma, f"{self.name}.beta": self.beta}

    def __call__(self, x):
        return F.channel_layer_norm(x, self.gamma, self.beta)


class Block:
    """conv(3x3) -> channel layer norm -> ReLU."""

    def __init__(self, name, conv, c_out, dtype):
        self.conv = conv
        self.norm = Norm(f"{name}.norm", c_out, dtype)

    def named_parameters(self):
        return {**self.conv.named_parameters(), **self.norm.named_parameters()}

    def __call__(self, x):
        return F.relu(self.norm(self.conv(x)))


class SmallNet:
    """stem -> stage A (2 blocks) -> stage B (2 blocks, /2) -> stage C (2 blocks, /2) -> pool -> linear.

    In arc mode the 3x3 convolutions of the listed stages are ARC layers;
    the stem always stays static.
    """

    def __init__(self, mode="static", stages=STAGES, n=4, bins=8, widths=DEFAULT_WIDTHS, in_channels=1,
                 angle_coefficient=DEFAULT_ANGLE_COEFFICIENT, spatial_encoding=True,
                 adaptive_combination=True, seed=0, dtype=np.float64):
        if mode not in ("static", "arc"):
            raise ConfigurationError(f"mode must be 'static' or 'arc', got {mode!r}")
        self.mode = mode
        self.stages = parse_stages(stages) if mode == "arc" else ()
        self.n = n
        self.dtype = np.dtype(dtype)
        self.stem = Block("stem", Conv("stem.conv", in_channels, widths[0], bias=True, seed=seed, dtype=dtype), widths[0], dtype)
        self.blocks = []
        c_prev = widths[0]
        for stage, width in zip(STAGES, widths):
            for j in range(2):
                stride = 2 if (j == 0 and stage != "A") else 1
                name = f"{stage}.{j}"
                if stage in self.stages:
                    conv = ArcConv(f"{name}.conv", c_prev, width, stride=stride, n=n,
                                   angle_coefficient=angle_coefficient, spatial_encoding=spatial_encoding,
                                   adaptive_combination=adaptive_combination, seed=seed, dtype=dtype)
                else:
                    conv = Conv(f"{name}.conv", c_prev, width, stride=stride, seed=seed, dtype=dtype)
                self.blocks.append(Block(name, conv, width, dtype))
                c_prev = width
        bound = 1.0 / math.sqrt(c_prev)
        self.head_weight = Parameter(param_rng(seed, "head.weight").uniform(-bound, bound, (bins, c_prev)), dtype=dtype)
        self.head_bias = Parameter(np.zeros(bins), dtype=dtype)
        self.widths, self.bins, self.in_channels = tuple(widths), bins, in_channels

    def named_parameters(self) -> "OrderedDict[str, Parameter]":
        params = OrderedDict(self.stem.named_parameters())
        for b in self.blocks:
            params.update(b.named_parameters())
        params["head.weight"] = self.head_weight
        params["head.bias"] = self.head_bias
        return params

    def parameters(self) -> List[Parameter]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def features(self, x: Tensor) -> Tensor:
        h = self.stem(x)
        for b in self.blocks:
            h = b(h)
        return F.global_avg_pool(h)

    def __call__(self, x: Tensor) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        return F.linear(self.features(x), self.head_weight, self.head_bias)


def build_smallnet(mode="static", stages=STAGES, n=4, bins=8, seed=0, dtype=np.float64, **kwargs) -> SmallNet:
    return SmallNet(mode=mode, stages=stages, n=n, bins=bins, seed=seed, dtype=dtype, **kwargs)


# ----------------------------------------------------------- descriptors


LAYER_KINDS = ("conv", "arc-conv", "norm", "relu", "pool", "linear")


@dataclass(frozen=True)
class LayerRecord:
    """One (possibly repeated) layer. Branch records read the current
    activation without advancing it (e.g. a residual downsample path)."""

    kind: str
    c_in: int
    c_out: int
    k: int = 1  # pool: 0 means global pooling
    stride: int = 1
    padding: int = 0
    n: int = 1
    count: int = 1
    groups: int = 1
    bias: bool = False
    branch: bool = False
    name: str = ""


@dataclass
class NetworkDescriptor:
    layers: List[LayerRecord] = field(default_factory=list)
    name: str = ""

    def validate(self) -> None:
        channels = None
        for rec in self.layers:
            if rec.kind not in LAYER_KINDS:
                raise ConfigurationError(f"unknown layer kind {rec.kind!r}")
            if rec.kind == "arc-conv" and rec.k < 3:
                raise ConfigurationError(f"{rec.name}: ARC layers need k >= 3")
            if rec.kind in ("norm", "relu", "pool") and rec.c_in != rec.c_out:
                raise ConfigurationError(f"{rec.name}: {rec.kind} must preserve channels")
            if rec.count > 1 and rec.c_in != rec.c_out:
                raise ConfigurationError(f"{rec.name}: repeated layers must preserve channels")
            if rec.branch:
                continue
            if channels is not None and rec.c_in != channels:
                raise ConfigurationError(f"{rec.name}: expects {rec.c_in} channels, previous layer gives {channels}")
            channels = rec.c_out

    def __iter__(self):
        return iter(self.layers)


def smallnet_descriptor(mode="static", stages=STAGES, n=4, bins=8, widths=DEFAULT_WIDTHS,
                        in_channels=1) -> NetworkDescriptor:
    stages = parse_stages(stages) if mode == "arc" else ()
    layers = [LayerRecord("conv", in_channels, widths[0], k=3, padding=1, bias=True, name="stem.conv"),
              LayerRecord("norm", widths[0], widths[0], name="stem.norm"),
              LayerRecord("relu", widths[0], widths[0])]
    c_prev = widths[0]
    for stage, width in zip(STAGES, widths):
        for j in range(2):
            stride = 2 if (j == 0 and stage != "A") else 1
            kind = "arc-conv" if stage in stages else "conv"
            layers += [LayerRecord(kind, c_prev, width, k=3, stride=stride, padding=1,
                                   n=n if kind == "arc-conv" else 1, name=f"{stage}.{j}.conv"),
                       LayerRecord("norm", width, width, name=f"{stage}.{j}.norm"),
                       LayerRecord("relu", width, width)]
            c_prev = width
    layers += [LayerRecord("pool", c_prev, c_prev, k=0, name="pool"),
               LayerRecord("linear", c_prev, bins, bias=True, name="head")]
    desc = NetworkDescriptor(layers, name=f"smallnet-{mode}")
    desc.validate()
    return desc


RESNET50_BLOCKS = (3, 4, 6, 3)
RESNET50_PLANES = (64, 128, 256, 512)


def resnet50_descriptor(replace_stages: Iterable[int] = (2, 3, 4), n: int = 1,
                        include_strided: bool = True) -> NetworkDescriptor:
    """Counting-only ResNet-50 backbone (no classifier) with ARC on selected 3x3 convs.

    Stages are numbered 1-4 (3, 4, 6, 3 bottlenecks). The stride-2 3x3 conv
    of the first block of stages 2-4 is replaced only if `include_strided`.
    """
    replace = set(replace_stages)
    if not replace <= {1, 2, 3, 4}:
        raise ConfigurationError(f"stages must lie in 1..4, got {sorted(replace)}")
    L = [LayerRecord("conv", 3, 64, k=7, stride=2, padding=3, name="conv1"),
         LayerRecord("norm", 64, 64, name="bn1"), LayerRecord("relu", 64, 64),
         LayerRecord("pool", 64, 64, k=3, stride=2, padding=1, name="maxpool")]
    c_in = 64
    for stage, (blocks, planes) in enumerate(zip(RESNET50_BLOCKS, RESNET50_PLANES), start=1):
        for b in range(blocks):
            stride = 2 if (b == 0 and stage > 1) else 1
            pre = f"layer{stage}.{b}"
            if b == 0:
                L += [LayerRecord("conv", c_in, planes * 4, k=1, stride=stride, branch=True, name=f"{pre}.downsample.0"),
                      LayerRecord("norm", planes * 4, planes * 4, branch=True, name=f"{pre}.downsample.1")]
            arc = stage in replace and (stride == 1 or include_strided)
            L += [LayerRecord("conv", c_in, planes, k=1, name=f"{pre}.conv1"),
                  LayerRecord("norm", planes, planes, name=f"{pre}.bn1"), LayerRecord("relu", planes, planes),
                  LayerRecord("arc-conv" if arc else "conv", planes, planes, k=3, stride=stride, padding=1,
                              n=n if arc else 1, name=f"{pre}.conv2"),
                  LayerRecord("norm", planes, planes, name=f"{pre}.bn2"), LayerRecord("relu", planes, planes),
                  LayerRecord("conv", planes, planes * 4, k=1, name=f"{pre}.conv3"),
                  LayerRecord("norm", planes * 4, planes * 4, name=f"{pre}.bn3"),
                  LayerRecord("relu", planes * 4, planes * 4)]
            c_in = planes * 4
    desc = NetworkDescriptor(L, name=f"resnet50-arc{sorted(replace)}-n{n}")
    desc.validate()
    return desc


# --------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 8
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    backbone_lr_scale: float = 0.1
    seed: int = 0
    mode: str = "static"
    n: int = 4
    stages: Tuple[str, ...] = STAGES
    angle_coefficient: float = DEFAULT_ANGLE_COEFFICIENT
    spatial_encoding: bool = True
    adaptive_combination: bool = True
    schedule: str = "cosine"  # or "constant"
    optimizer: str = "sgd"  # or "adam" (momentum unused)

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigurationError("learning rate must be non-negative")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float


class TrainingDivergence(RuntimeError):
    def __init__(self, message, metrics):
        super().__init__(message)
        self.metrics = metrics


class SGD:
    """SGD with momentum; `lr_scale(name)` sets a per-parameter learning-rate multiplier."""

    def __init__(self, named_params: Dict[str, Parameter], lr: float, momentum: float = 0.9,
                 lr_scale: Callable[[str], float] = lambda name: 1.0):
        self.params = list(named_params.items())
        self.lr, self.momentum = lr, momentum
        self.scales = [lr_scale(name) for name, _ in self.params]
        self.velocity = [np.zeros_like(p.data) for _, p in self.params]

    def step(self) -> None:
        for (name, p), v, scale in zip(self.params, self.velocity, self.scales):
            if not p.trainable:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= (self.lr * scale) * v

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()


class Adam(SGD):
    """Adam (beta1=0.9, beta2=0.999, eps=1e-8) with the same per-parameter lr scales."""

    def __init__(self, named_params, lr, lr_scale=lambda name: 1.0, betas=(0.9, 0.999), eps=1e-8):
        super().__init__(named_params, lr, 0.0, lr_scale)
        self.betas, self.eps, self.t = betas, eps, 0
        self.second = [np.zeros_like(p.data) for _, p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for (name, p), m, v, scale in zip(self.params, self.velocity, self.second, self.scales):
            if not p.trainable:
                continue
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            p.data -= ((self.lr * scale / c1) * m / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def _as_arrays(data, dtype):
    if isinstance(data, tuple) and len(data) == 2 and isinstance(data[0], np.ndarray):
        x, y = data
    else:
        x = np.stack([s.image for s in data])
        y = np.array([s.label for s in data], dtype=np.int64)
    return np.asarray(x, dtype=dtype), np.asarray(y, dtype=np.int64)


def predict_logits(model, x: np.ndarray, batch_size: int = 200) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            out.append(np.asarray(model(Tensor(x[i:i + batch_size])).data))
    return np.concatenate(out)


def evaluate(model, dataset, batch_size: int = 200) -> float:
    """Top-1 accuracy of `model` (any callable returning logits) on samples or (x, y) arrays."""
    x, y = _as_arrays(dataset, getattr(model, "dtype", np.float64))
    return float((predict_logits(model, x, batch_size).argmax(axis=1) == y).mean())


def _evaluate_loss_acc(model, x, y, batch_size=200):
    logits = predict_logits(model, x, batch_size)
    with no_grad():
        loss = F.softmax_cross_entropy(Tensor(logits), y).item()
    return loss, float((logits.argmax(axis=1) == y).mean())


def train(model: SmallNet, train_data, test_data, config: TrainConfig,
          on_epoch: Optional[Callable[[EpochMetrics], None]] = None) -> List[EpochMetrics]:
    """Mini-batch SGD (or Adam) with a per-step cosine (or constant) learning
    rate; non-head parameters use lr * backbone_lr_scale."""
    x, y = _as_arrays(train_data, model.dtype)
    if len(x) == 0:
        raise ConfigurationError("empty training set")
    xt, yt = _as_arrays(test_data, model.dtype) if test_data is not None else (None, None)
    scale = lambda name: 1.0 if name.startswith("head.") else config.backbone_lr_scale
    if config.optimizer == "adam":
        opt = Adam(model.named_parameters(), config.lr, lr_scale=scale)
    else:
        opt = SGD(model.named_parameters(), config.lr, config.momentum, lr_scale=scale)
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = -(-len(x) // config.batch_size)
    total_steps, step = config.epochs * steps_per_epoch, 0
    history: List[EpochMetrics] = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(x))
        loss_sum, correct = 0.0, 0
        for start in range(0, len(x), config.batch_size):
            if config.schedule == "cosine":
                opt.lr = config.lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
            step += 1
            idx = order[start:start + config.batch_size]
            logits = model(Tensor(x[idx]))
            loss = F.softmax_cross_entropy(logits, y[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergence(f"non-finite loss at epoch {epoch}", history)
            opt.zero_grad()
            backward(loss)
            opt.step()
            loss_sum += value * len(idx)
            correct += int((logits.data.argmax(axis=1) == y[idx]).sum())
        if xt is not None:
            test_loss, test_acc = _evaluate_loss_acc(model, xt, yt)
        else:
            test_loss, test_acc = float("nan"), float("nan")
        m = EpochMetrics(epoch, loss_sum / len(x), correct / len(x), test_loss, test_acc)
        logger.info("epoch %d: train loss %.4f acc %.3f | test loss %.4f acc %.3f",
                    epoch, m.train_loss, m.train_acc, m.test_loss, m.test_acc)
        history.append(m)
        if on_epoch is not None:
            on_epoch(m)
    return history


def model_from_config(config: TrainConfig, bins: int = 8, dtype=np.float32, **kwargs) -> SmallNet:
    return build_smallnet(config.mode, stages=config.stages, n=config.n, bins=bins, seed=config.seed,
                          dtype=dtype, angle_coefficient=config.angle_coefficient,
                          spatial_encoding=config.spatial_encoding,
                          adaptive_combination=config.adaptive_combination, **kwargs)
