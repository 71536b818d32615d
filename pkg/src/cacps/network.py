"""Compact skip-connected encoder-decoder segmentation network.

The model is a small U-Net-style stack: `depth` encoder stages of two 3x3
convolutions followed by 2x2 max pooling, a double-conv bottleneck, then
mirrored decoder stages of nearest-neighbor upsampling, skip concatenation
and two more convolutions, finishing with a 1x1 head and a channel softmax.

Two such networks with identical architecture but independent random
initializations form the cross-supervision pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


class NetworkError(Exception):
    pass


@dataclass(frozen=True)
class NetSpec:
    in_channels: int = 1
    num_classes: int = 3
    base_width: int = 16
    depth: int = 3
    instance_norm: bool = False

    def __post_init__(self):
        if self.num_classes < 2:
            raise NetworkError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.in_channels < 1 or self.base_width < 1 or self.depth < 1:
            raise NetworkError(f"invalid NetSpec {self}")


def _stage_widths(spec: NetSpec) -> list[int]:
    return [spec.base_width * (1 << i) for i in range(spec.depth + 1)]


def _layer_plan(spec: NetSpec) -> list[tuple[str, int, int, int]]:
    """(name, c_in, c_out, kernel_side) for every conv, in declaration order."""
    widths = _stage_widths(spec)
    plan = []
    c_prev = spec.in_channels
    for i in range(spec.depth):
        plan.append((f"enc{i}.conv1", c_prev, widths[i], 3))
        plan.append((f"enc{i}.conv2", widths[i], widths[i], 3))
        c_prev = widths[i]
    plan.append(("bottleneck.conv1", c_prev, widths[-1], 3))
    plan.append(("bottleneck.conv2", widths[-1], widths[-1], 3))
    c_prev = widths[-1]
    for i in reversed(range(spec.depth)):
        plan.append((f"dec{i}.conv1", c_prev + widths[i], widths[i], 3))
        plan.append((f"dec{i}.conv2", widths[i], widths[i], 3))
        c_prev = widths[i]
    plan.append(("head", c_prev, spec.num_classes, 1))
    return plan


def init_params(spec: NetSpec, seed: int) -> dict[str, Tensor]:
    """Kaiming-uniform kernels (bound sqrt(6/fan_in)), zero biases.

    Returns an ordered name->Tensor dict; iteration order is the declaration
    order, which the checkpoint format relies on.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, c_in, c_out, k in _layer_plan(spec):
        fan_in = c_in * k * k
        bound = np.sqrt(6.0 / fan_in)
        params[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, size=(c_out, c_in, k, k)), requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(c_out), requires_grad=True)
    return params


def param_count(spec: NetSpec) -> int:
    return sum(c_out * c_in * k * k + c_out for _, c_in, c_out, k in _layer_plan(spec))


def _double_conv(x: Tensor, params: dict, name: str, use_norm: bool) -> Tensor:
    for part in ("conv1", "conv2"):
        x = T.conv2d(x, params[f"{name}.{part}.w"], params[f"{name}.{part}.b"], padding=1)
        if use_norm:
            x = T.instance_norm(x)
        x = T.relu(x)
    return x


def forward(spec: NetSpec, params: dict[str, Tensor], image: Tensor) -> Tensor:
    """Probability maps [N, num_classes, H, W]; channel sums are 1 per pixel."""
    if image.ndim != 4 or image.shape[1] != spec.in_channels:
        raise NetworkError(f"expected [N,{spec.in_channels},H,W] input, got {image.shape}")
    h, w = image.shape[2], image.shape[3]
    div = 1 << spec.depth
    if h % div or w % div:
        raise NetworkError(f"spatial size {(h, w)} not divisible by 2^depth = {div}")

    x = image
    skips = []
    for i in range(spec.depth):
        x = _double_conv(x, params, f"enc{i}", spec.instance_norm)
        skips.append(x)
        x = T.max_pool2d(x)
    x = _double_conv(x, params, "bottleneck", spec.instance_norm)
    for i in reversed(range(spec.depth)):
        x = T.nearest_upsample2(x)
        x = T.concat_channels([x, skips[i]])
        x = _double_conv(x, params, f"dec{i}", spec.instance_norm)
    logits = T.conv2d(x, params["head.w"], params["head.b"])
    return T.softmax_channels(logits)


@dataclass
class NetworkPair:
    """Two same-architecture networks with independently initialized weights."""

    spec: NetSpec
    params_1: dict[str, Tensor]
    params_2: dict[str, Tensor]
    seeds: tuple[int, int] = field(default=(0, 1))

    def all_params(self):
        for name, p in self.params_1.items():
            yield f"net1.{name}", p
        for name, p in self.params_2.items():
            yield f"net2.{name}", p


def init_pair(spec: NetSpec, seed1: int, seed2: int) -> NetworkPair:
    if seed1 == seed2:
        raise NetworkError(f"the two networks need distinct seeds, got {seed1} twice")
    pair = NetworkPair(spec, init_params(spec, seed1), init_params(spec, seed2), (seed1, seed2))
    diff = max(
        np.abs(p1.data - p2.data).max() for p1, p2 in zip(pair.params_1.values(), pair.params_2.values())
    )
    if diff == 0.0:
        raise NetworkError("initializations coincide; check the seeding path")
    return pair
