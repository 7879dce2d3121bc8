"""Small trainable CNN that maps the stacked 3×(T+1)×D feature image to a D-channel map.

It keeps the shape contract of the large image backbone it stands in for:
three input channels, ``D`` output channels, and a total spatial reduction
of ``r`` (one ceil-mode stride-2 max pool per halving).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .tensor import Tensor


@dataclass(frozen=True)
class Stage:
    out_channels: int
    kernel: int = 3
    pool: bool = True


@dataclass(frozen=True)
class BackboneSpec:
    out_channels: int
    reduction: int = 32
    stages: tuple[Stage, ...] = ()
    in_channels: int = 3
    bias: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.stages:
            object.__setattr__(self, "stages", default_stages(self.out_channels, self.reduction))

    def validate(self) -> None:
        r = self.reduction
        if r < 1 or r & (r - 1):
            raise ValueError(f"reduction ratio must be a power of two, got {r}")
        stride = 2 ** sum(s.pool for s in self.stages)
        if stride != r:
            raise ValueError(f"stage pools give reduction {stride}, configured reduction is {r}")
        if self.stages[-1].out_channels != self.out_channels:
            raise ValueError(
                f"last stage has {self.stages[-1].out_channels} channels, expected {self.out_channels}")
        if self.in_channels != 3:
            raise ValueError("backbone input must have 3 channels")
        for s in self.stages:
            if s.kernel < 1 or s.kernel % 2 == 0:
                raise ValueError(f"stage kernels must be odd, got {s.kernel}")


def default_stages(out_channels: int, reduction: int) -> tuple[Stage, ...]:
    """One conv+pool stage per halving; widths 32, 64, 128, ... with the last set to ``out_channels``."""
    if reduction < 1 or reduction & (reduction - 1):
        raise ValueError(f"reduction ratio must be a power of two, got {reduction}")
    n_pools = int(math.log2(reduction))
    if n_pools == 0:
        return (Stage(out_channels, 3, pool=False),)
    widths = [32 * 2 ** i for i in range(n_pools - 1)] + [out_channels]
    return tuple(Stage(w, 3, pool=True) for w in widths)


@dataclass
class ConvLayer:
    weight: Tensor
    bias: Tensor | None
    padding: int
    pool: bool
    relu: bool


@dataclass
class Network:
    spec: BackboneSpec
    layers: list[ConvLayer] = field(default_factory=list)

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for i, layer in enumerate(self.layers):
            params[f"conv{i}.weight"] = layer.weight
            if layer.bias is not None:
                params[f"conv{i}.bias"] = layer.bias
        return params

    def output_shape(self, height: int, width: int) -> tuple[int, int, int]:
        for layer in self.layers:
            if layer.pool:
                height, width = -(-height // 2), -(-width // 2)
        return self.spec.out_channels, height, width

    def layer_shapes(self, height: int, width: int) -> list[dict]:
        """Per-layer metadata used for MAC accounting."""
        out = []
        c_in = self.spec.in_channels
        for i, layer in enumerate(self.layers):
            c_out, _, kh, kw = layer.weight.shape
            out.append({"name": f"conv{i}", "kind": "conv2d", "in_channels": c_in, "out_channels": c_out,
                        "kernel": (kh, kw), "output": (height, width)})
            if layer.pool:
                height, width = -(-height // 2), -(-width // 2)
                out.append({"name": f"pool{i}", "kind": "maxpool", "output": (height, width)})
            c_in = c_out
        return out


def build_backbone(spec: BackboneSpec, dtype=np.float32) -> Network:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    net = Network(spec)
    c_in = spec.in_channels
    n = len(spec.stages)
    for i, stage in enumerate(spec.stages):
        k = stage.kernel
        fan_in = c_in * k * k
        bound = 1.0 / math.sqrt(fan_in)
        w = Tensor(rng.uniform(-bound, bound, (stage.out_channels, c_in, k, k)).astype(dtype),
                   requires_grad=True, name=f"conv{i}.weight")
        b = None
        if spec.bias:
            b = Tensor(rng.uniform(-bound, bound, stage.out_channels).astype(dtype),
                       requires_grad=True, name=f"conv{i}.bias")
        # no ReLU after the last conv: the map feeds a skip connection and layer norm
        net.layers.append(ConvLayer(w, b, k // 2, stage.pool, relu=i < n - 1))
        c_in = stage.out_channels
    return net


def backbone_forward(net: Network, ek: Tensor) -> Tensor:
    """Run the stacked embedding (3, T+1, D) through the network -> (D, ceil((T+1)/r), ceil(D/r))."""
    if ek.ndim != 3 or ek.shape[0] != net.spec.in_channels:
        raise ValueError(f"backbone expects a 3×(T+1)×D input, got {ek.shape}")
    if ek.shape[1] < 1:
        raise ValueError("backbone input needs at least one row")
    x = ek
    for layer in net.layers:
        x = tn.conv2d(x, layer.weight, layer.bias, stride=1, padding=layer.padding)
        if layer.relu:
            x = tn.relu(x)
        if layer.pool:
            x = tn.max_pool2d(x, 2, 2, ceil_mode=True)
    return x
