"""Multiply-accumulate accounting.

A network description is a list of layer dicts applied in order. Each layer
takes the previous layer's output shape unless it names its own ``input``
shape. Only convolutions and linear maps cost MACs; everything else only
moves shapes along.

Layer kinds and their fields:

    conv2d       in_channels, out_channels, kernel (k or (kh, kw)), stride=1, padding=0
    linear       in_features, out_features          (last axis; other axes are tokens)
    maxpool      kernel=2, stride=kernel, ceil_mode=True
    adaptive_avg_pool  target (h, w)
    reshape      shape
    transpose    axes
    elementwise  (relu, sigmoid, softmax, layernorm, dropout, add, mul ...)

Every layer may carry ``name`` and ``phase`` ("fe" for feature extraction,
"sp" for score prediction; default "sp").
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

from .model import ModelConfig
from .backbone import default_stages

ZERO_COST = {"elementwise", "relu", "sigmoid", "softmax", "layernorm", "dropout", "add", "mul"}


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerMacs:
    name: str
    kind: str
    phase: str
    input_shape: tuple[int, ...]
    output_shape: tuple[int, ...]
    macs: int


@dataclass
class MacReport:
    input_shape: tuple[int, ...]
    layers: list[LayerMacs] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(l.macs for l in self.layers)

    @property
    def feature_extraction(self) -> int:
        return sum(l.macs for l in self.layers if l.phase == "fe")

    @property
    def score_prediction(self) -> int:
        return sum(l.macs for l in self.layers if l.phase == "sp")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "kind", "phase", "input_shape", "output_shape", "macs"])
        for l in self.layers:
            w.writerow([l.name, l.kind, l.phase, "x".join(map(str, l.input_shape)),
                        "x".join(map(str, l.output_shape)), l.macs])
        w.writerow(["total_fe", "", "fe", "", "", self.feature_extraction])
        w.writerow(["total_sp", "", "sp", "", "", self.score_prediction])
        w.writerow(["total", "", "", "", "", self.total])
        return buf.getvalue()

    def to_text(self) -> str:
        width = max([len(l.name) for l in self.layers] + [5])
        lines = [f"input shape: {'x'.join(map(str, self.input_shape))}"]
        for l in self.layers:
            if l.macs:
                lines.append(f"  {l.name:<{width}}  {l.kind:<8} {l.phase}  "
                             f"{'x'.join(map(str, l.output_shape)):>14}  {l.macs:>15,d}")
        lines.append(f"feature extraction: {self.feature_extraction:,d} MACs ({human(self.feature_extraction)})")
        lines.append(f"score prediction:   {self.score_prediction:,d} MACs ({human(self.score_prediction)})")
        lines.append(f"total:              {self.total:,d} MACs ({human(self.total)})")
        return "\n".join(lines) + "\n"


def human(n: int) -> str:
    for unit, scale in (("T", 10 ** 12), ("G", 10 ** 9), ("M", 10 ** 6), ("K", 10 ** 3)):
        if n >= scale:
            return f"{n / scale:.2f}{unit}"
    return str(n)


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


def _layer(layer: dict, shape: tuple[int, ...]) -> tuple[tuple[int, ...], int]:
    kind = layer["kind"]
    if kind == "conv2d":
        if len(shape) != 3:
            raise ShapeError(f"conv2d needs a C×H×W input, got {shape}")
        c, h, w = shape
        if c != layer["in_channels"]:
            raise ShapeError(f"conv2d expects {layer['in_channels']} channels, input has {c}")
        kh, kw = _pair(layer["kernel"])
        s = layer.get("stride", 1)
        p = layer.get("padding", 0)
        ho, wo = (h + 2 * p - kh) // s + 1, (w + 2 * p - kw) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d kernel {kh}x{kw} does not fit input {h}x{w}")
        co = layer["out_channels"]
        return (co, ho, wo), co * c * kh * kw * ho * wo
    if kind == "linear":
        if not shape or shape[-1] != layer["in_features"]:
            raise ShapeError(f"linear expects last axis {layer['in_features']}, input is {shape}")
        tokens = math.prod(shape[:-1])
        return shape[:-1] + (layer["out_features"],), tokens * layer["in_features"] * layer["out_features"]
    if kind == "maxpool":
        if len(shape) != 3:
            raise ShapeError(f"maxpool needs a C×H×W input, got {shape}")
        k = layer.get("kernel", 2)
        s = layer.get("stride", k)
        c, h, w = shape
        if layer.get("ceil_mode", True):
            return (c, -(-max(h - k, 0) // s) + 1, -(-max(w - k, 0) // s) + 1), 0
        return (c, (h - k) // s + 1, (w - k) // s + 1), 0
    if kind == "adaptive_avg_pool":
        th, tw = _pair(layer["target"])
        if len(shape) != 3:
            raise ShapeError(f"adaptive pooling needs a C×H×W input, got {shape}")
        return (shape[0], th, tw), 0
    if kind == "reshape":
        new = tuple(layer["shape"])
        if math.prod(new) != math.prod(shape):
            raise ShapeError(f"cannot reshape {shape} to {new}")
        return new, 0
    if kind == "transpose":
        axes = layer.get("axes") or tuple(reversed(range(len(shape))))
        return tuple(shape[a] for a in axes), 0
    if kind in ZERO_COST:
        return shape, 0
    raise ShapeError(f"unknown layer kind {kind!r}")


def count_macs(description: list[dict], input_shape) -> MacReport:
    report = MacReport(tuple(input_shape))
    shape = tuple(input_shape)
    for i, layer in enumerate(description):
        if "input" in layer:
            shape = tuple(layer["input"])
        try:
            out, macs = _layer(layer, shape)
        except KeyError as exc:
            raise ShapeError(f"layer {i} ({layer.get('kind')}) missing field {exc}") from None
        report.layers.append(LayerMacs(layer.get("name", f"{layer['kind']}{i}"), layer["kind"],
                                       layer.get("phase", "sp"), shape, out, int(macs)))
        shape = out
    return report


def describe_model(config: ModelConfig, n_frames: int) -> list[dict]:
    """Layer list for one forward pass of the attention scorer on ``n_frames`` frames."""
    d = config.dim
    rows = n_frames + 1 if config.cls_token else n_frames
    desc: list[dict] = []
    if config.key_value:
        desc.append({"name": "key", "kind": "linear", "in_features": d, "out_features": d, "input": (3, rows, d)})
        desc.append({"name": "value", "kind": "linear", "in_features": d, "out_features": d, "input": (rows, d)})
    stages = config.stages or default_stages(d, config.reduction)
    c_in = 3
    for i, s in enumerate(stages):
        layer = {"name": f"backbone.conv{i}", "kind": "conv2d", "in_channels": c_in,
                 "out_channels": s.out_channels, "kernel": s.kernel, "padding": s.kernel // 2}
        if i == 0:
            layer["input"] = (3, rows, d)
        desc.append(layer)
        if s.pool:
            desc.append({"name": f"backbone.pool{i}", "kind": "maxpool", "kernel": 2, "stride": 2})
        c_in = s.out_channels
    desc += [
        {"name": "attn.pool", "kind": "adaptive_avg_pool", "target": (rows, 1)},
        {"name": "attn.squeeze", "kind": "reshape", "shape": (d, rows)},
        {"name": "attn.transpose", "kind": "transpose"},
        {"name": "attn.norm", "kind": "layernorm"},
        {"name": "mix.softmax", "kind": "softmax"},
        {"name": "mix.weight", "kind": "mul"},
        {"name": "fc1", "kind": "linear", "in_features": d, "out_features": d, "input": (n_frames, d)},
        {"name": "relu", "kind": "relu"},
        {"name": "cls_norm", "kind": "layernorm"},
        {"name": "fc2", "kind": "linear", "in_features": d, "out_features": 1},
        {"name": "sigmoid", "kind": "sigmoid"},
    ]
    return desc


def model_macs(config: ModelConfig, n_frames: int, feature_extractor: list[dict] | None = None,
               frame_shape: tuple[int, int, int] | None = None) -> MacReport:
    """MACs for scoring one video; an optional per-frame extractor description is counted T times as FE."""
    report = count_macs(describe_model(config, n_frames), (n_frames, config.dim))
    if feature_extractor:
        if frame_shape is None:
            raise ShapeError("a feature extractor description needs the per-frame input shape")
        fe = count_macs(feature_extractor, frame_shape)
        scaled = [LayerMacs(l.name, l.kind, "fe", l.input_shape, l.output_shape, l.macs * n_frames)
                  for l in fe.layers]
        report.layers = scaled + report.layers
    return report
