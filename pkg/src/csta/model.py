"""The CNN-based spatiotemporal attention scorer.

Pipeline for one video of T frames with D-dim features::

    embed -> key/value projection -> attention map (CNN + skip + LayerNorm)
          -> + fixed positional encoding -> mix (softmax over frames and over
          dimensions, dropout, multiply with values, pool T+1 -> T rows)
          -> classifier (FC, ReLU, dropout, LayerNorm, FC, sigmoid)

The ablation switches on :class:`ModelConfig` exist so the component study
can be rerun; the defaults are the full model.
"""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as tn
from .backbone import BackboneSpec, Network, Stage, backbone_forward, build_backbone
from .tensor import Tensor

SOFTMAX_MODES = ("td", "t", "d", "none")


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 1024
    reduction: int = 32
    stages: tuple[Stage, ...] = ()
    dropout: float = 0.6
    softmax_axes: str = "td"
    key_value: bool = True
    positional: bool = True
    cls_token: bool = True
    skip: bool = True
    ln_eps: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.softmax_axes not in SOFTMAX_MODES:
            raise ValueError(f"softmax_axes must be one of {SOFTMAX_MODES}, got {self.softmax_axes!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if self.positional and self.dim % 2:
            raise ValueError("positional encoding needs an even feature dimension")
        object.__setattr__(self, "stages", tuple(
            s if isinstance(s, Stage) else Stage(**s) for s in self.stages))

    def backbone_spec(self) -> BackboneSpec:
        return BackboneSpec(self.dim, self.reduction, self.stages, seed=self.seed)

    def with_seed(self, seed: int) -> ModelConfig:
        return ModelConfig(**{**self.to_dict(), "seed": seed})

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["stages"] = [asdict(s) for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in known}
        d["stages"] = tuple(Stage(**s) for s in d.get("stages", ()))
        return cls(**d)

    def __call__(self, seed: int | None = None, dtype=np.float32) -> CstaModel:
        return CstaModel(self if seed is None else self.with_seed(seed), dtype=dtype)


class CstaModel:
    """Parameter container. All maths lives in the module-level functions below."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        d = config.dim
        rng = np.random.default_rng(config.seed)
        self.backbone: Network = build_backbone(config.backbone_spec(), dtype=dtype)

        def param(name, data):
            return Tensor(np.asarray(data, dtype=dtype), requires_grad=True, name=name)

        p: OrderedDict[str, Tensor] = OrderedDict()
        bound = 1.0 / math.sqrt(d)
        if config.key_value:
            p["key.weight"] = param("key.weight", rng.uniform(-bound, bound, (d, d)))
            p["value.weight"] = param("value.weight", rng.uniform(-bound, bound, (d, d)))
        if config.cls_token:
            p["cls"] = param("cls", rng.normal(0.0, 0.02, (3, 1, d)))
        for name, t in self.backbone.parameters().items():
            p[f"backbone.{name}"] = t
            t.name = f"backbone.{name}"
        if config.skip:
            p["attn_norm.gamma"] = param("attn_norm.gamma", np.ones(d))
            p["attn_norm.beta"] = param("attn_norm.beta", np.zeros(d))
        p["fc1.weight"] = param("fc1.weight", tn.xavier_uniform((d, d), rng, dtype))
        p["fc1.bias"] = param("fc1.bias", np.zeros(d))
        p["cls_norm.gamma"] = param("cls_norm.gamma", np.ones(d))
        p["cls_norm.beta"] = param("cls_norm.beta", np.zeros(d))
        p["fc2.weight"] = param("fc2.weight", tn.xavier_uniform((d, 1), rng, dtype))
        p["fc2.bias"] = param("fc2.bias", np.zeros(1))
        self.params = p

    def parameters(self) -> OrderedDict[str, Tensor]:
        return self.params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, t in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {t.shape}")
            t.data[...] = arr

    def __call__(self, x, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        return forward(self, x, training=training, rng=rng)


# -- pipeline stages ----------------------------------------------------------

def _features(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def embed(x: Tensor, cls: Tensor | None) -> Tensor:
    """Stack the T×D features into three identical channels and prepend the CLS row -> 3×(T+1)×D."""
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"features must be a non-empty T×D matrix, got {x.shape}")
    t, d = x.shape
    rows = tn.reshape(x, (1, t, d))
    stacked = tn.concat([rows, rows, rows], axis=0)
    if cls is None:
        return stacked
    if cls.shape != (3, 1, d):
        raise ValueError(f"CLS token shape {cls.shape} does not match feature dim {d}")
    return tn.concat([cls, stacked], axis=1)


def key_value_embed(e: Tensor, model: CstaModel) -> tuple[Tensor, Tensor]:
    """Keys for all three channels, values from channel 0 only."""
    if not model.config.key_value:
        return e, e[0]
    ek = tn.matmul(e, model["key.weight"])
    ev = tn.matmul(e[0], model["value.weight"])
    return ek, ev


def attention_map(ek: Tensor, model: CstaModel) -> Tensor:
    """CNN over the key image, pooled back to (T+1)×D, plus the key skip path, layer-normed."""
    rows = ek.shape[1]
    cnn = backbone_forward(model.backbone, ek)                 # D × h × w
    pooled = tn.adaptive_avg_pool2d(cnn, (rows, 1))            # D × (T+1) × 1
    pooled = tn.transpose(tn.reshape(pooled, (cnn.shape[0], rows)))   # (T+1) × D
    if not model.config.skip:
        return pooled
    return tn.layer_norm(tn.add(pooled, ek[0]), model["attn_norm.gamma"], model["attn_norm.beta"],
                         model.config.ln_eps)


def positional_encoding(n_rows: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Fixed sinusoidal table indexed by (row, feature dimension)."""
    if dim % 2:
        raise ValueError("positional encoding needs an even dimension")
    pos = np.arange(n_rows, dtype=np.float64)[:, None]
    freq = np.power(10000.0, -np.arange(0, dim, 2, dtype=np.float64) / dim)
    pe = np.empty((n_rows, dim), dtype=np.float64)
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe.astype(dtype)


def attention_weights(p_pos: Tensor, mode: str = "td") -> list[Tensor]:
    """Att_T (softmax over rows, per column) and/or Att_D (softmax over columns, per row)."""
    if mode == "none":
        return [p_pos]
    maps = []
    if "t" in mode:
        maps.append(tn.softmax(p_pos, axis=0))
    if "d" in mode:
        maps.append(tn.softmax(p_pos, axis=1))
    return maps


def mix(p_pos: Tensor, ev: Tensor, rate: float, training: bool, rng: np.random.Generator | None,
        mode: str = "td", fuse_cls: bool = True) -> Tensor:
    """Weight the values by the attention maps and (with a CLS row) pool T+1 rows down to T."""
    if p_pos.shape != ev.shape:
        raise ValueError(f"attention map {p_pos.shape} and values {ev.shape} disagree")
    m = None
    for att in attention_weights(p_pos, mode):
        term = tn.mul(tn.dropout(att, rate, training, rng), ev)
        m = term if m is None else tn.add(m, term)
    if not fuse_cls:
        return m
    return tn.adaptive_avg_pool1d_rows(m, p_pos.shape[0] - 1)


def classify(m: Tensor, model: CstaModel, training: bool, rng: np.random.Generator | None) -> Tensor:
    h = tn.relu(tn.linear(m, model["fc1.weight"], model["fc1.bias"]))
    h = tn.dropout(h, model.config.dropout, training, rng)
    r = tn.layer_norm(h, model["cls_norm.gamma"], model["cls_norm.beta"], model.config.ln_eps)
    s = tn.sigmoid(tn.linear(r, model["fc2.weight"], model["fc2.bias"]))
    return tn.reshape(s, (m.shape[0],))


def forward(model: CstaModel, x, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Frame importance scores in (0, 1) for a T×D feature matrix."""
    cfg = model.config
    x = _features(x, model.dtype)
    if x.ndim != 2 or x.shape[1] != cfg.dim:
        raise ValueError(f"expected T×{cfg.dim} features, got {x.shape}")
    if training and cfg.dropout > 0 and rng is None:
        raise ValueError("training forward needs an rng for dropout")
    e = embed(x, model["cls"] if cfg.cls_token else None)
    ek, ev = key_value_embed(e, model)
    p = attention_map(ek, model)
    if cfg.positional:
        p = tn.add(p, Tensor(positional_encoding(p.shape[0], cfg.dim, model.dtype)))
    m = mix(p, ev, cfg.dropout, training, rng, cfg.softmax_axes, fuse_cls=cfg.cls_token)
    return classify(m, model, training, rng)


def predict(model: CstaModel, x) -> np.ndarray:
    with tn.no_grad():
        return forward(model, x, training=False).data.copy()


mse_loss = tn.mse_loss


# -- checkpoint file ----------------------------------------------------------
#
# b"CSTAPARM" | u32 version | u32 meta_len | meta (utf-8 JSON) | u32 count |
# count × (u32 name_len | name | u32 ndim | ndim × u32 dims | float32 payload)
# All integers and floats little-endian, payloads row-major.

CHECKPOINT_MAGIC = b"CSTAPARM"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: CstaModel, meta: dict | None = None) -> None:
    header = {"model": model.config.to_dict(), **(meta or {})}
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(model.params)))
        for name, t in model.params.items():
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def read_checkpoint(path) -> tuple[dict, OrderedDict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    try:
        return _parse_checkpoint(data, path)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: truncated or corrupt checkpoint ({exc})") from None


def _parse_checkpoint(data: bytes, path) -> tuple[dict, OrderedDict[str, np.ndarray]]:
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, meta_len = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    off = 16
    meta = json.loads(data[off:off + meta_len])
    off += meta_len
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + n].decode()
        off += n
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        if off + 4 * size > len(data):
            raise ValueError(f"{path}: truncated payload for {name}")
        tensors[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
        off += 4 * size
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return meta, tensors


def load_checkpoint(path) -> tuple[CstaModel, dict]:
    meta, tensors = read_checkpoint(path)
    model = CstaModel(ModelConfig.from_dict(meta["model"]))
    model.load_state_dict(tensors)
    return model, meta
