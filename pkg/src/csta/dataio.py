"""Dataset container, on-disk format and synthetic data generator.

A dataset is a directory::

    manifest.txt        key = value lines, then one [video] section per record
    <id>.bin            per-video blob

Blob layout (little-endian): u32 magic, u32 version, u32 T, u32 D, then
T×D float32 features, A×T float32 annotations (A = annotator count from the
manifest) and, if ``has_importance = 1``, T float32 hidden importances.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .shots import ShotSegmentation, knapsack_select, shot_scores

FORMAT_NAME = "csta-dataset"
FORMAT_VERSION = 1
BLOB_MAGIC = 0x41545343  # b"CSTA" read as little-endian u32
ANNOTATION_KINDS = ("scores", "summaries")


class DatasetError(ValueError):
    """Raised when a dataset violates its format or invariants."""


@dataclass
class VideoRecord:
    id: str
    features: np.ndarray
    annotations: np.ndarray
    annotation_kind: str = "scores"
    change_points: tuple[int, ...] | None = None
    importance: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.annotations = np.ascontiguousarray(np.atleast_2d(self.annotations), dtype=np.float32)
        if self.change_points is not None:
            self.change_points = tuple(int(c) for c in self.change_points)
        if self.importance is not None:
            self.importance = np.ascontiguousarray(self.importance, dtype=np.float32)

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_annotators(self) -> int:
        return self.annotations.shape[0]

    @property
    def target(self) -> np.ndarray:
        """Mean annotator vector, the training target."""
        return self.annotations.astype(np.float64).mean(axis=0).astype(np.float32)

    def segmentation(self) -> ShotSegmentation | None:
        if self.change_points is None:
            return None
        return ShotSegmentation(self.n_frames, self.change_points)

    def validate(self) -> None:
        where = f"video {self.id!r}"
        if self.features.ndim != 2 or self.n_frames < 1:
            raise DatasetError(f"{where}: features must be a non-empty T×D matrix, got {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise DatasetError(f"{where}: features contain non-finite values")
        if self.annotation_kind not in ANNOTATION_KINDS:
            raise DatasetError(f"{where}: annotation_kind must be one of {ANNOTATION_KINDS}")
        if self.annotations.shape[0] < 1:
            raise DatasetError(f"{where}: needs at least one annotator")
        if self.annotations.shape[1] != self.n_frames:
            raise DatasetError(
                f"{where}: annotations have {self.annotations.shape[1]} frames, features have {self.n_frames}")
        a = self.annotations
        if not np.all(np.isfinite(a)) or a.min() < 0 or a.max() > 1:
            raise DatasetError(f"{where}: annotations must lie in [0, 1]")
        if self.annotation_kind == "summaries" and not np.all((a == 0) | (a == 1)):
            raise DatasetError(f"{where}: summary annotations must be binary")
        if self.change_points is not None:
            try:
                ShotSegmentation(self.n_frames, self.change_points)
            except ValueError as exc:
                raise DatasetError(f"{where}: change_points: {exc}") from None
        if self.importance is not None and self.importance.shape != (self.n_frames,):
            raise DatasetError(f"{where}: importance has shape {self.importance.shape}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, VideoRecord):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and a.tobytes() == b.tobytes()

        return (self.id == other.id and self.annotation_kind == other.annotation_kind
                and self.change_points == other.change_points and same(self.features, other.features)
                and same(self.annotations, other.annotations) and same(self.importance, other.importance))


@dataclass
class Dataset:
    name: str
    dim: int
    videos: list[VideoRecord] = field(default_factory=list)
    version: int = FORMAT_VERSION

    def __len__(self) -> int:
        return len(self.videos)

    def __iter__(self):
        return iter(self.videos)

    def __getitem__(self, i):
        return self.videos[i]

    def validate(self) -> None:
        seen = set()
        for v in self.videos:
            v.validate()
            if v.dim != self.dim:
                raise DatasetError(f"video {v.id!r}: feature dim {v.dim}, dataset declares {self.dim}")
            if v.id in seen:
                raise DatasetError(f"duplicate video id {v.id!r}")
            seen.add(v.id)

    def subset(self, indices) -> list[VideoRecord]:
        return [self.videos[i] for i in indices]


# -- manifest -----------------------------------------------------------------

def _format_manifest(ds: Dataset) -> str:
    lines = [f"format = {FORMAT_NAME}", f"version = {ds.version}", f"name = {ds.name}",
             f"dim = {ds.dim}", f"videos = {len(ds.videos)}"]
    for v in ds.videos:
        cps = "none" if v.change_points is None else " ".join(map(str, v.change_points))
        lines += ["", "[video]", f"id = {v.id}", f"n_frames = {v.n_frames}", f"dim = {v.dim}",
                  f"annotation_kind = {v.annotation_kind}", f"annotators = {v.n_annotators}",
                  f"change_points = {cps}", f"has_importance = {int(v.importance is not None)}",
                  f"blob = {v.id}.bin"]
    return "\n".join(lines) + "\n"


def _parse_manifest(text: str, path: Path) -> tuple[dict, list[dict]]:
    header: dict[str, str] = {}
    entries: list[dict[str, str]] = []
    current = header
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line == "[video]":
            current = {}
            entries.append(current)
            continue
        if "=" not in line:
            raise DatasetError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        current[key] = value
    return header, entries


def _require(entry: dict, key: str, where: str) -> str:
    if key not in entry:
        raise DatasetError(f"{where}: missing field {key!r}")
    return entry[key]


def _int_field(entry: dict, key: str, where: str) -> int:
    value = _require(entry, key, where)
    try:
        return int(value)
    except ValueError:
        raise DatasetError(f"{where}: field {key!r} is not an integer: {value!r}") from None


# -- load / save ----------------------------------------------------------------

def save_dataset(ds: Dataset, path) -> Path:
    ds.validate()
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for v in ds.videos:
        parts = [struct.pack("<4I", BLOB_MAGIC, FORMAT_VERSION, v.n_frames, v.dim),
                 v.features.astype("<f4").tobytes(), v.annotations.astype("<f4").tobytes()]
        if v.importance is not None:
            parts.append(v.importance.astype("<f4").tobytes())
        (root / f"{v.id}.bin").write_bytes(b"".join(parts))
    (root / "manifest.txt").write_text(_format_manifest(ds))
    return root


def load_dataset(path) -> Dataset:
    root = Path(path)
    manifest = root / "manifest.txt"
    if not manifest.is_file():
        raise DatasetError(f"{root}: no manifest.txt (not a dataset directory)")
    header, entries = _parse_manifest(manifest.read_text(), manifest)
    if header.get("format") != FORMAT_NAME:
        raise DatasetError(f"{manifest}: format is {header.get('format')!r}, expected {FORMAT_NAME!r}")
    version = _int_field(header, "version", str(manifest))
    if version != FORMAT_VERSION:
        raise DatasetError(f"{manifest}: version {version} not supported (expected {FORMAT_VERSION})")
    dim = _int_field(header, "dim", str(manifest))
    declared = _int_field(header, "videos", str(manifest))
    if declared != len(entries):
        raise DatasetError(f"{manifest}: declares {declared} videos, lists {len(entries)}")

    videos = []
    for entry in entries:
        vid = _require(entry, "id", str(manifest))
        where = f"video {vid!r}"
        t = _int_field(entry, "n_frames", where)
        d = _int_field(entry, "dim", where)
        n_ann = _int_field(entry, "annotators", where)
        kind = _require(entry, "annotation_kind", where)
        has_imp = _int_field(entry, "has_importance", where) if "has_importance" in entry else 0
        cps_field = entry.get("change_points", "none")
        try:
            cps = None if cps_field == "none" else tuple(int(c) for c in cps_field.split())
        except ValueError:
            raise DatasetError(f"{where}: change_points must be integers: {cps_field!r}") from None
        if d != dim:
            raise DatasetError(f"{where}: feature dim {d}, dataset declares {dim}")
        blob_path = root / entry.get("blob", f"{vid}.bin")
        if not blob_path.is_file():
            raise DatasetError(f"{where}: blob {blob_path.name} missing")
        raw = blob_path.read_bytes()
        if len(raw) < 16:
            raise DatasetError(f"{where}: blob header truncated")
        magic, bver, bt, bd = struct.unpack_from("<4I", raw, 0)
        if magic != BLOB_MAGIC:
            raise DatasetError(f"{where}: bad blob magic {magic:#x}")
        if bver != FORMAT_VERSION:
            raise DatasetError(f"{where}: blob version {bver} not supported")
        if (bt, bd) != (t, d):
            raise DatasetError(f"{where}: blob header says T={bt}, D={bd}; manifest says T={t}, D={d}")
        n_floats = t * d + n_ann * t + (t if has_imp else 0)
        if len(raw) != 16 + 4 * n_floats:
            rows = (len(raw) - 16 - 4 * (n_ann * t + (t if has_imp else 0))) / (4 * d) if d else 0
            raise DatasetError(
                f"{where}: blob holds {len(raw) - 16} payload bytes, expected {4 * n_floats} "
                f"(T={t} declared, ~{rows:g} feature rows present)")
        payload = np.frombuffer(raw, dtype="<f4", offset=16).astype(np.float32)
        feats = payload[:t * d].reshape(t, d)
        ann = payload[t * d:t * d + n_ann * t].reshape(n_ann, t)
        imp = payload[t * d + n_ann * t:].copy() if has_imp else None
        videos.append(VideoRecord(vid, feats.copy(), ann.copy(), kind, cps, imp))

    ds = Dataset(header.get("name", root.name), dim, videos, version)
    ds.validate()
    return ds


# -- synthetic data -----------------------------------------------------------------

def _random_lengths(total: int, parts: int, rng: np.random.Generator, min_len: int = 2) -> list[int]:
    parts = max(1, min(parts, total // min_len))
    spare = total - parts * min_len
    cuts = np.sort(rng.integers(0, spare + 1, size=parts - 1))
    extra = np.diff(np.concatenate([[0], cuts, [spare]]))
    return [int(min_len + e) for e in extra]


def gen_synthetic(n_videos: int = 8, t_range: tuple[int, int] = (36, 44), dim: int = 64, n_segments: int = 5,
                  n_annotators: int = 5, noise: float = 0.1, seed: int = 0, kind: str = "scores",
                  budget_ratio: float = 0.15, name: str = "synthetic") -> Dataset:
    """Piecewise-constant feature videos with a learnable hidden importance.

    Each segment gets an importance ``u ~ U(0, 1)`` and a prototype
    ``base + 2 * (u - 0.5) * direction`` where ``direction`` is a unit vector
    shared by the whole dataset, so importance is linearly readable from the
    features. Frames are prototypes plus N(0, noise²) noise; annotators see
    the importance plus N(0, noise²), clipped to [0, 1]. For
    ``kind="summaries"`` each annotator's scores are turned into a knapsack
    summary over the true segments.
    """
    if n_videos < 1 or dim < 1 or n_segments < 1 or n_annotators < 1:
        raise ValueError("n_videos, dim, n_segments and n_annotators must be positive")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    lo, hi = t_range
    if not 1 <= lo <= hi:
        raise ValueError(f"bad frame range {t_range}")
    if kind not in ANNOTATION_KINDS:
        raise ValueError(f"kind must be one of {ANNOTATION_KINDS}")
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=dim)
    direction /= np.linalg.norm(direction)
    width = len(str(n_videos - 1))
    videos = []
    for i in range(n_videos):
        t = int(rng.integers(lo, hi + 1))
        lengths = _random_lengths(t, n_segments, rng)
        cps = tuple(int(c) for c in np.cumsum(lengths)[:-1])
        seg_imp = rng.uniform(0.0, 1.0, size=len(lengths))
        base = rng.normal(0.0, 1.0 / math.sqrt(dim), size=(len(lengths), dim))
        protos = base + 2.0 * (seg_imp[:, None] - 0.5) * direction[None, :]
        importance = np.repeat(seg_imp, lengths)
        feats = np.repeat(protos, lengths, axis=0) + noise * rng.normal(size=(t, dim))
        ann = np.clip(importance[None, :] + noise * rng.normal(size=(n_annotators, t)), 0.0, 1.0)
        if kind == "summaries":
            seg = ShotSegmentation(t, cps)
            ann = np.stack([knapsack_select(shot_scores(a, seg), seg.lengths, t, budget_ratio).mask
                            for a in ann]).astype(np.float32)
        videos.append(VideoRecord(f"video_{i:0{width}d}", feats, ann, kind, cps, importance))
    return Dataset(name, dim, videos)


def converter_notes() -> str:
    """How to export real benchmark data into this format (no converter ships)."""
    return (
        "Export one VideoRecord per video: features = per-frame image embeddings sampled at 2 fps "
        "(T×D float32); annotations = one row per annotator, either frame importance scores rescaled "
        "to [0, 1] (annotation_kind = scores) or binary keyshot summaries (annotation_kind = summaries), "
        "subsampled to the same T frames; change_points = shot boundaries in subsampled frame units if "
        "available. Build a Dataset and call save_dataset()."
    )
