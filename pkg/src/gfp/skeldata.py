"""Skeleton sequences, the SKL1 dataset file, synthetic actions and augmentation."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, ValidationError

MAGIC = b"SKL1"
FORMAT_VERSION = 1
UNLABELED = -1

_HEADER = struct.Struct("<4sHHHI")


@dataclass(frozen=True, eq=False)
class SkeletonSequence:
    """One action sample: a ``(T, V, C)`` coordinate tensor plus label and id."""

    data: np.ndarray
    label: int | None = None
    sample_id: str = ""

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValidationError(f"sequence data must be T x V x C, got shape {data.shape}")
        T, V, C = data.shape
        if T < 2 or V < 1 or C < 1:
            raise ValidationError(f"need T >= 2, V >= 1, C >= 1; got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValidationError(f"sequence {self.sample_id!r} has non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def joints(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def with_data(self, data: np.ndarray) -> "SkeletonSequence":
        return SkeletonSequence(data, self.label, self.sample_id)


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    label: int
    offset: int
    length: int


@dataclass(frozen=True)
class DatasetManifest:
    samples: list[ManifestEntry]
    num_classes: int
    joints: int
    channels: int

    def summary(self) -> dict:
        counts: dict[int, int] = {}
        for s in self.samples:
            counts[s.label] = counts.get(s.label, 0) + 1
        return {
            "format": MAGIC.decode(),
            "version": FORMAT_VERSION,
            "num_samples": len(self.samples),
            "num_classes": self.num_classes,
            "joints": self.joints,
            "channels": self.channels,
            "class_counts": {str(k): v for k, v in sorted(counts.items())},
        }


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the sinusoidal action generator.

    Class ``c`` oscillates every joint around ``base_pose`` at
    ``class_frequencies[c]`` cycles per sequence, with a per-joint phase offset.
    """

    num_classes: int = 4
    samples_per_class: int = 128
    frames: int = 40
    joints: int = 10
    channels: int = 3
    base_pose: np.ndarray | None = None
    class_frequencies: tuple[float, ...] = (1.0, 2.0, 3.0, 4.0)
    amplitude: float = 1.0
    noise_std: float = 1.25
    seed: int = 0

    def resolved_base_pose(self) -> np.ndarray:
        if self.base_pose is None:
            # a fixed, seed-independent pose so all datasets share one skeleton
            return np.random.default_rng(12345).normal(0.0, 1.0, (self.joints, self.channels))
        return np.asarray(self.base_pose, dtype=np.float64)

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if len(self.class_frequencies) != self.num_classes:
            raise ValidationError(
                f"class_frequencies has {len(self.class_frequencies)} entries, "
                f"expected num_classes={self.num_classes}"
            )
        if len(set(self.class_frequencies)) != len(self.class_frequencies):
            raise ValidationError("class_frequencies must be pairwise distinct")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be >= 0")
        if self.samples_per_class < 1 or self.frames < 2 or self.joints < 1 or self.channels < 1:
            raise ValidationError("samples_per_class >= 1, frames >= 2, joints >= 1, channels >= 1")
        if self.resolved_base_pose().shape != (self.joints, self.channels):
            raise ValidationError("base_pose must have shape (joints, channels)")


def generate_synthetic(spec: SyntheticSpec) -> list[SkeletonSequence]:
    spec.validate()
    rng = np.random.Generator(np.random.Philox(spec.seed))
    T, V, C = spec.frames, spec.joints, spec.channels
    base = spec.resolved_base_pose()
    t = np.arange(T, dtype=np.float64)[:, None]
    phase = 2.0 * np.pi * np.arange(V, dtype=np.float64)[None, :] / V
    out = []
    for c, freq in enumerate(spec.class_frequencies):
        wave = spec.amplitude * np.sin(2.0 * np.pi * freq * t / T + phase)  # T x V
        clean = base[None, :, :] + wave[:, :, None]
        for i in range(spec.samples_per_class):
            noise = rng.normal(0.0, 1.0, (T, V, C)) * spec.noise_std
            out.append(SkeletonSequence((clean + noise).astype(np.float32), c, f"syn-c{c:02d}-{i:05d}"))
    return out


def write_dataset(sequences: Sequence[SkeletonSequence], path: str | Path) -> DatasetManifest:
    """Write sequences to an SKL1 file plus a ``.json`` summary sidecar."""
    path = Path(path)
    if sequences:
        V, C = sequences[0].joints, sequences[0].channels
    else:
        V, C = 0, 0
    ids = set()
    chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, V, C, len(sequences))]
    offset = _HEADER.size
    entries = []
    for seq in sequences:
        if (seq.joints, seq.channels) != (V, C):
            raise FormatError(
                f"sample {seq.sample_id!r} has V={seq.joints}, C={seq.channels}; file uses V={V}, C={C}"
            )
        if seq.sample_id in ids:
            raise ValidationError(f"duplicate sample id {seq.sample_id!r}")
        ids.add(seq.sample_id)
        sid = seq.sample_id.encode("utf-8")
        label = UNLABELED if seq.label is None else int(seq.label)
        payload = np.ascontiguousarray(seq.data, dtype="<f4").tobytes()
        rec = struct.pack("<H", len(sid)) + sid + struct.pack("<iI", label, seq.frames) + payload
        chunks.append(rec)
        entries.append(ManifestEntry(seq.sample_id, label, offset, len(rec)))
        offset += len(rec)
    path.write_bytes(b"".join(chunks))
    manifest = _manifest(entries, V, C)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(manifest.summary(), indent=2) + "\n")
    return manifest


def read_dataset(path: str | Path) -> tuple[DatasetManifest, list[SkeletonSequence]]:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FormatError("file shorter than SKL1 header")
    magic, version, V, C, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported SKL1 version {version}")
    pos = _HEADER.size
    entries, seqs = [], []

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated payload at byte {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    for _ in range(count):
        start = pos
        (id_len,) = struct.unpack("<H", take(2))
        sid = take(id_len).decode("utf-8")
        label, T = struct.unpack("<iI", take(8))
        raw = take(4 * T * V * C)
        data = np.frombuffer(raw, dtype="<f4").reshape(T, V, C).astype(np.float32)
        seqs.append(SkeletonSequence(data, None if label == UNLABELED else label, sid))
        entries.append(ManifestEntry(sid, label, start, pos - start))
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last record")
    return _manifest(entries, V, C), seqs


def _manifest(entries: list[ManifestEntry], V: int, C: int) -> DatasetManifest:
    labels = [e.label for e in entries if e.label != UNLABELED]
    if len({e.sample_id for e in entries}) != len(entries):
        raise FormatError("duplicate sample ids")
    num_classes = max(labels) + 1 if labels else 0
    if any(lab < 0 for lab in labels):
        raise FormatError("negative label")
    return DatasetManifest(entries, num_classes, V, C)


def resample_frames(data: np.ndarray, target_frames: int) -> np.ndarray:
    """Linear interpolation along time so the output has ``target_frames`` frames."""
    if target_frames < 2:
        raise ValidationError("target frame count must be >= 2")
    src = data.shape[0]
    pos = np.linspace(0.0, src - 1, target_frames)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    w = (pos - lo).reshape(-1, *([1] * (data.ndim - 1)))
    return data[lo] * (1.0 - w) + data[hi] * w


def temporal_crop_resample(
    seq: SkeletonSequence,
    target_frames: int,
    rng: np.random.Generator,
    min_fraction: float = 0.5,
) -> SkeletonSequence:
    """Random contiguous clip of 50-100% of the frames, resampled to ``target_frames``."""
    if target_frames < 2:
        raise ValidationError("target frame count must be >= 2")
    T_raw = seq.frames
    length = int(rng.integers(math.ceil(min_fraction * T_raw), T_raw + 1))
    length = max(length, 2)
    start = int(rng.integers(0, T_raw - length + 1))
    clip = np.asarray(seq.data[start : start + length], dtype=np.float64)
    return seq.with_data(resample_frames(clip, target_frames))


def center_crop(seq: SkeletonSequence, target_frames: int) -> np.ndarray:
    """Deterministic evaluation view: centered window, or resampling if too short."""
    data = np.asarray(seq.data, dtype=np.float64)
    T_raw = data.shape[0]
    if T_raw < target_frames:
        return resample_frames(data, target_frames)
    start = (T_raw - target_frames) // 2
    return data[start : start + target_frames]


def motion_transform(X: np.ndarray) -> np.ndarray:
    """Frame differences along axis -3 (time), last frame zero-padded.

    Works on ``(T, V, C)`` or batched ``(B, T, V, C)`` arrays.
    """
    X = np.asarray(X)
    if X.ndim < 3 or X.shape[-3] < 2:
        raise ValidationError("motion transform needs at least 2 frames")
    out = np.zeros_like(X, dtype=np.result_type(X.dtype, np.float64))
    out[..., :-1, :, :] = X[..., 1:, :, :] - X[..., :-1, :, :]
    return out


def stack_sequences(seqs: Sequence[SkeletonSequence]) -> tuple[np.ndarray, np.ndarray]:
    data = np.stack([np.asarray(s.data, dtype=np.float64) for s in seqs])
    labels = np.array([UNLABELED if s.label is None else s.label for s in seqs], dtype=np.int64)
    return data, labels

