"""Checkpoint container, task vectors and the two reference merges.

On-disk layout ("MDAT v1")::

    b"MDATCKP1"                          8-byte magic
    uint64 little-endian                 byte length of the manifest
    UTF-8 JSON                           [{"name", "shape", "role", "byte_offset"}, ...]
    blob                                 float32 LE tensors, manifest order, no padding

Offsets are relative to the start of the blob. In memory every tensor is a
float64 matrix; 1-d tensors are held as 1×n rows and keep their declared
shape in the manifest.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import FormatError, InvalidArgumentError, ShapeMismatchError

MAGIC = b"MDATCKP1"
ROLES = ("weight-2d", "bias-1d", "head")
_DISK_DTYPE = np.dtype("<f4")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    shape: tuple[int, ...]
    role: str

    def matrix_shape(self) -> tuple[int, int]:
        if len(self.shape) == 1:
            return (1, self.shape[0])
        return (self.shape[0], self.shape[1])


@dataclass
class Checkpoint:
    manifest: list[LayerSpec] = field(default_factory=list)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for spec in self.manifest:
            if spec.role not in ROLES:
                raise InvalidArgumentError(f"unknown role {spec.role!r} for {spec.name}")
            t = self.tensors.get(spec.name)
            if t is None:
                raise ShapeMismatchError(f"manifest entry {spec.name} has no tensor")
            if t.shape != spec.matrix_shape():
                raise ShapeMismatchError(
                    f"{spec.name}: tensor shape {t.shape} != declared {spec.shape}"
                )

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def spec(self, name: str) -> LayerSpec:
        for s in self.manifest:
            if s.name == name:
                return s
        raise KeyError(name)

    def backbone(self) -> list[LayerSpec]:
        return [s for s in self.manifest if s.role != "head"]

    def heads(self) -> list[LayerSpec]:
        return [s for s in self.manifest if s.role == "head"]

    def with_layers(self, specs: Iterable[LayerSpec], tensors: Mapping[str, np.ndarray]):
        specs = list(specs)
        return Checkpoint(specs, {s.name: np.asarray(tensors[s.name], dtype=np.float64) for s in specs})


def make_checkpoint(layers: Sequence[tuple[str, np.ndarray, str]]) -> Checkpoint:
    """Build a checkpoint from ``(name, array, role)`` triples."""
    manifest, tensors = [], {}
    for name, arr, role in layers:
        arr = np.asarray(arr, dtype=np.float64)
        spec = LayerSpec(name, tuple(int(n) for n in arr.shape), role)
        manifest.append(spec)
        tensors[name] = arr.reshape(spec.matrix_shape())
    return Checkpoint(manifest, tensors)


def dumps(ckpt: Checkpoint) -> bytes:
    """Serialise to MDAT v1 bytes: magic, manifest length, JSON manifest, float32 blob."""
    entries, chunks, offset = [], [], 0
    for spec in ckpt.manifest:
        raw = np.ascontiguousarray(ckpt.tensors[spec.name], dtype=_DISK_DTYPE).tobytes()
        entries.append(
            {"name": spec.name, "shape": list(spec.shape), "role": spec.role, "byte_offset": offset}
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(entries, separators=(",", ":")).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<Q", len(header)), header, *chunks])


def save(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(ckpt))


def load(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    return loads(data)


def loads(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise FormatError("bad-magic", "not an MDAT v1 checkpoint")
    pos = len(MAGIC)
    if len(data) < pos + 8:
        raise FormatError("truncated", "missing manifest length")
    (hlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    if len(data) < pos + hlen:
        raise FormatError("truncated", "manifest extends past end of file")
    try:
        entries = json.loads(data[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("bad-manifest", str(exc)) from exc
    if not isinstance(entries, list):
        raise FormatError("bad-manifest", "manifest must be a JSON list")
    blob = memoryview(data)[pos + hlen :]

    manifest, tensors, expected = [], {}, 0
    for e in entries:
        try:
            name, shape, role, off = e["name"], tuple(int(n) for n in e["shape"]), e["role"], int(e["byte_offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError("bad-manifest", f"malformed entry {e!r}") from exc
        if role not in ROLES or len(shape) not in (1, 2) or min(shape, default=0) < 0:
            raise FormatError("bad-manifest", f"invalid entry {name!r}")
        if name in tensors:
            raise FormatError("bad-manifest", f"duplicate tensor {name!r}")
        nbytes = int(np.prod(shape)) * _DISK_DTYPE.itemsize
        if off != expected:
            raise FormatError("bad-offset", f"{name}: offset {off}, expected {expected}")
        if off + nbytes > len(blob):
            raise FormatError("truncated", f"{name}: tensor data extends past end of file")
        spec = LayerSpec(name, shape, role)
        arr = np.frombuffer(blob[off : off + nbytes], dtype=_DISK_DTYPE)
        tensors[name] = arr.astype(np.float64).reshape(spec.matrix_shape())
        manifest.append(spec)
        expected = off + nbytes
    if expected != len(blob):
        raise FormatError("bad-offset", f"{len(blob) - expected} trailing bytes after last tensor")
    return Checkpoint(manifest, tensors)


@dataclass
class TaskVector:
    task_id: str
    layers: dict[str, np.ndarray]


@dataclass
class FusionCoefficients:
    values: dict[str, float]

    @classmethod
    def uniform(cls, names: Iterable[str], value: float) -> "FusionCoefficients":
        return cls({n: float(value) for n in names})

    def __getitem__(self, name: str) -> float:
        return self.values[name]

    def to_json(self) -> str:
        return json.dumps(self.values)

    @classmethod
    def from_json(cls, text: str) -> "FusionCoefficients":
        return cls({k: float(v) for k, v in json.loads(text).items()})


def _check_backbones(a: Checkpoint, b: Checkpoint) -> None:
    if a.backbone() != b.backbone():
        raise ShapeMismatchError("checkpoints have different backbone manifests")


def task_vector(pretrained: Checkpoint, finetuned: Checkpoint, task_id: str = "") -> TaskVector:
    """Per-layer ``finetuned - pretrained``; head layers are skipped."""
    _check_backbones(pretrained, finetuned)
    layers = {s.name: finetuned[s.name] - pretrained[s.name] for s in pretrained.backbone()}
    return TaskVector(task_id, layers)


def merge_task_arithmetic(
    pretrained: Checkpoint,
    vectors: Sequence[TaskVector],
    lam: FusionCoefficients | float,
) -> Checkpoint:
    """``θ₀ + λ·Σ τ_t`` per backbone layer; the result carries no heads."""
    if not vectors:
        raise InvalidArgumentError("task arithmetic needs at least one task vector")
    specs = pretrained.backbone()
    if isinstance(lam, (int, float)):
        lam = FusionCoefficients.uniform([s.name for s in specs], lam)
    out = {}
    for s in specs:
        total = np.zeros(s.matrix_shape())
        for v in vectors:
            tau = v.layers.get(s.name)
            if tau is None or tau.shape != total.shape:
                raise ShapeMismatchError(f"task vector {v.task_id!r} does not match layer {s.name}")
            total = total + tau
        out[s.name] = pretrained[s.name] + lam[s.name] * total
    return pretrained.with_layers(specs, out)


def merge_weight_average(checkpoints: Sequence[Checkpoint]) -> Checkpoint:
    if not checkpoints:
        raise InvalidArgumentError("weight averaging needs at least one checkpoint")
    first = checkpoints[0]
    for other in checkpoints[1:]:
        _check_backbones(first, other)
    specs = first.backbone()
    out = {s.name: np.mean([c[s.name] for c in checkpoints], axis=0) for s in specs}
    return first.with_layers(specs, out)


def attach_head(backbone: Checkpoint, source: Checkpoint) -> Checkpoint:
    """Backbone layers of ``backbone`` plus the head layers of ``source``."""
    specs = backbone.backbone() + source.heads()
    tensors = {**backbone.tensors, **{s.name: source[s.name] for s in source.heads()}}
    return Checkpoint(specs, {s.name: tensors[s.name] for s in specs})
