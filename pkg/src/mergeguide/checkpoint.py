"""Named-tensor checkpoints and the ``GTCK`` binary file format.

A checkpoint is an immutable, name-sorted mapping of float32 arrays plus a
step id and a free-form tag. Files are laid out as::

    b"GTCK" | u32 version | u64 manifest_len | manifest (UTF-8) | payload

Each manifest line is ``name\\tf32\\tdims\\toffset\\tlength`` and lines are
sorted by name. Offsets are relative to the start of the payload. Step id
and tag travel as reserved ``__meta__.`` tensors, omitted when they hold
their defaults, so an empty checkpoint serializes to a header only.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

MAGIC = b"GTCK"
FORMAT_VERSION = 1
META_PREFIX = "__meta__."
_STEP_KEY = META_PREFIX + "step_id"
_TAG_KEY = META_PREFIX + "tag"
_HEADER = struct.Struct("<4sIQ")
# step ids are stored in a float32 slot
_MAX_STEP_ID = 2**24


class CheckpointError(Exception):
    """Base class for checkpoint construction and format errors."""


class ShapeMismatchError(CheckpointError, ValueError):
    pass


class CheckpointIOError(CheckpointError, OSError):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class ManifestMismatchError(CheckpointError):
    pass


def as_tensor(value) -> np.ndarray:
    """Return a read-only, C-contiguous float32 copy of ``value``."""
    arr = np.array(value, dtype=np.float32, copy=True, order="C")
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if any(d <= 0 for d in arr.shape):
        raise ShapeMismatchError(f"tensor dimensions must be positive, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise CheckpointError("tensor contains non-finite values")
    arr.setflags(write=False)
    return arr


def tensor_axpy(a: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Elementwise ``a * x + y`` in float32; inputs are left untouched."""
    if x.shape != y.shape:
        raise ShapeMismatchError(f"shape mismatch: {x.shape} vs {y.shape}")
    out = np.float32(a) * np.asarray(x, dtype=np.float32) + np.asarray(y, dtype=np.float32)
    return as_tensor(out)


@dataclass(frozen=True)
class Checkpoint:
    params: Mapping[str, np.ndarray]
    step_id: int = 0
    tag: str = ""

    def __post_init__(self):
        if self.step_id < 0:
            raise CheckpointError("step_id must be nonnegative")
        for name in self.params:
            if name.startswith(META_PREFIX):
                raise CheckpointError(f"parameter name {name!r} uses the reserved prefix")
            if not name or any(c in name for c in "\t\n"):
                raise CheckpointError(f"invalid parameter name {name!r}")
        ordered = {name: as_tensor(self.params[name]) for name in sorted(self.params)}
        object.__setattr__(self, "params", ordered)

    def names(self) -> list[str]:
        return list(self.params)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.params.items()}

    def compatible(self, other: "Checkpoint") -> bool:
        return self.shapes() == other.shapes()

    def num_entries(self) -> int:
        return sum(v.size for v in self.params.values())

    def replace(self, **changes) -> "Checkpoint":
        kw = {"params": self.params, "step_id": self.step_id, "tag": self.tag}
        kw.update(changes)
        return Checkpoint(**kw)

    def equals(self, other: "Checkpoint") -> bool:
        """Bitwise equality of params plus equality of metadata."""
        if self.step_id != other.step_id or self.tag != other.tag:
            return False
        if self.shapes() != other.shapes():
            return False
        return all(
            self.params[k].tobytes() == other.params[k].tobytes() for k in self.params
        )


def require_compatible(a: Checkpoint, b: Checkpoint) -> None:
    if set(a.params) != set(b.params):
        missing = sorted(set(a.params) ^ set(b.params))
        raise ShapeMismatchError(f"parameter names differ: {missing}")
    for name in a.params:
        if a.params[name].shape != b.params[name].shape:
            raise ShapeMismatchError(
                f"{name}: shape {a.params[name].shape} vs {b.params[name].shape}"
            )


def checkpoint_delta(ckpt: Checkpoint, base: Checkpoint) -> Checkpoint:
    """Per-name ``ckpt - base``; the step id is taken from ``ckpt``."""
    require_compatible(ckpt, base)
    diff = {name: tensor_axpy(-1.0, base.params[name], ckpt.params[name]) for name in ckpt.params}
    return Checkpoint(diff, step_id=ckpt.step_id, tag=ckpt.tag)


@dataclass
class CheckpointBuffer:
    """Initial model plus the append-only history of training checkpoints."""

    base: Checkpoint
    history: list[Checkpoint] = field(default_factory=list)

    def __post_init__(self):
        entries, self.history = list(self.history), []
        for c in entries:
            self.append(c)

    def append(self, ckpt: Checkpoint) -> None:
        require_compatible(ckpt, self.base)
        if self.history and ckpt.step_id <= self.history[-1].step_id:
            raise CheckpointError(
                f"step ids must increase: {ckpt.step_id} after {self.history[-1].step_id}"
            )
        self.history.append(ckpt)

    def __len__(self) -> int:
        return len(self.history)


# --- serialization -----------------------------------------------------------


def _file_tensors(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    tensors = dict(ckpt.params)
    if ckpt.step_id:
        if ckpt.step_id >= _MAX_STEP_ID:
            raise CheckpointError(f"step_id {ckpt.step_id} too large to serialize")
        tensors[_STEP_KEY] = np.array([ckpt.step_id], dtype=np.float32)
    if ckpt.tag:
        raw = ckpt.tag.encode("utf-8")
        tensors[_TAG_KEY] = np.frombuffer(raw, dtype=np.uint8).astype(np.float32)
    return {k: tensors[k] for k in sorted(tensors)}


def to_bytes(ckpt: Checkpoint) -> bytes:
    tensors = _file_tensors(ckpt)
    lines, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        dims = ",".join(str(d) for d in arr.shape)
        lines.append(f"{name}\tf32\t{dims}\t{offset}\t{len(payload)}\n")
        chunks.append(payload)
        offset += len(payload)
    manifest = "".join(lines).encode("utf-8")
    return _HEADER.pack(MAGIC, FORMAT_VERSION, len(manifest)) + manifest + b"".join(chunks)


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("not a GTCK checkpoint (bad magic bytes)")
    if len(data) < _HEADER.size:
        raise TruncatedPayloadError("file ends inside the header")
    _, version, manifest_len = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    start = _HEADER.size
    if len(data) < start + manifest_len:
        raise TruncatedPayloadError("file ends inside the manifest")
    try:
        manifest = data[start : start + manifest_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ManifestMismatchError(f"manifest is not UTF-8: {exc}") from None
    payload = memoryview(data)[start + manifest_len :]

    tensors: dict[str, np.ndarray] = {}
    expected_offset = 0
    names: list[str] = []
    for line in manifest.splitlines():
        fields = line.split("\t")
        if len(fields) != 5 or fields[1] != "f32":
            raise ManifestMismatchError(f"malformed manifest line {line!r}")
        name, _, dims_s, off_s, len_s = fields
        try:
            dims = tuple(int(d) for d in dims_s.split(","))
            offset, length = int(off_s), int(len_s)
        except ValueError:
            raise ManifestMismatchError(f"malformed manifest line {line!r}") from None
        if any(d <= 0 for d in dims):
            raise ManifestMismatchError(f"{name}: non-positive dimension")
        if length != 4 * math.prod(dims):
            raise ManifestMismatchError(
                f"{name}: declared {length} bytes for shape {dims}"
            )
        if offset != expected_offset:
            raise ManifestMismatchError(f"{name}: offset {offset}, expected {expected_offset}")
        if offset + length > len(payload):
            raise TruncatedPayloadError(f"{name}: payload ends before declared bytes")
        arr = np.frombuffer(payload[offset : offset + length], dtype="<f4").reshape(dims)
        tensors[name] = arr.astype(np.float32)
        names.append(name)
        expected_offset = offset + length
    if names != sorted(names) or len(set(names)) != len(names):
        raise ManifestMismatchError("manifest names must be unique and sorted")
    if expected_offset != len(payload):
        raise ManifestMismatchError(
            f"payload has {len(payload)} bytes, manifest declares {expected_offset}"
        )

    step_id = 0
    tag = ""
    if _STEP_KEY in tensors:
        step_id = int(tensors.pop(_STEP_KEY)[0])
    if _TAG_KEY in tensors:
        tag = bytes(tensors.pop(_TAG_KEY).astype(np.uint8)).decode("utf-8")
    return Checkpoint(tensors, step_id=step_id, tag=tag)


def save(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    data = to_bytes(ckpt)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise CheckpointIOError(f"cannot write {path}: {exc}") from exc


def load(path: str | os.PathLike) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointIOError(f"cannot read {path}: {exc}") from exc
    return from_bytes(data)


def load_many(paths: Iterable[str | os.PathLike]) -> list[Checkpoint]:
    return [load(p) for p in paths]
