"""Bout dataset serialization, batch scheduling, and checkpoint persistence.

Bout files are JSON-lines, one object per bout:
``{"bout_id": str, "fps": number, "frames": [[[x, y], ...J], ...T]}``.

A checkpoint is a single file: 8-byte magic ``MSAECKPT``, little-endian
u32 header length, UTF-8 JSON manifest, raw little-endian float32 blob in
manifest order, and a trailing u32 CRC32 of the blob (the same CRC is also
stored in the manifest). Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ChecksumMismatch, ParseError, ShapeError, VersionMismatch
from .rng import SplitMix64, derive_seed
from .skeleton import SkeletonSequence

CHECKPOINT_MAGIC = b"MSAECKPT"
CHECKPOINT_VERSION = 1


def read_bouts(path) -> list[SkeletonSequence]:
    """Parse a bout JSONL file; order preserved, one sequence per line."""
    bouts: list[SkeletonSequence] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}: line {lineno}: invalid JSON ({e.msg})") from e
            if not isinstance(obj, dict) or not {"bout_id", "fps", "frames"} <= obj.keys():
                raise ParseError(f"{path}: line {lineno}: missing bout_id/fps/frames")
            frames = obj["frames"]
            if not isinstance(frames, list) or not frames:
                raise ShapeError(f"{path}: line {lineno}: frames must be a non-empty list")
            J = len(frames[0])
            for t, frame in enumerate(frames):
                if len(frame) != J:
                    raise ShapeError(
                        f"{path}: line {lineno}: frame {t} has {len(frame)} joints, expected {J}"
                    )
                for pt in frame:
                    if len(pt) != 2:
                        raise ShapeError(f"{path}: line {lineno}: frame {t} has a non-2D point")
            arr = np.asarray(frames, dtype=np.float64)
            if not np.isfinite(arr).all():
                raise ShapeError(f"{path}: line {lineno}: non-finite coordinate")
            try:
                bouts.append(SkeletonSequence(bout_id=str(obj["bout_id"]), fps=float(obj["fps"]), coords=arr))
            except ValueError as e:
                raise ShapeError(f"{path}: line {lineno}: {e}") from e
    return bouts


def write_bouts(path, bouts: list[SkeletonSequence]) -> None:
    """Inverse of ``read_bouts``; floats are emitted at full round-trip precision."""
    with open(path, "w", encoding="utf-8") as fh:
        for seq in bouts:
            obj = {"bout_id": seq.bout_id, "fps": seq.fps, "frames": seq.coords.tolist()}
            fh.write(json.dumps(obj) + "\n")


def make_batches(n_bouts: int, batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    """Chunked permutation of range(n_bouts), a pure function of (seed, epoch)."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = list(range(n_bouts))
    SplitMix64(derive_seed(seed, "batch-order", epoch)).shuffle(order)
    return [order[i : i + batch_size] for i in range(0, n_bouts, batch_size)]


@dataclass(frozen=True)
class TensorEntry:
    name: str
    shape: tuple[int, ...]
    dtype: str
    offset_bytes: int

    @property
    def n_bytes(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) * 4 if self.shape else 4


@dataclass(frozen=True)
class CheckpointManifest:
    format_version: int
    config: dict
    seed: int
    step: int
    tensors: list[TensorEntry] = field(default_factory=list)
    crc32: int = 0

    def validate(self) -> None:
        offset = 0
        for entry in self.tensors:
            if entry.dtype != "f32":
                raise VersionMismatch(f"tensor {entry.name!r} has unsupported dtype {entry.dtype}")
            if entry.offset_bytes != offset:
                raise ChecksumMismatch(
                    f"tensor {entry.name!r} offset {entry.offset_bytes} != expected {offset}"
                )
            offset += entry.n_bytes

    @property
    def total_bytes(self) -> int:
        return sum(e.n_bytes for e in self.tensors)


def save_checkpoint(path, config: dict, seed: int, step: int, tensors: list[tuple[str, np.ndarray]]) -> None:
    """Write a single-file checkpoint; see module docstring for the layout."""
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f32", "offset_bytes": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    blob = b"".join(chunks)
    crc = zlib.crc32(blob) & 0xFFFFFFFF
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": config,
        "seed": seed,
        "step": step,
        "tensors": entries,
        "crc32": crc,
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(header).to_bytes(4, "little"))
        fh.write(header)
        fh.write(blob)
        fh.write(crc.to_bytes(4, "little"))


def load_checkpoint(path) -> tuple[CheckpointManifest, dict[str, np.ndarray]]:
    """Read a checkpoint back; bit-identical inverse of ``save_checkpoint``.

    Raises
    ------
    VersionMismatch
        On bad magic or unknown format version.
    ChecksumMismatch
        On truncated blobs or CRC failures.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 8 or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise VersionMismatch(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    header_len = int.from_bytes(raw[pos : pos + 4], "little")
    pos += 4
    if pos + header_len > len(raw):
        raise ChecksumMismatch(f"{path}: truncated manifest")
    try:
        obj = json.loads(raw[pos : pos + header_len].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ChecksumMismatch(f"{path}: corrupt manifest") from e
    pos += header_len
    if obj.get("format_version") != CHECKPOINT_VERSION:
        raise VersionMismatch(
            f"{path}: format_version {obj.get('format_version')} != {CHECKPOINT_VERSION}"
        )
    manifest = CheckpointManifest(
        format_version=obj["format_version"],
        config=obj["config"],
        seed=obj["seed"],
        step=obj["step"],
        tensors=[
            TensorEntry(e["name"], tuple(e["shape"]), e["dtype"], e["offset_bytes"])
            for e in obj["tensors"]
        ],
        crc32=obj["crc32"],
    )
    manifest.validate()
    blob = raw[pos : pos + manifest.total_bytes]
    trailer = raw[pos + manifest.total_bytes : pos + manifest.total_bytes + 4]
    if len(blob) != manifest.total_bytes or len(trailer) != 4:
        raise ChecksumMismatch(f"{path}: blob truncated ({len(raw) - pos} of {manifest.total_bytes + 4} bytes)")
    crc = zlib.crc32(blob) & 0xFFFFFFFF
    if crc != manifest.crc32 or crc != int.from_bytes(trailer, "little"):
        raise ChecksumMismatch(f"{path}: CRC32 mismatch")
    tensors = {}
    for entry in manifest.tensors:
        arr = np.frombuffer(blob, dtype="<f4", count=int(np.prod(entry.shape, dtype=np.int64)) if entry.shape else 1, offset=entry.offset_bytes)
        tensors[entry.name] = arr.reshape(entry.shape).copy()
    return manifest, tensors


def write_embeddings_csv(path, rows: list[tuple[str, np.ndarray]]) -> None:
    """CSV export ``bout_id,e0,...,e{d-1}`` with 9-significant-digit floats."""
    if not rows:
        raise ValueError("no embeddings to write")
    d = len(rows[0][1])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("bout_id," + ",".join(f"e{i}" for i in range(d)) + "\n")
        for bout_id, vec in rows:
            if len(vec) != d:
                raise ShapeError(f"embedding for {bout_id!r} has length {len(vec)}, expected {d}")
            fh.write(bout_id + "," + ",".join(f"{float(x):.9g}" for x in vec) + "\n")
