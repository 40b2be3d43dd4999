"""Skeleton-sequence data types, egocentric normalization, and slice maps.

A bout is a [T, J, 2] array of 2-D keypoint coordinates at a fixed frame
rate. Normalization anchors the whole bout to frame 0: root joint at the
origin, heading (root towards joint 1) along +x, and the frame-0 mean
segment length scaled to 1, so within-bout global motion is preserved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateBout, SliceMisaligned

ROOT_JOINT = 0
HEADING_JOINT = 1


@dataclass(frozen=True)
class SkeletonSequence:
    """One bout: T frames of J 2-D keypoints.

    Attributes
    ----------
    bout_id : str
        Stable identifier of the bout.
    fps : float
        Recording frame rate in Hz.
    coords : np.ndarray
        Shape [T, J, 2], float64. Normalized body-length units after
        ``normalize_bout``; raw pixels before.
    """

    bout_id: str
    fps: float
    coords: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.asarray(self.coords, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 2:
            raise ValueError(f"coords must be [T, J, 2], got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 2:
            raise ValueError(f"need T >= 1 and J >= 2, got T={arr.shape[0]}, J={arr.shape[1]}")
        if not np.isfinite(arr).all():
            raise ValueError(f"bout {self.bout_id!r} has non-finite coordinates")
        if not (self.fps > 0 and math.isfinite(self.fps)):
            raise ValueError(f"fps must be positive and finite, got {self.fps}")
        arr.setflags(write=False)
        object.__setattr__(self, "coords", arr)

    @property
    def T(self) -> int:
        return self.coords.shape[0]

    @property
    def J(self) -> int:
        return self.coords.shape[1]


@dataclass(frozen=True)
class NormalizationRecord:
    """Inverse transform of ``normalize_bout``: scale, rotate, translate."""

    translation: tuple[float, float]  # pixels; original frame-0 root position
    rotation: float                   # radians in (-pi, pi]; original heading
    scale: float                      # pixels per normalized unit

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not -math.pi < self.rotation <= math.pi:
            raise ValueError(f"rotation must lie in (-pi, pi], got {self.rotation}")


@dataclass(frozen=True)
class SliceMap:
    """Partition of an ordered frame list into consecutive runs of F frames."""

    F: int
    slice_of_frame: np.ndarray          # length T'; slice index per list position
    frames_of_slice: list[list[int]]    # each of length F, order preserving

    @property
    def n_slices(self) -> int:
        return len(self.frames_of_slice)


def _rotation_matrix(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]], dtype=np.float64)


def _mean_segment_length(frame: np.ndarray) -> float:
    """Mean distance between consecutive joints of a single [J, 2] frame."""
    deltas = np.diff(frame, axis=0)
    return float(np.mean(np.hypot(deltas[:, 0], deltas[:, 1])))


def normalize_bout(seq: SkeletonSequence) -> tuple[SkeletonSequence, NormalizationRecord]:
    """Anchor a bout to its first frame.

    Frame-0 root joint moves to the origin, the frame-0 heading
    (root -> joint 1) rotates onto +x, and all coordinates are divided by
    the frame-0 mean segment length. The returned record inverts the
    transform exactly via ``denormalize``.

    Raises
    ------
    DegenerateBout
        If the frame-0 mean segment length is below 1e-12.
    """
    frame0 = seq.coords[0]
    scale = _mean_segment_length(frame0)
    if scale < 1e-12:
        raise DegenerateBout(f"bout {seq.bout_id!r}: frame-0 joints are coincident")
    translation = frame0[ROOT_JOINT].copy()
    heading = frame0[HEADING_JOINT] - frame0[ROOT_JOINT]
    rotation = math.atan2(heading[1], heading[0])
    if rotation == -math.pi:
        rotation = math.pi
    rot_inv = _rotation_matrix(-rotation)
    coords = (seq.coords - translation) @ rot_inv.T / scale
    out = SkeletonSequence(bout_id=seq.bout_id, fps=seq.fps, coords=coords)
    rec = NormalizationRecord(
        translation=(float(translation[0]), float(translation[1])),
        rotation=rotation,
        scale=scale,
    )
    return out, rec


def denormalize(seq: SkeletonSequence, rec: NormalizationRecord) -> SkeletonSequence:
    """Invert ``normalize_bout``: scale, then rotate, then translate."""
    rot = _rotation_matrix(rec.rotation)
    coords = (seq.coords * rec.scale) @ rot.T + np.asarray(rec.translation, dtype=np.float64)
    return SkeletonSequence(bout_id=seq.bout_id, fps=seq.fps, coords=coords)


def build_slice_map(frame_indices, F: int) -> SliceMap:
    """Group an ascending frame-index list into consecutive runs of F.

    Raises
    ------
    SliceMisaligned
        If the list length is not a multiple of F.
    """
    frames = [int(f) for f in frame_indices]
    if F < 1:
        raise ValueError(f"F must be >= 1, got {F}")
    if len(frames) % F != 0:
        raise SliceMisaligned(f"{len(frames)} frames cannot form slices of {F}")
    if any(b <= a for a, b in zip(frames, frames[1:])):
        raise ValueError("frame_indices must be strictly ascending")
    n_slices = len(frames) // F
    frames_of_slice = [frames[s * F : (s + 1) * F] for s in range(n_slices)]
    slice_of_frame = np.repeat(np.arange(n_slices, dtype=np.int64), F)
    return SliceMap(F=F, slice_of_frame=slice_of_frame, frames_of_slice=frames_of_slice)


def pad_to_slice_multiple(seq: SkeletonSequence, F: int) -> SkeletonSequence:
    """Repeat the last frame until T is a multiple of F (identity if it is)."""
    rem = seq.T % F
    if rem == 0:
        return seq
    pad = np.repeat(seq.coords[-1:], F - rem, axis=0)
    coords = np.concatenate([seq.coords, pad], axis=0)
    return SkeletonSequence(bout_id=seq.bout_id, fps=seq.fps, coords=coords)
