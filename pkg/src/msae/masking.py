"""Two-stage sequence masking and the visible-token bookkeeping around it.

Stage one removes whole frames (temporal masking); stage two removes a
fixed number of joints from every remaining frame (spatial masking), with
independently drawn joint sets per frame. Both masked and visible index
sets are kept so sequences can be rebuilt after reconstruction.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import EmptyVisible, PlanMismatch
from .rng import SplitMix64, derive_seed
from .skeleton import SkeletonSequence


def ratio_floor(ratio: float, n: int) -> int:
    """floor(ratio * n), tolerant of f64 representations of e.g. 1/3."""
    return math.floor(ratio * n + 1e-9)


@dataclass(frozen=True)
class MaskPlan:
    """Outcome of the two-stage masking draw for one bout.

    ``visible_frames`` has length T - floor(r_t*T) rounded down to a
    multiple of F so the visible frames always form whole slices; every
    visible frame masks exactly floor(r_s*J) joints.
    """

    r_t: float
    r_s: float
    masked_frames: list[int]
    visible_frames: list[int]
    masked_joints_per_visible_frame: list[list[int]]
    seed: int
    T: int
    J: int

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "MaskPlan":
        return cls(**json.loads(text))

    @property
    def joints_masked_per_frame(self) -> int:
        return ratio_floor(self.r_s, self.J)

    @property
    def n_visible_tokens(self) -> int:
        return len(self.visible_frames) * (self.J - self.joints_masked_per_frame)


def plan_mask(T: int, J: int, F: int, r_t: float, r_s: float, seed: int) -> MaskPlan:
    """Draw a mask plan: frames first, then joints within each visible frame.

    Masked frames are a uniform without-replacement draw; each visible frame
    then masks a uniform without-replacement draw of floor(r_s*J) joints.
    Deterministic in all arguments.

    Raises
    ------
    EmptyVisible
        If rounding the visible frame count down to a multiple of F
        leaves fewer than F frames.
    """
    if not (T >= F >= 1):
        raise ValueError(f"need T >= F >= 1, got T={T}, F={F}")
    if not (0 <= r_t < 1 and 0 <= r_s < 1):
        raise ValueError(f"ratios must lie in [0, 1), got r_t={r_t}, r_s={r_s}")
    if J < 1:
        raise ValueError(f"need J >= 1, got {J}")
    n_visible = T - ratio_floor(r_t, T)
    n_visible -= n_visible % F
    if n_visible < F:
        raise EmptyVisible(
            f"r_t={r_t} leaves {n_visible} visible frames of T={T}; need at least F={F}"
        )
    rng = SplitMix64(derive_seed(seed, "mask-plan"))
    masked_frames = rng.sample(T, T - n_visible)
    masked_set = set(masked_frames)
    visible_frames = [f for f in range(T) if f not in masked_set]
    k_joints = ratio_floor(r_s, J)
    masked_joints = [rng.sample(J, k_joints) for _ in visible_frames]
    return MaskPlan(
        r_t=r_t,
        r_s=r_s,
        masked_frames=masked_frames,
        visible_frames=visible_frames,
        masked_joints_per_visible_frame=masked_joints,
        seed=seed,
        T=T,
        J=J,
    )


def _check_plan(plan: MaskPlan, seq: SkeletonSequence) -> None:
    if plan.T != seq.T or plan.J != seq.J:
        raise PlanMismatch(
            f"plan is for T={plan.T}, J={plan.J} but bout {seq.bout_id!r} "
            f"has T={seq.T}, J={seq.J}"
        )


def visible_positions(plan: MaskPlan) -> np.ndarray:
    """All visible (frame, joint) pairs, frame-ascending then joint-ascending."""
    positions = []
    for f, masked in zip(plan.visible_frames, plan.masked_joints_per_visible_frame):
        masked_set = set(masked)
        positions.extend((f, j) for j in range(plan.J) if j not in masked_set)
    if not positions:
        return np.empty((0, 2), dtype=np.int64)
    return np.asarray(positions, dtype=np.int64)


def gather_visible(seq: SkeletonSequence, plan: MaskPlan) -> tuple[np.ndarray, np.ndarray]:
    """Coordinates and (frame, joint) positions of all visible tokens.

    Ordered by frame ascending then joint ascending. Returns
    ``(coords [N, 2] float64, positions [N, 2] int64)``.
    """
    _check_plan(plan, seq)
    positions = visible_positions(plan)
    if len(positions) == 0:
        return np.empty((0, 2), dtype=np.float64), positions
    coords = seq.coords[positions[:, 0], positions[:, 1]]
    return np.ascontiguousarray(coords, dtype=np.float64), positions


def scatter_restore(predicted: np.ndarray, original: SkeletonSequence, plan: MaskPlan) -> SkeletonSequence:
    """Keep originals at visible positions, take predictions at masked ones."""
    _check_plan(plan, original)
    predicted = np.asarray(predicted, dtype=np.float64)
    if predicted.shape != original.coords.shape:
        raise PlanMismatch(
            f"predicted grid {predicted.shape} does not cover {original.coords.shape}"
        )
    indicator = mask_indicator(plan)
    coords = np.where(indicator[:, :, None], predicted, original.coords)
    return SkeletonSequence(bout_id=original.bout_id, fps=original.fps, coords=coords)


def mask_indicator(plan: MaskPlan) -> np.ndarray:
    """Boolean [T, J] grid, true exactly at masked positions."""
    grid = np.zeros((plan.T, plan.J), dtype=bool)
    grid[plan.masked_frames, :] = True
    for f, masked in zip(plan.visible_frames, plan.masked_joints_per_visible_frame):
        grid[f, masked] = True
    return grid
