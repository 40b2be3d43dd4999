"""SVG rendering of reconstruction results.

Per frame: the ground-truth skeleton as a thin silver polyline, then one
circle per (frame, joint) position — blue for visible joints (ground
truth), grey for masked joints (ground truth), red for the model's
prediction at each masked joint. Element counts therefore equal the
visible/masked position counts exactly, which the tests assert.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .masking import MaskPlan, mask_indicator
from .skeleton import SkeletonSequence


@dataclass(frozen=True)
class RenderSpec:
    frames_per_row: int = 8
    cell_size: float = 110.0
    point_radius: float = 2.2
    stroke_width: float = 1.0
    color_visible: str = "blue"
    color_masked_truth: str = "grey"
    color_reconstruction: str = "red"


def _frame_transform(all_coords: np.ndarray, cell: float, margin: float):
    lo = all_coords.reshape(-1, 2).min(axis=0)
    hi = all_coords.reshape(-1, 2).max(axis=0)
    span = float(max(hi[0] - lo[0], hi[1] - lo[1], 1e-9))
    scale = (cell - 2 * margin) / span

    def to_px(pt):
        # SVG y grows downward
        return (margin + (pt[0] - lo[0]) * scale, cell - margin - (pt[1] - lo[1]) * scale)

    return to_px


def render_reconstruction(original: SkeletonSequence, restored: SkeletonSequence,
                          plan: MaskPlan, spec: RenderSpec = RenderSpec()) -> str:
    """Fig-style SVG string for one bout; see module docstring for semantics."""
    T = original.T
    cols = min(spec.frames_per_row, T)
    rows = (T + cols - 1) // cols
    cell = spec.cell_size
    width, height = cols * cell, rows * cell
    margin = cell * 0.08
    to_px = _frame_transform(
        np.concatenate([original.coords, restored.coords]), cell, margin
    )
    indicator = mask_indicator(plan)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {width:.0f} {height:.0f}">',
        f'<rect width="{width:.0f}" height="{height:.0f}" fill="white"/>',
    ]
    for t in range(T):
        ox = (t % cols) * cell
        oy = (t // cols) * cell
        parts.append(f'<g transform="translate({ox:.1f},{oy:.1f})">')
        pts = " ".join(
            "{:.2f},{:.2f}".format(*to_px(original.coords[t, j])) for j in range(original.J)
        )
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="silver" '
            f'stroke-width="{spec.stroke_width:.2f}"/>'
        )
        for j in range(original.J):
            gx, gy = to_px(original.coords[t, j])
            if indicator[t, j]:
                parts.append(
                    f'<circle cx="{gx:.2f}" cy="{gy:.2f}" r="{spec.point_radius:.2f}" '
                    f'fill="{spec.color_masked_truth}"/>'
                )
                rx, ry = to_px(restored.coords[t, j])
                parts.append(
                    f'<circle cx="{rx:.2f}" cy="{ry:.2f}" r="{spec.point_radius:.2f}" '
                    f'fill="{spec.color_reconstruction}"/>'
                )
            else:
                parts.append(
                    f'<circle cx="{gx:.2f}" cy="{gy:.2f}" r="{spec.point_radius:.2f}" '
                    f'fill="{spec.color_visible}"/>'
                )
        parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts)
