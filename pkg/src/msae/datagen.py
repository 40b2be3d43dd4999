"""Deterministic synthetic swim-bout generator.

Bouts are built as an inextensible chain of J-1 segments, each exactly
1/(J-1) body lengths long, so consecutive-joint distances stay constant
over a bout. Per-frame bending angles are chosen so the lateral offset of
point k at frame t equals

    amp * (k/(J-1))**2 * sin(2*pi*(tail_freq*t/fps - wave_number*k/(J-1)))

exactly (the tail-dominant travelling wave), the whole frame is then
rotated by ``heading_drift * t`` about the root, and i.i.d. Gaussian noise
is added. Identical parameter sets give bit-identical bouts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import SplitMix64, derive_seed
from .skeleton import SkeletonSequence


@dataclass(frozen=True)
class SynthParams:
    J: int = 19
    T: int = 24
    fps: float = 100.0
    tail_freq: float = 5.0        # Hz
    amp: float = 0.2              # peak lateral amplitude, body lengths
    wave_number: float = 0.5      # spatial periods along the body
    heading_drift: float = 0.0    # radians per frame
    noise_sigma: float = 0.0      # body lengths
    seed: int = 0

    def __post_init__(self):
        if self.J < 2:
            raise ValueError(f"need J >= 2, got {self.J}")
        if self.T < 1:
            raise ValueError(f"need T >= 1, got {self.T}")
        if self.amp < 0:
            raise ValueError(f"amp must be >= 0, got {self.amp}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.fps <= 0:
            raise ValueError(f"fps must be positive, got {self.fps}")


def _lateral_profile(p: SynthParams, t: int) -> np.ndarray:
    """Target lateral offset of each point at frame t (body-frame y)."""
    k = np.arange(p.J, dtype=np.float64) / (p.J - 1)
    phase = p.tail_freq * t / p.fps - p.wave_number * k
    return p.amp * k**2 * np.sin(2.0 * math.pi * phase)


def generate_bout(p: SynthParams) -> SkeletonSequence:
    """Pure function of p; see module docstring for the construction."""
    seg = 1.0 / (p.J - 1)
    rng = SplitMix64(derive_seed(p.seed, "synth-noise"))
    coords = np.empty((p.T, p.J, 2), dtype=np.float64)
    for t in range(p.T):
        lateral = _lateral_profile(p, t)
        # chain the body: per-segment angle reproduces the lateral increments
        # exactly as long as |increment| <= segment length (clamped otherwise)
        pts = np.empty((p.J, 2), dtype=np.float64)
        pts[0] = 0.0
        x = y = 0.0
        for k in range(p.J - 1):
            step = (lateral[k + 1] - lateral[k]) / seg
            alpha = math.asin(min(1.0, max(-1.0, step)))
            x += seg * math.cos(alpha)
            y += seg * math.sin(alpha)
            pts[k + 1] = (x, y)
        theta = p.heading_drift * t
        c, s = math.cos(theta), math.sin(theta)
        rotated = pts @ np.array([[c, s], [-s, c]], dtype=np.float64)
        coords[t] = rotated
    if p.noise_sigma > 0:
        for t in range(p.T):
            for j in range(p.J):
                coords[t, j, 0] += p.noise_sigma * rng.gaussian()
                coords[t, j, 1] += p.noise_sigma * rng.gaussian()
    bout_id = f"synth-{p.seed & ((1 << 64) - 1):016x}"
    return SkeletonSequence(bout_id=bout_id, fps=p.fps, coords=coords)
