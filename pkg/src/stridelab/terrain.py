"""Procedural 1-D terrain: generation, height queries, edge labels, curriculum.

Profiles are sagittal height strips at a fixed 0.05 m resolution. Difficulty
scales with an integer level in [0, 9]; generation is a pure function of
(kind, level, seed). Profiles are immutable after generation and safe to
share across environments.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

RESOLUTION = 0.05          # m per cell, fixed
GAP_DEPTH = -1.0           # m, unrecoverable by design
MAX_LEVEL = 9
DEFAULT_SPAN = 16.0        # m, total strip extent
EDGE_TAU = 0.05            # m, default edge-label threshold

KINDS = ("flat", "rough", "gap", "stairs-up", "stairs-down", "mixed")

STAIR_RUN = 0.30           # m per tread
START_ZONE = 1.0           # m of flat ground around the origin for resets


def stair_rise(level: int) -> float:
    return 0.05 + 0.015 * level


def gap_width(level: int) -> float:
    return 0.10 + 0.035 * level


def rough_amplitude(level: int) -> float:
    return 0.01 + 0.008 * level


@dataclass(frozen=True)
class TerrainProfile:
    samples: np.ndarray        # heights (m) at cell centers
    origin_x: float            # x of cell 0 center
    kind: str
    level: int
    params: dict = field(default_factory=dict)

    @property
    def resolution(self) -> float:
        return RESOLUTION

    @property
    def n_cells(self) -> int:
        return len(self.samples)

    def cell_x(self) -> np.ndarray:
        return self.origin_x + RESOLUTION * np.arange(self.n_cells)


def _cell_index(profile_origin, n_cells, x):
    idx = np.floor((np.asarray(x) - profile_origin) / RESOLUTION + 0.5).astype(int)
    return np.clip(idx, 0, n_cells - 1)


def height_at(profile: TerrainProfile, x):
    """Nearest-cell lookup; boundary ties go to the right cell; out-of-range clamps."""
    idx = _cell_index(profile.origin_x, profile.n_cells, x)
    out = profile.samples[idx]
    return float(out) if np.isscalar(x) else out


def _stair_heights(x_cells, level, direction):
    # First riser one run past the start zone; height grows with distance
    # from the origin so both travel directions climb (or descend).
    d = np.abs(x_cells) - START_ZONE
    steps = np.floor(np.maximum(d, 0.0) / STAIR_RUN)
    return direction * stair_rise(level) * steps


def _gap_heights(x_cells, level, rng):
    h = np.zeros_like(x_cells)
    width = gap_width(level)
    spacing = 2.0
    # periodic gaps outside the start zone, mirrored in both directions
    d = np.abs(x_cells) - START_ZONE
    in_gap = (d >= 0) & (np.mod(d, spacing) < width)
    h[in_gap] = GAP_DEPTH
    return h


def generate(kind: str, level: int, seed: int, span: float = DEFAULT_SPAN) -> TerrainProfile:
    """Deterministic profile for (kind, level, seed)."""
    if kind not in KINDS:
        raise ValueError(f"unknown terrain kind {kind!r}")
    if not 0 <= level <= MAX_LEVEL:
        raise ValueError(f"level must be in [0, {MAX_LEVEL}], got {level}")
    rng = np.random.default_rng([seed, KINDS.index(kind), level])
    n_cells = int(round(span / RESOLUTION)) + 1
    origin = -span / 2.0
    x = origin + RESOLUTION * np.arange(n_cells)
    params: dict = {}

    if kind == "flat":
        h = np.zeros(n_cells)
    elif kind == "rough":
        amp = rough_amplitude(level)
        h = rng.uniform(-amp, amp, size=n_cells)
        h[np.abs(x) < START_ZONE / 2] = 0.0
        params["amplitude"] = amp
    elif kind == "gap":
        h = _gap_heights(x, level, rng)
        params["gap_width"] = gap_width(level)
    elif kind == "stairs-up":
        h = _stair_heights(x, level, +1.0)
        params.update(rise=stair_rise(level), run=STAIR_RUN)
    elif kind == "stairs-down":
        h = _stair_heights(x, level, -1.0)
        params.update(rise=stair_rise(level), run=STAIR_RUN)
    else:  # mixed: interleaved segments of every concrete kind
        h = np.zeros(n_cells)
        segment_kinds = ["flat", "rough", "gap", "stairs-up", "stairs-down"]
        seg_len = n_cells // len(segment_kinds)
        for i, seg_kind in enumerate(rng.permutation(segment_kinds)):
            lo = i * seg_len
            hi = n_cells if i == len(segment_kinds) - 1 else (i + 1) * seg_len
            sub = generate(seg_kind, level, seed + 1000 + i, span=max(
                (hi - lo - 1) * RESOLUTION, 2.0))
            m = min(hi - lo, sub.n_cells)
            base = h[lo - 1] if lo > 0 else 0.0
            h[lo:lo + m] = sub.samples[:m] + base
            if lo + m < hi:
                h[lo + m:hi] = h[lo + m - 1]
        params["segments"] = segment_kinds

    if not np.all(np.isfinite(h)):
        raise AssertionError("terrain heights must be finite")
    return TerrainProfile(samples=h, origin_x=origin, kind=kind, level=level,
                          params=params)


def edge_labels(heights: np.ndarray, tau: float = EDGE_TAU) -> np.ndarray:
    """Cell i is an edge iff the jump to either neighbor exceeds tau.

    Boundary cells use the one-sided difference.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    h = np.asarray(heights, dtype=float)
    diff = np.abs(np.diff(h)) > tau
    labels = np.zeros(len(h), dtype=np.uint8)
    labels[:-1] |= diff
    labels[1:] |= diff
    return labels


@dataclass
class CurriculumState:
    levels: np.ndarray                      # per-environment terrain level
    promotions: np.ndarray = None
    demotions: np.ndarray = None

    def __post_init__(self):
        if self.promotions is None:
            self.promotions = np.zeros_like(self.levels)
        if self.demotions is None:
            self.demotions = np.zeros_like(self.levels)

    @classmethod
    def for_envs(cls, n_envs: int, start_level: int = 0) -> "CurriculumState":
        return cls(levels=np.full(n_envs, start_level, dtype=np.int64))


PROMOTE_FRACTION = 0.8
DEMOTE_FRACTION = 0.4
MIN_COMMANDED = 0.5   # m; below this the episode is a stand test, level holds


def curriculum_update(state: CurriculumState, env: int, traveled: float,
                      commanded: float, fell: bool) -> int:
    """Promote/demote one level from the episode outcome; returns the new level."""
    level = int(state.levels[env])
    if fell or (commanded >= MIN_COMMANDED and traveled < DEMOTE_FRACTION * commanded):
        level -= 1
        state.demotions[env] += 1
    elif commanded >= MIN_COMMANDED and traveled >= PROMOTE_FRACTION * commanded:
        level += 1
        state.promotions[env] += 1
    level = int(np.clip(level, 0, MAX_LEVEL))
    state.levels[env] = level
    return level


def dump_csv(profile: TerrainProfile, path, tau: float = EDGE_TAU) -> None:
    labels = edge_labels(profile.samples, tau)
    xs = profile.cell_x()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "x", "height", "edge_label"])
        for i, (x, h, e) in enumerate(zip(xs, profile.samples, labels)):
            writer.writerow([i, f"{x:.3f}", f"{h:.6f}", int(e)])
