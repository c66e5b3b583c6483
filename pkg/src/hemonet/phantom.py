"""Deterministic synthetic head phantoms with pixel-exact bleed masks.

Each study is a stack of axial pseudo-CT slices in Hounsfield units: an
elliptical brain inside a bright skull ring, surrounded by air.  Positive
studies carry at least one ellipsoidal bleed spanning two or more
consecutive slices, with its rasterization recorded as the ground-truth
mask.  Negative-looking confounders (tiny single-slice hyperdense dots,
calcification-like) appear in positive and negative studies alike and are
never part of a mask, so per-pixel intensity alone cannot separate the
classes; slice-to-slice context can.

Generation is a pure function of (config.seed, index): every study draws
from its own random stream, so studies can be produced in any order or in
parallel and stay byte-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_WINDOW_LEVEL = 40.0
DEFAULT_WINDOW_WIDTH = 80.0


@dataclass(frozen=True)
class PhantomConfig:
    height: int = 64
    width: int = 64
    slices_per_study: int = 12
    bleed_probability: float = 0.5
    bleed_hu_range: tuple[float, float] = (60.0, 90.0)
    bleed_radius_range_mm: tuple[float, float] = (1.5, 4.0)
    # ellipsoid half-extent along z, in multiples of slice_spacing; >= 1
    # guarantees the bleed crosses at least two slice planes
    bleed_z_extent_range: tuple[float, float] = (1.05, 1.7)
    second_bleed_probability: float = 0.25
    confounder_rate: float = 1.2
    confounder_hu_range: tuple[float, float] = (100.0, 240.0)
    confounder_radius_range_px: tuple[float, float] = (0.8, 1.6)
    skull_hu: float = 700.0
    brain_hu_mean: float = 30.0
    brain_hu_std: float = 4.0
    air_hu: float = -1000.0
    pixel_spacing: tuple[float, float] = (0.5, 0.5)
    slice_spacing: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.height < 16 or self.width < 16:
            raise ValueError(f"phantom extent too small: {self.height}x{self.width}")
        if self.slices_per_study < 1:
            raise ValueError("slices_per_study must be positive")
        for name in ("bleed_probability", "second_bleed_probability"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        for name in ("bleed_hu_range", "bleed_radius_range_mm", "bleed_z_extent_range",
                     "confounder_hu_range", "confounder_radius_range_px"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} is degenerate: ({lo}, {hi})")
        if self.bleed_radius_range_mm[0] <= 0 or self.bleed_z_extent_range[0] < 1.0:
            raise ValueError("bleed geometry must be positive and span >= 1 slice spacing")
        if self.confounder_rate < 0:
            raise ValueError("confounder_rate must be non-negative")
        if min(self.pixel_spacing) <= 0 or self.slice_spacing <= 0:
            raise ValueError("voxel spacings must be positive")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")

    @property
    def voxel_volume(self) -> float:
        return self.pixel_spacing[0] * self.pixel_spacing[1] * self.slice_spacing


@dataclass
class Study:
    """One synthetic scan: HU slices, masks, labels and voxel geometry."""

    study_id: str
    slices: np.ndarray  # (n, H, W) float32, Hounsfield units
    masks: np.ndarray  # (n, H, W) uint8, 0/1
    slice_labels: np.ndarray  # (n,) uint8
    study_label: int
    pixel_spacing: tuple[float, float]
    slice_spacing: float

    def __post_init__(self):
        if self.slices.ndim != 3 or self.slices.shape != self.masks.shape:
            raise ValueError(
                f"slices {self.slices.shape} and masks {self.masks.shape} must share (n, H, W)"
            )
        if len(self.slice_labels) != len(self.slices):
            raise ValueError("one label per slice required")
        if min(self.pixel_spacing) <= 0 or self.slice_spacing <= 0:
            raise ValueError("voxel spacings must be positive")
        has_mask = self.masks.any(axis=(1, 2))
        if np.any(has_mask & (self.slice_labels == 0)):
            raise ValueError("a slice with mask pixels must be labeled positive")
        if self.study_label != int(self.slice_labels.max(initial=0)):
            raise ValueError("study_label must equal the max slice label")

    @property
    def n_slices(self) -> int:
        return len(self.slices)

    @property
    def voxel_volume(self) -> float:
        return self.pixel_spacing[0] * self.pixel_spacing[1] * self.slice_spacing


def apply_brain_window(hu, level: float = DEFAULT_WINDOW_LEVEL,
                       width: float = DEFAULT_WINDOW_WIDTH):
    """Map HU values linearly onto [0, 1] through a level/width display window."""
    if width <= 0:
        raise ValueError(f"window width must be positive, got {width}")
    hu = np.asarray(hu)
    return np.clip((hu - (level - width / 2.0)) / width, 0.0, 1.0)


def _ellipse(H, W, cy, cx, ry, rx) -> np.ndarray:
    if ry <= 0 or rx <= 0:
        return np.zeros((H, W), dtype=bool)
    y = (np.arange(H)[:, None] - cy) / ry
    x = (np.arange(W)[None, :] - cx) / rx
    return y * y + x * x <= 1.0


def _smooth_field(rng, n, H, W, cell, std) -> np.ndarray:
    """Low-frequency noise: a coarse gaussian grid, bilinearly upsampled."""
    gh, gw = H // cell + 2, W // cell + 2
    coarse = rng.normal(0.0, std, (n, gh, gw))
    ys = np.arange(H) / cell
    xs = np.arange(W) / cell
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    c00 = coarse[:, y0][:, :, x0]
    c01 = coarse[:, y0][:, :, x0 + 1]
    c10 = coarse[:, y0 + 1][:, :, x0]
    c11 = coarse[:, y0 + 1][:, :, x0 + 1]
    return c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx + c10 * fy * (1 - fx) + c11 * fy * fx


def _point_inside(rng, cy, cx, ay, ax) -> tuple[float, float]:
    """Uniform-ish point strictly inside the ellipse (rejection sampling)."""
    while True:
        py = cy + rng.uniform(-ay, ay)
        px = cx + rng.uniform(-ax, ax)
        if ((py - cy) / ay) ** 2 + ((px - cx) / ax) ** 2 < 1.0:
            return py, px


def _place_bleed(rng, cfg: PhantomConfig, brain, cy, cx, ay, ax, zscale):
    """Choose an ellipsoid that fits the brain and rasterize its per-slice masks.

    Returns (masks, covered) or shrinks the radius and retries when the
    geometry does not fit or the footprint fails to span two slices.
    """
    n, H, W = brain.shape
    spy, spx = cfg.pixel_spacing
    shrink = 1.0
    for attempt in range(60):
        if attempt and attempt % 10 == 0:
            shrink *= 0.8
        ry_mm = rng.uniform(*cfg.bleed_radius_range_mm) * shrink
        rx_mm = rng.uniform(*cfg.bleed_radius_range_mm) * shrink
        rz_mm = cfg.slice_spacing * rng.uniform(*cfg.bleed_z_extent_range)
        ry, rx = ry_mm / spy, rx_mm / spx
        cz = rng.uniform(0.1 * (n - 1), 0.9 * (n - 1))
        kz = int(round(cz))
        fy = ay * zscale[kz] - ry - 1.0
        fx = ax * zscale[kz] - rx - 1.0
        if fy <= 1.0 or fx <= 1.0:
            continue  # bleed larger than the brain region at this size
        by, bx = _point_inside(rng, cy, cx, fy, fx)
        masks = np.zeros((n, H, W), dtype=bool)
        for k in range(n):
            dz = (k - cz) * cfg.slice_spacing
            if abs(dz) >= rz_mm:
                continue
            s = math.sqrt(1.0 - (dz / rz_mm) ** 2)
            masks[k] = _ellipse(H, W, by, bx, ry * s, rx * s) & brain[k]
        covered = [k for k in range(n) if masks[k].any()]
        if len(covered) >= 2:
            return masks, covered
    raise ValueError(
        "degenerate phantom geometry: could not fit a bleed inside the brain region"
    )


def generate_study(config: PhantomConfig, index: int) -> Study:
    """Build study ``index`` deterministically from (config.seed, index)."""
    if index < 0:
        raise ValueError("study index must be non-negative")
    rng = np.random.default_rng([config.seed, index])
    n, H, W = config.slices_per_study, config.height, config.width
    spy, spx = config.pixel_spacing

    cy = H / 2.0 + rng.uniform(-0.03, 0.03) * H
    cx = W / 2.0 + rng.uniform(-0.03, 0.03) * W
    ay = H * rng.uniform(0.30, 0.36)
    ax = W * rng.uniform(0.26, 0.32)
    zscale = 0.82 + 0.18 * np.sin(np.pi * (np.arange(n) + 0.5) / n)

    brain = np.zeros((n, H, W), dtype=bool)
    outer = np.zeros((n, H, W), dtype=bool)
    for k in range(n):
        brain[k] = _ellipse(H, W, cy, cx, ay * zscale[k], ax * zscale[k])
        outer[k] = _ellipse(H, W, cy, cx, ay * zscale[k] * 1.16 + 1.5, ax * zscale[k] * 1.16 + 1.5)
    skull = outer & ~brain

    texture = _smooth_field(rng, n, H, W, cell=8, std=config.brain_hu_std)
    grain = rng.normal(0.0, 1.5, (n, H, W))
    hu = np.full((n, H, W), config.air_hu, dtype=np.float64)
    hu[skull] = config.skull_hu
    tissue = config.brain_hu_mean + texture + grain
    hu[brain] = tissue[brain]

    masks = np.zeros((n, H, W), dtype=bool)
    if rng.random() < config.bleed_probability:
        n_bleeds = 1 + (rng.random() < config.second_bleed_probability)
        for _ in range(n_bleeds):
            bleed_mask, covered = _place_bleed(rng, config, brain, cy, cx, ay, ax, zscale)
            hu_level = rng.uniform(*config.bleed_hu_range)
            for k in covered:
                sel = bleed_mask[k]
                hu[k][sel] = hu_level + rng.normal(0.0, 2.0, int(sel.sum()))
            masks |= bleed_mask

    n_conf = rng.poisson(config.confounder_rate)
    for _ in range(n_conf):
        for _try in range(10):
            k = int(rng.integers(n))
            r = rng.uniform(*config.confounder_radius_range_px)
            fy = ay * zscale[k] - r - 1.0
            fx = ax * zscale[k] - r - 1.0
            if fy <= 1.0 or fx <= 1.0:
                continue
            py, px = _point_inside(rng, cy, cx, fy, fx)
            dot = _ellipse(H, W, py, px, r, r) & brain[k] & ~masks[k]
            if dot.any():
                hu[k][dot] = rng.uniform(*config.confounder_hu_range)
                break

    slice_labels = masks.any(axis=(1, 2)).astype(np.uint8)
    return Study(
        study_id=f"s{index:03d}",
        slices=hu.astype(np.float32),
        masks=masks.astype(np.uint8),
        slice_labels=slice_labels,
        study_label=int(slice_labels.max(initial=0)),
        pixel_spacing=(spy, spx),
        slice_spacing=config.slice_spacing,
    )
