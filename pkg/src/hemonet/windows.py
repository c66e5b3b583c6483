"""Context-window assembly: one k-slice sample per slice of a study.

Each window stacks k display-windowed slices centered on a target slice
(edges replicate the outermost slice), and carries the center slice's mask
and label as its supervision targets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .phantom import DEFAULT_WINDOW_LEVEL, DEFAULT_WINDOW_WIDTH, Study, apply_brain_window


@dataclass
class SliceWindow:
    context: np.ndarray  # (k, H, W) float32 in [0, 1]
    center_index: int
    center_mask: np.ndarray  # (H, W) uint8
    label: int  # center slice's label
    voxel_volume: float  # mm^3
    study_id: str

    def __post_init__(self):
        if self.voxel_volume <= 0:
            raise ValueError("voxel_volume must be positive")
        if self.label != self.label & 1:
            raise ValueError("label must be 0 or 1")


def context_indices(center: int, n_slices: int, k: int) -> np.ndarray:
    """Indices of the k context slices for a center, edge-replicated."""
    half = k // 2
    return np.clip(np.arange(center - half, center + half + 1), 0, n_slices - 1)


def make_slice_windows(
    study: Study,
    k: int = 5,
    window_level: float = DEFAULT_WINDOW_LEVEL,
    window_width: float = DEFAULT_WINDOW_WIDTH,
) -> list[SliceWindow]:
    """Build exactly one window per slice of ``study``."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"context size must be odd and positive, got {k}")
    n = study.n_slices
    if n == 0:
        raise ValueError("study has no slices")
    display = apply_brain_window(study.slices, window_level, window_width).astype(np.float32)
    out = []
    for i in range(n):
        idx = context_indices(i, n, k)
        out.append(
            SliceWindow(
                context=display[idx],
                center_index=i,
                center_mask=study.masks[i],
                label=int(study.slice_labels[i]),
                voxel_volume=study.voxel_volume,
                study_id=study.study_id,
            )
        )
    return out
