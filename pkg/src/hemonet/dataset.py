"""On-disk study format and dataset helpers.

One directory per study:

  manifest.txt   UTF-8 text, LF line endings, ``key=value`` lines in fixed
                 order: format, study_id, study_label, n_slices, height,
                 width, pixel_spacing_y, pixel_spacing_x, slice_spacing,
                 hu_dtype, mask_dtype, slice_labels (comma-separated).
                 Spacings are printed with repr() so float64 round-trips
                 exactly.
  slices.raw     n*H*W float32 little-endian, row-major, slice-major.
  masks.raw      n*H*W uint8 (0/1), same layout.

Saving the same study twice produces byte-identical files.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .phantom import PhantomConfig, Study, generate_study

FORMAT_TAG = "hemonet-study-v1"
MANIFEST_NAME = "manifest.txt"
SLICES_NAME = "slices.raw"
MASKS_NAME = "masks.raw"


class DatasetError(Exception):
    """A study directory is missing, malformed or inconsistent."""


def save_study(study: Study, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    n, H, W = study.slices.shape
    labels = ",".join(str(int(v)) for v in study.slice_labels)
    manifest = (
        f"format={FORMAT_TAG}\n"
        f"study_id={study.study_id}\n"
        f"study_label={study.study_label}\n"
        f"n_slices={n}\n"
        f"height={H}\n"
        f"width={W}\n"
        f"pixel_spacing_y={study.pixel_spacing[0]!r}\n"
        f"pixel_spacing_x={study.pixel_spacing[1]!r}\n"
        f"slice_spacing={study.slice_spacing!r}\n"
        f"hu_dtype=float32\n"
        f"mask_dtype=uint8\n"
        f"slice_labels={labels}\n"
    )
    (d / MANIFEST_NAME).write_bytes(manifest.encode("utf-8"))
    (d / SLICES_NAME).write_bytes(np.ascontiguousarray(study.slices, dtype="<f4").tobytes())
    (d / MASKS_NAME).write_bytes(np.ascontiguousarray(study.masks, dtype=np.uint8).tobytes())
    return d


def _parse_manifest(path: Path) -> dict[str, str]:
    if not path.is_file():
        raise DatasetError(f"missing manifest: {path}")
    entries = {}
    for line in path.read_text("utf-8").splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise DatasetError(f"malformed manifest line in {path}: {line!r}")
        key, value = line.split("=", 1)
        entries[key] = value
    if entries.get("format") != FORMAT_TAG:
        raise DatasetError(f"unsupported study format in {path}: {entries.get('format')!r}")
    return entries


def load_study(directory) -> Study:
    d = Path(directory)
    m = _parse_manifest(d / MANIFEST_NAME)
    try:
        n = int(m["n_slices"])
        H = int(m["height"])
        W = int(m["width"])
        spacing = (float(m["pixel_spacing_y"]), float(m["pixel_spacing_x"]))
        slice_spacing = float(m["slice_spacing"])
        labels = np.array([int(v) for v in m["slice_labels"].split(",")], dtype=np.uint8)
        study_label = int(m["study_label"])
        study_id = m["study_id"]
    except (KeyError, ValueError) as exc:
        raise DatasetError(f"bad manifest in {d}: {exc}") from exc
    if m.get("hu_dtype") != "float32" or m.get("mask_dtype") != "uint8":
        raise DatasetError(f"unsupported buffer dtypes in {d / MANIFEST_NAME}")

    raw = (d / SLICES_NAME).read_bytes() if (d / SLICES_NAME).is_file() else None
    rawm = (d / MASKS_NAME).read_bytes() if (d / MASKS_NAME).is_file() else None
    if raw is None or rawm is None:
        raise DatasetError(f"missing raw buffers in {d}")
    expected = n * H * W
    slices = np.frombuffer(raw, dtype="<f4")
    masks = np.frombuffer(rawm, dtype=np.uint8)
    if slices.size != expected or masks.size != expected:
        raise DatasetError(
            f"buffer size mismatch in {d}: expected {expected} voxels, "
            f"got {slices.size} HU / {masks.size} mask"
        )
    try:
        return Study(
            study_id=study_id,
            slices=slices.reshape(n, H, W).astype(np.float32),
            masks=masks.reshape(n, H, W).copy(),
            slice_labels=labels,
            study_label=study_label,
            pixel_spacing=spacing,
            slice_spacing=slice_spacing,
        )
    except ValueError as exc:
        raise DatasetError(f"inconsistent study in {d}: {exc}") from exc


def generate_dataset(config: PhantomConfig, n_studies: int, start_index: int = 0) -> list[Study]:
    return [generate_study(config, start_index + i) for i in range(n_studies)]


def save_dataset(studies, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for study in studies:
        save_study(study, d / study.study_id)
    return d


def load_dataset(directory) -> list[Study]:
    d = Path(directory)
    if not d.is_dir():
        raise DatasetError(f"dataset directory not found: {d}")
    study_dirs = sorted(p for p in d.iterdir() if p.is_dir() and (p / MANIFEST_NAME).is_file())
    if not study_dirs:
        raise DatasetError(f"no study directories under {d}")
    return [load_study(p) for p in study_dirs]
