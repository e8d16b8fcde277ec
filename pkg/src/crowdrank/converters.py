"""Converters from upstream dataset layouts to the line-delimited manifest.

These are best-effort adapters for the common public layouts; the tested
core of the library only consumes the canonical manifest format.
"""
from __future__ import annotations

import re
from pathlib import Path

from .errors import ParseError
from .data import write_manifest

IMAGE_EXTS = (".jpg", ".jpeg", ".png")


def _find_image(directory: Path, stem: str) -> Path | None:
    for ext in IMAGE_EXTS:
        candidate = directory / f"{stem}{ext}"
        if candidate.is_file():
            return candidate
    return None


def _first_point_array(value):
    """Depth-first search through MATLAB nesting for an (n, 2) float array."""
    import numpy as np

    if not isinstance(value, np.ndarray):
        return None
    if value.dtype.names:
        names = value.dtype.names
        ordered = ("location",) + tuple(n for n in names if n != "location")
        for name in ordered:
            if name in names:
                found = _first_point_array(value[name])
                if found is not None:
                    return found
        return None
    if value.dtype == object:
        for item in value.flat:
            found = _first_point_array(item)
            if found is not None:
                return found
        return None
    if value.ndim == 2 and value.shape[1] == 2 and np.issubdtype(value.dtype, np.floating):
        return value
    return None


def _mat_points(path: Path):
    from scipy.io import loadmat

    mat = loadmat(str(path))
    for key in ("annPoints", "image_info"):
        if key in mat:
            points = _first_point_array(mat[key])
            if points is None:
                raise ParseError(f"{path}: could not locate an (n, 2) point array "
                                 f"under {key!r}")
            return points
    raise ParseError(f"{path}: no known annotation key (looked for annPoints, image_info)")


def convert_mat_dataset(root, out_path, splits=(("train_data", "train"), ("test_data", "test"))) -> int:
    """Layouts with per-image .mat ground truth.

    Expects ``<root>/<split_dir>/images/*.jpg`` with matching
    ``ground_truth/GT_<stem>.mat`` or ``<stem>_ann.mat`` files.
    """
    root = Path(root)
    records = []
    for split_dir, split in splits:
        image_dir = root / split_dir / "images"
        gt_dir = root / split_dir / "ground_truth"
        if not image_dir.is_dir():
            continue
        for image_path in sorted(image_dir.iterdir()):
            if image_path.suffix.lower() not in IMAGE_EXTS:
                continue
            stem = image_path.stem
            gt_path = None
            for candidate in (gt_dir / f"GT_{stem}.mat", gt_dir / f"{stem}_ann.mat",
                              image_dir / f"{stem}_ann.mat"):
                if candidate.is_file():
                    gt_path = candidate
                    break
            if gt_path is None:
                raise ParseError(f"no ground-truth .mat found for {image_path}")
            points = _mat_points(gt_path)
            records.append({
                "image": str(image_path.resolve()),
                "points": [[float(x), float(y)] for x, y in points],
                "split": split,
            })
    if not records:
        raise ParseError(f"no images found under {root}")
    write_manifest(out_path, records)
    return len(records)


def convert_txt_dataset(root, out_path,
                        splits=(("train", "train"), ("val", "val"), ("test", "test"))) -> int:
    """Layouts with one whitespace-separated txt per image (x y per line,
    extra columns ignored), under ``<root>/<split>/images`` and ``.../gt``."""
    root = Path(root)
    records = []
    for split_dir, split in splits:
        image_dir = root / split_dir / "images"
        gt_dir = root / split_dir / "gt"
        if not image_dir.is_dir():
            continue
        for image_path in sorted(image_dir.iterdir()):
            if image_path.suffix.lower() not in IMAGE_EXTS:
                continue
            gt_path = gt_dir / f"{image_path.stem}.txt"
            if not gt_path.is_file():
                raise ParseError(f"no ground-truth txt found for {image_path}")
            points = []
            for lineno, line in enumerate(gt_path.read_text().splitlines(), start=1):
                parts = re.split(r"[\s,]+", line.strip())
                if not parts or parts == [""]:
                    continue
                if len(parts) < 2:
                    raise ParseError(f"{gt_path}:{lineno}: expected at least x y")
                points.append([float(parts[0]), float(parts[1])])
            records.append({
                "image": str(image_path.resolve()),
                "points": points,
                "split": split,
            })
    if not records:
        raise ParseError(f"no images found under {root}")
    write_manifest(out_path, records)
    return len(records)


CONVERTERS = {
    "mat": convert_mat_dataset,
    "txt": convert_txt_dataset,
}
