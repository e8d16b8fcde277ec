"""Dataset manifests: point annotations for evaluation, bare image refs for
training. Ground-truth points never cross the training boundary; the trainer
is handed ImageRef streams only (see ``DatasetManifest.train_refs``).

Manifest format: one JSON object per line,
``{"image": path, "points": [[x, y], ...], "split": "train|val|test"}``
with pixel coordinates, origin top-left, image paths relative to the
manifest file. Optional ``width``/``height`` keys skip the header read.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import BoundsError, ParseError
from .geometry import ImageRef

SPLITS = ("train", "val", "test")

# Default grid size and long-side cap by dataset family; anything unknown
# gets a 3x3 grid and no resizing.
_POLICIES = (
    ("qnrf", (4, 2048)),
    ("ucf_cc_50", (4, None)),
    ("ucf-cc-50", (4, None)),
    ("cc_50", (4, None)),
    ("jhu", (3, 2048)),
)


def dataset_policy(name: str) -> tuple[int, int | None]:
    lowered = name.lower()
    for token, policy in _POLICIES:
        if token in lowered:
            return policy
    return 3, None


@dataclass(frozen=True)
class AnnotatedImage:
    image: ImageRef
    points: tuple[tuple[float, float], ...]
    split: str

    @property
    def count(self) -> int:
        return len(self.points)


@dataclass
class DatasetManifest:
    name: str
    images: list[AnnotatedImage] = field(default_factory=list)
    resize_max_long: int | None = None
    default_p: int = 3

    def split(self, name: str) -> list[AnnotatedImage]:
        return [img for img in self.images if img.split == name]

    def train_refs(self) -> list[ImageRef]:
        """Training view: image references only, annotations stripped."""
        return [img.image for img in self.split("train")]


def ingest(manifest_path, name: str | None = None) -> DatasetManifest:
    """Load and validate a manifest; raises ParseError with a file:line locus
    and BoundsError listing any annotation outside its image."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise ParseError(f"manifest not found: {manifest_path}")
    base = manifest_path.parent
    name = name or manifest_path.stem
    images = []
    with open(manifest_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            locus = f"{manifest_path}:{lineno}"
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{locus}: invalid JSON ({exc.msg})") from exc
            if not isinstance(record, dict):
                raise ParseError(f"{locus}: record must be a JSON object")
            missing = {"image", "points", "split"} - record.keys()
            if missing:
                raise ParseError(f"{locus}: missing keys {sorted(missing)}")
            split = record["split"]
            if split not in SPLITS:
                raise ParseError(f"{locus}: split must be one of {SPLITS}, got {split!r}")
            path = record["image"]
            if not os.path.isabs(path):
                path = os.path.normpath(str(base / path))
            if "width" in record and "height" in record:
                ref = ImageRef(path, int(record["width"]), int(record["height"]))
            else:
                try:
                    ref = ImageRef.from_path(path)
                except FileNotFoundError as exc:
                    raise ParseError(f"{locus}: image not found: {path}") from exc
                except OSError as exc:
                    raise ParseError(f"{locus}: unreadable image {path}: {exc}") from exc
            try:
                points = tuple((float(x), float(y)) for x, y in record["points"])
            except (TypeError, ValueError) as exc:
                raise ParseError(f"{locus}: points must be [x, y] pairs") from exc
            offenders = [
                (x, y) for x, y in points
                if not (0 <= x < ref.width and 0 <= y < ref.height)
            ]
            if offenders:
                raise BoundsError(
                    f"{locus}: {len(offenders)} point(s) outside {ref.width}x{ref.height} "
                    f"image {path}: {offenders[:5]}"
                )
            images.append(AnnotatedImage(image=ref, points=points, split=split))
    default_p, resize_max_long = dataset_policy(name)
    return DatasetManifest(name=name, images=images,
                           resize_max_long=resize_max_long, default_p=default_p)


def write_manifest(path, records) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path
