"""Synthetic fixtures with machine-readable content.

Fixture images carry their planted class and person count in flat color
regions: red = class slot, green/blue = count (big endian, two bytes). The
mock encoders read the code back from pixel (0, 0) of a patch, which
bilinear resampling preserves exactly as long as the coded region around
the patch corner is larger than the resampling kernel. Tile fixtures are
constant per tile; pyramid fixtures color the concentric ring each crop
adds, so every crop sees its own code at the corner.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import ImageRef, build_pyramid, tile_grid, GridSpec

NAMED_CLASSES = (
    "crowd",
    "tree",
    "car",
    "building",
    "road",
    "sky",
    "human heads",
    "human bodies",
    "human legs",
)
_SLOT = {name: i for i, name in enumerate(NAMED_CLASSES)}

DISTRACTOR_CLASSES = ("tree", "car", "building", "road", "sky")


def class_slot(name: str) -> int:
    return _SLOT[name]


def class_for_slot(slot: int) -> str | None:
    if 0 <= slot < len(NAMED_CLASSES):
        return NAMED_CLASSES[slot]
    return None


def code_color(class_name: str, count: int = 0) -> tuple[int, int, int]:
    if not 0 <= count < 65536:
        raise ValueError(f"count {count} does not fit the two-byte code")
    return _SLOT[class_name], count >> 8, count & 0xFF


def decode_code(rgb) -> tuple[str | None, int]:
    r, g, b = (int(v) for v in rgb)
    return class_for_slot(r), (g << 8) | b


def paint_tile_image(specs, tile_side: int = 64) -> np.ndarray:
    """Render a grid of constant tiles; ``specs[row][col] = (class, count)``."""
    rows = len(specs)
    cols = len(specs[0])
    out = np.zeros((rows * tile_side, cols * tile_side, 3), dtype=np.uint8)
    for r, row in enumerate(specs):
        if len(row) != cols:
            raise ValueError("ragged tile spec")
        for c, (cls, count) in enumerate(row):
            out[r * tile_side:(r + 1) * tile_side, c * tile_side:(c + 1) * tile_side] = code_color(cls, count)
    return out


def paint_pyramid_image(size: int, counts, m: int | None = None, min_ratio: float = 0.5,
                        class_name: str = "crowd") -> np.ndarray:
    """Render a square image whose i-th concentric crop reads ``counts[i]``.

    The crop schedule mirrors build_pyramid so training geometry and the
    planted rings stay aligned.
    """
    m = len(counts) if m is None else m
    if m != len(counts):
        raise ValueError("one count per pyramid level")
    ref = ImageRef("<memory>", size, size)
    pyramid = build_pyramid(ref, m=m, min_ratio=min_ratio)
    out = np.zeros((size, size, 3), dtype=np.uint8)
    # Fill outside-in: each smaller box overwrites the interior, leaving the
    # ring between level i-1 and level i colored with level i's code.
    out[:, :] = code_color(class_name, int(counts[-1]))
    for crop, count in zip(reversed(pyramid.crops), reversed(list(counts))):
        left, top, right, bottom = crop.box()
        out[top:bottom, left:right] = code_color(class_name, int(count))
    return out


def write_png(path, pixels: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels).save(path, format="PNG")
    return path


def points_in_rect(rect, count: int, rng: np.random.Generator) -> list[list[float]]:
    left, top, right, bottom = rect.box()
    xs = rng.uniform(left + 0.5, right - 0.5, size=count)
    ys = rng.uniform(top + 0.5, bottom - 0.5, size=count)
    return [[round(float(x), 2), round(float(y), 2)] for x, y in zip(xs, ys)]


def write_manifest(path, records) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def make_eval_fixture(
    out_dir,
    n_images: int = 20,
    p: int = 3,
    tile_side: int = 64,
    seed: int = 0,
    rank_counts=(20, 55, 90, 125, 160, 195),
    split: str = "test",
    manifest_name: str = "manifest.jsonl",
) -> Path:
    """Write a planted tile dataset and return the manifest path.

    Each image is a p x p grid mixing crowd tiles (count drawn from
    ``rank_counts``, with matching head points), body-part tiles that pass
    the coarse filter but not the fine one, and plain distractors. The true
    count of an image equals the sum of its planted crowd-tile counts.
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    records = []
    for idx in range(n_images):
        specs = []
        points: list[list[float]] = []
        for r in range(p):
            row = []
            for c in range(p):
                kind = rng.random()
                if kind < 0.45:
                    count = int(rng.choice(rank_counts))
                    row.append(("crowd", count))
                elif kind < 0.6:
                    row.append((str(rng.choice(["human bodies", "human legs"])), 0))
                else:
                    row.append((str(rng.choice(DISTRACTOR_CLASSES)), 0))
            specs.append(row)
        pixels = paint_tile_image(specs, tile_side=tile_side)
        name = f"img_{idx:04d}.png"
        write_png(out_dir / "images" / name, pixels)
        ref = ImageRef(str(out_dir / "images" / name), p * tile_side, p * tile_side)
        for rect, (cls, count) in zip(tile_grid(ref, GridSpec(p)), [s for row in specs for s in row]):
            if cls == "crowd" and count > 0:
                points.extend(points_in_rect(rect, count, rng))
        records.append({"image": f"images/{name}", "points": points, "split": split})
    return write_manifest(out_dir / manifest_name, records)


def make_train_fixture(
    out_dir,
    n_images: int = 8,
    m: int = 6,
    size: int = 256,
    seed: int = 0,
    rank_counts=(20, 55, 90, 125, 160, 195),
    consistent: bool = True,
    manifest_name: str = "manifest.jsonl",
) -> Path:
    """Write pyramid-coded training images (split "train", no points used).

    ``consistent=True`` plants counts that already increase with crop size;
    ``False`` shuffles them per image so the ring colors, and with them any
    smooth function of the pixels, cannot be ordinal in the crop index.
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    counts = list(rank_counts[:m])
    if len(counts) < m:
        raise ValueError("need at least m rank counts")
    records = []
    for idx in range(n_images):
        planted = list(counts) if consistent else [int(c) for c in rng.permutation(counts)]
        # Jitter the planted values off the prompt grid for some images so
        # the stream is not one repeated picture.
        if idx % 2 == 1:
            offset = int(rng.integers(0, 10))
            planted = [c + offset for c in planted]
        pixels = paint_pyramid_image(size, planted, m=m)
        name = f"train_{idx:04d}.png"
        write_png(out_dir / "images" / name, pixels)
        records.append({"image": f"images/{name}", "points": [], "split": "train"})
    return write_manifest(out_dir / manifest_name, records)
