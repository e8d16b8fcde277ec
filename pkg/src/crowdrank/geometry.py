"""Concentric crop pyramids, exact grid tiling, and deterministic patch resizing.

Everything here is a pure function of its inputs; pixel buffers are numpy
uint8 arrays of shape (H, W, 3) and are never mutated in place.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ImageTooSmall, InvalidRatio, OutOfBounds

MIN_CROP_SIDE = 32
DEFAULT_PATCH_SIDE = 224


@dataclass(frozen=True)
class ImageRef:
    """Reference to an on-disk image at a chosen working resolution.

    width/height may differ from the file's native size; ``load_pixels``
    resizes to the stated dimensions so crops computed on this ref line up
    with the pixels they are extracted from.
    """

    path: str
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError(f"degenerate image dimensions {self.width}x{self.height}")

    @classmethod
    def from_path(cls, path) -> "ImageRef":
        with Image.open(path) as im:
            w, h = im.size
        return cls(str(path), w, h)


@dataclass(frozen=True)
class SquareCrop:
    center_x: int
    center_y: int
    side: int

    def __post_init__(self) -> None:
        if self.side < 1:
            raise ValueError("crop side must be >= 1")

    def box(self) -> tuple[int, int, int, int]:
        left = self.center_x - self.side // 2
        top = self.center_y - self.side // 2
        return left, top, left + self.side, top + self.side


@dataclass(frozen=True)
class Rect:
    left: int
    top: int
    width: int
    height: int

    def box(self) -> tuple[int, int, int, int]:
        return self.left, self.top, self.left + self.width, self.top + self.height

    @property
    def area(self) -> int:
        return self.width * self.height


@dataclass(frozen=True)
class PatchPyramid:
    """Size-sorted square crops of one image, all sharing the image center."""

    image: ImageRef
    crops: tuple[SquareCrop, ...]
    target_side: int

    def __post_init__(self) -> None:
        sides = [c.side for c in self.crops]
        if any(b <= a for a, b in zip(sides, sides[1:])):
            raise ValueError("pyramid sides must be strictly increasing")
        if len({(c.center_x, c.center_y) for c in self.crops}) > 1:
            raise ValueError("pyramid crops must share one center")

    def __len__(self) -> int:
        return len(self.crops)


@dataclass(frozen=True)
class GridSpec:
    p: int

    def __post_init__(self) -> None:
        if self.p < 1:
            raise ValueError("grid dimension must be >= 1")


def build_pyramid(
    image: ImageRef,
    m: int = 6,
    min_ratio: float = 0.5,
    target_side: int = DEFAULT_PATCH_SIDE,
) -> PatchPyramid:
    """Build ``m`` concentric square crops with linearly spaced side lengths.

    Sides run from ``min_ratio * S`` to ``S`` where ``S = min(width, height)``,
    rounded to whole pixels. The result is deterministic for fixed inputs.

    Raises ImageTooSmall when the smallest crop would fall below
    ``MIN_CROP_SIDE``, and InvalidRatio when ``min_ratio`` is outside (0, 1)
    or the rounded side schedule collapses (two crops with equal side).
    """
    if m < 2:
        raise ValueError(f"need at least 2 crops, got m={m}")
    if not 0.0 < min_ratio < 1.0:
        raise InvalidRatio(f"min_ratio must be in (0, 1), got {min_ratio}")
    s = min(image.width, image.height)
    lo = min_ratio * s
    sides = [int(round(lo + (s - lo) * i / (m - 1))) for i in range(m)]
    if sides[0] < MIN_CROP_SIDE:
        raise ImageTooSmall(
            f"smallest crop side {sides[0]} < {MIN_CROP_SIDE} px "
            f"for {image.width}x{image.height} image"
        )
    if any(b <= a for a, b in zip(sides, sides[1:])):
        raise InvalidRatio(
            f"side schedule {sides} is not strictly increasing; "
            f"min_ratio={min_ratio} leaves less than 1 px between crops"
        )
    cx, cy = image.width // 2, image.height // 2
    crops = tuple(SquareCrop(cx, cy, side) for side in sides)
    return PatchPyramid(image=image, crops=crops, target_side=target_side)


def tile_grid(image: ImageRef, grid: GridSpec) -> list[Rect]:
    """Partition the image into a P x P grid of rectangles, row-major.

    Tiles are disjoint and cover the image exactly; when a dimension is not
    divisible by P the last row/column absorbs the remainder.
    """
    p = grid.p
    if image.width < p or image.height < p:
        raise ImageTooSmall(
            f"{image.width}x{image.height} image cannot hold a {p}x{p} grid"
        )
    base_w = image.width // p
    base_h = image.height // p
    tiles = []
    for row in range(p):
        top = row * base_h
        height = base_h if row < p - 1 else image.height - top
        for col in range(p):
            left = col * base_w
            width = base_w if col < p - 1 else image.width - left
            tiles.append(Rect(left, top, width, height))
    return tiles


def load_pixels(image: ImageRef) -> np.ndarray:
    """Read the file behind ``image`` as RGB, resized to the ref dimensions."""
    with Image.open(image.path) as im:
        im = im.convert("RGB")
        if im.size != (image.width, image.height):
            im = im.resize((image.width, image.height), Image.BILINEAR)
        return np.asarray(im)


def extract_and_resize(image, crop, target_side: int) -> np.ndarray:
    """Cut ``crop`` out of ``image`` and resize it to a square buffer.

    ``image`` is an ImageRef or an (H, W, 3) uint8 array; ``crop`` is any
    object with a ``box()`` method or a (left, top, right, bottom) tuple.
    Resampling is bilinear; a crop already at ``target_side`` is returned
    byte-identical.
    """
    if target_side < 1:
        raise ValueError("target_side must be >= 1")
    pixels = image if isinstance(image, np.ndarray) else load_pixels(image)
    left, top, right, bottom = crop if isinstance(crop, tuple) else crop.box()
    h, w = pixels.shape[:2]
    if left < 0 or top < 0 or right > w or bottom > h or right <= left or bottom <= top:
        raise OutOfBounds(
            f"crop ({left},{top},{right},{bottom}) outside {w}x{h} image"
        )
    region = pixels[top:bottom, left:right]
    if region.shape[0] == target_side and region.shape[1] == target_side:
        return region.copy()
    resized = Image.fromarray(region).resize((target_side, target_side), Image.BILINEAR)
    return np.asarray(resized)


def resize_long_side(image: ImageRef, max_long: int) -> ImageRef:
    """Scale the ref so its longer side is strictly below ``max_long``.

    Aspect ratio is preserved with floor rounding on the shorter side;
    images already below the threshold pass through unchanged. Idempotent.
    """
    if max_long < 1:
        raise ValueError("max_long must be >= 1")
    long_side = max(image.width, image.height)
    if long_side < max_long:
        return image
    new_long = max(1, max_long - 1)
    if image.width >= image.height:
        new_w = new_long
        new_h = max(1, image.height * new_long // image.width)
    else:
        new_h = new_long
        new_w = max(1, image.width * new_long // image.height)
    return ImageRef(image.path, new_w, new_h)
