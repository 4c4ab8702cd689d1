"""Raster sketch ingestion: colour snapping, centring, thinning, point sampling."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .thinning import has_square, thin_labels

WHITE = (255, 255, 255)
COLOR_TOLERANCE = 8
DEFAULT_CANVAS = 800
DEFAULT_POINTS = 512


class SketchError(ValueError):
    """Base class for problems with input sketches or category specs."""


class UnreadableImage(SketchError):
    pass


class UnknownColor(SketchError):
    def __init__(self, x: int, y: int, rgb: Sequence[int]):
        self.x, self.y, self.rgb = x, y, tuple(int(v) for v in rgb)
        super().__init__(f"pixel ({x}, {y}) has colour {self.rgb} not in the category spec")


class EmptySketch(SketchError):
    pass


class SketchLargerThanCanvas(SketchError):
    pass


class UnknownComponent(SketchError):
    pass


class InvalidSpec(SketchError):
    pass


@dataclass(frozen=True)
class CategorySpec:
    category: str
    components: tuple[tuple[str, tuple[int, int, int]], ...]

    def __post_init__(self):
        comps = tuple((str(name), tuple(int(v) for v in rgb)) for name, rgb in self.components)
        object.__setattr__(self, "components", comps)
        if len(comps) < 3:
            raise InvalidSpec(f"{self.category}: need at least 3 components, got {len(comps)}")
        colors = [rgb for _, rgb in comps]
        if len(set(colors)) != len(colors):
            raise InvalidSpec(f"{self.category}: component colours must be unique")
        if WHITE in colors:
            raise InvalidSpec(f"{self.category}: white is reserved for background")
        for rgb in colors:
            if len(rgb) != 3 or not all(0 <= v <= 255 for v in rgb):
                raise InvalidSpec(f"{self.category}: bad colour {rgb}")

    @property
    def num_components(self) -> int:
        return len(self.components)

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.components]

    @property
    def colors(self) -> np.ndarray:
        return np.array([rgb for _, rgb in self.components], dtype=np.uint8)

    def component_color(self, index: int) -> tuple[int, int, int]:
        return self.components[index][1]

    def map_color(self, rgb: Sequence[int]) -> int:
        rgb = tuple(int(v) for v in rgb)
        for i, (_, c) in enumerate(self.components):
            if c == rgb:
                return i
        raise UnknownColor(-1, -1, rgb)

    def component_index(self, name_or_index) -> int:
        if isinstance(name_or_index, (int, np.integer)):
            if 0 <= name_or_index < self.num_components:
                return int(name_or_index)
        elif name_or_index in self.names:
            return self.names.index(name_or_index)
        raise UnknownComponent(f"{self.category} has no component {name_or_index!r}")

    @classmethod
    def from_dict(cls, obj: dict) -> CategorySpec:
        try:
            return cls(obj["category"], tuple((c["name"], tuple(c["rgb"])) for c in obj["components"]))
        except (KeyError, TypeError) as exc:
            raise InvalidSpec(f"malformed category spec: {exc}") from exc

    def to_dict(self) -> dict:
        return {"category": self.category,
                "components": [{"name": n, "rgb": list(rgb)} for n, rgb in self.components]}

    @classmethod
    def load(cls, path) -> CategorySpec:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


LAMP = CategorySpec("lamp", (("tube", (255, 0, 0)), ("base", (0, 255, 0)), ("shade", (0, 0, 255))))


@dataclass
class SketchImage:
    """RGB raster with a white background. ``pixels`` is ``(height, width, 3)`` uint8."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise SketchError(f"pixels must be (H, W, 3), got {self.pixels.shape}")
        if self.height < 1 or self.width < 1:
            raise SketchError("image must be at least 1x1")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def foreground(self) -> np.ndarray:
        return np.any(self.pixels != 255, axis=2)

    @classmethod
    def blank(cls, height: int, width: int | None = None) -> SketchImage:
        return cls(np.full((height, height if width is None else width, 3), 255, dtype=np.uint8))

    def __eq__(self, other) -> bool:
        return isinstance(other, SketchImage) and np.array_equal(self.pixels, other.pixels)

    def save(self, path) -> None:
        Image.fromarray(self.pixels, mode="RGB").save(path)


def snap_colors(pixels: np.ndarray, spec: CategorySpec, tolerance: int = COLOR_TOLERANCE) -> SketchImage:
    """Snap every pixel to white or to a spec colour within ``tolerance`` per channel."""
    px = np.asarray(pixels, dtype=np.int16)
    palette = np.vstack([np.array([WHITE], dtype=np.int16), spec.colors.astype(np.int16)])
    dist = np.abs(px[:, :, None, :] - palette[None, None]).max(axis=3)
    nearest = dist.argmin(axis=2)
    ok = np.take_along_axis(dist, nearest[..., None], axis=2)[..., 0] <= tolerance
    if not ok.all():
        r, c = np.argwhere(~ok)[0]
        raise UnknownColor(int(c), int(r), pixels[r, c])
    return SketchImage(palette.astype(np.uint8)[nearest])


def load_sketch(path, spec: CategorySpec) -> SketchImage:
    """Read a PNG, composite any alpha over white and snap colours to ``spec``."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("RGBA", "LA") or (im.mode == "P" and "transparency" in im.info):
                im = im.convert("RGBA")
                bg = Image.new("RGBA", im.size, WHITE + (255,))
                im = Image.alpha_composite(bg, im)
            arr = np.asarray(im.convert("RGB"))
    except (OSError, UnidentifiedImageError) as exc:
        raise UnreadableImage(f"{path}: {exc}") from exc
    return snap_colors(arr, spec)


def crop_and_center(img: SketchImage, canvas: int = DEFAULT_CANVAS) -> SketchImage:
    """Move the foreground bounding box to the middle of a ``canvas`` square.

    The box's top-left lands at ``canvas//2 - extent//2`` on each axis; no
    scaling is applied.
    """
    mask = img.foreground()
    if not mask.any():
        raise EmptySketch("sketch has no foreground pixels")
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    h, w = r1 - r0, c1 - c0
    if h > canvas or w > canvas:
        raise SketchLargerThanCanvas(f"foreground {h}x{w} does not fit a {canvas}x{canvas} canvas")
    top, left = canvas // 2 - h // 2, canvas // 2 - w // 2
    out = SketchImage.blank(canvas)
    out.pixels[top:top + h, left:left + w] = img.pixels[r0:r1, c0:c1]
    return out


def thin(img: SketchImage) -> SketchImage:
    """Reduce strokes to one pixel wide, thinning each colour separately.

    Surviving pixels keep their colour. An image with no 2x2 foreground
    block is already one pixel wide and comes back unchanged, which makes
    thinning idempotent under any recolouring of its output.
    """
    fg = img.foreground()
    if not has_square(fg):
        return SketchImage(img.pixels.copy())
    px = img.pixels.astype(np.int64)
    code = (px[..., 0] << 16) | (px[..., 1] << 8) | px[..., 2]
    labels = np.full(code.shape, -1, dtype=np.int64)
    if fg.any():
        _, labels[fg] = np.unique(code[fg], return_inverse=True)
    keep = thin_labels(labels) >= 0
    pixels = img.pixels.copy()
    pixels[fg & ~keep] = 255
    return SketchImage(pixels)


def preprocess(img: SketchImage, canvas: int = DEFAULT_CANVAS) -> SketchImage:
    return thin(crop_and_center(img, canvas))


@dataclass
class PointSet:
    """``points`` is ``(N, 2)`` of (x, y) in [0, 1]; rows past ``n_original`` are padding."""

    points: np.ndarray
    n_original: int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32)
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise ValueError(f"points must be (N, 2), got {self.points.shape}")
        if not 1 <= self.n_original <= len(self.points):
            raise ValueError(f"n_original={self.n_original} outside [1, {len(self.points)}]")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class LabeledPointSet:
    base: PointSet
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (len(self.base),):
            raise ValueError(f"{len(self.labels)} labels for {len(self.base)} points")

    @property
    def points(self) -> np.ndarray:
        return self.base.points

    @property
    def n_original(self) -> int:
        return self.base.n_original

    def __len__(self) -> int:
        return len(self.base)


def sample_indices(count: int, n_points: int) -> np.ndarray:
    """Indices into a scan-ordered sequence of ``count`` items giving exactly ``n_points``."""
    if count > n_points:
        return (np.arange(n_points, dtype=np.int64) * count) // n_points
    return np.arange(n_points, dtype=np.int64) % count


def extract_points(img: SketchImage, spec: CategorySpec, n_points: int = DEFAULT_POINTS) -> LabeledPointSet:
    """Sample foreground pixels top-to-bottom, left-to-right into a fixed-size point set."""
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    mask = img.foreground()
    rows, cols = np.nonzero(mask)  # row-major, i.e. scan order
    count = len(rows)
    if count == 0:
        raise EmptySketch("sketch has no foreground pixels")
    labels = np.full(count, -1, dtype=np.int64)
    fg = img.pixels[rows, cols]
    for i, rgb in enumerate(spec.colors):
        labels[np.all(fg == rgb, axis=1)] = i
    if (labels < 0).any():
        j = int(np.argmax(labels < 0))
        raise UnknownColor(int(cols[j]), int(rows[j]), fg[j])
    idx = sample_indices(count, n_points)
    x = cols[idx] / max(img.width - 1, 1)
    y = rows[idx] / max(img.height - 1, 1)
    pts = PointSet(np.stack([x, y], axis=1), min(count, n_points))
    return LabeledPointSet(pts, labels[idx])


def labels_to_image(pts: LabeledPointSet, spec: CategorySpec, canvas: int = DEFAULT_CANVAS) -> SketchImage:
    """Render the original (non-padding) points in their component colours."""
    out = SketchImage.blank(canvas)
    n = pts.n_original
    xy = pts.points[:n].astype(np.float64)
    cols = np.rint(xy[:, 0] * (canvas - 1)).astype(np.int64)
    rows = np.rint(xy[:, 1] * (canvas - 1)).astype(np.int64)
    out.pixels[rows, cols] = spec.colors[pts.labels[:n]]
    return out


def perturb(img: SketchImage, spec: CategorySpec, drop_component=None, dot_count: int = 0,
            seed: int = 0) -> SketchImage:
    """Remove one component and/or sprinkle random single-pixel dots on the background."""
    pixels = img.pixels.copy()
    if drop_component is not None:
        idx = spec.component_index(drop_component)
        pixels[np.all(pixels == spec.colors[idx], axis=2)] = 255
    if dot_count > 0:
        rng = np.random.default_rng(seed)
        background = np.flatnonzero(np.all(pixels == 255, axis=2))
        if dot_count > background.size:
            raise SketchError(f"cannot place {dot_count} dots on {background.size} background pixels")
        where = rng.choice(background, size=dot_count, replace=False)
        which = rng.integers(0, spec.num_components, size=dot_count)
        pixels.reshape(-1, 3)[where] = spec.colors[which]
    return SketchImage(pixels)
