"""Dataset manifests, splitting, batching and a procedural sketch generator.

A corpus directory holds labelled PNGs, one category-spec JSON per category
and ``manifest.json``::

    {"specs": {"lamp": "lamp/lamp.json"},
     "records": [{"path": "lamp/lamp_0000.png", "category": "lamp", "split": "train"}, ...]}

Paths are relative to the manifest. Preprocessed point sets are cached next
to each image as ``<image>.n<N>.c<canvas>.pts``::

    b"MCPP" | version | png_crc32 | canvas | N | n_original      (uint32 LE)
    | N x 2 float32 LE coordinates | N uint32 LE component ids | crc32
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from skimage.draw import line as draw_line

from .sketchio import (DEFAULT_CANVAS, CategorySpec, LabeledPointSet, PointSet, SketchImage,
                       extract_points, load_sketch, preprocess)

MANIFEST_NAME = "manifest.json"
SPLITS = ("train", "test")
CACHE_MAGIC = b"MCPP"
CACHE_VERSION = 1


class EmptyManifest(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Record:
    path: str
    category: str
    split: str = "train"


@dataclass
class Manifest:
    records: list[Record]
    specs: dict[str, CategorySpec]
    root: Path = field(default_factory=Path)
    spec_paths: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        paths = [r.path for r in self.records]
        if len(set(paths)) != len(paths):
            raise ManifestError("manifest paths must be unique")
        for r in self.records:
            if r.category not in self.specs:
                raise ManifestError(f"no category spec for {r.category!r}")
            if r.split not in SPLITS:
                raise ManifestError(f"unknown split {r.split!r} for {r.path}")

    @property
    def categories(self) -> list[str]:
        return sorted(self.specs)

    def select(self, split: str | None) -> list[Record]:
        return [r for r in self.records if split is None or r.split == split]

    @classmethod
    def load(cls, path) -> Manifest:
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            obj = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
        root = path.parent
        spec_paths = dict(obj.get("specs", {}))
        records = [Record(r["path"], r["category"], r.get("split", "train")) for r in obj["records"]]
        for cat in {r.category for r in records} - set(spec_paths):
            if (root / f"{cat}.json").exists():
                spec_paths[cat] = f"{cat}.json"
        specs = {cat: CategorySpec.load(root / p) for cat, p in spec_paths.items()}
        return cls(records, specs, root, spec_paths)

    def save(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root / MANIFEST_NAME
        if path.is_dir():
            path = path / MANIFEST_NAME
        obj = {"specs": {c: self.spec_paths.get(c, f"{c}.json") for c in sorted(self.specs)},
               "records": [{"path": r.path, "category": r.category, "split": r.split} for r in self.records]}
        path.write_text(json.dumps(obj, indent=1) + "\n")
        return path


class LabelSpace:
    """Global class ids: each category's components in order, categories sorted by name."""

    def __init__(self, specs: dict[str, CategorySpec]):
        self.specs = dict(specs)
        self.offsets: dict[str, int] = {}
        total = 0
        for cat in sorted(self.specs):
            self.offsets[cat] = total
            total += self.specs[cat].num_components
        self.num_classes = total

    def to_global(self, category: str, local: np.ndarray) -> np.ndarray:
        return np.asarray(local) + self.offsets[category]

    def to_local(self, category: str, labels: np.ndarray) -> np.ndarray:
        """Map global ids back; ids belonging to other categories become -1."""
        local = np.asarray(labels) - self.offsets[category]
        n = self.specs[category].num_components
        return np.where((local >= 0) & (local < n), local, -1)


def split(manifest: Manifest, train_fraction: float = 0.75, seed: int = 0) -> Manifest:
    """Seeded split, stratified by category: ``round(fraction * count)`` train items each."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    if not manifest.records:
        raise EmptyManifest("manifest has no records")
    rng = np.random.default_rng(seed)
    assigned = {}
    for cat in manifest.categories:
        idx = [i for i, r in enumerate(manifest.records) if r.category == cat]
        n_train = int(np.floor(train_fraction * len(idx) + 0.5))
        order = rng.permutation(len(idx))
        for rank, j in enumerate(order):
            assigned[idx[j]] = "train" if rank < n_train else "test"
    records = [replace(r, split=assigned[i]) for i, r in enumerate(manifest.records)]
    return Manifest(records, manifest.specs, manifest.root, manifest.spec_paths)


# ---------------------------------------------------------------------------
# preprocessing cache


@dataclass
class Sample:
    category: str
    points: LabeledPointSet  # labels are component ids local to the category
    path: str = ""


def _cache_path(image: Path, n_points: int, canvas: int) -> Path:
    return image.with_name(f"{image.name}.n{n_points}.c{canvas}.pts")


def encode_points(lps: LabeledPointSet, png_crc: int, canvas: int) -> bytes:
    n = len(lps)
    body = (CACHE_MAGIC + struct.pack("<5I", CACHE_VERSION, png_crc, canvas, n, lps.n_original)
            + np.ascontiguousarray(lps.points, dtype="<f4").tobytes()
            + np.ascontiguousarray(lps.labels, dtype="<u4").tobytes())
    return body + struct.pack("<I", zlib.crc32(body))


def decode_points(raw: bytes) -> tuple[LabeledPointSet, int, int]:
    if raw[:4] != CACHE_MAGIC or len(raw) < 28:
        raise ValueError("not a point-set cache file")
    if zlib.crc32(raw[:-4]) != struct.unpack("<I", raw[-4:])[0]:
        raise ValueError("point-set cache checksum mismatch")
    version, png_crc, canvas, n, n_orig = struct.unpack_from("<5I", raw, 4)
    if version != CACHE_VERSION:
        raise ValueError("point-set cache version mismatch")
    pts = np.frombuffer(raw, dtype="<f4", count=2 * n, offset=24).reshape(n, 2)
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=24 + 8 * n)
    return LabeledPointSet(PointSet(pts.copy(), n_orig), labels.astype(np.int64)), png_crc, canvas


def load_points(image_path, spec: CategorySpec, n_points: int, canvas: int = DEFAULT_CANVAS,
                use_cache: bool = True) -> LabeledPointSet:
    """Load, centre, thin and sample one labelled sketch, via the sidecar cache."""
    image_path = Path(image_path)
    raw_png = image_path.read_bytes()
    png_crc = zlib.crc32(raw_png)
    cache = _cache_path(image_path, n_points, canvas)
    if use_cache and cache.exists():
        try:
            lps, crc, cached_canvas = decode_points(cache.read_bytes())
            if crc == png_crc and cached_canvas == canvas and len(lps) == n_points:
                return lps
        except ValueError:
            pass
    img = preprocess(load_sketch(image_path, spec), canvas)
    lps = extract_points(img, spec, n_points)
    if use_cache:
        try:
            cache.write_bytes(encode_points(lps, png_crc, canvas))
        except OSError:
            pass
    return lps


def load_samples(manifest: Manifest, split_name: str | None, n_points: int, canvas: int = DEFAULT_CANVAS,
                 use_cache: bool = True) -> list[Sample]:
    return [Sample(r.category, load_points(manifest.root / r.path, manifest.specs[r.category], n_points, canvas,
                                           use_cache), r.path)
            for r in manifest.select(split_name)]


def batches(dataset: Sequence, batch_size: int, epoch_seed) -> Iterator[list]:
    """Seeded shuffle, then contiguous chunks; the last partial chunk is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng(epoch_seed).permutation(len(dataset))
    for lo in range(0, len(order), batch_size):
        yield [dataset[i] for i in order[lo:lo + batch_size]]


# ---------------------------------------------------------------------------
# synthetic sketches

TEMPLATE_SPECS = {
    "lamp": CategorySpec("lamp", (("tube", (255, 0, 0)), ("base", (0, 255, 0)), ("shade", (0, 0, 255)))),
    "chair": CategorySpec("chair", (("back", (255, 0, 0)), ("seat", (0, 255, 0)),
                                    ("leg", (0, 0, 255)), ("arm", (255, 255, 0)))),
    "rifle": CategorySpec("rifle", (("barrel", (255, 0, 0)), ("body", (0, 255, 0)),
                                    ("stock", (0, 0, 255)), ("trigger", (255, 0, 255)))),
}


@dataclass(frozen=True)
class SynthConfig:
    template: str = "lamp"
    count: int = 100
    seed: int = 0
    canvas: int = DEFAULT_CANVAS
    amplitude: float = 0.01  # stroke wobble, as a fraction of the canvas
    point_noise: float = 0.03  # control-point jitter, as a fraction of the canvas
    train_fraction: float = 0.75

    def __post_init__(self):
        if self.template not in TEMPLATE_SPECS:
            raise ValueError(f"unknown template {self.template!r}; choose from {sorted(TEMPLATE_SPECS)}")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.canvas < 64:
            raise ValueError("canvas must be >= 64")


def _ellipse(cx, cy, rx, ry, a0=0.0, a1=2 * np.pi, n=24):
    t = np.linspace(a0, a1, n)
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


def _lamp(rng) -> list[tuple[int, list[np.ndarray]]]:
    cx = 0.5 + rng.uniform(-0.05, 0.05)
    top, shade_h = rng.uniform(0.12, 0.22), rng.uniform(0.15, 0.25)
    w_top, w_bot = rng.uniform(0.08, 0.16), rng.uniform(0.18, 0.3)
    shade_bot = top + shade_h
    base_y = rng.uniform(0.72, 0.85)
    bend = rng.uniform(-0.06, 0.06)
    shade = np.array([[cx - w_top, top], [cx + w_top, top], [cx + w_bot, shade_bot],
                      [cx - w_bot, shade_bot], [cx - w_top, top]])
    ty = np.linspace(shade_bot + 0.01, base_y - 0.02, 12)
    tube = np.stack([cx + bend * np.sin(np.pi * (ty - ty[0]) / (ty[-1] - ty[0])), ty], axis=1)
    bw, bh = rng.uniform(0.1, 0.2), rng.uniform(0.02, 0.05)
    base = np.array([[cx - bw * 0.6, base_y], [cx + bw * 0.6, base_y], [cx + bw, base_y + bh],
                     [cx - bw, base_y + bh], [cx - bw * 0.6, base_y]])
    return [(2, [shade]), (0, [tube]), (1, [base])]


def _chair(rng) -> list[tuple[int, list[np.ndarray]]]:
    left, right = rng.uniform(0.25, 0.35), rng.uniform(0.65, 0.75)
    seat_y, depth = rng.uniform(0.5, 0.6), rng.uniform(0.04, 0.08)
    back_top = rng.uniform(0.12, 0.25)
    back = np.array([[left, seat_y - 0.02], [left, back_top], [right, back_top], [right, seat_y - 0.02]])
    slat = np.array([[left, (back_top + seat_y) / 2], [right, (back_top + seat_y) / 2]])
    seat = np.array([[left - 0.03, seat_y], [right + 0.03, seat_y], [right, seat_y + depth],
                     [left, seat_y + depth], [left - 0.03, seat_y]])
    foot = rng.uniform(0.82, 0.92)
    legs = [np.array([[x, seat_y + depth + 0.02], [x + s, foot]])
            for x, s in ((left + 0.01, -0.03), (right - 0.01, 0.03))]
    arm_h = rng.uniform(0.08, 0.14)
    arms = [np.array([[x, seat_y - 0.03], [x + d, seat_y - arm_h], [x + d + 0.12 * np.sign(d), seat_y - arm_h]])
            for x, d in ((left - 0.05, -0.03), (right + 0.05, 0.03))]
    return [(0, [back, slat]), (1, [seat]), (2, legs), (3, arms)]


def _rifle(rng) -> list[tuple[int, list[np.ndarray]]]:
    y = rng.uniform(0.4, 0.5)
    x0, x1 = rng.uniform(0.08, 0.15), rng.uniform(0.85, 0.92)
    stock_end = x0 + rng.uniform(0.18, 0.25)
    body_end = stock_end + rng.uniform(0.22, 0.3)
    h = rng.uniform(0.05, 0.08)
    stock = np.array([[stock_end - 0.01, y], [x0, y + 0.02], [x0, y + h + 0.08], [stock_end - 0.01, y + h]])
    body = np.array([[stock_end, y], [body_end, y], [body_end, y + h], [stock_end, y + h], [stock_end, y]])
    barrel = np.array([[body_end + 0.01, y + 0.01], [x1, y + 0.01], [x1, y + 0.03], [body_end + 0.01, y + 0.03]])
    tx = (stock_end + body_end) / 2
    trigger = _ellipse(tx, y + h + 0.04, 0.04, 0.035, 0.0, np.pi, 12)
    return [(2, [stock]), (1, [body]), (0, [barrel]), (3, [trigger])]


_TEMPLATES = {"lamp": _lamp, "chair": _chair, "rifle": _rifle}


def _draw_polyline(pixels: np.ndarray, pts: np.ndarray, color, rng, amplitude: float, noise: float) -> None:
    size = pixels.shape[0]
    pts = pts + rng.normal(0.0, noise / 3, size=pts.shape)
    dense = []
    for a, b in zip(pts[:-1], pts[1:]):
        n = max(2, int(np.hypot(*(b - a)) * size / 6))
        t = np.linspace(0, 1, n, endpoint=False)[:, None]
        seg = a + t * (b - a)
        normal = np.array([-(b - a)[1], (b - a)[0]]) / (np.hypot(*(b - a)) + 1e-12)
        phase, freq = rng.uniform(0, 2 * np.pi), rng.uniform(1, 3)
        amp = min(amplitude, 0.1 * np.hypot(*(b - a)))
        seg = seg + amp * np.sin(2 * np.pi * freq * t + phase) * normal
        dense.append(seg)
    dense.append(pts[-1:])
    xy = np.clip(np.rint(np.vstack(dense) * (size - 1)).astype(int), 0, size - 1)
    for (c0, r0), (c1, r1) in zip(xy[:-1], xy[1:]):
        rr, cc = draw_line(r0, c0, r1, c1)
        pixels[rr, cc] = color


def render_synthetic(template: str, rng: np.random.Generator, canvas: int, amplitude: float = 0.01,
                     point_noise: float = 0.03) -> SketchImage:
    """Draw one random sketch of ``template``; every component keeps at least one pixel."""
    spec = TEMPLATE_SPECS[template]
    while True:
        img = SketchImage.blank(canvas)
        for comp, strokes in _TEMPLATES[template](rng):
            for stroke in strokes:
                _draw_polyline(img.pixels, stroke, spec.colors[comp], rng, amplitude, point_noise)
        present = [np.all(img.pixels == c, axis=2).any() for c in spec.colors]
        if all(present):
            return img


def gen_synthetic(cfg: SynthConfig, out_dir) -> Manifest:
    """Write ``cfg.count`` sketches plus spec and manifest under ``out_dir``.

    Existing manifests in ``out_dir`` are extended, so several templates can
    share one corpus.
    """
    out_dir = Path(out_dir)
    sub = out_dir / cfg.template
    sub.mkdir(parents=True, exist_ok=True)
    spec = TEMPLATE_SPECS[cfg.template]
    spec_rel = f"{cfg.template}/{cfg.template}.json"
    spec.save(out_dir / spec_rel)
    rng = np.random.default_rng(cfg.seed)
    records = []
    for i in range(cfg.count):
        img = render_synthetic(cfg.template, rng, cfg.canvas, cfg.amplitude, cfg.point_noise)
        rel = f"{cfg.template}/{cfg.template}_{i:04d}.png"
        img.save(out_dir / rel)
        records.append(Record(rel, cfg.template))
    fresh = split(Manifest(records, {cfg.template: spec}, out_dir, {cfg.template: spec_rel}),
                  cfg.train_fraction, cfg.seed)
    existing = out_dir / MANIFEST_NAME
    if existing.exists():
        old = Manifest.load(existing)
        keep = [r for r in old.records if r.category != cfg.template]
        specs = {**old.specs, cfg.template: spec}
        paths = {**old.spec_paths, cfg.template: spec_rel}
        fresh = Manifest(keep + fresh.records, specs, out_dir, paths)
    fresh.save(existing)
    return fresh
