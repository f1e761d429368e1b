"""Simulated cell plates, dataset manifests and training-set surgery.

A dataset directory holds ``manifest.csv`` plus ``images/*.pgm``.  Each
plate (one random cell layout) is rendered six times, once per
(stain, blur level) group, and a plate is always entirely in the train or
the test split.
"""
from __future__ import annotations

import csv
import dataclasses
import enum
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import CapacityExceeded, UnknownCount, ValidationError
from .imaging import BLUR_LEVELS, Stain, check_blur_level, gaussian_blur_float, read_pgm, write_pgm

DEFAULT_COUNT_GRID = (
    1, 5, 10, 14, 18, 23, 27, 31, 35, 40, 44, 48,
    53, 57, 61, 66, 70, 74, 78, 83, 87, 91, 96, 100,
)
GROUPS = tuple((stain, blur) for stain in Stain for blur in BLUR_LEVELS)
MANIFEST_NAME = "manifest.csv"
MANIFEST_COLUMNS = ("image_path", "stain", "blur", "count", "split", "provenance", "plate_id")
META_NAME = "dataset.json"


class Split(str, enum.Enum):
    TRAIN = "train"
    TEST = "test"


class Provenance(str, enum.Enum):
    REAL = "real"
    SYNTH_PLATE = "synth_plate"
    SYNTH_DA = "synth_da"


@dataclass(frozen=True)
class ImageRecord:
    image_path: str
    stain: Stain
    blur: int
    count: int
    split: Split
    provenance: Provenance
    plate_id: int
    # donor image paths of a max-overlay record; not part of manifest.csv
    donors: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "stain", Stain(self.stain))
        object.__setattr__(self, "split", Split(self.split))
        object.__setattr__(self, "provenance", Provenance(self.provenance))
        object.__setattr__(self, "blur", check_blur_level(self.blur))
        if int(self.count) < 1:
            raise ValidationError(f"count must be >= 1, got {self.count}")
        object.__setattr__(self, "count", int(self.count))
        object.__setattr__(self, "plate_id", int(self.plate_id))

    @property
    def group(self) -> tuple[Stain, int]:
        return (self.stain, self.blur)


@dataclass
class DatasetManifest:
    records: list[ImageRecord]
    count_grid: tuple[int, ...] = DEFAULT_COUNT_GRID
    images_per_count_per_group: int = 5
    rng_seed: int = 0
    root: Path | None = None

    def __post_init__(self):
        self.count_grid = tuple(sorted(set(int(c) for c in self.count_grid)))

    def replace(self, **changes) -> "DatasetManifest":
        return dataclasses.replace(self, **changes)

    def train(self) -> list[ImageRecord]:
        return [r for r in self.records if r.split is Split.TRAIN]

    def test(self) -> list[ImageRecord]:
        return [r for r in self.records if r.split is Split.TEST]

    def train_labels(self) -> set[int]:
        return {r.count for r in self.train()}

    def path_of(self, record: ImageRecord) -> Path:
        if self.root is None:
            return Path(record.image_path)
        return Path(self.root) / record.image_path


@dataclass
class PlateRenderConfig:
    """Rendering parameters of the plate simulator.

    ``cell_radius_range`` is the nuclei disc radius; body discs use the same
    centres with the radius scaled by ``body_radius_multiplier``.
    """

    image_size: tuple[int, int] = (64, 64)
    cell_radius_range: tuple[float, float] = (1.75, 1.95)
    nuclei_peak_intensity: int = 230
    body_peak_intensity: int = 170
    body_radius_multiplier: float = 1.5
    blur_sigma_map: Mapping[int, float] = field(
        default_factory=lambda: {1: 0.5, 23: 2.0, 48: 4.0}
    )
    background_level: int = 12
    max_overlap_fraction: float = 0.1

    def __post_init__(self):
        lo, hi = self.cell_radius_range
        if lo < 1 or hi < lo:
            raise ValidationError(f"bad cell_radius_range {self.cell_radius_range}")
        if self.body_radius_multiplier <= 1:
            raise ValidationError("body_radius_multiplier must exceed 1")
        self.blur_sigma_map = {int(k): float(v) for k, v in self.blur_sigma_map.items()}
        missing = set(BLUR_LEVELS) - set(self.blur_sigma_map)
        if missing:
            raise ValidationError(f"blur_sigma_map lacks levels {sorted(missing)}")
        for name in ("nuclei_peak_intensity", "body_peak_intensity", "background_level"):
            if not 0 <= getattr(self, name) <= 255:
                raise ValidationError(f"{name} must lie in [0, 255]")
        if not 0 <= self.max_overlap_fraction <= 1:
            raise ValidationError("max_overlap_fraction must lie in [0, 1]")


def derive_seed(*parts: int) -> int:
    """Stable 63-bit seed derived from a tuple of non-negative integers."""
    ss = np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts])
    return int(ss.generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> np.uint64(1))


def place_cells(count: int, config: PlateRenderConfig, rng_seed: int) -> np.ndarray:
    """Sample ``count`` non-overlapping-enough discs; returns rows of (y, x, r).

    Two discs may overlap by at most ``max_overlap_fraction`` of the smaller
    diameter (penetration depth ``r1 + r2 - d``).
    """
    if count < 1:
        raise ValidationError(f"count must be >= 1, got {count}")
    width, height = config.image_size
    r_min, r_max = config.cell_radius_range
    if count * math.pi * r_max**2 > width * height:
        raise CapacityExceeded(f"{count} cells of radius {r_max} cannot fit in {width}x{height}")
    if 2 * r_max >= min(width, height):
        raise CapacityExceeded("cell diameter exceeds the image size")

    rng = np.random.default_rng(rng_seed)
    radii = rng.uniform(r_min, r_max, size=count)
    cells = np.empty((count, 3))
    placed = 0
    budget = 10 * count * 100
    attempts = 0
    while placed < count:
        if attempts >= budget:
            raise CapacityExceeded(f"placed only {placed}/{count} cells after {budget} attempts")
        attempts += 1
        r = radii[placed]
        y = rng.uniform(r, height - r)
        x = rng.uniform(r, width - r)
        if placed:
            prev = cells[:placed]
            d = np.hypot(prev[:, 0] - y, prev[:, 1] - x)
            depth = r + prev[:, 2] - d
            frac = depth / (2.0 * np.minimum(r, prev[:, 2]))
            if np.any(frac > config.max_overlap_fraction):
                continue
        cells[placed] = (y, x, r)
        placed += 1
    return cells


def _draw_discs(cells: np.ndarray, radius_scale: float, peak: float, shape) -> np.ndarray:
    height, width = shape
    canvas = np.zeros(shape, dtype=np.float64)
    for y, x, r in cells:
        radius = r * radius_scale
        y0, y1 = max(0, int(y - radius - 1)), min(height, int(y + radius + 2))
        x0, x1 = max(0, int(x - radius - 1)), min(width, int(x + radius + 2))
        yy, xx = np.mgrid[y0:y1, x0:x1]
        # pixel centres sit at integer + 0.5
        dist = np.hypot(yy + 0.5 - y, xx + 0.5 - x)
        coverage = np.clip(radius + 0.5 - dist, 0.0, 1.0)
        falloff = 0.55 + 0.45 * np.cos(0.5 * np.pi * np.minimum(dist / radius, 1.0))
        np.maximum(canvas[y0:y1, x0:x1], peak * falloff * coverage, out=canvas[y0:y1, x0:x1])
    return canvas


def render_plate(
    count: int,
    stain: Stain,
    blur: int,
    config: PlateRenderConfig | None = None,
    rng_seed: int = 0,
) -> np.ndarray:
    """Render one greyscale plate image with ``count`` cells.

    The cell layout depends only on ``(count, config, rng_seed)``, so the
    six stain/blur variants of one seed show the same plate.
    """
    config = config or PlateRenderConfig()
    return render_cells(place_cells(count, config, rng_seed), stain, blur, config)


def render_cells(cells: np.ndarray, stain: Stain, blur: int, config: PlateRenderConfig) -> np.ndarray:
    stain = Stain(stain)
    blur = check_blur_level(blur)
    width, height = config.image_size
    if stain is Stain.NUCLEI:
        cells_img = _draw_discs(cells, 1.0, config.nuclei_peak_intensity, (height, width))
    else:
        cells_img = _draw_discs(
            cells, config.body_radius_multiplier, config.body_peak_intensity, (height, width)
        )
    canvas = np.maximum(cells_img, float(config.background_level))
    blurred = gaussian_blur_float(canvas, config.blur_sigma_map[blur])
    return np.clip(np.floor(blurred + 0.5), 0, 255).astype(np.uint8)


def n_train_for(n_images: int, split_ratio: tuple[int, int]) -> int:
    """Train images per (stain, blur, count) cell for a train:test ratio."""
    a, b = split_ratio
    if a <= 0 or b <= 0:
        raise ValidationError(f"split ratio parts must be positive, got {split_ratio}")
    n_train = int(math.floor(n_images * a / (a + b) + 0.5))
    return min(max(n_train, 1), n_images - 1)


def generate_dataset(
    out_dir: str | os.PathLike,
    config: PlateRenderConfig | None = None,
    grid: Sequence[int] = DEFAULT_COUNT_GRID,
    images_per_count_per_group: int = 5,
    split_ratio: tuple[int, int] = (2, 1),
    rng_seed: int = 0,
) -> DatasetManifest:
    """Render a full dataset into ``out_dir`` and write its manifest.

    One plate per (count, replicate); each plate yields six records.  Within
    every count the plates are shuffled and the first ``n_train`` go to the
    train split, so each (stain, blur, count) cell has the same train:test
    ratio.
    """
    if images_per_count_per_group < 2:
        raise ValidationError("images_per_count_per_group must be >= 2")
    config = config or PlateRenderConfig()
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    grid = tuple(sorted(set(int(c) for c in grid)))
    n_train = n_train_for(images_per_count_per_group, split_ratio)
    split_rng = np.random.default_rng(derive_seed(rng_seed, 0x5B1))

    records: list[ImageRecord] = []
    plate_id = 0
    for count in grid:
        order = split_rng.permutation(images_per_count_per_group)
        for rep in range(images_per_count_per_group):
            split = Split.TRAIN if order[rep] < n_train else Split.TEST
            cells = place_cells(count, config, derive_seed(rng_seed, plate_id))
            for stain, blur in GROUPS:
                image = render_cells(cells, stain, blur, config)
                rel = f"images/p{plate_id:05d}_{stain.value}_b{blur:02d}.pgm"
                write_pgm(image, out_dir / rel)
                records.append(
                    ImageRecord(rel, stain, blur, count, split, Provenance.SYNTH_PLATE, plate_id)
                )
            plate_id += 1

    manifest = DatasetManifest(records, grid, images_per_count_per_group, rng_seed, out_dir)
    write_manifest(manifest, out_dir)
    return manifest


def write_manifest(
    manifest: DatasetManifest, out_dir: str | os.PathLike, name: str = MANIFEST_NAME
) -> Path:
    out_dir = Path(out_dir)
    path = out_dir / name
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in manifest.records:
            writer.writerow(
                [r.image_path, r.stain.value, r.blur, r.count, r.split.value,
                 r.provenance.value, r.plate_id]
            )
    meta = {
        "count_grid": list(manifest.count_grid),
        "images_per_count_per_group": manifest.images_per_count_per_group,
        "rng_seed": manifest.rng_seed,
    }
    (out_dir / META_NAME).write_text(json.dumps(meta, indent=2) + "\n")
    return path


def read_manifest(dataset_dir: str | os.PathLike, name: str = MANIFEST_NAME) -> DatasetManifest:
    """Load a manifest; ``dataset.json`` is optional for external datasets."""
    dataset_dir = Path(dataset_dir)
    with open(dataset_dir / name, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_COLUMNS:
            raise ValidationError(f"manifest header must be {','.join(MANIFEST_COLUMNS)}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise ValidationError(f"{name}:{lineno}: expected {len(MANIFEST_COLUMNS)} fields")
            try:
                records.append(
                    ImageRecord(row[0], row[1], int(row[2]), int(row[3]), row[4], row[5], int(row[6]))
                )
            except ValueError as exc:
                raise ValidationError(f"{name}:{lineno}: {exc}") from None
    meta_path = dataset_dir / META_NAME
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        grid = tuple(meta["count_grid"])
        per_count = int(meta["images_per_count_per_group"])
        seed = int(meta["rng_seed"])
    else:
        grid = tuple(sorted({r.count for r in records}))
        cells: dict = {}
        for r in records:
            cells[(r.stain, r.blur, r.count)] = cells.get((r.stain, r.blur, r.count), 0) + 1
        per_count = max(cells.values(), default=1)
        seed = 0
    return DatasetManifest(records, grid, per_count, seed, dataset_dir)


def delete_counts(manifest: DatasetManifest, counts_to_delete: Iterable[int]) -> DatasetManifest:
    """Drop every train record whose count is in ``counts_to_delete``."""
    doomed = {int(c) for c in counts_to_delete}
    unknown = doomed - set(manifest.count_grid)
    if unknown:
        raise UnknownCount(f"counts not in the grid: {sorted(unknown)}")
    kept = [r for r in manifest.records if not (r.split is Split.TRAIN and r.count in doomed)]
    return manifest.replace(records=kept)


def halve_training_set(manifest: DatasetManifest, rng_seed: int) -> DatasetManifest:
    """Remove ``floor(n / 2)`` train records chosen uniformly at random."""
    train_idx = [i for i, r in enumerate(manifest.records) if r.split is Split.TRAIN]
    rng = np.random.default_rng(rng_seed)
    n_drop = len(train_idx) // 2
    dropped = set(rng.choice(len(train_idx), size=n_drop, replace=False).tolist()) if n_drop else set()
    doomed = {train_idx[k] for k in dropped}
    kept = [r for i, r in enumerate(manifest.records) if i not in doomed]
    return manifest.replace(records=kept)


def load_images(manifest: DatasetManifest, records: Sequence[ImageRecord] | None = None,
                cache: dict | None = None) -> list[np.ndarray]:
    """Read the PGM files behind ``records`` (all records by default)."""
    records = manifest.records if records is None else records
    out = []
    for r in records:
        path = manifest.path_of(r)
        if cache is not None:
            key = str(path)
            if key not in cache:
                cache[key] = read_pgm(path)
            out.append(cache[key])
        else:
            out.append(read_pgm(path))
    return out
