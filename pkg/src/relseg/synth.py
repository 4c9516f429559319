"""Synthetic ellipse segmentation corpus with controllable difficulty.

Each sample is one rotated ellipse on a flat background. Four knobs make a
sample hard: a small target, low contrast, blurred boundaries and noise.
The ground-truth mask is always the clean, unblurred ellipse.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from . import netpbm
from .errors import ConfigError, DatasetIOError, UsageError
from .relations import make_relations
from .unet import parse_key_values

BACKGROUND = 0.3
MAX_ASPECT = 1.5
CENTER_JITTER = 4.0
MANIFEST_HEADER = ["id", "target_radius", "contrast", "blur_sigma", "noise_std", "fold"]


@dataclass(frozen=True)
class Difficulty:
    target_radius: float
    contrast: float
    blur_sigma: float
    noise_std: float


@dataclass(frozen=True)
class DifficultyRanges:
    target_radius: Tuple[float, float] = (3.0, 10.0)
    contrast: Tuple[float, float] = (0.2, 0.7)
    blur_sigma: Tuple[float, float] = (0.0, 2.0)
    noise_std: Tuple[float, float] = (0.02, 0.12)

    def __post_init__(self):
        for f in fields(self):
            lo, hi = getattr(self, f.name)
            if lo > hi:
                raise ConfigError(f"difficulty range {f.name} has min {lo} > max {hi}")
        if self.target_radius[0] <= 0:
            raise ConfigError("target_radius must be positive")
        if self.contrast[0] <= 0 or self.contrast[1] > 1:
            raise ConfigError("contrast must lie in (0, 1]")
        if self.blur_sigma[0] < 0 or self.noise_std[0] < 0:
            raise ConfigError("blur_sigma and noise_std must be non-negative")

    @classmethod
    def from_text(cls, text: str) -> "DifficultyRanges":
        """Parse ``name=min,max`` lines; omitted names keep their defaults."""
        raw = parse_key_values(text)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown difficulty keys: {sorted(unknown)}")
        kwargs = {}
        for name, value in raw.items():
            parts = value.split(",")
            try:
                lo, hi = (float(p) for p in parts)
            except ValueError as exc:
                raise ConfigError(f"{name} must be 'min,max', got {value!r}") from exc
            kwargs[name] = (lo, hi)
        return cls(**kwargs)


@dataclass
class SampleRecord:
    id: int
    image: np.ndarray
    mask: np.ndarray
    difficulty: Difficulty
    fold: Optional[int] = None


@dataclass(frozen=True)
class FoldSplit:
    fold_count: int
    assignments: Mapping[int, int]

    def ids_in(self, fold: int) -> List[int]:
        return sorted(i for i, f in self.assignments.items() if f == fold)

    def ids_not_in(self, fold: int) -> List[int]:
        return sorted(i for i, f in self.assignments.items() if f != fold)


@dataclass
class PairBatch:
    x1_ids: List[int]
    x2_ids: List[int]
    x1: np.ndarray
    x2: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    rp: np.ndarray
    rc: np.ndarray

    def targets(self) -> Dict[str, np.ndarray]:
        return {"s1": self.s1, "s2": self.s2, "rp": self.rp, "rc": self.rc}


def ellipse_mask(size: Tuple[int, int], center: Tuple[float, float], semi_axes: Tuple[float, float],
                 angle: float) -> np.ndarray:
    """Pixels whose centres fall inside the rotated ellipse."""
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - center[0], xx - center[1]
    c, s = math.cos(angle), math.sin(angle)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    major, minor = semi_axes
    return (u / major) ** 2 + (v / minor) ** 2 <= 1.0


def _jittered_center(rng: np.random.Generator, extent: int, major: float) -> float:
    # targets sit near the image centre so that pairs overlap, like aligned anatomy
    mid = (extent - 1) / 2
    margin = min(major, mid)
    lo, hi = max(margin, mid - CENTER_JITTER), min(extent - 1 - margin, mid + CENTER_JITTER)
    return rng.uniform(lo, hi) if lo < hi else mid


def render_sample(sample_id: int, size: Tuple[int, int], ranges: DifficultyRanges, seed: int) -> SampleRecord:
    rng = np.random.default_rng([seed, sample_id])
    h, w = size
    radius = rng.uniform(*ranges.target_radius)
    contrast = rng.uniform(*ranges.contrast)
    blur = rng.uniform(*ranges.blur_sigma)
    noise = rng.uniform(*ranges.noise_std)
    major = radius * rng.uniform(1.0, MAX_ASPECT)
    angle = rng.uniform(0.0, math.pi)
    center = (_jittered_center(rng, h, major), _jittered_center(rng, w, major))

    mask = ellipse_mask(size, center, (major, radius), angle)
    image = np.where(mask, min(BACKGROUND + contrast, 1.0), BACKGROUND)
    if blur > 0:
        image = gaussian_filter(image, sigma=blur, mode="nearest")
    if noise > 0:
        image = image + rng.normal(0.0, noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return SampleRecord(sample_id, image, mask, Difficulty(radius, contrast, blur, noise))


def generate_dataset(count: int, size: Tuple[int, int], difficulty_ranges: Optional[DifficultyRanges] = None,
                     seed: int = 0) -> List[SampleRecord]:
    """``count`` samples with ids 0..count-1; each sample has its own seeded stream."""
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    h, w = size
    if h < 1 or w < 1:
        raise ConfigError(f"invalid image size {size}")
    ranges = difficulty_ranges or DifficultyRanges()
    return [render_sample(i, (h, w), ranges, seed) for i in range(count)]


def split_folds(ids: Sequence[int], fold_count: int = 5, seed: int = 0) -> FoldSplit:
    """Seeded shuffle, then round-robin assignment."""
    ids = list(ids)
    if fold_count < 2:
        raise ConfigError(f"fold_count must be >= 2, got {fold_count}")
    if not ids:
        raise ConfigError("cannot split an empty id list")
    if len(set(ids)) != len(ids):
        raise ConfigError("ids must be unique")
    if fold_count > len(ids):
        raise ConfigError(f"fold_count {fold_count} exceeds the number of ids {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    return FoldSplit(fold_count, {ids[j]: k % fold_count for k, j in enumerate(order)})


def assign_folds(records: Sequence[SampleRecord], split: FoldSplit) -> None:
    for rec in records:
        rec.fold = split.assignments[rec.id]


def folds_of(records: Sequence[SampleRecord]) -> FoldSplit:
    if any(r.fold is None for r in records):
        raise ConfigError("dataset has samples without a fold assignment")
    count = max(r.fold for r in records) + 1
    return FoldSplit(count, {r.id: r.fold for r in records})


def sample_pairs(dataset: Mapping[int, SampleRecord], train_ids: Sequence[int], batch_size: int,
                 rng: np.random.Generator) -> PairBatch:
    """Draw x1 and x2 independently and uniformly, with replacement."""
    if len(train_ids) == 0:
        raise UsageError("cannot sample pairs from an empty training set")
    ids = np.asarray(train_ids)
    x1_ids = [int(i) for i in ids[rng.integers(0, len(ids), size=batch_size)]]
    x2_ids = [int(i) for i in ids[rng.integers(0, len(ids), size=batch_size)]]

    def stack(arrs):
        return np.stack(arrs)[:, None].astype(np.float64)

    s1 = [dataset[i].mask for i in x1_ids]
    s2 = [dataset[i].mask for i in x2_ids]
    rels = [make_relations(a, b) for a, b in zip(s1, s2)]
    return PairBatch(
        x1_ids=x1_ids, x2_ids=x2_ids,
        x1=stack([dataset[i].image for i in x1_ids]),
        x2=stack([dataset[i].image for i in x2_ids]),
        s1=stack(s1), s2=stack(s2),
        rp=stack([r.possible for r in rels]),
        rc=stack([r.consensus for r in rels]),
    )


def save_dataset(path, records: Sequence[SampleRecord]) -> None:
    """Write ``{id}.pgm``, ``{id}.pbm`` and ``manifest.csv`` into ``path``."""
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetIOError(f"{root}: cannot create dataset directory") from exc
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(MANIFEST_HEADER)
    for rec in records:
        netpbm.write_pgm(root / f"{rec.id}.pgm", rec.image)
        netpbm.write_pbm(root / f"{rec.id}.pbm", rec.mask)
        d = rec.difficulty
        writer.writerow([rec.id, repr(d.target_radius), repr(d.contrast), repr(d.blur_sigma),
                         repr(d.noise_std), "" if rec.fold is None else rec.fold])
    manifest = root / "manifest.csv"
    tmp = manifest.with_name("manifest.csv.tmp")
    tmp.write_text(buf.getvalue(), newline="")
    os.replace(tmp, manifest)


def load_dataset(path) -> List[SampleRecord]:
    root = Path(path)
    manifest = root / "manifest.csv"
    try:
        with open(manifest, newline="") as fh:
            text = fh.read()
    except OSError as exc:
        raise DatasetIOError(f"{manifest}: cannot read manifest") from exc
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != MANIFEST_HEADER:
        raise DatasetIOError(f"{manifest}: expected header {','.join(MANIFEST_HEADER)}")
    records = []
    for lineno, row in enumerate(rows[1:], 2):
        if len(row) != len(MANIFEST_HEADER):
            raise DatasetIOError(f"{manifest}: line {lineno} has {len(row)} fields")
        try:
            sample_id = int(row[0])
            diff = Difficulty(*(float(v) for v in row[1:5]))
            fold = int(row[5]) if row[5] else None
        except ValueError as exc:
            raise DatasetIOError(f"{manifest}: line {lineno} is malformed") from exc
        image = netpbm.read_pgm(root / f"{sample_id}.pgm")
        mask = netpbm.read_pbm(root / f"{sample_id}.pbm")
        if image.shape != mask.shape:
            raise DatasetIOError(f"{root / f'{sample_id}.pbm'}: mask shape {mask.shape} != image {image.shape}")
        records.append(SampleRecord(sample_id, image, mask, diff, fold))
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise DatasetIOError(f"{manifest}: duplicate sample ids")
    return records


def by_id(records: Sequence[SampleRecord]) -> Dict[int, SampleRecord]:
    return {r.id: r for r in records}
