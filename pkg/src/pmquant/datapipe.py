"""Preprocessing: regridding, monthly compositing, masking, normalization,
splitting, and the on-disk prepared-dataset layout.

Prepared dataset directory::

    manifest.json        sample listing (key, location, month, grid, file), band ids
    band_stats.json      per-band (min, max) fitted on the training split
    target_stats.json    target (min, max) on valid training pixels
    split.json           {"train": [keys...], "test": [keys...]}
    outliers.json        pooled outlier thresholds used for every sample
    samples/<key>.npz    input (C,H,W) float32 normalized, target (H,W), mask (H,W)
                         and, for synthetic data, truth_lower/median/upper
"""
from __future__ import annotations

import logging
import math
import os
import re
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path

import numpy as np
from rasterio.warp import Resampling, calculate_default_transform, reproject, transform_bounds

from .errors import DegenerateBandError, EmptySampleError, MetadataError, ShapeError, SizeError
from .raster import (
    BandStack,
    MaskRaster,
    Raster,
    RasterGrid,
    read_json,
    read_raster,
    read_stack,
    write_json,
)

log = logging.getLogger(__name__)

DATASET_FORMAT = "pmquant-dataset"
DATASET_VERSION = 1
PANCHROMATIC = ("B8",)


def n_workers() -> int:
    return max(1, int(os.environ.get("PMQUANT_WORKERS", "1")))


# -- regridding -------------------------------------------------------------


def _source_resolution_in(grid: RasterGrid, dst_crs: str) -> float:
    if grid.crs == dst_crs:
        return grid.pixel_size
    t, _, _ = calculate_default_transform(grid.crs, dst_crs, grid.width, grid.height, *grid.bounds)
    return abs(t.a)


def _transform_bounds(grid: RasterGrid, dst_crs: str):
    return transform_bounds(grid.crs, dst_crs, *grid.bounds)


def _warp_planes(planes: np.ndarray, valid: np.ndarray, src: RasterGrid, dst: RasterGrid, method):
    out = np.full((planes.shape[0], *dst.shape), np.nan)
    for i, plane in enumerate(planes):
        reproject(
            np.where(valid, plane, np.nan),
            out[i],
            src_transform=src.transform,
            src_crs=src.crs,
            src_nodata=np.nan,
            dst_transform=dst.transform,
            dst_crs=dst.crs,
            dst_nodata=np.nan,
            resampling=method,
        )
    return out


def regrid(raster, target: RasterGrid, resampling: str = "auto"):
    """Resample a :class:`Raster` or :class:`BandStack` onto ``target``.

    ``auto`` picks area-weighted averaging when the target pixels are
    coarser than the source pixels, bilinear interpolation otherwise.
    Target pixels outside the source footprint come back invalid.
    """
    if raster.grid is None or not raster.grid.crs:
        raise MetadataError("source raster has no georeferencing")
    if raster.grid == target:
        return replace(raster)
    if resampling == "auto":
        coarser = target.pixel_size > _source_resolution_in(raster.grid, target.crs) * (1 + 1e-9)
        method = Resampling.average if coarser else Resampling.bilinear
    else:
        method = {"average": Resampling.average, "bilinear": Resampling.bilinear,
                  "nearest": Resampling.nearest}[resampling]
    if isinstance(raster, BandStack):
        out = _warp_planes(raster.bands, raster.valid, raster.grid, target, method)
        valid = np.all(np.isfinite(out), axis=0)
        return replace(raster, grid=target, bands=out, valid=valid)
    out = _warp_planes(raster.values[None], raster.valid, raster.grid, target, method)[0]
    return Raster(target, out, np.isfinite(out))


# -- compositing and masks --------------------------------------------------


def monthly_composite(scenes: list[BandStack]) -> dict[tuple[int, int], BandStack]:
    """Per-(year, month), per-band, per-pixel mean over the valid observations."""
    if not scenes:
        raise EmptySampleError("no scenes to composite")
    grid, band_ids = scenes[0].grid, scenes[0].band_ids
    groups: dict[tuple[int, int], list[BandStack]] = defaultdict(list)
    for s in scenes:
        grid.require_same(s.grid, "composited scenes")
        if s.band_ids != band_ids:
            raise ShapeError(f"band sets differ: {s.band_ids} vs {band_ids}")
        groups[s.month_key].append(s)
    out = {}
    for key in sorted(groups):
        members = groups[key]
        total = np.zeros_like(members[0].bands, dtype=np.float64)
        count = np.zeros(grid.shape, dtype=np.int64)
        for s in members:
            total += np.where(s.valid[None], s.bands, 0.0)
            count += s.valid
        valid = count > 0
        mean = total / np.maximum(count, 1)
        out[key] = BandStack(grid, mean, band_ids, valid, datetime(key[0], key[1], 1),
                             members[0].location)
    return out


@dataclass
class QualityInfo:
    """Cloud information for one scene.

    ``pixel_qa`` follows the Landsat 8 Collection-2 QA_PIXEL bit layout:
    bit 2 cirrus, bit 3 cloud, bits 8-9 cloud confidence, bits 14-15 cirrus
    confidence. ``cloud_cover`` is the scene-level percentage.
    """

    pixel_qa: np.ndarray | None = None
    cloud_cover: float | None = None


def cloud_mask(scene: BandStack, qa: QualityInfo, *, confidence_threshold: int = 1,
               scene_threshold: float = 80.0) -> MaskRaster:
    if qa is None or (qa.pixel_qa is None and qa.cloud_cover is None):
        raise MetadataError("scene carries no cloud quality information")
    if qa.pixel_qa is not None:
        bits = np.asarray(qa.pixel_qa).astype(np.uint16)
        if bits.shape != scene.grid.shape:
            raise ShapeError(f"QA layer {bits.shape} does not match scene {scene.grid.shape}")
        flagged = (bits & (1 << 2)) | (bits & (1 << 3))
        cloud_conf = (bits >> 8) & 0b11
        cirrus_conf = (bits >> 14) & 0b11
        bad = (flagged > 0) | (cloud_conf > confidence_threshold) | (cirrus_conf > confidence_threshold)
        return MaskRaster(scene.grid, ~bad)
    keep = qa.cloud_cover <= scene_threshold
    return MaskRaster(scene.grid, np.full(scene.grid.shape, keep))


def combine_masks(masks: list[MaskRaster]) -> MaskRaster:
    if not masks:
        raise EmptySampleError("no masks to combine")
    grid = masks[0].grid
    validity = np.ones(grid.shape, dtype=bool)
    for m in masks:
        grid.require_same(m.grid, "masks")
        validity &= m.validity
    return MaskRaster(grid, validity)


def outlier_thresholds(targets: list[Raster], fraction: float = 0.01) -> tuple[float, float]:
    """Pooled cut points: the values at sorted ranks ``k`` and ``n-1-k``, ``k = ceil(fraction*n)``.

    Everything strictly outside ``[lo, hi]`` is an outlier, which drops the
    ``k`` lowest and ``k`` highest ranks when values are distinct and never
    touches ties (a constant raster keeps every pixel).
    """
    if not 0.0 <= fraction < 0.5:
        raise ValueError(f"fraction must lie in [0, 0.5), got {fraction}")
    pooled = np.concatenate([t.values[t.valid] for t in targets]) if targets else np.empty(0)
    if pooled.size == 0:
        raise EmptySampleError("no valid ground-truth values")
    pooled = np.sort(pooled)
    n = pooled.size
    k = min(math.ceil(fraction * n - 1e-9), (n - 1) // 2)
    return float(pooled[k]), float(pooled[n - 1 - k])


def outlier_mask(targets: list[Raster], fraction: float = 0.01,
                 thresholds: tuple[float, float] | None = None) -> list[MaskRaster]:
    """Per-raster masks, false where the value is a pooled outlier.

    Pass ``thresholds`` (from the training split) to mask other rasters with
    the same cut points.
    """
    lo, hi = thresholds if thresholds is not None else outlier_thresholds(targets, fraction)
    return [MaskRaster(t.grid, ~(t.valid & ((t.values < lo) | (t.values > hi)))) for t in targets]


# -- normalization ----------------------------------------------------------


@dataclass(frozen=True)
class BandStats:
    band_ids: tuple[str, ...]
    mins: tuple[float, ...]
    maxs: tuple[float, ...]

    def __post_init__(self):
        for b, lo, hi in zip(self.band_ids, self.mins, self.maxs):
            if not hi > lo:
                raise DegenerateBandError(b, lo, hi)

    def _arrays(self, ndim):
        shape = (-1,) + (1,) * (ndim - 1)
        return np.asarray(self.mins).reshape(shape), np.asarray(self.maxs).reshape(shape)

    def normalize_array(self, x: np.ndarray) -> np.ndarray:
        lo, hi = self._arrays(x.ndim)
        return np.clip((x - lo) / (hi - lo), 0.0, 1.0)

    def denormalize_array(self, x):
        lo, hi = self._arrays(x.ndim)
        return lo + x * (hi - lo)

    @property
    def span(self) -> float:
        """Width of the first band's range (the target range for 1-band stats)."""
        return self.maxs[0] - self.mins[0]

    def to_dict(self) -> dict:
        return {"band_ids": list(self.band_ids), "mins": list(self.mins), "maxs": list(self.maxs)}

    @classmethod
    def from_dict(cls, d: dict) -> "BandStats":
        return cls(tuple(d["band_ids"]), tuple(map(float, d["mins"])), tuple(map(float, d["maxs"])))


def fit_band_stats(stacks) -> BandStats:
    """Per-band min/max over the valid pixels of the given (training) stacks or samples."""
    stacks = [getattr(s, "input", s) for s in stacks]
    if not stacks:
        raise EmptySampleError("no stacks to fit statistics on")
    band_ids = stacks[0].band_ids
    lo = np.full(len(band_ids), np.inf)
    hi = np.full(len(band_ids), -np.inf)
    for s in stacks:
        if s.band_ids != band_ids:
            raise ShapeError(f"band sets differ: {s.band_ids} vs {band_ids}")
        if s.valid.any():
            v = s.bands[:, s.valid]
            lo = np.minimum(lo, v.min(axis=1))
            hi = np.maximum(hi, v.max(axis=1))
    if not np.all(np.isfinite(lo)):
        raise EmptySampleError("no valid pixels to fit statistics on")
    return BandStats(band_ids, tuple(map(float, lo)), tuple(map(float, hi)))


def fit_target_stats(targets: list[Raster], masks: list[MaskRaster] | None = None) -> BandStats:
    masks = masks or [t.availability() for t in targets]
    vals = [t.values[m.validity & t.valid] for t, m in zip(targets, masks)]
    vals = np.concatenate(vals) if vals else np.empty(0)
    if vals.size == 0:
        raise EmptySampleError("no valid target pixels")
    return BandStats(("target",), (float(vals.min()),), (float(vals.max()),))


def normalize(stack: BandStack, stats: BandStats) -> BandStack:
    if stack.band_ids != stats.band_ids:
        raise ShapeError(f"stack bands {stack.band_ids} do not match statistics {stats.band_ids}")
    return replace(stack, bands=stats.normalize_array(stack.bands), valid=stack.valid.copy())


def denormalize(stack: BandStack, stats: BandStats) -> BandStack:
    if stack.band_ids != stats.band_ids:
        raise ShapeError(f"stack bands {stack.band_ids} do not match statistics {stats.band_ids}")
    return replace(stack, bands=stats.denormalize_array(stack.bands), valid=stack.valid.copy())


# -- samples and splitting --------------------------------------------------


@dataclass
class Sample:
    input: BandStack
    target: Raster
    mask: MaskRaster
    month: tuple[int, int]
    location: str
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input.grid.require_same(self.target.grid, "input and target")
        self.input.grid.require_same(self.mask.grid, "input and mask")
        # mask true implies finite target
        self.mask = MaskRaster(self.mask.grid, self.mask.validity & self.target.valid)

    @property
    def key(self) -> str:
        return f"{self.location}_{self.month[0]:04d}-{self.month[1]:02d}"


def split_dataset(samples: list, ratio: float = 0.8, seed: int = 0) -> tuple[list, list]:
    """Random image-level partition; ``round(ratio * n)`` samples go to training."""
    n = len(samples)
    if not 0.0 < ratio < 1.0:
        raise SizeError(f"ratio must lie strictly between 0 and 1, got {ratio}")
    n_train = int(round(ratio * n))
    if n < 2 or n_train < 1 or n_train > n - 1:
        raise SizeError(f"cannot split {n} samples with ratio {ratio} into two nonempty sets")
    perm = np.random.default_rng(seed).permutation(n)
    train_idx, test_idx = sorted(perm[:n_train]), sorted(perm[n_train:])
    return [samples[i] for i in train_idx], [samples[i] for i in test_idx]


# -- prepared dataset -------------------------------------------------------


@dataclass
class PreparedDataset:
    samples: list[Sample]
    band_stats: BandStats
    target_stats: BandStats
    split: dict[str, list[str]]
    outlier_cut: tuple[float, float] = (-np.inf, np.inf)
    meta: dict = field(default_factory=dict)

    def subset(self, name: str) -> list[Sample]:
        if name == "all":
            return list(self.samples)
        keys = set(self.split[name])
        return [s for s in self.samples if s.key in keys]

    @property
    def train(self) -> list[Sample]:
        return self.subset("train")

    @property
    def test(self) -> list[Sample]:
        return self.subset("test")


def prepare_dataset(raw: list[Sample], ratio: float = 0.8, seed: int = 0,
                    outlier_fraction: float = 0.01, meta: dict | None = None) -> PreparedDataset:
    """Split, apply pooled outlier masking, and normalize with training-only statistics."""
    raw = sorted(raw, key=lambda s: (s.month, s.location))
    train, test = split_dataset(raw, ratio, seed)
    train_keys = {s.key for s in train}
    if len(train_keys) != len(train):
        raise ShapeError("duplicate sample keys (location, month)")
    cut = outlier_thresholds(
        [Raster(s.target.grid, s.target.values, s.mask.validity) for s in train], outlier_fraction
    )
    out_masks = outlier_mask([s.target for s in raw], thresholds=cut)
    masked = [
        replace(s, mask=combine_masks([s.mask, om, s.target.availability()]))
        for s, om in zip(raw, out_masks)
    ]
    train = [s for s in masked if s.key in train_keys]
    stats = fit_band_stats([s.input for s in train])
    target_stats = fit_target_stats([s.target for s in train], [s.mask for s in train])
    samples = [replace(s, input=normalize(s.input, stats)) for s in masked]
    split = {"train": [s.key for s in train], "test": [s.key for s in masked if s.key not in train_keys]}
    return PreparedDataset(samples, stats, target_stats, split, cut, dict(meta or {}))


def write_dataset(path, ds: PreparedDataset):
    path = Path(path)
    (path / "samples").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in ds.samples:
        fname = f"samples/{s.key}.npz"
        arrays = {
            "input": s.input.bands.astype(np.float32),
            "input_valid": s.input.valid,
            "target": s.target.values,
            "target_valid": s.target.valid,
            "mask": s.mask.validity,
        }
        arrays.update({k: np.asarray(v) for k, v in s.extras.items()})
        np.savez_compressed(path / fname, **arrays)
        entries.append({
            "key": s.key,
            "location": s.location,
            "month": list(s.month),
            "grid": s.input.grid.to_dict(),
            "file": fname,
            "valid_pixels": s.mask.count,
            "extras": sorted(s.extras),
        })
    write_json(path / "manifest.json", {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "band_ids": list(ds.band_stats.band_ids),
        "samples": entries,
        "meta": ds.meta,
    })
    write_json(path / "band_stats.json", ds.band_stats.to_dict())
    write_json(path / "target_stats.json", ds.target_stats.to_dict())
    write_json(path / "split.json", ds.split)
    write_json(path / "outliers.json", {"lower": ds.outlier_cut[0], "upper": ds.outlier_cut[1]})


def read_dataset(path) -> PreparedDataset:
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"no prepared dataset at {path} (manifest.json missing)")
    manifest = read_json(path / "manifest.json")
    if manifest.get("format") != DATASET_FORMAT:
        raise MetadataError(f"{path} is not a {DATASET_FORMAT} directory")
    band_ids = tuple(manifest["band_ids"])
    samples = []
    for e in manifest["samples"]:
        grid = RasterGrid.from_dict(e["grid"])
        with np.load(path / e["file"]) as z:
            stack = BandStack(grid, z["input"].astype(np.float64), band_ids, z["input_valid"])
            target = Raster(grid, z["target"], z["target_valid"])
            mask = MaskRaster(grid, z["mask"])
            extras = {k: z[k] for k in e.get("extras", [])}
        month = tuple(e["month"])
        stack = replace(stack, timestamp=datetime(month[0], month[1], 1), location=e["location"])
        samples.append(Sample(stack, target, mask, month, e["location"], extras))
    outl = read_json(path / "outliers.json")
    return PreparedDataset(
        samples,
        BandStats.from_dict(read_json(path / "band_stats.json")),
        BandStats.from_dict(read_json(path / "target_stats.json")),
        read_json(path / "split.json"),
        (outl["lower"], outl["upper"]),
        manifest.get("meta", {}),
    )


# -- corpus assembly from GeoTIFFs -----------------------------------------

_SCENE_RE = re.compile(r"^(?P<loc>.+?)__(?P<date>\d{4}-\d{2}-\d{2})$")
_GT_RE = re.compile(r"(?P<month>\d{4}-\d{2})$")


@dataclass
class CorpusConfig:
    """Where the raw corpus lives and how to grid it.

    Scenes: ``<location>__<YYYY-MM-DD>.tif`` with an optional per-pixel QA
    raster ``<stem>.qa.tif`` and/or ``<stem>.json`` holding ``cloud_cover``.
    Ground truth: one raster per month whose stem ends in ``YYYY-MM``.
    ``grids`` optionally pins the target grid per location; otherwise a
    WGS84 grid of ``pixel_size`` covering the first scene is used.
    """

    scene_dir: Path
    truth_dir: Path
    pixel_size: float = 0.01
    grids: dict[str, RasterGrid] = field(default_factory=dict)
    drop_bands: tuple[str, ...] = PANCHROMATIC
    cloud_confidence: int = 1
    scene_cloud_threshold: float = 80.0


def _scene_quality(path: Path) -> QualityInfo | None:
    qa_path = path.with_suffix(".qa.tif")
    js_path = path.with_suffix(".json")
    qa = QualityInfo()
    if qa_path.exists():
        qa.pixel_qa = read_raster(qa_path).values.astype(np.uint16)
    if js_path.exists():
        qa.cloud_cover = float(read_json(js_path)["cloud_cover"])
    if qa.pixel_qa is None and qa.cloud_cover is None:
        return None
    return qa


def _load_scene(path: Path, cfg: CorpusConfig):
    m = _SCENE_RE.match(path.name[: -len(".tif")])
    loc, date = m["loc"], datetime.fromisoformat(m["date"])
    scene = read_stack(path, timestamp=date, location=loc)
    qa = _scene_quality(path)
    if qa is None:
        raise MetadataError(f"no cloud quality information for {path}")
    scene = scene.with_mask(cloud_mask(scene, qa, confidence_threshold=cfg.cloud_confidence,
                                       scene_threshold=cfg.scene_cloud_threshold))
    scene = scene.drop([b for b in cfg.drop_bands if b in scene.band_ids])
    grid = cfg.grids.get(loc)
    if grid is None:
        grid = RasterGrid.covering(_transform_bounds(scene.grid, "EPSG:4326"), cfg.pixel_size)
    return loc, regrid(scene, grid)


def assemble_corpus(cfg: CorpusConfig) -> list[Sample]:
    scene_dir, truth_dir = Path(cfg.scene_dir), Path(cfg.truth_dir)
    for d in (scene_dir, truth_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"input directory not found: {d}")
    scene_paths = sorted(p for p in scene_dir.glob("*.tif")
                         if not p.name.endswith(".qa.tif") and _SCENE_RE.match(p.stem))
    if not scene_paths:
        raise FileNotFoundError(f"no scenes matching <location>__<YYYY-MM-DD>.tif in {scene_dir}")
    truth = {}
    for p in sorted(truth_dir.glob("*.tif")):
        m = _GT_RE.search(p.stem)
        if m:
            y, mo = map(int, m["month"].split("-"))
            truth[(y, mo)] = p
    if not truth:
        raise FileNotFoundError(f"no ground-truth rasters ending in YYYY-MM in {truth_dir}")

    with ThreadPoolExecutor(n_workers()) as pool:
        loaded = list(pool.map(lambda p: _load_scene(p, cfg), scene_paths))
    by_loc: dict[str, list[BandStack]] = defaultdict(list)
    for loc, scene in loaded:
        by_loc[loc].append(scene)

    samples = []
    for loc in sorted(by_loc):
        grid = by_loc[loc][0].grid
        for month, comp in monthly_composite(by_loc[loc]).items():
            if month not in truth:
                log.warning("no ground truth for %s %04d-%02d; skipped", loc, *month)
                continue
            gt = regrid(read_raster(truth[month]), grid)
            mask = combine_masks([MaskRaster(grid, comp.valid), gt.availability()])
            samples.append(Sample(comp, gt, mask, month, loc))
    if not samples:
        raise EmptySampleError("no scene months matched any ground-truth month")
    return sorted(samples, key=lambda s: (s.month, s.location))
