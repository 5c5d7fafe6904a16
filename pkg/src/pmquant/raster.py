"""Raster containers and GeoTIFF I/O.

Validity is always carried as an explicit boolean plane next to the values.
On disk, float rasters use NaN as nodata; it never appears in memory.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path

import numpy as np
import rasterio
from rasterio.crs import CRS
from rasterio.transform import Affine

from .errors import MetadataError, ShapeError

WGS84 = "EPSG:4326"


@dataclass(frozen=True)
class RasterGrid:
    """North-up grid; ``origin_x, origin_y`` is the outer corner of the top-left pixel."""

    origin_x: float
    origin_y: float
    pixel_size: float
    width: int
    height: int
    crs: str = WGS84

    def __post_init__(self):
        if not self.pixel_size > 0:
            raise MetadataError(f"pixel_size must be positive, got {self.pixel_size}")
        if self.width < 1 or self.height < 1:
            raise MetadataError(f"empty grid {self.width}x{self.height}")
        if not self.crs:
            raise MetadataError("grid has no CRS")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def transform(self) -> Affine:
        return Affine(self.pixel_size, 0.0, self.origin_x, 0.0, -self.pixel_size, self.origin_y)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return (
            self.origin_x,
            self.origin_y - self.height * self.pixel_size,
            self.origin_x + self.width * self.pixel_size,
            self.origin_y,
        )

    @classmethod
    def from_transform(cls, transform: Affine, width: int, height: int, crs) -> "RasterGrid":
        if transform is None or crs is None:
            raise MetadataError("raster lacks georeferencing (transform or CRS missing)")
        if transform.b != 0 or transform.d != 0:
            raise MetadataError("rotated geotransforms are not supported")
        if not np.isclose(transform.a, -transform.e, rtol=1e-9, atol=0):
            raise MetadataError(f"non-square pixels {transform.a} x {-transform.e}")
        crs_str = crs.to_string() if isinstance(crs, CRS) else str(crs)
        return cls(transform.c, transform.f, transform.a, width, height, crs_str)

    @classmethod
    def covering(cls, bounds, pixel_size: float = 0.01, crs: str = WGS84) -> "RasterGrid":
        """Smallest grid aligned to multiples of ``pixel_size`` that covers ``bounds``."""
        west, south, east, north = bounds
        x0 = np.floor(west / pixel_size + 1e-9) * pixel_size
        y0 = np.ceil(north / pixel_size - 1e-9) * pixel_size
        w = int(np.ceil((east - x0) / pixel_size - 1e-9))
        h = int(np.ceil((y0 - south) / pixel_size - 1e-9))
        return cls(round(x0, 10), round(y0, 10), pixel_size, max(w, 1), max(h, 1), crs)

    def to_dict(self) -> dict:
        return {
            "origin_x": self.origin_x,
            "origin_y": self.origin_y,
            "pixel_size": self.pixel_size,
            "width": self.width,
            "height": self.height,
            "crs": self.crs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RasterGrid":
        return cls(d["origin_x"], d["origin_y"], d["pixel_size"], int(d["width"]), int(d["height"]), d.get("crs", WGS84))

    def require_same(self, other: "RasterGrid", what: str = "rasters"):
        if self != other:
            raise ShapeError(f"{what} are on different grids: {self} vs {other}")


def _valid_plane(valid, shape) -> np.ndarray:
    if valid is None:
        return np.ones(shape, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != shape:
        raise ShapeError(f"validity plane {valid.shape} does not match raster {shape}")
    return valid


@dataclass
class MaskRaster:
    grid: RasterGrid
    validity: np.ndarray

    def __post_init__(self):
        self.validity = _valid_plane(self.validity, self.grid.shape)

    @property
    def count(self) -> int:
        return int(self.validity.sum())


@dataclass
class Raster:
    """Single-band raster, e.g. a ground-truth concentration map."""

    grid: RasterGrid
    values: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.grid.shape:
            raise ShapeError(f"values {self.values.shape} do not match grid {self.grid.shape}")
        self.valid = _valid_plane(self.valid, self.grid.shape) & np.isfinite(self.values)
        self.values = np.where(self.valid, self.values, 0.0)

    def availability(self) -> MaskRaster:
        return MaskRaster(self.grid, self.valid.copy())


@dataclass
class BandStack:
    """Multi-band image on one grid with a shared per-pixel validity plane."""

    grid: RasterGrid
    bands: np.ndarray
    band_ids: tuple[str, ...]
    valid: np.ndarray | None = None
    timestamp: datetime | None = None
    location: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.bands = np.asarray(self.bands, dtype=np.float64)
        if self.bands.ndim != 3 or self.bands.shape[1:] != self.grid.shape:
            raise ShapeError(f"bands {self.bands.shape} do not match grid {self.grid.shape}")
        self.band_ids = tuple(self.band_ids)
        if len(self.band_ids) != self.bands.shape[0]:
            raise ShapeError(f"{len(self.band_ids)} band ids for {self.bands.shape[0]} bands")
        self.valid = _valid_plane(self.valid, self.grid.shape) & np.all(np.isfinite(self.bands), axis=0)
        self.bands = np.where(self.valid[None], self.bands, 0.0)

    @property
    def n_bands(self) -> int:
        return self.bands.shape[0]

    @property
    def month_key(self) -> tuple[int, int]:
        if self.timestamp is None:
            raise MetadataError("stack has no acquisition timestamp")
        return (self.timestamp.year, self.timestamp.month)

    def with_mask(self, mask: MaskRaster) -> "BandStack":
        self.grid.require_same(mask.grid, "stack and mask")
        return replace(self, valid=self.valid & mask.validity)

    def select(self, band_ids) -> "BandStack":
        idx = [self.band_ids.index(b) for b in band_ids]
        return replace(self, bands=self.bands[idx], band_ids=tuple(band_ids), valid=self.valid.copy())

    def drop(self, band_ids) -> "BandStack":
        return self.select([b for b in self.band_ids if b not in set(band_ids)])


@dataclass
class QuantileTriple:
    """Lower / median / upper quantile maps on one grid.

    ``valid`` marks pixels whose input was valid; ordering of the three maps
    is not enforced (see ``metrics.interval_metrics`` for crossing rates).
    """

    lower: np.ndarray
    median: np.ndarray
    upper: np.ndarray
    grid: RasterGrid | None = None
    valid: np.ndarray | None = None

    def __post_init__(self):
        shapes = {np.shape(self.lower), np.shape(self.median), np.shape(self.upper)}
        if len(shapes) != 1:
            raise ShapeError(f"quantile maps differ in shape: {shapes}")
        if self.valid is None:
            self.valid = np.ones(np.shape(self.median), dtype=bool)

    def __iter__(self):
        return iter((self.lower, self.median, self.upper))

    def as_rasters(self) -> dict[str, "Raster"]:
        if self.grid is None:
            raise MetadataError("quantile triple carries no grid")
        return {name: Raster(self.grid, arr, self.valid) for name, arr in
                zip(("lower", "median", "upper"), self)}


# -- GeoTIFF I/O ------------------------------------------------------------


def _open(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such raster: {path}")
    try:
        return rasterio.open(path)
    except rasterio.errors.RasterioIOError as exc:
        raise MetadataError(f"cannot read raster {path}: {exc}") from exc


def _read(path):
    with _open(path) as ds:
        if ds.crs is None or ds.transform == Affine.identity():
            raise MetadataError(f"{path} has no georeferencing")
        grid = RasterGrid.from_transform(ds.transform, ds.width, ds.height, ds.crs)
        data = ds.read().astype(np.float64)
        valid = np.all(ds.read_masks() > 0, axis=0)
        descriptions = ds.descriptions
        tags = ds.tags()
    return grid, data, valid, descriptions, tags


def read_stack(path, timestamp: datetime | None = None, location: str = "") -> BandStack:
    grid, data, valid, desc, tags = _read(path)
    band_ids = tuple(d if d else f"B{i + 1}" for i, d in enumerate(desc))
    if timestamp is None and "ACQUISITION_TIME" in tags:
        timestamp = datetime.fromisoformat(tags["ACQUISITION_TIME"])
    location = location or tags.get("LOCATION", "")
    return BandStack(grid, data, band_ids, valid, timestamp, location)


def read_raster(path) -> Raster:
    grid, data, valid, _, _ = _read(path)
    return Raster(grid, data[0], valid)


def write_stack(path, stack: BandStack, dtype="float32"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.where(stack.valid[None], stack.bands, np.nan).astype(dtype)
    tags = {}
    if stack.timestamp is not None:
        tags["ACQUISITION_TIME"] = stack.timestamp.isoformat()
    if stack.location:
        tags["LOCATION"] = stack.location
    with rasterio.open(
        path, "w", driver="GTiff", width=stack.grid.width, height=stack.grid.height,
        count=stack.n_bands, dtype=dtype, crs=stack.grid.crs, transform=stack.grid.transform,
        nodata=np.nan,
    ) as ds:
        ds.write(data)
        for i, b in enumerate(stack.band_ids, start=1):
            ds.set_band_description(i, b)
        if tags:
            ds.update_tags(**tags)


def write_raster(path, raster: Raster, dtype="float32", description: str = ""):
    stack = BandStack(raster.grid, raster.values[None], (description or "value",), raster.valid)
    write_stack(path, stack, dtype=dtype)


def write_mask(path, mask: MaskRaster):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with rasterio.open(
        path, "w", driver="GTiff", width=mask.grid.width, height=mask.grid.height,
        count=1, dtype="uint8", crs=mask.grid.crs, transform=mask.grid.transform,
    ) as ds:
        ds.write(mask.validity.astype(np.uint8)[None])


def read_mask(path) -> MaskRaster:
    grid, data, _, _, _ = _read(path)
    return MaskRaster(grid, data[0] > 0)


def read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
