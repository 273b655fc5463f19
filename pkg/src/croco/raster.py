"""Raster tiles: ingest, downsampling, DEM stacking and normalization.

On disk a tile is a pair of files: ``<id>.raw`` holding little-endian
float32 values (channel-major, then row-major) and ``<id>.json`` holding
the metadata sidecar.
"""

import json
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from croco import kernels

NORM_EPS = 1e-6

# fixed channel order of the stacked elevation modality
DEM_CHANNELS = ("surface", "void_filled", "hybrid")
RGB_CHANNELS = ("red", "green", "blue")


class RasterError(ValueError):
    pass


class Modality(str, Enum):
    RGB = "RGB"
    DEM = "DEM"


@dataclass(frozen=True, eq=False)
class RasterTile:
    id: str
    data: np.ndarray  # (channels, height, width), float64
    gsd_m: float
    origin: tuple = (0.0, 0.0)
    modality: Modality = Modality.RGB
    channel_names: tuple = field(default=None)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise RasterError(f"tile data must be (C, H, W), got shape {data.shape}")
        if data.shape[1] < 1 or data.shape[2] < 1:
            raise RasterError("tile must be at least 1x1")
        if not self.gsd_m > 0:
            raise RasterError(f"gsd_m must be positive, got {self.gsd_m}")
        if not np.all(np.isfinite(data)):
            raise RasterError(f"tile {self.id!r} contains non-finite values")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "gsd_m", float(self.gsd_m))
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, "modality", Modality(self.modality))
        if self.channel_names is None:
            names = DEM_CHANNELS if self.modality is Modality.DEM else RGB_CHANNELS
            if len(names) != data.shape[0]:
                names = tuple(f"band{i}" for i in range(data.shape[0]))
            object.__setattr__(self, "channel_names", names)
        else:
            object.__setattr__(self, "channel_names", tuple(self.channel_names))

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def height_px(self):
        return self.data.shape[1]

    @property
    def width_px(self):
        return self.data.shape[2]

    def sidecar(self):
        return {
            "id": self.id,
            "channels": self.channels,
            "height_px": self.height_px,
            "width_px": self.width_px,
            "gsd_m": self.gsd_m,
            "origin": list(self.origin),
            "modality": self.modality.value,
            "channel_names": list(self.channel_names),
            "dtype": "float32",
            "byte_order": "little",
        }


@dataclass(frozen=True)
class NormalizationStats:
    mean: tuple
    std: tuple
    modality: Modality

    def to_dict(self):
        return {"mean": list(self.mean), "std": list(self.std), "modality": self.modality.value}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["mean"]), tuple(d["std"]), Modality(d["modality"]))


def save_tile(tile, directory):
    """Write ``<id>.raw`` + ``<id>.json`` into ``directory``; returns the raw path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    raw_path = directory / f"{tile.id}.raw"
    raw_path.write_bytes(tile.data.astype("<f4").tobytes(order="C"))
    (directory / f"{tile.id}.json").write_text(json.dumps(tile.sidecar(), indent=2, sort_keys=True))
    return raw_path


def ingest_tile(path, sidecar=None):
    """Load a tile from its raw payload and JSON sidecar.

    If ``sidecar`` is omitted it is looked up next to ``path`` with a
    ``.json`` suffix.
    """
    path = Path(path)
    sidecar = Path(sidecar) if sidecar is not None else path.with_suffix(".json")
    for p in (path, sidecar):
        if not p.is_file():
            raise FileNotFoundError(f"missing raster file: {p}")
    meta = json.loads(sidecar.read_text())
    try:
        c, h, w = int(meta["channels"]), int(meta["height_px"]), int(meta["width_px"])
        gsd = float(meta["gsd_m"])
    except KeyError as exc:
        raise RasterError(f"sidecar {sidecar} lacks key {exc}") from None
    if gsd <= 0:
        raise RasterError(f"non-positive GSD {gsd} in {sidecar}")
    if meta.get("dtype", "float32") != "float32":
        raise RasterError(f"unsupported payload dtype {meta['dtype']!r}")
    payload = np.frombuffer(path.read_bytes(), dtype="<f4")
    if payload.size != c * h * w or path.stat().st_size != 4 * c * h * w:
        raise RasterError(
            f"payload {path} holds {path.stat().st_size} bytes, sidecar declares {c}x{h}x{w} float32"
        )
    return RasterTile(
        id=str(meta.get("id", path.stem)),
        data=payload.reshape(c, h, w).astype(np.float64),
        gsd_m=gsd,
        origin=tuple(meta.get("origin", (0.0, 0.0))),
        modality=Modality(meta.get("modality", "RGB")),
        channel_names=meta.get("channel_names"),
    )


def resample(tile, target_gsd_m):
    """Downsample by block area-mean to ``target_gsd_m``.

    The target must be an integer multiple of the current GSD. Trailing
    rows/columns that do not fill a whole block are dropped.
    """
    if not target_gsd_m > 0:
        raise RasterError("target GSD must be positive")
    ratio = target_gsd_m / tile.gsd_m
    factor = int(round(ratio))
    if ratio < 1 - 1e-9:
        raise RasterError(f"upsampling not supported ({tile.gsd_m} -> {target_gsd_m})")
    if abs(ratio - factor) > 1e-9 * max(1.0, ratio):
        raise RasterError(f"target GSD {target_gsd_m} is not an integer multiple of {tile.gsd_m}")
    if factor == 1:
        return tile
    if tile.height_px < factor or tile.width_px < factor:
        raise RasterError("tile smaller than one resampling block")
    data = kernels.block_mean(tile.data, factor)
    return replace(tile, data=data, gsd_m=tile.gsd_m * factor)


def stack_dem(surface, void_filled, hybrid, tile_id=None):
    """Stack three single-channel elevation rasters into a DEM tile.

    Channel order is fixed: (first-surface, void-filled bare earth, hybrid).
    """
    layers = (surface, void_filled, hybrid)
    for t in layers:
        if t.channels != 1:
            raise RasterError(f"stack_dem expects 1-channel rasters, {t.id!r} has {t.channels}")
    ref = layers[0]
    for t in layers[1:]:
        if t.data.shape != ref.data.shape:
            raise RasterError(f"dimension mismatch: {t.data.shape} vs {ref.data.shape}")
        if t.gsd_m != ref.gsd_m:
            raise RasterError(f"GSD mismatch: {t.gsd_m} vs {ref.gsd_m}")
        if t.origin != ref.origin:
            raise RasterError(f"origin mismatch: {t.origin} vs {ref.origin}")
    data = np.concatenate([t.data for t in layers], axis=0)
    return RasterTile(
        id=tile_id or ref.id,
        data=data,
        gsd_m=ref.gsd_m,
        origin=ref.origin,
        modality=Modality.DEM,
        channel_names=DEM_CHANNELS,
    )


def fit_normalization(tiles):
    """Per-channel mean and population std over every pixel of ``tiles``."""
    tiles = list(tiles)
    if not tiles:
        raise RasterError("cannot fit normalization on an empty tile set")
    modalities = {t.modality for t in tiles}
    if len(modalities) > 1:
        raise RasterError(f"mixed modalities in normalization set: {sorted(m.value for m in modalities)}")
    # order-independent: sort by id so the float summation order is fixed
    tiles = sorted(tiles, key=lambda t: t.id)
    flat = np.concatenate([t.data.reshape(t.channels, -1) for t in tiles], axis=1)
    mean = flat.mean(axis=1)
    std = np.maximum(flat.std(axis=1), NORM_EPS)
    return NormalizationStats(tuple(mean.tolist()), tuple(std.tolist()), modalities.pop())


def normalize(tile, stats=None):
    """Map raw tile values into network input range.

    RGB tiles are 8-bit values scaled by 1/255. DEM tiles are z-scored per
    channel with ``stats``.
    """
    if tile.modality is Modality.RGB:
        if stats is not None and stats.modality is not Modality.RGB:
            raise RasterError("RGB tile given DEM normalization stats")
        return replace(tile, data=tile.data / 255.0)
    if stats is None:
        raise RasterError("DEM normalization requires fitted stats")
    if stats.modality is not Modality.DEM:
        raise RasterError("DEM tile given RGB normalization stats")
    mean = np.asarray(stats.mean)[:, None, None]
    std = np.asarray(stats.std)[:, None, None]
    return replace(tile, data=(tile.data - mean) / std)


def read_geotiff(path, tile_id=None, modality=Modality.RGB):
    """Optional GeoTIFF adapter (requires rasterio)."""
    try:
        import rasterio
    except ImportError as exc:  # pragma: no cover - optional dependency
        raise RasterError("GeoTIFF ingestion needs rasterio installed") from exc
    with rasterio.open(path) as src:  # pragma: no cover
        data = src.read().astype(np.float64)
        gsd = abs(src.transform.a)
        if abs(abs(src.transform.e) - gsd) > 1e-9:
            warnings.warn("non-square pixels; using x resolution as GSD")
        origin = (src.transform.c, src.transform.f)
    return RasterTile(tile_id or Path(path).stem, data, gsd, origin, modality)  # pragma: no cover
