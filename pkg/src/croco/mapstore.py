"""Feature maps: unit-normalized RGB descriptors for every grid cell of a tile.

File layout (``.crocomap``), all little-endian::

    b"CROCOMAP1"            magic, also encodes the format version
    uint64                  JSON header length in bytes
    header                  UTF-8 JSON (tile_id, rows, cols, dim, patch_px,
                            stride_px, gsd_m, origin, fingerprint)
    float32[rows*cols*dim]  embeddings, row-major
"""

import json
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from croco.encoder import embed, l2_normalize
from croco.raster import Modality
from croco.sampling import PatchGrid, extract_patches, grid_for_pixels

MAP_MAGIC = b"CROCOMAP1"
BUILD_CHUNK = 256


class MapFormatError(ValueError):
    pass


class FingerprintWarning(UserWarning):
    pass


@dataclass(eq=False)
class FeatureMap:
    tile_id: str
    rows: int
    cols: int
    patch_px: int
    stride_px: int
    gsd_m: float
    origin: tuple
    fingerprint: str
    embeddings: np.ndarray = field(repr=False)  # (rows, cols, dim) float32

    def __post_init__(self):
        e = np.ascontiguousarray(self.embeddings, dtype=np.float32)
        if e.shape[:2] != (self.rows, self.cols):
            raise MapFormatError(f"embedding grid {e.shape[:2]} != ({self.rows}, {self.cols})")
        self.embeddings = e

    @property
    def dim(self):
        return self.embeddings.shape[2]

    @property
    def n_cells(self):
        return self.rows * self.cols

    @property
    def flat(self):
        return self.embeddings.reshape(self.n_cells, self.dim)

    def cell_anchor(self, row, col):
        return row * self.stride_px, col * self.stride_px

    def header(self):
        return {
            "tile_id": self.tile_id,
            "rows": self.rows,
            "cols": self.cols,
            "dim": self.dim,
            "patch_px": self.patch_px,
            "stride_px": self.stride_px,
            "gsd_m": self.gsd_m,
            "origin": list(self.origin),
            "fingerprint": self.fingerprint,
        }

    def check_fingerprint(self, encoder_or_ckpt):
        """Warn (FingerprintWarning) if the encoder differs from the one that built the map."""
        fp = _fingerprint_of(encoder_or_ckpt)
        if fp != self.fingerprint:
            warnings.warn(
                f"feature map {self.tile_id!r} was built with encoder {self.fingerprint[:12]}, "
                f"querying with {str(fp)[:12]}",
                FingerprintWarning,
                stacklevel=2,
            )
            return False
        return True


def _fingerprint_of(obj):
    rgb = getattr(obj, "rgb", obj)  # Checkpoint -> its RGB branch
    fp = getattr(rgb, "fingerprint", None)
    if callable(fp):
        return fp()
    return fp


def build_feature_map(rgb_tile, grid, branch, workers=1, chunk=BUILD_CHUNK):
    """Encode every anchor of ``grid`` on ``rgb_tile`` and L2-normalize.

    ``grid`` is a PatchGrid or a ``(patch_px, stride_px)`` pair.  Chunks are
    fixed-size regardless of ``workers`` so threaded and serial builds are
    bit-identical.
    """
    if rgb_tile.modality is not Modality.RGB:
        raise ValueError(f"feature maps are built from RGB tiles, got {rgb_tile.modality.value}")
    mod = getattr(branch, "modality", Modality.RGB)
    if Modality(mod) is not Modality.RGB:
        raise ValueError("feature maps need the RGB branch")
    if not isinstance(grid, PatchGrid):
        grid = grid_for_pixels(rgb_tile, *grid)
    if len(grid) == 0:
        raise ValueError("empty grid")
    anchors = grid.anchors
    starts = list(range(0, len(anchors), chunk))

    def encode(s):
        patches = extract_patches(rgb_tile, anchors[s : s + chunk], grid.patch_px)
        return l2_normalize(embed(branch, patches, chunk=chunk))

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(encode, starts))
    else:
        parts = [encode(s) for s in starts]
    z = np.concatenate(parts, axis=0)
    fp = _fingerprint_of(branch)
    return FeatureMap(
        tile_id=rgb_tile.id,
        rows=grid.rows,
        cols=grid.cols,
        patch_px=grid.patch_px,
        stride_px=grid.stride_px,
        gsd_m=rgb_tile.gsd_m,
        origin=tuple(rgb_tile.origin),
        fingerprint=str(fp) if fp is not None else "unfingerprinted",
        embeddings=z.reshape(grid.rows, grid.cols, -1),
    )


def save_map(fmap, path):
    if not fmap.fingerprint:
        raise MapFormatError("refusing to write a map without a fingerprint")
    hb = json.dumps(fmap.header(), sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAP_MAGIC)
        f.write(struct.pack("<Q", len(hb)))
        f.write(hb)
        f.write(fmap.embeddings.astype("<f4").tobytes(order="C"))
    return path


def load_map(path):
    raw = Path(path).read_bytes()
    m = len(MAP_MAGIC)
    if raw[:m] != MAP_MAGIC:
        raise MapFormatError(f"{path}: not a feature map (bad magic or version)")
    if len(raw) < m + 8:
        raise MapFormatError(f"{path}: truncated")
    (hlen,) = struct.unpack("<Q", raw[m : m + 8])
    start = m + 8
    if len(raw) < start + hlen:
        raise MapFormatError(f"{path}: truncated header")
    try:
        h = json.loads(raw[start : start + hlen])
    except ValueError as exc:
        raise MapFormatError(f"{path}: corrupt header") from exc
    if not h.get("fingerprint"):
        raise MapFormatError(f"{path}: header has no encoder fingerprint")
    body = raw[start + hlen :]
    expected = 4 * h["rows"] * h["cols"] * h["dim"]
    if len(body) != expected:
        raise MapFormatError(f"{path}: payload is {len(body)} bytes, expected {expected}")
    emb = np.frombuffer(body, dtype="<f4").astype(np.float32).reshape(h["rows"], h["cols"], h["dim"])
    return FeatureMap(
        tile_id=h["tile_id"],
        rows=h["rows"],
        cols=h["cols"],
        patch_px=h["patch_px"],
        stride_px=h["stride_px"],
        gsd_m=h["gsd_m"],
        origin=tuple(h["origin"]),
        fingerprint=h["fingerprint"],
        embeddings=emb,
    )
