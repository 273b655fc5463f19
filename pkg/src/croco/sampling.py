"""Sliding-window patch grids, tile splits and positive-pair batches."""

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class SamplingError(ValueError):
    pass


class SplitLeakageError(AssertionError):
    """A training tile showed up where only evaluation tiles are allowed."""


def _to_px(meters, gsd_m, what):
    px = meters / gsd_m
    n = int(round(px))
    if n < 1 or abs(px - n) > 1e-6:
        raise SamplingError(f"{what} {meters} m is not a whole number of pixels at {gsd_m} m/px")
    return n


@dataclass(frozen=True)
class PatchGrid:
    tile_id: str
    patch_px: int
    stride_px: int
    height_px: int
    width_px: int
    gsd_m: float = 1.0

    @property
    def rows(self):
        return (self.height_px - self.patch_px) // self.stride_px + 1

    @property
    def cols(self):
        return (self.width_px - self.patch_px) // self.stride_px + 1

    @property
    def shape(self):
        return self.rows, self.cols

    @property
    def patch_m(self):
        return self.patch_px * self.gsd_m

    def __len__(self):
        return self.rows * self.cols

    @property
    def anchors(self):
        """(len, 2) int array of (row_px, col_px), row-major."""
        r = np.arange(self.rows) * self.stride_px
        c = np.arange(self.cols) * self.stride_px
        rr, cc = np.meshgrid(r, c, indexing="ij")
        return np.stack([rr.ravel(), cc.ravel()], axis=1)

    def anchor(self, index):
        r, c = divmod(int(index), self.cols)
        return r * self.stride_px, c * self.stride_px

    def cell(self, index):
        return divmod(int(index), self.cols)

    def lattice(self):
        return (self.patch_px, self.stride_px, self.height_px, self.width_px)


def grid_for_pixels(tile, patch_px, stride_px):
    if patch_px < 1 or stride_px < 1:
        raise SamplingError("patch and stride must be at least one pixel")
    if patch_px > min(tile.height_px, tile.width_px):
        raise SamplingError(
            f"patch of {patch_px} px exceeds tile {tile.id!r} ({tile.height_px}x{tile.width_px})"
        )
    return PatchGrid(tile.id, patch_px, stride_px, tile.height_px, tile.width_px, tile.gsd_m)


def generate_grid(tile, patch_m, stride_m):
    """Row-major sliding-window grid; partial windows at the border are dropped."""
    patch_px = _to_px(patch_m, tile.gsd_m, "patch")
    stride_px = _to_px(stride_m, tile.gsd_m, "stride")
    return grid_for_pixels(tile, patch_px, stride_px)


def extract_patch(tile, anchor, patch_px):
    row, col = int(anchor[0]), int(anchor[1])
    if row < 0 or col < 0 or row + patch_px > tile.height_px or col + patch_px > tile.width_px:
        raise SamplingError(f"anchor {(row, col)} with patch {patch_px} is outside tile {tile.id!r}")
    return np.array(tile.data[:, row : row + patch_px, col : col + patch_px])


def extract_patches(tile, anchors, patch_px, dtype=np.float64):
    """Stack patches for many anchors into an (n, C, P, P) array."""
    anchors = np.asarray(anchors).reshape(-1, 2)
    out = np.empty((len(anchors), tile.channels, patch_px, patch_px), dtype=dtype)
    for i, (r, c) in enumerate(anchors):
        if r < 0 or c < 0 or r + patch_px > tile.height_px or c + patch_px > tile.width_px:
            raise SamplingError(f"anchor {(int(r), int(c))} is outside tile {tile.id!r}")
        out[i] = tile.data[:, r : r + patch_px, c : c + patch_px]
    return out


@dataclass(frozen=True)
class PairBatch:
    rgb_patches: np.ndarray  # (N, 3, P, P)
    dem_patches: np.ndarray  # (N, 3, P, P)
    locations: np.ndarray  # (N, 2) anchor pixels
    tile_ids: tuple = ()

    def __post_init__(self):
        n = len(self.locations)
        if n < 2:
            raise SamplingError("a pair batch needs at least two pairs")
        if len(self.rgb_patches) != n or len(self.dem_patches) != n:
            raise SamplingError("rgb/dem/location lengths differ")

    @property
    def n(self):
        return len(self.locations)


def sample_anchor_indices(n_anchors, n, rng):
    if n > n_anchors:
        raise SamplingError(f"cannot draw {n} distinct anchors from {n_anchors}")
    return rng.choice(n_anchors, size=n, replace=False)


def sample_pair_batch(rgb_grid, dem_grid, n, seed, rgb_tile=None, dem_tile=None):
    """Draw ``n`` distinct co-located anchors uniformly under ``seed``.

    Without tiles only the locations are meaningful; the patch arrays are
    filled when both tiles are supplied.
    """
    if rgb_grid.lattice() != dem_grid.lattice():
        raise SamplingError("RGB and DEM grids are not the same lattice")
    if n < 2:
        raise SamplingError("batch size must be at least 2")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = sample_anchor_indices(len(rgb_grid), n, rng)
    locs = rgb_grid.anchors[idx]
    if rgb_tile is not None and dem_tile is not None:
        rgb = extract_patches(rgb_tile, locs, rgb_grid.patch_px)
        dem = extract_patches(dem_tile, locs, dem_grid.patch_px)
    else:
        rgb = np.empty((n, 0))
        dem = np.empty((n, 0))
    return PairBatch(rgb, dem, locs, (rgb_grid.tile_id,) * n)


@dataclass(frozen=True)
class SplitAssignment:
    train: frozenset
    val: frozenset
    test: frozenset
    warnings: tuple = ()

    def split_of(self, tile_id):
        for name in SPLITS:
            if tile_id in getattr(self, name):
                return name
        raise KeyError(tile_id)

    def check_eval_tiles(self, tile_ids):
        """Raise SplitLeakageError if any evaluation tile belongs to train."""
        leaked = sorted(set(tile_ids) & self.train)
        if leaked:
            raise SplitLeakageError(f"training tiles used for evaluation: {leaked}")

    def check_train_tiles(self, tile_ids):
        leaked = sorted(set(tile_ids) - self.train)
        if leaked:
            raise SplitLeakageError(f"non-training tiles used for gradients: {leaked}")


def assign_splits(tile_ids, spec):
    """Validate a tile-id -> split mapping against the declared tile list.

    ``spec`` maps each tile id to one of "train", "val", "test"; a mapping
    of split name -> list of tile ids is accepted as well.
    """
    tile_ids = list(tile_ids)
    if len(set(tile_ids)) != len(tile_ids):
        raise SamplingError("duplicate tile ids in the declared tile list")
    if spec and set(spec) <= set(SPLITS) and all(isinstance(v, (list, tuple)) for v in spec.values()):
        seen = {}
        for split, ids in spec.items():
            for t in ids:
                if t in seen:
                    raise SamplingError(f"tile {t!r} assigned to both {seen[t]!r} and {split!r}")
                seen[t] = split
        spec = seen
    groups = {name: set() for name in SPLITS}
    for t, split in spec.items():
        if split not in groups:
            raise SamplingError(f"tile {t!r} has unknown split {split!r}")
        groups[split].add(t)
    missing = sorted(set(tile_ids) - set(spec))
    if missing:
        raise SamplingError(f"tiles without a split: {missing}")
    extra = sorted(set(spec) - set(tile_ids))
    if extra:
        raise SamplingError(f"split spec names unknown tiles: {extra}")
    notes = []
    for name in SPLITS:
        if not groups[name]:
            msg = f"split {name!r} is empty"
            notes.append(msg)
            log.warning(msg)
    return SplitAssignment(
        frozenset(groups["train"]), frozenset(groups["val"]), frozenset(groups["test"]), tuple(notes)
    )


def load_split_file(path, tile_ids=None):
    spec = json.loads(Path(path).read_text())
    if tile_ids is None:
        if set(spec) <= set(SPLITS):
            tile_ids = [t for ids in spec.values() for t in ids]
        else:
            tile_ids = list(spec)
    return assign_splits(tile_ids, spec)
