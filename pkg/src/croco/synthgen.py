"""Synthetic co-registered RGB/DEM scenes with known ground truth.

A scene is built from one latent heightfield: smoothed seeded noise for the
terrain, a few flattened zones, and raised rectangular buildings.  The DEM
modality carries three elevation products derived from it and the RGB
modality is a Lambertian shading of the surface, tinted per building, plus
seeded texture noise.  Test oracles that encode co-located patches to
identical vectors are provided for checking retrieval independently of
training.
"""

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from croco.raster import DEM_CHANNELS, RGB_CHANNELS, Modality, RasterTile

LIGHT_AZIMUTH_DEG = 315.0
LIGHT_ALTITUDE_DEG = 45.0
# roughness (m) of the ground surface per unit of texture_noise
MICRO_RELIEF_M = 0.05
# per-channel RGB noise std (reflectance units) per unit of texture_noise
TEXTURE_STD = 0.5


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    size_px: int = 512
    gsd_m: float = 0.5
    n_structures: int = 40
    terrain_smoothness: float = 12.0
    texture_noise: float = 0.05
    terrain_relief_m: float = 12.0
    n_flat_zones: int = 3
    origin: tuple = (0.0, 0.0)
    min_patch_px: int = 32

    def validate(self):
        if self.size_px < 2 * self.min_patch_px:
            raise ValueError(f"size_px {self.size_px} < 2 * patch {self.min_patch_px}")
        if self.n_structures < 0 or self.n_flat_zones < 0:
            raise ValueError("structure and flat-zone counts must be non-negative")
        if not self.terrain_smoothness > 0:
            raise ValueError("terrain_smoothness must be positive")
        if not 0 <= self.texture_noise < 1:
            raise ValueError("texture_noise must lie in [0, 1)")
        if not self.gsd_m > 0:
            raise ValueError("gsd_m must be positive")
        if self.terrain_relief_m < 0:
            raise ValueError("terrain_relief_m must be non-negative")


def _terrain(spec, rng):
    n = spec.size_px
    noise = rng.standard_normal((n, n))
    t = ndimage.gaussian_filter(noise, spec.terrain_smoothness, mode="reflect")
    span = t.max() - t.min()
    t = (t - t.min()) / span if span > 0 else np.zeros_like(t)
    t *= spec.terrain_relief_m
    # flat zones: discs blended to a constant level
    yy, xx = np.mgrid[0:n, 0:n]
    for _ in range(spec.n_flat_zones):
        cy, cx = rng.uniform(0, n, size=2)
        radius = rng.uniform(0.08, 0.18) * n
        d = np.hypot(yy - cy, xx - cx)
        w = np.clip((d - radius) / (0.25 * radius), 0.0, 1.0)
        level = t[int(cy), int(cx)]
        t = w * t + (1.0 - w) * level
    return t


def _structures(spec, rng, terrain):
    n = spec.size_px
    surface_h = np.zeros((n, n))
    hybrid = terrain.copy()
    footprint_id = np.full((n, n), -1, dtype=np.int64)
    hues = []
    for k in range(spec.n_structures):
        h = int(rng.integers(6, max(7, n // 12)))
        w = int(rng.integers(6, max(7, n // 12)))
        r0 = int(rng.integers(0, n - h))
        c0 = int(rng.integers(0, n - w))
        height = rng.uniform(3.0, 25.0)
        sl = (slice(r0, r0 + h), slice(c0, c0 + w))
        surface_h[sl] += height
        hybrid[sl] = terrain[sl].mean() + height
        footprint_id[sl] = k
        hues.append(rng.uniform(0.0, 1.0))
    return surface_h, hybrid, footprint_id, np.array(hues)


def hillshade(elev, gsd_m, azimuth_deg=LIGHT_AZIMUTH_DEG, altitude_deg=LIGHT_ALTITUDE_DEG):
    """Lambertian shading in [0, 1] for a fixed light direction."""
    dzdy, dzdx = np.gradient(elev, gsd_m)
    slope = np.arctan(np.hypot(dzdx, dzdy))
    aspect = np.arctan2(-dzdx, dzdy)
    az = np.deg2rad(azimuth_deg)
    alt = np.deg2rad(altitude_deg)
    shade = np.sin(alt) * np.cos(slope) + np.cos(alt) * np.sin(slope) * np.cos(az - aspect)
    return np.clip(shade, 0.0, 1.0)


def _hue_to_rgb(hue):
    # equal-luminance tints: the channel mean is fixed at 0.6
    phase = 2 * np.pi * (hue[..., None] + np.array([0.0, 1 / 3, 2 / 3]))
    return 0.6 + 0.25 * np.cos(phase)


def generate_scene(spec=SceneSpec()):
    """Return ``(rgb_tile, dem_tile)`` for a seeded synthetic scene."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.size_px
    terrain = _terrain(spec, rng)
    surface_h, hybrid, footprint_id, hues = _structures(spec, rng, terrain)

    micro = MICRO_RELIEF_M * spec.texture_noise * rng.standard_normal((n, n))
    ground = terrain + micro
    surface = ground + surface_h
    hybrid = np.where(footprint_id >= 0, hybrid + micro, ground)
    dem = np.stack([surface, ground, hybrid])

    shade = hillshade(surface, spec.gsd_m)
    albedo = np.empty((n, n, 3))
    albedo[:] = (0.45, 0.62, 0.33)  # ground
    if spec.terrain_relief_m > 0:
        albedo += 0.1 * (terrain / spec.terrain_relief_m - 0.5)[..., None]
    roof = footprint_id >= 0
    if roof.any():
        albedo[roof] = _hue_to_rgb(hues[footprint_id[roof]])
    rgb = albedo * shade[..., None]
    rgb = rgb + TEXTURE_STD * spec.texture_noise * rng.standard_normal(rgb.shape)
    rgb = np.round(255.0 * np.clip(rgb, 0.0, 1.0)).transpose(2, 0, 1)

    tid = f"synth{spec.seed}"
    rgb_tile = RasterTile(f"{tid}_rgb", rgb, spec.gsd_m, spec.origin, Modality.RGB, RGB_CHANNELS)
    dem_tile = RasterTile(f"{tid}_dem", dem, spec.gsd_m, spec.origin, Modality.DEM, DEM_CHANNELS)
    return rgb_tile, dem_tile


def split_scene(rgb_tile, dem_tile, n_rows, n_cols):
    """Cut a co-registered pair into a grid of disjoint sub-tiles.

    Returns a list of ``(tile_key, rgb_sub, dem_sub)``; tile keys look like
    ``"<base>_r0c1"`` and the same key is shared by both modalities.
    """
    h, w = rgb_tile.height_px, rgb_tile.width_px
    th, tw = h // n_rows, w // n_cols
    base = rgb_tile.id.rsplit("_", 1)[0]
    out = []
    for i in range(n_rows):
        for j in range(n_cols):
            key = f"{base}_r{i}c{j}"
            sl = (slice(None), slice(i * th, (i + 1) * th), slice(j * tw, (j + 1) * tw))
            origin = (
                rgb_tile.origin[0] + j * tw * rgb_tile.gsd_m,
                rgb_tile.origin[1] - i * th * rgb_tile.gsd_m,
            )
            subs = [
                RasterTile(key, t.data[sl], t.gsd_m, origin, t.modality, t.channel_names)
                for t in (rgb_tile, dem_tile)
            ]
            out.append((key, subs[0], subs[1]))
    return out


def anchor_vector(seed, row, col, dim=128):
    v = np.random.default_rng([int(seed), int(row), int(col)]).standard_normal(dim)
    return v / np.linalg.norm(v)


def _content_key(patch):
    return hashlib.blake2b(np.ascontiguousarray(patch, dtype=np.float64).tobytes(), digest_size=16).digest()


def _content_vector(key, seed, dim):
    v = np.random.default_rng([int(seed), int.from_bytes(key, "little")]).standard_normal(dim)
    return v / np.linalg.norm(v)


class _OracleEncoder:
    def __init__(self, table, modality, seed, dim):
        self.table = table
        self.modality = modality
        self.seed = seed
        self.dim = dim

    def fingerprint(self):
        return f"oracle-{self.seed}-{self.dim}"

    def __call__(self, patches):
        patches = np.asarray(patches)
        if patches.ndim == 3:
            patches = patches[None]
        out = np.empty((len(patches), self.dim))
        for i, p in enumerate(patches):
            key = _content_key(p)
            anchor = self.table.get(key)
            if anchor is None:
                out[i] = _content_vector(key, self.seed + 1, self.dim)
            else:
                out[i] = anchor_vector(self.seed, anchor[0], anchor[1], self.dim)
        return out


def oracle_branch_pair(rgb_tile, dem_tile, patch_px, stride_px=1, seed=0, dim=128):
    """Encoders mapping co-located patches of this scene to identical vectors.

    Each encoder looks up the anchor whose patch content matches its input
    exactly (over the sliding-window lattice given by ``patch_px`` and
    ``stride_px``) and returns the seeded unit vector for that anchor.
    Unknown patches get a content-hashed vector, nearly orthogonal to all
    anchor vectors.  Ambiguous content (identical patches at two anchors)
    maps to the first anchor in row-major order.
    """
    tables = ({}, {})
    h, w = rgb_tile.height_px, rgb_tile.width_px
    for r in range(0, h - patch_px + 1, stride_px):
        for c in range(0, w - patch_px + 1, stride_px):
            for table, tile in zip(tables, (rgb_tile, dem_tile)):
                key = _content_key(tile.data[:, r : r + patch_px, c : c + patch_px])
                table.setdefault(key, (r, c))
    return (
        _OracleEncoder(tables[0], Modality.RGB, seed, dim),
        _OracleEncoder(tables[1], Modality.DEM, seed, dim),
    )
