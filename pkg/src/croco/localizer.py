"""Query a feature map with an elevation patch: scores, top-k ranking, heatmaps."""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from croco.encoder import embed, l2_normalize
from croco.raster import Modality


@dataclass(frozen=True)
class RetrievalResult:
    ranking: list  # [((row, col), score), ...] best first
    k: int
    query_location: tuple = None

    @property
    def best(self):
        return self.ranking[0]

    def cells(self):
        return [cell for cell, _ in self.ranking]


def _check_dem_encoder(encoder):
    mod = getattr(encoder, "modality", Modality.DEM)
    if Modality(mod) is not Modality.DEM:
        raise ValueError("queries must be encoded with the DEM branch")


def score_embedding(z, fmap):
    """Cosine score of one query embedding against every cell (flat, row-major)."""
    q = l2_normalize(np.asarray(z, dtype=np.float64).reshape(-1))
    return np.clip(fmap.flat.astype(np.float64) @ q, -1.0, 1.0)


def rank_scores(scores):
    """Cell indices by descending score; ties go to the lower row-major index."""
    return np.argsort(-np.asarray(scores), kind="stable")


def localize_embedding(z, fmap, k=1, query_location=None):
    if not 1 <= k <= fmap.n_cells:
        raise ValueError(f"k={k} outside [1, {fmap.n_cells}]")
    scores = score_embedding(z, fmap)
    order = rank_scores(scores)[:k]
    ranking = [(divmod(int(i), fmap.cols), float(scores[i])) for i in order]
    return RetrievalResult(ranking, k, query_location)


def localize(dem_patch, dem_branch, fmap, k=1, query_location=None, checkpoint=None):
    """Top-k cells of ``fmap`` for a (3, P, P) elevation patch."""
    _check_dem_encoder(dem_branch)
    if checkpoint is not None:
        fmap.check_fingerprint(checkpoint)
    if not 1 <= k <= fmap.n_cells:
        raise ValueError(f"k={k} outside [1, {fmap.n_cells}]")
    z = embed(dem_branch, np.asarray(dem_patch)[None])[0]
    return localize_embedding(z, fmap, k, query_location)


def similarity_grid(dem_patch, dem_branch, fmap):
    """Raw cosine score of the query against every cell, shaped (rows, cols)."""
    _check_dem_encoder(dem_branch)
    z = embed(dem_branch, np.asarray(dem_patch)[None])[0]
    return score_embedding(z, fmap).reshape(fmap.rows, fmap.cols)


def heatmap_pixels(grid):
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("empty similarity grid")
    lo, hi = grid.min(), grid.max()
    if hi == lo:
        return np.full(grid.shape, 128, dtype=np.uint8)
    return np.round(255.0 * (grid - lo) / (hi - lo)).astype(np.uint8)


def render_heatmap(grid, out_path):
    """Grayscale PNG of ``grid`` rescaled to [0, 255] plus a CSV of raw values.

    Returns ``(png_path, csv_path)``.
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    pixels = heatmap_pixels(grid)
    png = out_path.with_suffix(".png")
    Image.fromarray(pixels).save(png)
    csv = out_path.with_suffix(".csv")
    np.savetxt(csv, np.asarray(grid, dtype=np.float64), delimiter=",", fmt="%.17g")
    return png, csv
