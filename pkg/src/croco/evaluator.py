"""Top-1 / Top-5 retrieval scores and per-cell error maps."""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from croco import kernels
from croco.encoder import embed, l2_normalize
from croco.localizer import _check_dem_encoder

UNQUERIED, CORRECT, WRONG = 0, 1, 2
QUERY_CHUNK = 512

COLOR_CORRECT = (0, 200, 0)
COLOR_WRONG = (220, 0, 0)
COLOR_UNQUERIED = (128, 128, 128)
# blue channel added to a wrong cell whose true location was still in the top 5
TOP5_OVERLAY = 255


@dataclass
class EvalReport:
    n_queries: int
    top1: float
    top5: float
    cells: np.ndarray  # (n, 2) true (row, col)
    ranks: np.ndarray  # (n,) 1-based rank of the true cell
    error_map: np.ndarray  # (rows, cols) in {UNQUERIED, CORRECT, WRONG}
    top5_map: np.ndarray = field(repr=False)  # (rows, cols) bool, True where every query hit top 5
    tile_id: str = ""

    def __post_init__(self):
        if not 0.0 <= self.top1 <= self.top5 <= 1.0:
            raise AssertionError(f"inconsistent scores top1={self.top1} top5={self.top5}")

    @property
    def outcomes(self):
        return [((int(r), int(c)), int(k)) for (r, c), k in zip(self.cells, self.ranks)]

    def summary(self):
        return f"top1={self.top1:.2f} top5={self.top5:.2f} n={self.n_queries}"

    def to_dict(self):
        return {
            "tile_id": self.tile_id,
            "n_queries": self.n_queries,
            "top1": self.top1,
            "top5": self.top5,
            "outcomes": [{"row": r, "col": c, "rank": k} for (r, c), k in self.outcomes],
        }

    def save_json(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))
        return path


def rank_of_true(query_embeddings, cells, fmap):
    """1-based rank of each query's true cell in the full descending ordering."""
    q = l2_normalize(np.asarray(query_embeddings, dtype=np.float64))
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    if len(q) != len(cells):
        raise ValueError("one true cell per query embedding required")
    bad = (cells[:, 0] < 0) | (cells[:, 0] >= fmap.rows) | (cells[:, 1] < 0) | (cells[:, 1] >= fmap.cols)
    if bad.any():
        raise ValueError(f"query cell {tuple(cells[bad][0])} outside the {fmap.rows}x{fmap.cols} grid")
    targets = cells[:, 0] * fmap.cols + cells[:, 1]
    flat = fmap.flat.astype(np.float64)
    ranks = np.empty(len(q), dtype=np.int64)
    for s in range(0, len(q), QUERY_CHUNK):
        scores = np.clip(q[s : s + QUERY_CHUNK] @ flat.T, -1.0, 1.0)
        ranks[s : s + QUERY_CHUNK] = kernels.count_rank(scores, targets[s : s + QUERY_CHUNK])
    return ranks


def report_from_ranks(cells, ranks, fmap):
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    ranks = np.asarray(ranks, dtype=np.int64)
    n = len(ranks)
    if n == 0:
        raise ValueError("no queries to evaluate")
    hit1 = int(np.count_nonzero(ranks == 1))
    hit5 = int(np.count_nonzero(ranks <= 5))
    error_map = np.full((fmap.rows, fmap.cols), UNQUERIED, dtype=np.uint8)
    top5_map = np.zeros((fmap.rows, fmap.cols), dtype=bool)
    # a cell queried more than once is correct only if every query hit it
    seen = np.zeros((fmap.rows, fmap.cols), dtype=bool)
    all_top5 = np.ones((fmap.rows, fmap.cols), dtype=bool)
    wrong = np.zeros((fmap.rows, fmap.cols), dtype=bool)
    for (r, c), k in zip(cells, ranks):
        seen[r, c] = True
        wrong[r, c] |= k != 1
        all_top5[r, c] &= k <= 5
    error_map[seen & ~wrong] = CORRECT
    error_map[seen & wrong] = WRONG
    top5_map[seen] = all_top5[seen]
    return EvalReport(n, hit1 / n, hit5 / n, cells, ranks, error_map, top5_map, fmap.tile_id)


def evaluate_embeddings(query_embeddings, cells, fmap):
    return report_from_ranks(cells, rank_of_true(query_embeddings, cells, fmap), fmap)


def evaluate(dem_patches, cells, dem_branch, fmap, chunk=256):
    """Score co-located DEM query patches against their true map cells."""
    _check_dem_encoder(dem_branch)
    z = embed(dem_branch, np.asarray(dem_patches), chunk=chunk)
    return evaluate_embeddings(z, cells, fmap)


def error_map_pixels(report):
    em = report.error_map
    img = np.empty(em.shape + (3,), dtype=np.uint8)
    img[em == UNQUERIED] = COLOR_UNQUERIED
    img[em == CORRECT] = COLOR_CORRECT
    img[em == WRONG] = COLOR_WRONG
    img[(em == WRONG) & report.top5_map, 2] = TOP5_OVERLAY
    return img


def render_error_map(report, out_path):
    """One pixel per grid cell (green correct, red wrong, gray unqueried) + outcomes CSV."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    png = out_path.with_suffix(".png")
    Image.fromarray(error_map_pixels(report)).save(png)
    csv_path = out_path.with_suffix(".csv")
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["row", "col", "rank", "top1", "top5"])
        for (r, c), k in report.outcomes:
            w.writerow([r, c, k, int(k == 1), int(k <= 5)])
    return png, csv_path
