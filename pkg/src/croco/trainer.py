"""Joint training of the RGB and DEM branches on positive-pair batches."""

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from croco import contrastive, encoder
from croco.contrastive import LossConfig
from croco.encoder import Checkpoint, init_branch, save_checkpoint
from croco.evaluator import evaluate
from croco.mapstore import build_feature_map
from croco.raster import Modality, fit_normalization, normalize, resample
from croco.sampling import PairBatch, SamplingError, extract_patches, generate_grid

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd_momentum", "lars")


class TrainConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    steps: int = 1000
    learning_rate: float = 1e-2
    momentum: float = 0.9
    optimizer: str = "sgd_momentum"
    trust_coefficient: float = 1e-3
    temperature: float = 0.5
    negative_set: str = "all_2N"
    patch_m: float = 16.0
    stride_m: float = 2.0
    gsd_m: float = 0.5
    seed: int = 0
    eval_every: int = 250
    eval_queries: int = 0  # 0 = every anchor of each validation tile
    arch: str = "desk"
    init_samples: int = 256  # patches used for data-dependent init; 0 disables it

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.batch_size < 2:
            raise TrainConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.steps < 1:
            raise TrainConfigError("steps must be >= 1")
        if self.learning_rate < 0:
            raise TrainConfigError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise TrainConfigError("momentum must lie in [0, 1)")
        if self.optimizer not in OPTIMIZERS:
            raise TrainConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.eval_every < 1:
            raise TrainConfigError("eval_every must be >= 1")
        LossConfig(self.temperature, self.negative_set)

    @property
    def loss(self):
        return LossConfig(self.temperature, self.negative_set)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise TrainConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


def lars_update(params, grads, lr, trust_coefficient, momentum, state=None):
    """In-place LARS step over parameter blocks; returns ``params``.

    Each block gets a local rate ``trust * |w| / |g|`` (1 when either norm
    is zero, so zero-initialized biases still move), then a heavy-ball
    momentum step.
    """
    state = {} if state is None else state
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {w.shape} for {name}")
        wn = float(np.linalg.norm(w))
        gn = float(np.linalg.norm(g))
        local = trust_coefficient * wn / gn if wn > 0 and gn > 0 else 1.0
        v = state.get(name)
        step = local * g
        v = step if v is None else momentum * v + step
        state[name] = v
        w -= (lr * v).astype(w.dtype)
    return params


def sgd_momentum_update(params, grads, lr, momentum, state=None):
    state = {} if state is None else state
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {w.shape} for {name}")
        v = state.get(name)
        v = g.copy() if v is None else momentum * v + g
        state[name] = v
        w -= (lr * v).astype(w.dtype)
    return params


@dataclass
class OptimizerState:
    rgb: dict = field(default_factory=dict)
    dem: dict = field(default_factory=dict)


def apply_update(branch, grads, cfg, state):
    if cfg.optimizer == "lars":
        lars_update(branch.params, grads, cfg.learning_rate, cfg.trust_coefficient, cfg.momentum, state)
    else:
        sgd_momentum_update(branch.params, grads, cfg.learning_rate, cfg.momentum, state)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def loss_and_grads(rgb, dem, batch, loss_cfg):
    """NT-Xent loss of a batch and parameter gradients for both branches."""
    z_rgb, c_rgb = encoder.forward_train(rgb, batch.rgb_patches)
    z_dem, c_dem = encoder.forward_train(dem, batch.dem_patches)
    loss, d_rgb, d_dem = contrastive.nt_xent_grad(z_rgb, z_dem, loss_cfg)
    return loss, encoder.backward(rgb, c_rgb, d_rgb), encoder.backward(dem, c_dem, d_dem)


def train_step(rgb, dem, batch, cfg, state=None):
    """One optimizer update of both branches; returns the pre-update loss."""
    state = OptimizerState() if state is None else state
    loss, g_rgb, g_dem = loss_and_grads(rgb, dem, batch, cfg.loss)
    apply_update(rgb, g_rgb, cfg, state.rgb)
    apply_update(dem, g_dem, cfg, state.dem)
    return loss


@dataclass
class LogRow:
    step: int
    loss: float
    top1: float = None
    top5: float = None
    seconds: float = 0.0


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def append(self, row):
        if self.rows and row.step <= self.rows[-1].step:
            raise ValueError("log steps must increase")
        self.rows.append(row)

    @property
    def losses(self):
        return np.array([r.loss for r in self.rows])

    def best_step(self):
        return select_best([(r.step, r.top1) for r in self.rows])

    def to_csv(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "loss", "top1", "top5", "seconds"])
            for r in self.rows:
                w.writerow([
                    r.step,
                    repr(r.loss),
                    "" if r.top1 is None else repr(r.top1),
                    "" if r.top5 is None else repr(r.top5),
                    f"{r.seconds:.6f}",
                ])
        return path

    @classmethod
    def from_csv(cls, path):
        log_ = cls()
        with open(path) as f:
            for row in csv.DictReader(f):
                log_.append(LogRow(
                    int(row["step"]),
                    float(row["loss"]),
                    float(row["top1"]) if row["top1"] else None,
                    float(row["top5"]) if row["top5"] else None,
                    float(row["seconds"]),
                ))
        return log_


def select_best(scores):
    """Step with the highest validation Top-1 among ``(step, top1)``; earliest on ties."""
    best = None
    for step, top1 in scores:
        if top1 is None:
            continue
        if best is None or top1 > best[1]:
            best = (step, top1)
    return None if best is None else best[0]


@dataclass
class Dataset:
    """Co-registered tiles keyed by tile id, plus their split assignment."""

    tiles: dict  # tile_id -> (rgb_tile, dem_tile)
    splits: object  # SplitAssignment

    def subset(self, split):
        return {k: self.tiles[k] for k in sorted(getattr(self.splits, split)) if k in self.tiles}


@dataclass
class PreparedData:
    train: dict
    val: dict
    dem_stats: object
    patch_px: int
    stride_px: int


def prepare(dataset, cfg):
    """Resample to the configured GSD and normalize with training-split stats."""
    def at_gsd(t):
        return t if t.gsd_m == cfg.gsd_m else resample(t, cfg.gsd_m)

    train_raw = {k: (at_gsd(r), at_gsd(d)) for k, (r, d) in dataset.subset("train").items()}
    if not train_raw:
        raise TrainConfigError("training split is empty")
    val_raw = {k: (at_gsd(r), at_gsd(d)) for k, (r, d) in dataset.subset("val").items()}
    stats = fit_normalization([d for _, d in train_raw.values()])

    def norm(group):
        return {k: (normalize(r), normalize(d, stats)) for k, (r, d) in group.items()}

    first = next(iter(train_raw.values()))[0]
    grid = generate_grid(first, cfg.patch_m, cfg.stride_m)
    return PreparedData(norm(train_raw), norm(val_raw), stats, grid.patch_px, grid.stride_px)


class AnchorPool:
    """Every training anchor of every training tile, drawn from as one pool."""

    def __init__(self, tiles, patch_m, stride_m):
        self.tiles = tiles
        self.keys = sorted(tiles)
        self.grids = [generate_grid(tiles[k][0], patch_m, stride_m) for k in self.keys]
        sizes = np.array([len(g) for g in self.grids])
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])

    def __len__(self):
        return int(self.offsets[-1])

    def sample(self, n, rng, dtype=np.float32):
        if n > len(self):
            raise SamplingError(f"batch of {n} exceeds the {len(self)} training anchors")
        idx = rng.choice(len(self), size=n, replace=False)
        t = np.searchsorted(self.offsets, idx, side="right") - 1
        locs = np.empty((n, 2), dtype=np.int64)
        ids = []
        for i, (ti, gi) in enumerate(zip(t, idx - self.offsets[t])):
            grid = self.grids[ti]
            locs[i] = grid.anchor(gi)
            ids.append(self.keys[ti])
        p = self.grids[0].patch_px
        rgb = np.empty((n, 3, p, p), dtype=dtype)
        dem = np.empty((n, 3, p, p), dtype=dtype)
        for i, key in enumerate(ids):
            r_tile, d_tile = self.tiles[key]
            rgb[i] = extract_patches(r_tile, locs[i], p)[0]
            dem[i] = extract_patches(d_tile, locs[i], p)[0]
        return PairBatch(rgb, dem, locs, tuple(ids))


def validate(rgb, dem, val_tiles, patch_px, stride_px, eval_queries=0, seed=0):
    """Aggregate Top-1/Top-5 over validation tiles; returns (top1, top5, n)."""
    hit1 = hit5 = total = 0
    for key in sorted(val_tiles):
        r_tile, d_tile = val_tiles[key]
        fmap = build_feature_map(r_tile, (patch_px, stride_px), rgb)
        anchors_idx = np.arange(fmap.n_cells)
        if eval_queries and eval_queries < fmap.n_cells:
            anchors_idx = np.sort(np.random.default_rng([seed, 7]).choice(fmap.n_cells, eval_queries, replace=False))
        cells = np.stack([anchors_idx // fmap.cols, anchors_idx % fmap.cols], axis=1)
        patches = extract_patches(d_tile, cells * stride_px, patch_px, dtype=np.float32)
        rep = evaluate(patches, cells, dem, fmap)
        hit1 += int(round(rep.top1 * rep.n_queries))
        hit5 += int(round(rep.top5 * rep.n_queries))
        total += rep.n_queries
    if total == 0:
        return None, None, 0
    return hit1 / total, hit5 / total, total


@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint
    log: TrainLog
    best_step: int = None


def train(dataset, cfg, out_dir=None, callback=None):
    """Run ``cfg.steps`` updates and track validation Top-1.

    Returns a TrainResult with the final checkpoint and the one with the
    best validation Top-1.  When ``out_dir`` is given both checkpoints and
    the log CSV are written there.
    """
    cfg.validate()
    data = prepare(dataset, cfg)
    pool = AnchorPool(data.train, cfg.patch_m, cfg.stride_m)
    if cfg.batch_size > len(pool):
        raise TrainConfigError(f"batch_size {cfg.batch_size} exceeds {len(pool)} training anchors")
    dataset.splits.check_eval_tiles(data.val)

    rgb = init_branch(Modality.RGB, cfg.arch, cfg.seed)
    dem = init_branch(Modality.DEM, cfg.arch, cfg.seed)
    if cfg.init_samples:
        sample = pool.sample(min(cfg.init_samples, len(pool)), np.random.default_rng([cfg.seed, 2]))
        encoder.data_init(rgb, sample.rgb_patches)
        encoder.data_init(dem, sample.dem_patches)
    state = OptimizerState()
    rng = np.random.default_rng([cfg.seed, 1])
    snapshot = asdict(cfg)

    def checkpoint(step):
        return Checkpoint(rgb.copy(), dem.copy(), data.dem_stats, None, dict(snapshot), step)

    tlog = TrainLog()
    best, best_top1 = None, None
    for step in range(1, cfg.steps + 1):
        t0 = time.perf_counter()
        batch = pool.sample(cfg.batch_size, rng)
        dataset.splits.check_train_tiles(batch.tile_ids)
        loss = train_step(rgb, dem, batch, cfg, state)
        row = LogRow(step, loss)
        if data.val and (step % cfg.eval_every == 0 or step == cfg.steps):
            row.top1, row.top5, _ = validate(
                rgb, dem, data.val, data.patch_px, data.stride_px, cfg.eval_queries, cfg.seed
            )
            if best_top1 is None or row.top1 > best_top1:
                best, best_top1 = checkpoint(step), row.top1
            log.info("step %d loss %.4f top1 %.4f top5 %.4f", step, loss, row.top1, row.top5)
        row.seconds = time.perf_counter() - t0
        tlog.append(row)
        if callback is not None:
            callback(row)
    final = checkpoint(cfg.steps)
    if best is None:
        best = final
    result = TrainResult(final, best, tlog, tlog.best_step())
    if out_dir is not None:
        out = Path(out_dir)
        save_checkpoint(final, out / "final.ckpt")
        save_checkpoint(best, out / "best.ckpt")
        tlog.to_csv(out / "train_log.csv")
    return result
