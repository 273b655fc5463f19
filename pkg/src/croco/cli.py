"""Command-line entry point: ``croco <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Summary lines go to stdout, diagnostics to stderr.
"""

import argparse
import dataclasses
import json
import logging
import sys
import time
import warnings
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from croco import encoder, evaluator, localizer, mapstore, pipeline, synthgen
from croco.raster import Modality, ingest_tile, normalize, save_tile
from croco.sampling import SPLITS, assign_splits, extract_patches, grid_for_pixels, load_split_file
from croco.trainer import Dataset, TrainConfig, TrainConfigError, train

log = logging.getLogger("croco")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _kebab(name):
    return "--" + name.replace("_", "-")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

SCENE_FIELDS = {f.name: f for f in dataclasses.fields(synthgen.SceneSpec) if f.name not in ("origin",)}
TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def read_config(path):
    """Flatten a TOML file into {section.key or key: value}; sections are namespaces only."""
    if path is None:
        return {}
    try:
        with open(path, "rb") as f:
            doc = tomllib.load(f)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"cannot parse {path}: {exc}") from None
    flat = {}

    def walk(d, prefix=""):
        for k, v in d.items():
            key = k.replace("-", "_")
            if isinstance(v, dict):
                walk(v, f"{prefix}{key}.")
            else:
                flat[key] = v
                if prefix:
                    flat[f"{prefix}{key}"] = v

    walk(doc)
    return flat


def resolve_train_config(file_values, args):
    """Defaults < config file < explicit flags."""
    values = {}
    for name in TRAIN_FIELDS:
        if name in file_values:
            values[name] = file_values[name]
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training configuration: {exc}") from None


def resolve_scene(file_values, args, prefix="scene."):
    values = {}
    for name in SCENE_FIELDS:
        if prefix + name in file_values:
            values[name] = file_values[prefix + name]
        flag = getattr(args, "scene_" + name, None)
        if flag is not None:
            values[name] = flag
    spec = synthgen.SceneSpec(**values)
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return spec


def write_resolved(path, sections):
    lines = []
    for section, values in sections.items():
        lines.append(f"[{section}]")
        for k, v in values.items():
            if v is None:
                continue
            if isinstance(v, tuple):
                v = list(v)
            lines.append(f"{k} = {json.dumps(v)}")
        lines.append("")
    Path(path).write_text("\n".join(lines))


def make_run_dir(args, name):
    if getattr(args, "run_dir", None):
        run = Path(args.run_dir)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run = Path(args.runs_root) / f"{stamp}-{name}"
    for sub in ("checkpoints", "maps", "reports", "figures"):
        (run / sub).mkdir(parents=True, exist_ok=True)
    return run


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------


def write_dataset(directory, parts, split_spec):
    directory = Path(directory)
    for key, rgb, dem in parts:
        save_tile(dataclasses.replace(rgb, id=f"{key}_rgb"), directory)
        save_tile(dataclasses.replace(dem, id=f"{key}_dem"), directory)
    (directory / "splits.json").write_text(json.dumps(split_spec, indent=2, sort_keys=True))


def read_dataset(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise UsageError(f"dataset directory not found: {directory}")
    tiles = {}
    for rgb_json in sorted(directory.glob("*_rgb.json")):
        key = rgb_json.stem[: -len("_rgb")]
        rgb = ingest_tile(directory / f"{key}_rgb.raw")
        dem = ingest_tile(directory / f"{key}_dem.raw")
        tiles[key] = (dataclasses.replace(rgb, id=key), dataclasses.replace(dem, id=key))
    if not tiles:
        raise UsageError(f"no *_rgb/*_dem tile pairs in {directory}")
    split_path = directory / "splits.json"
    if split_path.exists():
        splits = load_split_file(split_path, list(tiles))
    else:
        splits = assign_splits(list(tiles), {k: "train" for k in tiles})
    return Dataset(tiles, splits)


def _load_pair(args):
    rgb = ingest_tile(args.rgb_tile) if getattr(args, "rgb_tile", None) else None
    dem = ingest_tile(args.dem_tile) if getattr(args, "dem_tile", None) else None
    return rgb, dem


def _encoders(args, rgb_raw, dem_raw, patch_px, stride_px):
    """(rgb_encoder, dem_encoder, rgb_input_tile, dem_input_tile, checkpoint)."""
    if args.oracle:
        if rgb_raw is None or dem_raw is None:
            raise UsageError("--oracle needs both --rgb-tile and --dem-tile")
        pair = synthgen.oracle_branch_pair(rgb_raw, dem_raw, patch_px, stride_px, seed=args.oracle_seed)
        return pair[0], pair[1], rgb_raw, dem_raw, None
    if not args.checkpoint:
        raise UsageError("either --checkpoint or --oracle is required")
    ckpt = encoder.load_checkpoint(args.checkpoint)
    rgb_in = normalize(rgb_raw) if rgb_raw is not None else None
    dem_in = normalize(dem_raw, ckpt.dem_stats) if dem_raw is not None else None
    return ckpt.rgb, ckpt.dem, rgb_in, dem_in, ckpt


def _grid_params(args, ckpt_path):
    patch_px, stride_px = args.patch_px, args.stride_px
    if (patch_px is None or stride_px is None) and ckpt_path:
        cfg = encoder.load_checkpoint(ckpt_path).config
        gsd = cfg.get("gsd_m", 1.0)
        patch_px = patch_px or int(round(cfg["patch_m"] / gsd))
        stride_px = stride_px or int(round(cfg["stride_m"] / gsd))
    if patch_px is None or stride_px is None:
        raise UsageError("--patch-px and --stride-px are required without a checkpoint config")
    return patch_px, stride_px


def _query_patch(args, fmap, dem_in):
    if args.patch:
        tile = ingest_tile(args.patch)
        return tile.data, None
    if dem_in is None or args.cell is None:
        raise UsageError("give --patch, or --dem-tile with --cell ROW COL")
    r, c = args.cell
    if not (0 <= r < fmap.rows and 0 <= c < fmap.cols):
        raise UsageError(f"cell {(r, c)} outside the {fmap.rows}x{fmap.cols} map")
    anchor = fmap.cell_anchor(r, c)
    return extract_patches(dem_in, [anchor], fmap.patch_px)[0], (r, c)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args):
    values = {name: getattr(args, name) for name in SCENE_FIELDS if getattr(args, name, None) is not None}
    spec = synthgen.SceneSpec(**values)
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rgb, dem = synthgen.generate_scene(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, cols = args.split_grid
    parts = synthgen.split_scene(rgb, dem, rows, cols)
    keys = [k for k, _, _ in parts]
    n_hold = args.val_tiles + args.test_tiles
    if n_hold >= len(keys):
        raise UsageError("not enough tiles left for training")
    split_spec = {}
    for i, k in enumerate(keys):
        if i >= len(keys) - args.test_tiles:
            split_spec[k] = "test"
        elif i >= len(keys) - n_hold:
            split_spec[k] = "val"
        else:
            split_spec[k] = "train"
    write_dataset(out, parts, split_spec)
    print(f"synth seed={spec.seed} size_px={spec.size_px} tiles={len(parts)} out={out}")


def cmd_train(args):
    file_values = read_config(args.config)
    cfg = resolve_train_config(file_values, args)
    data_dir = args.data or file_values.get("data")
    if not data_dir:
        raise UsageError("no dataset: pass --data DIR or set data in the config")
    dataset = read_dataset(data_dir)
    run = make_run_dir(args, args.name or file_values.get("name", "train"))
    write_resolved(run / "config.resolved", {
        "run": {"data": str(data_dir), "name": args.name or file_values.get("name", "train")},
        "train": dataclasses.asdict(cfg),
    })
    result = train(dataset, cfg, out_dir=run / "checkpoints")
    result.log.to_csv(run / "reports" / "train_log.csv")
    last = result.log.rows[-1]
    top1 = "nan" if last.top1 is None else f"{last.top1:.2f}"
    top5 = "nan" if last.top5 is None else f"{last.top5:.2f}"
    print(f"steps={cfg.steps} loss={last.loss:.4f} top1={top1} top5={top5} run={run}")


def cmd_build_map(args):
    rgb_raw, dem_raw = _load_pair(args)
    if rgb_raw is None:
        raise UsageError("--rgb-tile is required")
    patch_px, stride_px = _grid_params(args, args.checkpoint)
    rgb_enc, _, rgb_in, _, _ = _encoders(args, rgb_raw, dem_raw, patch_px, stride_px)
    grid = grid_for_pixels(rgb_in, patch_px, stride_px)
    fmap = mapstore.build_feature_map(rgb_in, grid, rgb_enc, workers=args.workers)
    out = Path(args.out)
    mapstore.save_map(fmap, out)
    print(f"map tile={fmap.tile_id} rows={fmap.rows} cols={fmap.cols} fingerprint={fmap.fingerprint[:16]} out={out}")


def _load_map_checked(args, ckpt, rgb_enc):
    fmap = mapstore.load_map(args.map)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fmap.check_fingerprint(ckpt if ckpt is not None else rgb_enc)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    return fmap


def cmd_localize(args):
    rgb_raw, dem_raw = _load_pair(args)
    fmap = mapstore.load_map(args.map)
    rgb_enc, dem_enc, _, dem_in, ckpt = _encoders(args, rgb_raw, dem_raw, fmap.patch_px, fmap.stride_px)
    fmap = _load_map_checked(args, ckpt, rgb_enc)
    patch, cell = _query_patch(args, fmap, dem_in)
    res = localizer.localize(patch, dem_enc, fmap, k=args.k, query_location=cell)
    for (r, c), score in res.ranking:
        print(f"{r} {c} {score:.6f}")


def cmd_heatmap(args):
    rgb_raw, dem_raw = _load_pair(args)
    fmap = mapstore.load_map(args.map)
    rgb_enc, dem_enc, _, dem_in, ckpt = _encoders(args, rgb_raw, dem_raw, fmap.patch_px, fmap.stride_px)
    fmap = _load_map_checked(args, ckpt, rgb_enc)
    patch, _ = _query_patch(args, fmap, dem_in)
    grid = localizer.similarity_grid(patch, dem_enc, fmap)
    png, csv_path = localizer.render_heatmap(grid, args.out)
    print(f"heatmap max={grid.max():.6f} min={grid.min():.6f} png={png} csv={csv_path}")


def cmd_eval(args):
    rgb_raw, dem_raw = _load_pair(args)
    if dem_raw is None:
        raise UsageError("--dem-tile is required")
    fmap = mapstore.load_map(args.map)
    rgb_enc, dem_enc, _, dem_in, ckpt = _encoders(args, rgb_raw, dem_raw, fmap.patch_px, fmap.stride_px)
    fmap = _load_map_checked(args, ckpt, rgb_enc)
    if args.splits:
        splits = load_split_file(args.splits)
        splits.check_eval_tiles([fmap.tile_id])
    if dem_in.height_px < (fmap.rows - 1) * fmap.stride_px + fmap.patch_px or dem_in.width_px < (
        fmap.cols - 1
    ) * fmap.stride_px + fmap.patch_px:
        raise UsageError("DEM tile is smaller than the map's grid")
    idx = np.arange(fmap.n_cells)
    if args.queries and args.queries < fmap.n_cells:
        idx = np.sort(np.random.default_rng(args.seed).choice(fmap.n_cells, args.queries, replace=False))
    cells = np.stack([idx // fmap.cols, idx % fmap.cols], axis=1)
    patches = extract_patches(dem_in, cells * fmap.stride_px, fmap.patch_px)
    report = evaluator.evaluate(patches, cells, dem_enc, fmap)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.save_json(out / f"{fmap.tile_id}_report.json")
    evaluator.render_error_map(report, out / f"{fmap.tile_id}_errors")
    print(report.summary())


def cmd_ablate(args):
    file_values = read_config(args.config)
    base = resolve_train_config(file_values, args)
    scene = resolve_scene(file_values, args)
    if not args.sweep:
        raise UsageError("--sweep is required")
    sweep = read_config(args.sweep) if args.sweep.endswith(".toml") else json.loads(Path(args.sweep).read_text())
    sweep = {k.split(".")[-1]: v for k, v in sweep.items()}
    seeds = sweep.pop("seeds", None) or list(range(args.seeds))
    try:
        pipeline.sweep_cells(sweep)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    run = make_run_dir(args, args.name or "ablate")
    write_resolved(run / "config.resolved", {
        "train": dataclasses.asdict(base),
        "scene": {k: getattr(scene, k) for k in SCENE_FIELDS},
        "sweep": dict(sweep, seeds=list(seeds)),
    })
    rows = pipeline.ablate(base, scene, sweep, seeds=seeds, out_csv=run / "reports" / "ablation.csv")
    summary = pipeline.summarize(rows)
    pipeline.write_summary_csv(summary, run / "reports" / "ablation_summary.csv")
    for r in rows:
        if r["error"]:
            print(f"cell failed: {r}", file=sys.stderr)
    for s in summary:
        print(
            f"gsd_m={s['gsd_m']} patch_m={s['patch_m']} batch_size={s['batch_size']} "
            f"top1={s['top1_mean']:.3f}+-{s['top1_std']:.3f} top5={s['top5_mean']:.3f}+-{s['top5_std']:.3f}"
        )


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_train_flags(p):
    for name, f in TRAIN_FIELDS.items():
        kind = f.type if isinstance(f.type, type) else {"int": int, "float": float, "str": str}[f.type]
        p.add_argument(_kebab(name), dest=name, type=kind, default=None)


def _add_scene_flags(p, prefix=""):
    for name, f in SCENE_FIELDS.items():
        kind = f.type if isinstance(f.type, type) else {"int": int, "float": float, "str": str}[f.type]
        p.add_argument("--" + prefix + name.replace("_", "-"), dest=(prefix.replace("-", "_") + name), type=kind, default=None)


def _add_query_flags(p, with_map=True):
    p.add_argument("--checkpoint")
    p.add_argument("--oracle", action="store_true", help="use synthetic-scene oracle encoders")
    p.add_argument("--oracle-seed", type=int, default=0)
    p.add_argument("--rgb-tile", help="RGB raster payload (.raw)")
    p.add_argument("--dem-tile", help="DEM raster payload (.raw)")
    if with_map:
        p.add_argument("--map", required=True)


def build_parser():
    parser = _Parser(prog="croco", description="Cross-modal RGB/elevation patch localization.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic RGB/DEM dataset")
    _add_scene_flags(p)
    p.add_argument("--split-grid", nargs=2, type=int, default=(2, 2), metavar=("ROWS", "COLS"))
    p.add_argument("--val-tiles", type=int, default=1)
    p.add_argument("--test-tiles", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train both branches")
    p.add_argument("-c", "--config")
    p.add_argument("--data")
    p.add_argument("--name")
    p.add_argument("--runs-root", default="runs")
    p.add_argument("--run-dir")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("build-map", help="encode an RGB tile into a feature map")
    _add_query_flags(p, with_map=False)
    p.add_argument("--patch-px", type=int)
    p.add_argument("--stride-px", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_map)

    for name, func, help_ in (
        ("localize", cmd_localize, "rank map cells for one DEM patch"),
        ("heatmap", cmd_heatmap, "render the similarity heatmap of one DEM patch"),
    ):
        p = sub.add_parser(name, help=help_)
        _add_query_flags(p)
        p.add_argument("--patch", help="DEM patch raster (.raw)")
        p.add_argument("--cell", nargs=2, type=int, metavar=("ROW", "COL"))
        if name == "localize":
            p.add_argument("-k", type=int, default=5)
        else:
            p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="Top-1/Top-5 over a DEM tile's grid cells")
    _add_query_flags(p)
    p.add_argument("--queries", type=int, default=0, help="random subset size (0 = every cell)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--splits", help="split file; evaluation on a training tile is refused")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep gsd_m / patch_m / batch_size on synthetic scenes")
    p.add_argument("-c", "--config")
    p.add_argument("--sweep", required=True, help="TOML or JSON lists for gsd_m, patch_m, batch_size[, seeds]")
    p.add_argument("--seeds", type=int, default=3, help="number of seeds when the sweep lists none")
    p.add_argument("--name")
    p.add_argument("--runs-root", default="runs")
    p.add_argument("--run-dir")
    _add_train_flags(p)
    _add_scene_flags(p, prefix="scene-")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        args.func(args)
    except (UsageError, TrainConfigError) as exc:
        print(f"croco {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - map every runtime failure to exit code 2
        print(f"croco {args.command}: failed: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
