"""Command-line entry point: ``pointnerf gen-scene|init|train|render|eval|inspect``.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import shutil
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import harness, nnet
from .core import ImageBuffer, psnr, read_cameras, read_ppm, write_ppm
from .field import FEATURE_DIM, EncodingConfig, NeuralPointCloud, RadianceFieldParams
from .optimizer import (SceneState, TrainConfig, TrainingAborted, train, write_metrics)
from .pointgen import (DepthViewInput, FeatureInitStrategy, cloud_from_depth_views, init_cloud,
                       load_cloud_ply, load_ply, read_pfm, read_probvol, save_cloud_ply)
from .renderer import render_image
from .spatial_index import build_index

log = logging.getLogger("pointnerf")

FIELD_KEYS = {"feature_dim": int, "c2": int, "hidden_f": int, "hidden_t": int, "hidden_r": int,
              "rel_freqs": int, "dir_freqs": int, "feat_freqs": int}
TRAIN_KEYS = {"lr": float, "confidence_lr": float, "sparsity_weight": float, "batch_rays": int, "iterations": int,
              "prune_grow_interval": int, "prune_threshold": float, "t_opacity": float, "t_dist": float,
              "grow_neighbors": int, "grow_rays_per_view": int, "max_grow_cycles": int, "seed": int}
RENDER_KEYS = {"step": float, "max_samples": int, "background": "rgb"}
INDEX_KEYS = {"K": int, "R": float, "points_per_cell": float}
SCENE_KEYS = {"kind": str, "radius": float, "density": float, "views": int, "test_views": int,
              "size": int, "samples": int}
SECTIONS = {"field": FIELD_KEYS, "train": TRAIN_KEYS, "render": RENDER_KEYS, "index": INDEX_KEYS,
            "scene": SCENE_KEYS}

CONFIG_HELP = """\
config file: `key = value` lines under [field] [train] [render] [index] [scene]; `#` starts a comment.
  [field]  feature_dim=59 c2=128 hidden_f=256 hidden_t=256 hidden_r=128 rel_freqs=6 dir_freqs=4 feat_freqs=0
  [train]  lr=5e-4 confidence_lr=<lr> sparsity_weight=2e-3 batch_rays=256 iterations=2000 prune_grow_interval=500
           prune_threshold=0.1 t_opacity=0.7 t_dist=<mean NN spacing> grow_neighbors=8
           grow_rays_per_view=<all pixels> max_grow_cycles=<unlimited> seed=0
  [render] step=<R/2> max_samples=64 background=0 0 0
  [index]  K=8 R=<cell diagonal at median depth> points_per_cell=4
  [scene]  kind=sphere radius=1 density=20 views=8 test_views=2 size=64 samples=256
"""


class UsageError(Exception):
    pass


def parse_config(text: str, source: str = "<config>") -> dict[str, dict]:
    out: dict[str, dict] = {name: {} for name in SECTIONS}
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise UsageError(f"{source}:{lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected `key = value`")
        if section is None:
            raise UsageError(f"{source}:{lineno}: key outside of a section")
        key, value = (p.strip() for p in line.split("=", 1))
        kind = SECTIONS[section].get(key)
        if kind is None:
            raise UsageError(f"{source}:{lineno}: unknown key {key!r} in [{section}]")
        try:
            if kind == "rgb":
                parsed = tuple(float(v) for v in value.split())
                if len(parsed) != 3:
                    raise ValueError
            else:
                parsed = kind(value)
        except ValueError:
            raise UsageError(f"{source}:{lineno}: bad value {value!r} for {key}") from None
        out[section][key] = parsed
    return out


def load_config(path) -> dict[str, dict]:
    if path is None:
        return {name: {} for name in SECTIONS}
    return parse_config(Path(path).read_text(), str(path))


def train_config(conf: dict, seed: int | None = None, iterations: int | None = None) -> TrainConfig:
    kw = dict(conf["train"])
    kw.update(conf["render"])
    kw.update(conf["index"])
    if seed is not None:
        kw["seed"] = seed
    if iterations is not None:
        kw["iterations"] = iterations
    return TrainConfig(**kw)


# -- checkpoints --------------------------------------------------------------------------

def save_checkpoint(out, cloud: NeuralPointCloud, params: RadianceFieldParams, cfg: TrainConfig | None = None,
                    state: SceneState | None = None, extra: dict | None = None) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_cloud_ply(out / "points.ply", cloud)
    nnet.save_tensors(out / "mlp.bin", params.store.params)
    moments = {}
    if state is not None:
        for tag, adam in (("mlp", state.adam), ("points", state.point_adam), ("conf", state.conf_adam)):
            moments[f"{tag}.t"] = np.array([adam.t], dtype=np.float64)
            for name in adam.m:
                moments[f"{tag}.m.{name}"] = adam.m[name]
                moments[f"{tag}.v.{name}"] = adam.v[name]
    nnet.save_tensors(out / "train_state.bin", moments)
    meta = {f"field.{k}": v for k, v in params.hyper().items()}
    if cfg is not None:
        for f in fields(cfg):
            value = getattr(cfg, f.name)
            if isinstance(value, tuple):
                value = " ".join(repr(float(v)) for v in value)
            meta[f"train.{f.name}"] = value
    if state is not None and state._cell is not None:
        meta["index.world_cell"] = repr(state._cell)
    meta.update(extra or {})
    (out / "meta.txt").write_text("".join(f"{k} = {v}\n" for k, v in meta.items()))


def read_meta(ckpt) -> dict[str, str]:
    meta = {}
    for line in (Path(ckpt) / "meta.txt").read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    return meta


def load_checkpoint(ckpt):
    ckpt = Path(ckpt)
    meta = read_meta(ckpt)
    hyper = {k[6:]: int(v) for k, v in meta.items() if k.startswith("field.")}
    params = RadianceFieldParams.from_hyper(hyper, nnet.load_tensors(ckpt / "mlp.bin"))
    data = load_ply(ckpt / "points.ply")
    if len(data.positions) == 0:
        cloud = NeuralPointCloud.empty(params.feature_dim)
    else:
        cloud = load_cloud_ply(ckpt / "points.ply")
    return cloud, params, meta


def restore_state(state: SceneState, ckpt, meta: dict) -> None:
    moments = nnet.load_tensors(Path(ckpt) / "train_state.bin")
    for tag, adam in (("mlp", state.adam), ("points", state.point_adam), ("conf", state.conf_adam)):
        if f"{tag}.t" in moments:
            adam.t = int(moments[f"{tag}.t"][0])
        for key, value in moments.items():
            if key.startswith(f"{tag}.m."):
                adam.m[key[len(tag) + 3:]] = value.copy()
            elif key.startswith(f"{tag}.v."):
                adam.v[key[len(tag) + 3:]] = value.copy()
    if "index.world_cell" in meta:
        state._cell = float(meta["index.world_cell"])


# -- dataset helpers ----------------------------------------------------------------------

def dataset_views(data, split: str):
    cams, views = harness.load_dataset_views(data)
    return [(vid, cams[vid], img) for vid, sp, img in views if sp == split]


def dataset_background(data) -> tuple:
    echo = harness.read_scene_echo(data)
    if "background" in echo:
        return tuple(float(v) for v in echo["background"].split())
    return (0.0, 0.0, 0.0)


# -- commands -------------------------------------------------------------------------------

def cmd_gen_scene(args, conf) -> int:
    sc = conf["scene"]
    kind = args.kind or sc.get("kind", "sphere")
    params = {k: sc[k] for k in ("radius", "density") if k in sc}
    scene = harness.make_scene(kind, params, args.seed)
    ds = harness.make_dataset(scene, args.views or sc.get("views", 8), args.test_views or sc.get("test_views", 2),
                              args.size or sc.get("size", 64), args.seed, with_depth=args.depth,
                              samples=args.samples or sc.get("samples", 256),
                              background=tuple(args.background))
    harness.save_dataset(ds, args.out)
    print(f"wrote {len(ds.views)} views to {args.out}")
    return 0


def field_params(fconf: dict, D: int, seed: int) -> RadianceFieldParams:
    enc = EncodingConfig(fconf.get("rel_freqs", 6), fconf.get("dir_freqs", 4), fconf.get("feat_freqs", 0))
    sizes = {k: fconf[k] for k in ("c2", "hidden_f", "hidden_t", "hidden_r") if k in fconf}
    return RadianceFieldParams(D, enc, seed=seed, **sizes)


def cmd_init(args, conf) -> int:
    fconf = conf["field"]
    D = args.feature_dim or fconf.get("feature_dim", FEATURE_DIM)
    kind = {"random": "kaiming_random", "from-colors": "from_point_colors", "zeros": "zeros"}[args.features]
    strategy = FeatureInitStrategy(kind, args.seed)
    if args.source == "ply":
        if args.ply is None:
            raise UsageError("--from ply needs --ply PATH")
        data = load_ply(args.ply)
        colors = data.colors.astype(np.float64) / 255.0 if data.colors is not None else None
        if kind == "from_point_colors" and colors is None:
            raise UsageError("--features from-colors needs a PLY with red/green/blue")
        cloud = init_cloud(data.positions, data.confidence, strategy, D, colors)
    else:
        if args.data is None:
            raise UsageError("--from depth needs --data DATASET")
        if kind == "from_point_colors":
            raise UsageError("--features from-colors is only available with --from ply")
        data = Path(args.data)
        cams = read_cameras(data / "cameras.txt")
        views = []
        for path in sorted((data / "depth").glob("*.pfm")):
            vid = int(path.stem)
            if not (data / "train" / f"{vid:04d}.ppm").exists():
                continue
            depth = read_pfm(path)
            prob = planes = None
            pv = data / "probvol" / f"{vid:04d}.bin"
            if pv.exists():
                prob, planes = read_probvol(pv)
            views.append(DepthViewInput(cams[vid], depth, prob, planes))
        if not views:
            raise FileNotFoundError(f"no depth maps for training views under {data}")
        cloud = cloud_from_depth_views(views, args.stride, strategy, D)
    params = field_params(fconf, D, args.seed)
    save_checkpoint(args.out, cloud, params, train_config(conf, args.seed))
    print(f"initialized {len(cloud)} points -> {args.out}")
    return 0


def cmd_train(args, conf) -> int:
    cloud, params, meta = load_checkpoint(args.ckpt)
    cfg = train_config(conf, args.seed, args.iters)
    if "background" not in conf["render"] and args.data:
        cfg.background = dataset_background(args.data)
    out = Path(args.out)
    metrics = Path(args.metrics) if args.metrics else out / "metrics.csv"
    if cfg.iterations == 0:
        if out.resolve() != Path(args.ckpt).resolve():
            shutil.copytree(args.ckpt, out, dirs_exist_ok=True)
        write_metrics(metrics, [])
        print("0 iterations: checkpoint copied")
        return 0
    views = [(cam, img) for _, cam, img in dataset_views(args.data, "train")]
    if not views:
        raise FileNotFoundError(f"no training views in {args.data}")
    state = SceneState(cloud, params, cfg)
    restore_state(state, args.ckpt, meta)
    try:
        reports = train(state, views, log_every=args.log_every)
    except TrainingAborted as exc:
        dump = out / "abort_dump.npz"
        out.mkdir(parents=True, exist_ok=True)
        np.savez(dump, **{k: np.asarray(v) for k, v in exc.dump.items()})
        print(f"training aborted: {exc}; state dumped to {dump}", file=sys.stderr)
        return 1
    save_checkpoint(out, state.cloud, state.params, cfg, state)
    metrics.parent.mkdir(parents=True, exist_ok=True)
    write_metrics(metrics, reports)
    last = reports[-1] if reports else None
    if last is not None:
        print(f"iter {last.iteration}: L_opt {last.L_opt:.6g} psnr {format_psnr(last.psnr)} points {last.n_points}")
    return 0


def _render_setup(args, conf):
    cloud, params, meta = load_checkpoint(args.ckpt)
    cfg = train_config(conf, args.seed)
    cfg_bg = conf["render"].get("background")
    if cfg_bg is None and "train.background" in meta:
        cfg.background = tuple(float(v) for v in meta["train.background"].split())
    for key in ("R", "K", "step"):
        mk = f"train.{key}"
        if key not in conf["index"] and key not in conf["render"] and meta.get(mk, "None") != "None":
            setattr(cfg, key, (int if key == "K" else float)(meta[mk]))
    state = SceneState(cloud, params, cfg)
    if "index.world_cell" in meta:
        state._cell = float(meta["index.world_cell"])
    return state


def cmd_render(args, conf) -> int:
    state = _render_setup(args, conf)
    cams = read_cameras(Path(args.data) / "cameras.txt") if args.data else read_cameras(args.cameras)
    ids = sorted(cams) if args.view is None else [args.view]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for vid in ids:
        cam = cams[vid]
        if len(state.cloud) == 0:
            image = ImageBuffer.filled(cam.width, cam.height, state.cfg.background)
            aux = {}
        else:
            grid = state.grid(vid, cam)
            opts = state.render_options(vid, cam)
            opts.opacity_map = opts.depth_map = args.aux
            image, aux = render_image(state.cloud, grid, state.params, cam, opts, args.threads)
        write_ppm(out / f"{vid:04d}.ppm", image)
        if "opacity" in aux:
            write_ppm(out / f"{vid:04d}_opacity.pgm", aux["opacity"])
        if "depth" in aux:
            d = aux["depth"]
            write_ppm(out / f"{vid:04d}_depth.pgm", d / d.max() if d.max() > 0 else d)
    print(f"rendered {len(ids)} views to {out}")
    return 0


def format_psnr(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.6f}"


def cmd_eval(args, conf) -> int:
    rows = []
    if args.pred:
        for gt_path in sorted(Path(args.gt).glob("*.ppm")):
            pred_path = Path(args.pred) / gt_path.name
            rows.append((gt_path.stem, psnr(read_ppm(pred_path), read_ppm(gt_path))))
    else:
        if args.ckpt is None or args.data is None:
            raise UsageError("eval needs --ckpt and --data, or --pred and --gt")
        state = _render_setup(args, conf)
        for vid, cam, img in dataset_views(args.data, args.split):
            if len(state.cloud) == 0:
                pred = ImageBuffer.filled(cam.width, cam.height, state.cfg.background)
            else:
                pred = state.render(vid, cam, args.threads)
            rows.append((f"{vid:04d}", psnr(pred, img)))
    for name, value in rows:
        print(f"{name} {format_psnr(value)}")
    if rows:
        finite = [v for _, v in rows]
        print(f"mean {format_psnr(float(np.mean(finite)))}")
    return 0


def cmd_inspect(args, conf) -> int:
    cloud, params, meta = load_checkpoint(args.ckpt)
    if args.data:
        cams = read_cameras(Path(args.data) / "cameras.txt")
    else:
        cams = read_cameras(args.cameras)
    cam = cams[args.view if args.view is not None else sorted(cams)[0]]
    grid = build_index(cloud, cam, points_per_cell=conf["index"].get("points_per_cell", 4.0))
    print(f"points {len(cloud)} (behind camera: {grid.skipped})")
    print(f"cells occupied {len(grid.cell_keys)} dims {' '.join(map(str, grid.dims))}")
    print("points_per_cell cells")
    for k, v in sorted(grid.occupancy_histogram().items()):
        print(f"{k} {v}")
    gam = cloud.gammas
    if len(gam):
        print(f"confidence mean {gam.mean():.4f} min {gam.min():.4f} max {gam.max():.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--deterministic", action="store_true",
                        help="ordered reductions; results independent of --threads")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker threads for rendering (default: hardware count)")
    common.add_argument("--config", help="config file with [field]/[train]/[render]/[index]/[scene] sections")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pointnerf", description="Point-based neural radiance fields.",
                                epilog=CONFIG_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", parents=[common], help="render a synthetic analytic dataset")
    g.add_argument("--kind", choices=harness.SCENE_KINDS)
    g.add_argument("--views", type=int, help="training views (default 8)")
    g.add_argument("--test-views", type=int, help="held-out views (default 2)")
    g.add_argument("--size", type=int, help="image width and height (default 64)")
    g.add_argument("--samples", type=int, help="oracle samples per ray (default 256)")
    g.add_argument("--background", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    g.add_argument("--depth", action="store_true", help="also write depth maps and probability volumes")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_scene)

    i = sub.add_parser("init", parents=[common], help="build an initial checkpoint")
    i.add_argument("--from", dest="source", choices=("depth", "ply"), required=True)
    i.add_argument("--ply", help="input PLY (for --from ply)")
    i.add_argument("--data", help="dataset directory with depth/ and probvol/ (for --from depth)")
    i.add_argument("--features", choices=("random", "from-colors", "zeros"), default="random")
    i.add_argument("--stride", type=int, default=1, help="depth pixel stride (default 1)")
    i.add_argument("--feature-dim", type=int, help="feature channels (default 59)")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_init)

    t = sub.add_parser("train", parents=[common], help="per-scene optimization")
    t.add_argument("--ckpt", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--iters", type=int, help="iterations (default 2000)")
    t.add_argument("--metrics", help="metrics CSV path (default OUT/metrics.csv)")
    t.add_argument("--log-every", type=int, default=1)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", parents=[common], help="render views of a checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", help="dataset directory (uses its cameras.txt)")
    r.add_argument("--cameras", help="cameras.txt path")
    r.add_argument("--view", type=int)
    r.add_argument("--aux", action="store_true", help="also write opacity and depth PGMs")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", parents=[common], help="PSNR of renders against ground truth")
    e.add_argument("--ckpt")
    e.add_argument("--data")
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--pred", help="directory of predicted PPMs (compare with --gt)")
    e.add_argument("--gt", help="directory of ground-truth PPMs")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("inspect", parents=[common], help="print grid occupancy statistics")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data")
    s.add_argument("--cameras")
    s.add_argument("--view", type=int)
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        conf = load_config(args.config)
        return args.func(args, conf)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"pointnerf: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"pointnerf: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
