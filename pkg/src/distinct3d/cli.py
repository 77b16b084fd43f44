"""Command-line surface chaining the pipeline end to end.

Configuration precedence is CLI flag > config-file key > built-in
default, and the DISTINCT_SEED environment variable overrides every
seed for reproducible CI runs. The effective config travels inside the
checkpoint. Dataset directories hold one XYZ master cloud per shape
plus manifest.cfg with the generation recipe; loading regenerates the
records bit-identically from the manifest, so masks and meshes never
need their own serialization.
"""

import argparse
import os
import sys
from dataclasses import fields

import numpy as np

from .geometry import PointCloud, bounding_sphere_diameter
from .synthdata import PRESETS, build_preset_dataset
from .encoder import forward_shape
from .pipeline import TrainConfig, train, canonical_view
from .distinctiveness import extract
from .evalmetrics import (DOWNSAMPLE_MODES, cluster_retention, fne_fpe)
from .applications import (adaptive_poisson_sample, build_retrieval_index,
                           distinctive_global_feature, retrieve,
                           select_views)
from .checkpoint import load_checkpoint, save_checkpoint
from .formats import (read_config, read_ply, read_xyz, write_config,
                      write_csv, write_ply, write_xyz)
from .seeds import derive_rng


class CliError(RuntimeError):
    pass


def _effective_seed(flag_value: int) -> int:
    env = os.environ.get("DISTINCT_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise CliError(f"DISTINCT_SEED must be an integer, got {env!r}")
    return flag_value


def _read_cloud(path) -> PointCloud:
    if not os.path.exists(path):
        raise CliError(f"no such file: {path}")
    if path.endswith(".ply"):
        pc, _ = read_ply(path)
        return pc
    return read_xyz(path)


def _load_dataset(directory):
    manifest = os.path.join(directory, "manifest.cfg")
    if not os.path.exists(manifest):
        raise CliError(f"no dataset manifest at {manifest}")
    meta = read_config(manifest)
    try:
        return build_preset_dataset(meta["preset"], int(meta["count"]),
                                    N=int(meta["n"]), seed=int(meta["seed"]))
    except (KeyError, ValueError) as err:
        raise CliError(f"bad manifest {manifest}: {err}")


def _field_for(ckpt, pc: PointCloud):
    cfg = ckpt.config
    _, fr, _ = forward_shape(ckpt.params, pc, cfg.encoder_config(),
                             attend=cfg.uses_attention())
    return extract(fr, shape_id=pc.shape_id or "")


def _cmd_gen_data(args):
    seed = _effective_seed(args.seed)
    ds = build_preset_dataset(args.preset, args.count, N=args.n, seed=seed)
    os.makedirs(args.out, exist_ok=True)
    for rec in ds.records:
        write_xyz(os.path.join(args.out, f"{rec.shape_id}.xyz"),
                  rec.master_cloud)
    write_config(os.path.join(args.out, "manifest.cfg"),
                 {"preset": args.preset, "count": str(args.count),
                  "n": str(args.n), "seed": str(seed)})
    print(f"wrote {len(ds.records)} shapes to {args.out}")


_CONFIG_KEYS = {f.name for f in fields(TrainConfig) if f.name != "augment"}


def _cmd_train(args):
    ds = _load_dataset(args.data)
    flat = {}
    if args.config:
        if not os.path.exists(args.config):
            raise CliError(f"no such config file: {args.config}")
        flat = read_config(args.config)
        for key in flat:
            if key not in _CONFIG_KEYS and not key.startswith("augment."):
                raise CliError(f"unknown config key {key!r} in "
                               f"{args.config}")
    for name in ("mode", "epochs", "seed", "batch_size", "lr"):
        value = getattr(args, name)
        if value is not None:
            flat[name] = str(value)
    flat["seed"] = str(_effective_seed(int(flat.get("seed", "0"))))
    data_n = ds.records[0].master_cloud.n // 4
    if "N" in flat and int(flat["N"]) != data_n:
        raise CliError(f"config N={flat['N']} conflicts with dataset "
                       f"views of {data_n} points")
    flat["N"] = str(data_n)
    try:
        cfg = TrainConfig.from_flat_dict(flat)
    except (TypeError, ValueError) as err:
        raise CliError(f"bad training config: {err}")
    ckpt, history = train(ds, cfg)
    save_checkpoint(args.out, ckpt)
    if args.history:
        cols = ["epoch", "batch", "cluster_term", "contrastive_term",
                "decay", "total", "assignment_changes"]
        write_csv(args.history, cols,
                  [[row[c] for c in cols] for row in history])
    print(f"trained {cfg.epochs} epochs on {len(ds.records)} shapes "
          f"-> {args.out}")


def _cmd_detect(args):
    ckpt = load_checkpoint(args.ckpt)
    pc = _read_cloud(args.infile)
    d = _field_for(ckpt, pc)
    write_ply(args.out, pc, d=d, color=True)
    print(f"wrote field over {pc.n} points -> {args.out}")


def _parse_sweep(text: str):
    try:
        start, stop, step = (float(x) for x in text.split(":"))
    except ValueError:
        raise CliError(f"bad sweep {text!r}, expected start:stop:step")
    if step <= 0 or stop < start:
        raise CliError(f"bad sweep {text!r}")
    out = []
    r = start
    while r <= stop + 1e-12:
        out.append(round(r, 12))
        r += step
    return out


def _cmd_evaluate(args):
    ckpt = load_checkpoint(args.ckpt)
    ds = _load_dataset(args.data)
    if args.fne_fpe == args.retention:
        raise CliError("choose exactly one analysis: --fne-fpe or "
                       "--retention")
    if args.fne_fpe:
        per_shape = []
        for rec in ds.records:
            idx = _view_indices(rec, ckpt.config.N)
            view = PointCloud(rec.master_cloud.points[idx],
                              shape_id=rec.shape_id)
            gt = view.points[rec.substructure_mask[idx]]
            d = _field_for(ckpt, view)
            det = view.points[d.values > args.d_t]
            if len(gt) and len(det):
                per_shape.append((det, gt, bounding_sphere_diameter(view)))
        if not per_shape:
            raise CliError("no shape produced both detections and "
                           "ground truth")
        rows = []
        for r in _parse_sweep(args.r_sweep):
            arr = np.asarray([fne_fpe(det, gt, r, D)
                              for det, gt, D in per_shape])
            rows.append([r, float(arr[:, 0].mean()),
                         float(arr[:, 1].mean())])
        write_csv(args.out, ["r", "fne", "fpe"], rows)
    else:
        budgets = [int(b) for b in args.budgets.split(",")]
        rng = derive_rng(_effective_seed(args.seed), "retention-cli")
        table = cluster_retention(ckpt, ds, budgets=budgets,
                                  modes=list(DOWNSAMPLE_MODES), rng=rng)
        rows = [[mode, K, table[(mode, K)]]
                for mode in DOWNSAMPLE_MODES for K in budgets]
        write_csv(args.out, ["mode", "budget", "accuracy"], rows)
    print(f"wrote {args.out}")


def _view_indices(rec, n):
    from .geometry import farthest_point_sample
    return farthest_point_sample(rec.master_cloud, n)


def _cmd_retrieve(args):
    ckpt = load_checkpoint(args.ckpt)
    ds = _load_dataset(args.db)
    index = build_retrieval_index(ckpt, ds, delta_d=args.delta_d)
    pc = _read_cloud(args.query)
    cfg = ckpt.config
    _, fr, _ = forward_shape(ckpt.params, pc, cfg.encoder_config(),
                             attend=cfg.uses_attention())
    h = distinctive_global_feature(fr, extract(fr), args.delta_d)
    for sid in retrieve(index, h, top_k=args.topk):
        print(sid)


def _cmd_sample(args):
    ckpt = load_checkpoint(args.ckpt)
    pc = _read_cloud(args.infile)
    d = _field_for(ckpt, pc)
    rng = derive_rng(_effective_seed(args.seed), "sample-cli")
    idx = adaptive_poisson_sample(pc, d, args.rmin, args.rmax, rng)
    write_xyz(args.out, PointCloud(pc.points[idx]))
    print(f"kept {len(idx)} of {pc.n} points -> {args.out}")


def _cmd_viewselect(args):
    ckpt = load_checkpoint(args.ckpt)
    pc = _read_cloud(args.scene)
    d = _field_for(ckpt, pc)
    focus = None
    if args.focus:
        vals = [float(x) for x in args.focus.split(",")]
        if len(vals) != 6:
            raise CliError("--focus needs x0,y0,z0,x1,y1,z1")
        a, b = np.asarray(vals[:3]), np.asarray(vals[3:])
        focus = (np.minimum(a, b), np.maximum(a, b))
    ranked = select_views(pc, d, n_views=args.views, focus=focus)
    rows = [[k, float(v.direction[0]), float(v.direction[1]),
             float(v.direction[2]), float(v.score), v.visible_count]
            for k, v in enumerate(ranked)]
    write_csv(args.out, ["rank", "dx", "dy", "dz", "score", "visible"],
              rows)
    print(f"ranked {args.views} views -> {args.out}")


def _cmd_export_features(args):
    ckpt = load_checkpoint(args.ckpt)
    _load_dataset(args.data)  # validates the directory matches a dataset
    header = (["shape_id", "assignment"] +
              [f"f{k}" for k in range(ckpt.bank.shape[1])])
    rows = [[sid, int(ckpt.assignments[i])] +
            [float(x) for x in ckpt.bank[i]]
            for i, sid in enumerate(ckpt.shape_ids)]
    write_csv(args.out, header, rows)
    print(f"exported {len(rows)} feature rows -> {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="distinct3d",
        description="Distinctiveness fields on 3D shapes: data "
                    "generation, training, detection, evaluation and "
                    "downstream tools. DISTINCT_SEED overrides every "
                    "--seed flag.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--preset", required=True, choices=sorted(PRESETS))
    g.add_argument("--count", type=int, required=True,
                   help="shapes per family")
    g.add_argument("--n", type=int, default=256, help="view size N")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=_cmd_gen_data)

    t = sub.add_parser("train", help="train on a generated dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="flat key=value config file")
    t.add_argument("--out", required=True)
    t.add_argument("--mode")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--history", help="optional loss-history CSV")
    t.set_defaults(fn=_cmd_train)

    d = sub.add_parser("detect", help="write a colored field PLY")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--in", dest="infile", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(fn=_cmd_detect)

    e = sub.add_parser("evaluate", help="error-rate or retention CSV")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--fne-fpe", dest="fne_fpe", action="store_true")
    e.add_argument("--r-sweep", dest="r_sweep", default="0:0.2:0.01")
    e.add_argument("--d-t", dest="d_t", type=float, default=0.7)
    e.add_argument("--retention", action="store_true")
    e.add_argument("--budgets", default="256,128,64,32")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=_cmd_evaluate)

    r = sub.add_parser("retrieve", help="rank database shapes for a query")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--db", required=True)
    r.add_argument("--query", required=True)
    r.add_argument("--topk", type=int, required=True)
    r.add_argument("--delta-d", dest="delta_d", type=float, default=0.7)
    r.set_defaults(fn=_cmd_retrieve)

    s = sub.add_parser("sample", help="distinctiveness-adaptive sampling")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="infile", required=True)
    s.add_argument("--rmin", type=float, required=True)
    s.add_argument("--rmax", type=float, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_cmd_sample)

    v = sub.add_parser("viewselect", help="rank candidate viewpoints")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--scene", required=True)
    v.add_argument("--focus", help="x0,y0,z0,x1,y1,z1 box")
    v.add_argument("--views", type=int, default=50)
    v.add_argument("--out", required=True)
    v.set_defaults(fn=_cmd_viewselect)

    x = sub.add_parser("export-features",
                       help="bank and assignments as CSV")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(fn=_cmd_export_features)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except (CliError, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
