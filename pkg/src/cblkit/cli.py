"""Command-line front end.

Subcommands: synth, metrics, mine, gradcheck, train, eval. Exit codes:
0 success, 2 bad input (also argparse usage errors), 3 runtime failure such
as a diverged training run or a failed gradient check.

Commands that write files drop a manifest.json next to them; commands that
print to stdout accept --manifest PATH. Manifests carry the command, the
package version, the effective config and sha256 digests of every input
file -- never timestamps, so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .cloud import (CloudFormatError, build_hierarchy, build_index,
                    read_cloud, write_cloud)
from .loss import CblConfig, cbl_backward, cbl_forward
from .metrics import extract_boundary, full_report
from .mining import VARIANTS, MiningConfig, mine_stage_boundaries
from .net import (CheckpointError, NetConfig, SegNet, load_checkpoint,
                  save_checkpoint)
from .synth import LAYOUTS, SynthConfig, generate_split
from .train import (TrainConfig, TrainingDiverged, build_scene_cache,
                    evaluate, log_to_csv, step_losses, train)

CBL_GRAD_TOL = 1e-5
NET_GRAD_TOL = 1e-4


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(path: Path, command: str, config: dict, seed: int,
                    inputs) -> None:
    doc = {"command": command, "version": __version__, "seed": seed,
           "config": config,
           "inputs": {str(p): _sha256(Path(p)) for p in inputs}}
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _scene_paths(directory: str):
    d = Path(directory)
    if not d.is_dir():
        raise ValueError(f"not a directory: {directory}")
    paths = sorted(d.glob("*.txt"))
    if not paths:
        raise ValueError(f"no .txt scenes in {directory}")
    return paths


def _load_scenes(directory: str):
    paths = _scene_paths(directory)
    clouds = [read_cloud(p) for p in paths]
    classes = {c.num_classes for c in clouds}
    if len(classes) > 1:
        raise ValueError(f"scenes disagree on the class count: {sorted(classes)}")
    return paths, clouds


def _synth_config(args) -> SynthConfig:
    return SynthConfig(rng_seed=args.seed, num_points=args.points,
                       num_classes=args.classes, layout=args.layout,
                       jitter=args.jitter, extent=args.extent)


# ------------------------------------------------------------------ commands

def cmd_synth(args) -> int:
    cfg = _synth_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_scenes, test_scenes = generate_split(cfg, args.count, args.test_count)
    for i, cloud in enumerate(train_scenes):
        write_cloud(out / f"scene_{i:03d}.txt", cloud)
    for i, cloud in enumerate(test_scenes):
        write_cloud(out / f"test_{i:03d}.txt", cloud)
    _write_manifest(out / "manifest.json", "synth",
                    {**asdict(cfg), "count": args.count,
                     "test_count": args.test_count}, args.seed, [])
    print(f"wrote {args.count}+{args.test_count} scenes to {out}")
    return 0


def cmd_metrics(args) -> int:
    path = Path(args.input)
    cloud = read_cloud(path)
    if cloud.pred_labels is None:
        raise ValueError(f"{path} has no prediction column")
    report = full_report(cloud, args.radius)
    print(report.to_json())
    if args.manifest:
        _write_manifest(Path(args.manifest), "metrics",
                        {"radius": args.radius}, 0, [path])
    return 0


def cmd_mine(args) -> int:
    path = Path(args.input)
    cloud = read_cloud(path)
    hierarchy = build_hierarchy(cloud, args.cell, args.radius, args.stages)
    config = MiningConfig(variant=args.variant, kl_threshold=args.kl_threshold)
    for stage in range(args.stages):
        bset = mine_stage_boundaries(hierarchy, stage, config)
        print(json.dumps({"stage": stage, "variant": args.variant,
                          "indices": [int(i) for i in bset.indices]}))
    if args.manifest:
        _write_manifest(Path(args.manifest), "mine",
                        {"cell": args.cell, "radius": args.radius,
                         "stages": args.stages, "variant": args.variant,
                         "kl_threshold": args.kl_threshold}, 0, [path])
    return 0


def _central_diff(fn, x, h=1e-5):
    grad = np.zeros_like(x)
    for i in range(x.size):
        x[i] += h
        hi = fn(x)
        x[i] -= 2 * h
        lo = fn(x)
        x[i] += h
        grad[i] = (hi - lo) / (2 * h)
    return grad


def _relative_error(a, b) -> float:
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0),
                1e-12)
    return float(np.max(np.abs(a - b), initial=0.0) / scale)


def _gradcheck_cbl(instances: int, seed: int, tau: float) -> float:
    worst = 0.0
    rng = np.random.default_rng(seed)
    made = attempts = 0
    while made < instances:
        attempts += 1
        if attempts > 50 * instances:
            raise RuntimeError("could not draw contrastive gradcheck instances")
        n = int(rng.integers(15, 30))
        pos = rng.uniform(0.0, 1.0, size=(n, 3))
        labels = rng.integers(0, 3, size=n)
        feats = rng.normal(size=(n, 4))
        index = build_index(pos)
        boundary = extract_boundary(labels, index, 0.4)
        config = CblConfig(tau=tau)
        loss, contrib = cbl_forward(feats, boundary, labels, index, 0.4, config)
        if contrib.indices.size == 0:
            continue  # nothing to differentiate; draw another instance
        made += 1
        analytic = cbl_backward(feats, boundary, labels, index, 0.4, config)

        def loss_of(vec):
            f = vec.reshape(feats.shape)
            value, _ = cbl_forward(f, boundary, labels, index, 0.4, config)
            return value

        numeric = _central_diff(loss_of, feats.ravel().copy())
        worst = max(worst, _relative_error(analytic.ravel(), numeric))
    return worst


def _gradcheck_network(instances: int, seed: int, tau: float) -> float:
    worst = 0.0
    for k in range(instances):
        scfg = SynthConfig(rng_seed=seed + 101 * k, num_points=120,
                           num_classes=3, extent=1.0)
        cloud = generate_split(scfg, 1, 0)[0][0]
        ncfg = NetConfig(num_classes=3, num_stages=3, widths=(4, 5, 6),
                         input_width=3, kernel_hidden=4, rng_seed=seed + k,
                         base_cell=0.2, boundary_radius=0.2)
        net = SegNet(ncfg)
        # knock the parameters off the fresh-init ReLU kinks
        jitter = np.random.default_rng(seed + 7 * k)
        net.set_param_vector(net.get_param_vector()
                             + jitter.normal(0.0, 0.05, net.num_params()))
        cache = build_scene_cache(cloud, ncfg)
        tcfg = TrainConfig(lam=0.1, tau=tau)
        res = step_losses(net, cache, tcfg)
        analytic = np.concatenate([g.ravel() for g in res.grads])
        base = net.get_param_vector()

        def loss_of(vec):
            net.set_param_vector(vec)
            return step_losses(net, cache, tcfg, want_grads=False).total

        numeric = _central_diff(loss_of, base.copy())
        net.set_param_vector(base)
        worst = max(worst, _relative_error(analytic, numeric))
    return worst


def cmd_gradcheck(args) -> int:
    cbl_err = _gradcheck_cbl(args.instances, args.seed, args.tau)
    net_err = None
    total = args.instances
    ok = cbl_err < CBL_GRAD_TOL
    if args.full:
        net_err = _gradcheck_network(args.net_instances, args.seed, args.tau)
        total += args.net_instances
        ok = ok and net_err < NET_GRAD_TOL
    doc = {"instances": total, "max_rel_err": max(cbl_err, net_err or 0.0),
           "cbl_max_rel_err": cbl_err, "network_max_rel_err": net_err,
           "pass": ok}
    print(json.dumps(doc))
    return 0 if ok else 3


def _net_config_from_args(args, num_classes: int) -> NetConfig:
    widths = tuple(int(w) for w in args.widths.split(","))
    cbl_stages = (0,) if args.cbl_input_only else None
    return NetConfig(num_classes=num_classes, num_stages=args.stages,
                     widths=widths, multi_scale_head=not args.plain_head,
                     cbl_stages=cbl_stages, rng_seed=args.seed,
                     base_cell=args.cell, boundary_radius=args.radius)


def cmd_train(args) -> int:
    if (args.scenes is None) == (args.synth == 0):
        raise ValueError("pass exactly one of --scenes or --synth N")
    if args.scenes:
        paths, clouds = _load_scenes(args.scenes)
        num_classes = clouds[0].num_classes
    else:
        paths = []
        clouds = generate_split(_synth_config(args), args.synth, 0)[0]
        num_classes = args.classes
    ncfg = _net_config_from_args(args, num_classes)
    lam = 0.0 if args.no_cbl else args.lam
    tcfg = TrainConfig(epochs=args.epochs, lr=args.lr, lam=lam, tau=args.tau,
                       mining=MiningConfig(variant=args.variant,
                                           kl_threshold=args.kl_threshold))
    net = SegNet(ncfg)
    rows = train(net, clouds, tcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.ckpt", net, {**asdict(tcfg), "scenes": len(clouds)})
    (out / "train_log.csv").write_text(log_to_csv(rows))
    config = {"net": asdict(ncfg), "train": asdict(tcfg)}
    if not args.scenes:
        config["synth"] = {**asdict(_synth_config(args)), "count": args.synth}
    _write_manifest(out / "manifest.json", "train", config, args.seed, paths)
    print(json.dumps({"epochs": len(rows),
                      "final": rows[-1] if rows else None}))
    return 0


def cmd_eval(args) -> int:
    net, _ = load_checkpoint(args.checkpoint)
    paths, clouds = _load_scenes(args.scenes)
    if clouds[0].num_classes != net.cfg.num_classes:
        raise ValueError("scene class count does not match the checkpoint")
    aggregate, per_scene = evaluate(net, clouds)
    print(aggregate.to_json())
    if args.per_scene:
        lines = ["scene,miou,miou_boundary,miou_inner,b_iou"]
        for path, report in zip(paths, per_scene):
            lines.append(f"{path.name},{report.miou_overall!r},"
                         f"{report.miou_boundary!r},{report.miou_inner!r},"
                         f"{report.b_iou!r}")
        Path(args.per_scene).write_text("\n".join(lines) + "\n")
    if args.manifest:
        _write_manifest(Path(args.manifest), "eval", {}, 0,
                        [Path(args.checkpoint), *paths])
    return 0


# -------------------------------------------------------------------- parser

def _add_synth_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--points", type=int, default=2000,
                   help="points per scene (default 2000)")
    p.add_argument("--classes", type=int, default=4,
                   help="number of classes (default 4)")
    p.add_argument("--layout", choices=LAYOUTS, default="planar-rooms")
    p.add_argument("--jitter", type=float, default=0.03,
                   help="positional noise sigma in meters (default 0.03)")
    p.add_argument("--extent", type=float, default=2.0,
                   help="scene side length in meters (default 2.0)")


def _add_mining_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variant", choices=VARIANTS, default="argmax",
                   help="boundary mining variant (default argmax)")
    p.add_argument("--kl-threshold", type=float, default=0.5,
                   help="divergence threshold for the kl variant (default 0.5)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cblkit",
        description="Boundary metrics, boundary mining and contrastive "
                    "boundary training for point-cloud segmentation.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate labeled scenes")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=1, help="training scenes")
    p.add_argument("--test-count", type=int, default=0,
                   help="held-out scenes with disjoint seeds")
    p.add_argument("--seed", type=int, default=0)
    _add_synth_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("metrics", help="score a scene that has predictions")
    p.add_argument("--input", required=True, help="scene file with 5 columns")
    p.add_argument("--radius", type=float, default=0.1)
    p.add_argument("--manifest", help="optional manifest path")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("mine", help="mine per-stage boundary sets (JSONL)")
    p.add_argument("--input", required=True, help="scene file")
    p.add_argument("--stages", type=int, default=3)
    p.add_argument("--cell", type=float, default=0.1,
                   help="stage-1 grid cell size (default 0.1)")
    p.add_argument("--radius", type=float, default=0.1)
    _add_mining_flags(p)
    p.add_argument("--manifest", help="optional manifest path")
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("gradcheck",
                       help="compare analytic gradients to central differences")
    p.add_argument("--instances", type=int, default=20,
                   help="contrastive-loss instances (default 20)")
    p.add_argument("--net-instances", type=int, default=2,
                   help="full-network instances with --full (default 2)")
    p.add_argument("--full", action="store_true",
                   help="also check the network end to end")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tau", type=float, default=1.0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train a segmentation net")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--scenes", help="directory of scene .txt files")
    src.add_argument("--synth", type=int, default=0, metavar="N",
                     help="train on N generated scenes instead of files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--lr", type=float, default=0.01,
                   help="initial learning rate (default 0.01)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stages", type=int, default=3)
    p.add_argument("--widths", default="16,32,64",
                   help="comma-separated per-stage widths")
    p.add_argument("--plain-head", action="store_true",
                   help="classify from stage-0 features only")
    p.add_argument("--cell", type=float, default=0.1)
    p.add_argument("--radius", type=float, default=0.1)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--lambda", dest="lam", type=float, default=0.1,
                   help="contrastive weight (default 0.1)")
    p.add_argument("--no-cbl", action="store_true",
                   help="disable the contrastive term (same as --lambda 0)")
    p.add_argument("--cbl-input-only", action="store_true",
                   help="apply the contrastive term at stage 0 only")
    _add_mining_flags(p)
    _add_synth_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on scenes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenes", required=True, help="directory of scene files")
    p.add_argument("--per-scene", help="optional per-scene CSV path")
    p.add_argument("--manifest", help="optional manifest path")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (CloudFormatError, CheckpointError, FileNotFoundError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
