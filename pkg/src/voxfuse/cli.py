"""Command line interface: ``voxfuse <subcommand> ...``.

Every failure exits nonzero with a one-line diagnostic on stderr. The
``VORTX_THREADS`` environment variable caps native thread pools; set it to 1
for bit-exact reproducibility.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .geom import select_keyframes
from .gradchecks import run_suites
from .pipeline.benchmark import evaluate_scene
from .pipeline.config import PipelineConfig
from .pipeline.dataset import find_scenes, load_scene
from .pipeline.model import ModelBundle
from .pipeline.reconstruct import reconstruct
from .pipeline.synth import synth_dataset
from .pipeline.train import train
from .surface import marching_cubes_dense, read_mesh, write_mesh
from .tsdf import make_gt, save_gt

THREADS_ENV = "VORTX_THREADS"

log = logging.getLogger("voxfuse")


class CliError(RuntimeError):
    pass


def thread_limit() -> int | None:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw.strip() == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise CliError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def _provenance(cfg: PipelineConfig, seed: int) -> list[str]:
    return [f"voxfuse {__version__}", f"seed {seed}", f"config {cfg.fingerprint()} {cfg.to_json()}"]


# -- subcommands -------------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = json.loads(Path(args.spec).read_text())
    dirs = synth_dataset(spec, args.out, args.seed)
    for d in dirs:
        print(d)
    return 0


def cmd_make_gt(args) -> int:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    scene = load_scene(args.scene)
    gt = make_gt([scene.depth(i) for i in range(len(scene))], scene.cameras, scene.bounds, cfg.trunc,
                 cfg.max_depth)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_gt(gt, out / "gt.npz")
    vol = gt.volume
    mesh = marching_cubes_dense(vol.tsdf, vol.observed, vol.origin_key, vol.level)
    write_mesh(mesh, out / "gt.ply", comments=[f"voxfuse {__version__}", f"config {cfg.fingerprint()}"])
    print(f"{out / 'gt.npz'} {out / 'gt.ply'} vertices={len(mesh.vertices)} triangles={len(mesh.triangles)}")
    return 0


def cmd_keyframes(args) -> int:
    scene = load_scene(args.scene)
    print(" ".join(str(i) for i in select_keyframes(scene.poses, args.rmax, args.tmax)))
    return 0


def cmd_train(args) -> int:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    scenes = find_scenes(args.data)

    def on_step(rec):
        log.info("step %d phase %d loss %.4f", rec["step"], rec["phase"], rec["total"])

    bundle, trainer = train(scenes, cfg, args.seed, args.n_val, out, on_step)
    meta = {"seed": args.seed, "steps": len(trainer.history)}
    if trainer.val_scenes:
        meta["val_loss"] = trainer.validation_loss()
    bundle.save(out, meta)
    log_path = out.with_name(out.name + ".log.json")
    log_path.write_text(json.dumps({"config": cfg.to_dict(), "fingerprint": cfg.fingerprint(), **meta,
                                    "history": trainer.history}, sort_keys=True, indent=1) + "\n")
    print(f"{out} steps={meta['steps']}" + (f" val_loss={meta['val_loss']:.4f}" if "val_loss" in meta else ""))
    return 0


def cmd_reconstruct(args) -> int:
    bundle = ModelBundle.load(args.ckpt)
    scene = load_scene(args.scene)
    rec = reconstruct(scene, bundle, seed=args.seed, n_views=args.n_views)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_mesh(rec.mesh, out, comments=_provenance(bundle.config, args.seed))
    print(f"{out} vertices={len(rec.mesh.vertices)} triangles={len(rec.mesh.triangles)} "
          f"keyframes={len(rec.keyframes)}")
    return 0


def cmd_eval(args) -> int:
    if args.tau <= 0:
        raise CliError(f"--tau must be positive, got {args.tau}")
    pred, gt = read_mesh(args.pred), read_mesh(args.gt)
    if args.no_trim:
        scene = None
    elif args.scene is None:
        raise CliError("--scene is required unless --no-trim is given")
    else:
        scene = load_scene(args.scene)
    report = evaluate_scene(pred, gt, scene, PipelineConfig(), args.tau, trim=not args.no_trim, seed=args.seed)
    print(report.to_json())
    return 0


def cmd_gradcheck(args) -> int:
    try:
        results = run_suites(args.op, seed=args.seed)
    except KeyError as exc:
        raise CliError(exc.args[0]) from None
    failed = 0
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.suite}/{r.case} rel_err={r.error:.3e} tol={r.tol:.0e}")
        failed += not r.ok
    print(f"{len(results) - failed}/{len(results)} gradient checks passed")
    return 1 if failed else 0


# -- parser --------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="voxfuse", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"voxfuse {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--spec", required=True, help="scene or dataset spec (JSON)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("make-gt", help="fuse ground-truth volumes and mesh for a scene")
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="pipeline config JSON (for trunc and max_depth)")
    s.set_defaults(func=cmd_make_gt)

    s = sub.add_parser("keyframes", help="print selected keyframe indices")
    s.add_argument("--scene", required=True)
    s.add_argument("--rmax", type=float, default=15.0, help="rotation threshold in degrees")
    s.add_argument("--tmax", type=float, default=0.2, help="translation threshold in metres")
    s.set_defaults(func=cmd_keyframes)

    s = sub.add_parser("train", help="two-phase training")
    s.add_argument("--data", required=True, help="dataset root with scene directories")
    s.add_argument("--config", help="pipeline config JSON; missing fields take defaults")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-val", type=int, default=None, help="held-out scenes (default: one in five)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("reconstruct", help="reconstruct a scene to a PLY mesh")
    s.add_argument("--scene", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-views", type=int, default=None, help="views sampled per tile (default from config)")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("eval", help="trim and score a predicted mesh; JSON on stdout")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--scene", help="scene whose cameras define the trimming")
    s.add_argument("--tau", type=float, default=0.05)
    s.add_argument("--no-trim", action="store_true")
    s.add_argument("--seed", type=int, default=0, help="surface sampling seed")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    s.add_argument("--op", action="append", help="suite or op name (repeatable; default all)")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "seed", 0) is not None and getattr(args, "seed", 0) < 0:
        print(f"voxfuse {args.command}: error: --seed must be non-negative", file=sys.stderr)
        return 2
    try:
        with threadpool_limits(limits=thread_limit()):
            return args.func(args)
    except Exception as exc:  # noqa: BLE001 - one-line diagnostic for every failure
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"voxfuse {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
