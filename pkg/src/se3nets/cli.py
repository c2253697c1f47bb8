"""Command-line entry point: ``se3nets <command> ...``."""

import argparse
import csv
import json
import logging
import os
import sys

from .dataset import DatasetError, apply_noise, generate_dataset, read_dataset, write_dataset
from .experiments import EXPERIMENTS, ExperimentError, RunCache, run_experiment
from .gradcheck import MODULES, TOLERANCE, run_gradchecks
from .metrics import FLOW_MSE_DEFINITION
from .model import CheckpointError, ConfigError, load_checkpoint
from .render import render_cloud, write_ppm
from .rollout import rollout
from .scene import Camera, GenerationError
from .train import TrainConfig, evaluate, train

log = logging.getLogger("se3nets")


def _cmd_gen(args):
    ds = generate_dataset(args.family, frames=args.frames, seed=args.seed, height=args.height, width=args.width)
    if args.depth_noise > 0 or args.assoc_window > 1:
        ds = apply_noise(ds, args.depth_noise, args.depth_scaled, args.assoc_window, args.assoc_thresh)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} {args.family} frames to {args.out}")


def _cmd_train(args):
    cfg = TrainConfig(variant=args.variant, k=args.k, epochs=args.epochs, seed=args.seed, data=args.data,
                      out=args.out, batch_size=args.batch_size, lr=args.lr, split=args.split,
                      loss_mode=args.loss_mode)
    result = train(cfg, log_every=args.log_every)
    r = result.report
    print(f"{cfg.variant}: test flow_mse_cm {r.flow_mse_cm:.6g} over {r.moving_points} moving points, "
          f"{result.seconds:.1f} s")
    if r.occupancy:
        print(f"mask_entropy {r.mask_entropy:.4g} seg_accuracy {r.seg_accuracy:.4g}")
    if not args.out:
        print("no --out given; checkpoint not written")


def _eval_subset(ds, part, split):
    if part == "all":
        return ds
    train_set, test_set = ds.split(split)
    return test_set if part == "test" else train_set


def _cmd_eval(args):
    model, header = load_checkpoint(args.ckpt)
    ds = _eval_subset(read_dataset(args.data), args.part, args.split)
    report = evaluate(model, ds, epoch=header["epoch"], hard=args.hard)
    row = {"variant": model.config.variant, "k": model.config.k, "frames": len(ds),
           "flow_mse_cm": report.flow_mse_cm, "moving_points": report.moving_points,
           "mask_entropy": report.mask_entropy, "seg_accuracy": report.seg_accuracy,
           "occupancy": ";".join(f"{v:.6g}" for v in report.occupancy),
           "transform_deviation": ";".join(f"{v:.6g}" for v in report.transform_deviation)}
    if args.report:
        with open(args.report, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# {FLOW_MSE_DEFINITION}\n")
            writer = csv.DictWriter(fh, fieldnames=list(row))
            writer.writeheader()
            writer.writerow(row)
    print(json.dumps(row))


def _cmd_rollout(args):
    model, header = load_checkpoint(args.ckpt)
    ds = read_dataset(args.data)
    if not 0 <= args.frame < len(ds):
        raise DatasetError(f"frame index {args.frame} out of range (dataset has {len(ds)} frames)")
    frame = ds[args.frame]
    res = rollout(model, frame, args.steps, hard=not args.soft, epoch=header["epoch"])
    for t, err in enumerate(res.errors):
        rig = f" rigidity {res.rigidity[t]:.3g}" if res.rigidity else ""
        print(f"step {t + 1}: flow_mse_cm {err:.6g} ({res.moving_points[t]} moving points){rig}")
    for note in res.notes:
        print(note)
    if args.render:
        os.makedirs(args.render, exist_ok=True)
        camera = Camera.from_dict(ds.manifest["camera"])
        depth = frame.cloud[frame.valid][:, 2]
        rng = (float(depth.min()), float(depth.max())) if depth.size else None
        write_ppm(os.path.join(args.render, "step0.ppm"), render_cloud(frame.cloud, camera, frame.valid, rng))
        for t, (pred, target) in enumerate(zip(res.clouds, res.targets)):
            write_ppm(os.path.join(args.render, f"step{t + 1}_pred.ppm"),
                      render_cloud(pred, camera, frame.valid, rng))
            write_ppm(os.path.join(args.render, f"step{t + 1}_target.ppm"),
                      render_cloud(target, camera, frame.valid, rng))
        print(f"rendered {2 * len(res.clouds) + 1} images to {args.render}")
    if not res.finite:
        raise ValueError("rollout produced non-finite values")


def _cmd_gradcheck(args):
    results = run_gradchecks(args.module)
    failed = 0
    for mod, name, err, secs in results:
        ok = err < TOLERANCE
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} {mod}.{name}: max rel error {err:.3g} ({secs:.2f} s)")
    if failed:
        raise ValueError(f"{failed} gradient check(s) above {TOLERANCE}")


def _cmd_experiment(args):
    cache = RunCache(args.cache) if args.cache else None
    dataset = read_dataset(args.data) if args.data else None
    res = run_experiment(args.name, args.out, dataset=dataset, frames=args.frames, seed=args.seed,
                         epochs=args.epochs, conditions=args.conditions, variants=args.variants, cache=cache,
                         render=not args.no_render)
    for row in res.rows:
        print(f"{row['condition']:>24} {row['variant']:>20}  flow_mse_cm {row['flow_mse_cm']:.6g}")
    print(f"table: {res.csv_path}; {len(res.images)} images")


def build_parser():
    p = argparse.ArgumentParser(prog="se3nets", description="Rigid-motion prediction networks on point clouds.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--family", choices=("push", "arm"), default="push")
    g.add_argument("--frames", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--height", type=int, default=32)
    g.add_argument("--width", type=int, default=40)
    g.add_argument("--depth-noise", type=float, default=0.0, help="depth noise SD [m]")
    g.add_argument("--depth-scaled", action="store_true", help="scale the depth noise with depth")
    g.add_argument("--assoc-window", type=int, default=1, help="odd association corruption window")
    g.add_argument("--assoc-thresh", type=float, default=0.0, help="association depth threshold [m]")
    g.set_defaults(func=_cmd_gen)

    t = sub.add_parser("train", help="train one variant")
    t.add_argument("--data", required=True)
    t.add_argument("--variant", default="se3net", choices=("se3net", "no_penalty", "se3net_no_penalty", "flow",
                                                          "no_motion"))
    t.add_argument("--k", type=int, default=3)
    t.add_argument("--epochs", type=int, default=60)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out")
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--split", type=float, default=0.7)
    t.add_argument("--loss-mode", choices=("all_points", "moving_points"), default="all_points")
    t.add_argument("--log-every", type=int, default=10)
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report")
    e.add_argument("--part", choices=("test", "train", "all"), default="test")
    e.add_argument("--split", type=float, default=0.7)
    e.add_argument("--hard", action="store_true", help="hard-assign masks before blending")
    e.set_defaults(func=_cmd_eval)

    r = sub.add_parser("rollout", help="multi-step prediction from one frame")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--steps", type=int, default=5)
    r.add_argument("--frame", type=int, default=0)
    r.add_argument("--render")
    r.add_argument("--soft", action="store_true", help="blend with soft masks instead of hard assignment")
    r.set_defaults(func=_cmd_rollout)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--module", choices=MODULES)
    c.set_defaults(func=_cmd_gradcheck)

    x = sub.add_parser("experiment", help="run a comparison protocol")
    x.add_argument("--name", required=True, choices=EXPERIMENTS)
    x.add_argument("--out", required=True)
    x.add_argument("--data", help="dataset directory (default: generate a push dataset)")
    x.add_argument("--frames", type=int, default=2000)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--epochs", type=int, default=60)
    x.add_argument("--cache", help="directory for reusable trained runs")
    x.add_argument("--conditions", nargs="+")
    x.add_argument("--variants", nargs="+")
    x.add_argument("--no-render", action="store_true")
    x.set_defaults(func=_cmd_experiment)
    return p


EXPECTED_ERRORS = (DatasetError, CheckpointError, ConfigError, ExperimentError, GenerationError, ValueError,
                   OSError, KeyError)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except EXPECTED_ERRORS as exc:
        print(f"se3nets {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # still one diagnostic line, with the type for bug reports
        log.debug("unexpected failure", exc_info=True)
        print(f"se3nets {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
