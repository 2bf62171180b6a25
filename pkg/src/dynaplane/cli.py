"""Single command-line entry point.

Subcommands: gen (dataset synthesis), train, render, eval, stats.  Exit
codes: 0 success, 1 usage or configuration error, 2 runtime failure.  Every
output directory receives an echo of the resolved configuration.  The
--threads flag pins the BLAS/OpenMP pool (--threads 1 gives bitwise
reproducible runs) and must take effect before numpy loads, so all heavy
imports happen inside the command handlers.
"""

from __future__ import annotations

import argparse
import os
import sys

USAGE_ERROR, RUNTIME_ERROR = 1, 2


def _set_threads(n):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def _parse_rig(spec):
    if ":" not in spec:
        raise ValueError(f"rig must be kind:count, got {spec!r}")
    kind, _, count = spec.partition(":")
    aliases = {"orbit": "monocular_orbit"}
    kind = aliases.get(kind, kind)
    return kind, int(count)


def _parse_index_list(s):
    return tuple(int(v) for v in s.split(",") if v.strip() != "")


def _parse_float_list(s):
    return [float(v) for v in s.split(",") if v.strip() != ""]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_gen(args):
    from .config import echo_args
    from .scenes import SCENES, export_dataset, make_rig, make_scene

    try:
        scene = make_scene(args.scene)
    except ValueError as e:
        print(str(e), file=sys.stderr)
        return USAGE_ERROR
    kind, count = _parse_rig(args.rig)
    monocular = kind == "monocular_orbit"
    if monocular and count != args.frames:
        print(f"monocular rig needs one camera per frame "
              f"(rig {count} vs frames {args.frames})", file=sys.stderr)
        return USAGE_ERROR
    rig = make_rig(kind, count, radius=args.radius, resolution=args.res,
                   focal_factor=args.focal_factor)
    holdout = _parse_index_list(args.holdout)
    bg = tuple(_parse_float_list(args.background))
    ds = export_dataset(scene, rig, args.frames, args.out, background=bg,
                        holdout_views=holdout, monocular=monocular)
    echo_args(args.out, {
        "gen.scene": args.scene, "gen.rig": args.rig,
        "gen.frames": args.frames, "gen.res": args.res,
        "gen.radius": args.radius, "gen.focal_factor": args.focal_factor,
        "gen.holdout": args.holdout, "gen.background": args.background,
        "gen.seed": args.seed,
    })
    print(f"wrote {len(ds.frames)} frames to {args.out}")
    return 0


def _cmd_train(args):
    import numpy as np

    from .checkpoint import load_checkpoint
    from .config import RunConfig, echo_args
    from .figures import save_training_curves
    from .metrics import evaluate
    from .models import build_model
    from .scenes import import_dataset
    from .train import train

    cfg = RunConfig.from_file(args.config, args.set or ())
    if args.dataset:
        cfg.set("data.dir", args.dataset)
    data_dir = cfg["data.dir"]
    if not data_dir:
        print("no dataset: set data.dir or pass --dataset", file=sys.stderr)
        return USAGE_ERROR
    dataset = import_dataset(data_dir)
    schedule = cfg.schedule()
    os.makedirs(args.out, exist_ok=True)
    cfg.echo(os.path.join(args.out, "run_config.txt"))

    if args.resume:
        model, header, adam_states = load_checkpoint(args.resume)
        start_iter = header["iteration"]
        rng = np.random.default_rng(0)
        rng.bit_generator.state = header["rng_state"]
        print(f"resuming from {args.resume} at iteration {start_iter}")
    else:
        model = build_model(cfg.model_config(), dataset.bbox,
                            dataset.time_range,
                            rng=np.random.default_rng(cfg["run.seed"]),
                            dtype=np.float32)
        start_iter, rng, adam_states = 0, None, None

    result = train(model, dataset, schedule, out_dir=args.out,
                   start_iter=start_iter, rng=rng, adam_states=adam_states,
                   quiet=args.quiet)
    csv_path = os.path.join(args.out, "metrics.csv")
    if os.path.exists(csv_path) and result.rows:
        save_training_curves(csv_path, os.path.join(args.out,
                                                    "train_curves.png"))
    print(f"trained {schedule.total_iters - start_iter} iterations in "
          f"{result.wall_seconds:.1f}s; final checkpoint "
          f"{result.checkpoints[-1] if result.checkpoints else 'n/a'}")
    if dataset.split("holdout") and not args.skip_final_eval:
        _, summary = evaluate(model, dataset, split="holdout")
        print(f"holdout: mean PSNR {summary['mean_psnr']:.2f} dB, "
              f"mean SSIM {summary['mean_ssim']:.4f}")
    return 0


def _cmd_render(args):
    from .checkpoint import load_checkpoint
    from .config import echo_args
    from .render import Camera, render_image
    from .scenes import import_dataset, save_png

    model, header, _ = load_checkpoint(args.checkpoint)
    t0, t1 = model.time_range
    if args.dataset:
        dataset = import_dataset(args.dataset)
        if args.view_index is not None:
            views = dataset.views()
            if not 0 <= args.view_index < len(views):
                print(f"view index {args.view_index} out of range "
                      f"(dataset has {len(views)} views)", file=sys.stderr)
                return USAGE_ERROR
            cam = dataset.frames[views[args.view_index][0]].camera
        else:
            cam = dataset.frames[args.frame_index].camera
        background = dataset.background
    else:
        cam = _orbit(args.azim, args.elev, args.radius, args.res,
                     args.focal_factor)
        background = tuple(model.cfg.background)
    times = _parse_float_list(args.times)
    os.makedirs(args.out, exist_ok=True)
    n_samples = args.n_samples or model.cfg.n_samples
    for i, t in enumerate(times):
        tc = min(max(t, t0), t1)
        if tc != t:
            print(f"warning: t={t} outside time range [{t0}, {t1}]; clamped",
                  file=sys.stderr)
        frame_cam = Camera(cam.fx, cam.fy, cam.cx, cam.cy, cam.width,
                           cam.height, cam.c2w.copy(), t=tc)
        img, wsum = render_image(model, frame_cam, n_samples,
                                 background=background)
        path = os.path.join(args.out, f"render_{i:03d}.png")
        save_png(path, img)
        if args.dump_weights:
            wsum.astype("<f4").tofile(path + ".weights.bin")
    echo_args(args.out, {
        "render.checkpoint": args.checkpoint, "render.dataset": args.dataset,
        "render.view_index": args.view_index,
        "render.frame_index": args.frame_index, "render.times": args.times,
        "render.n_samples": n_samples, "render.azim": args.azim,
        "render.elev": args.elev, "render.radius": args.radius,
        "render.dump_weights": args.dump_weights,
    }, name="render_config.txt")
    print(f"rendered {len(times)} frame(s) to {args.out}")
    return 0


def _orbit(azim, elev, radius, res, focal_factor):
    import numpy as np

    from .render import Camera
    from .scenes import default_intrinsics

    intr = default_intrinsics(res, focal_factor)
    a, e = np.deg2rad(azim), np.deg2rad(elev)
    eye = radius * np.array([np.cos(e) * np.sin(a), np.sin(e),
                             np.cos(e) * np.cos(a)])
    return Camera.look_at(eye=eye, target=(0.0, 0.0, 0.0), **intr)


def _cmd_eval(args):
    from .checkpoint import load_checkpoint
    from .config import echo_args
    from .figures import save_eval_report
    from .metrics import evaluate
    from .scenes import import_dataset

    model, header, _ = load_checkpoint(args.checkpoint)
    dataset = import_dataset(args.dataset)
    split = None if args.split == "all" else args.split
    records, summary = evaluate(model, dataset, split=split,
                                n_samples=args.n_samples or None)
    if not records:
        print(f"no frames in split {args.split!r}", file=sys.stderr)
        return USAGE_ERROR
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "eval.csv")
    with open(csv_path, "w") as fh:
        fh.write("frame,view,t,split,psnr,ssim\n")
        for r in records:
            fh.write(f"{r['frame']},{r['view']},{r['t']!r},{r['split']},"
                     f"{r['psnr']!r},{r['ssim']!r}\n")
    save_eval_report(records, os.path.join(args.out, "eval_report.png"))
    echo_args(args.out, {
        "eval.checkpoint": args.checkpoint, "eval.dataset": args.dataset,
        "eval.split": args.split, "eval.n_samples": args.n_samples,
    }, name="eval_config.txt")
    print(f"{len(records)} frames: mean PSNR {summary['mean_psnr']:.2f} dB, "
          f"mean SSIM {summary['mean_ssim']:.4f}")
    print(f"wrote {csv_path}")
    return 0


def model_stats(model):
    """Parameter counts and fp32 byte footprints per component, plus the
    hypothetical dense 4D grid at the fine resolution."""
    from .models import Tensor4DMono

    cfg = model.cfg
    rows = []

    def add(name, n_params):
        rows.append({"component": name, "params": int(n_params),
                     "bytes": int(n_params) * 4})

    if isinstance(model, Tensor4DMono):
        add(f"flow_planes_lr(n={cfg.n_lr})", model.flow_planes.n_params)
        add(f"canonical_planes_lr(n={cfg.n_lr})", model.canonical_lr.n_params)
        add(f"canonical_planes_hr(n={cfg.n_hr})", model.canonical_hr.n_params)
        add("flow_mlp", model.flow_mlp.n_params)
    else:
        add(f"planes_lr(n={cfg.n_lr})", model.field.lr.n_params)
        add(f"planes_hr(n={cfg.n_hr})", model.field.hr.n_params)
    add("geometry_mlp", model.geo_mlp.n_params)
    add("color_mlp", model.color_mlp.n_params)
    add("opacity_scale", 1)
    total = sum(r["params"] for r in rows)
    add("total", total)
    dense = cfg.n_hr ** 4 * cfg.channels
    rows.append({"component": f"dense_4d_grid(n={cfg.n_hr})",
                 "params": dense, "bytes": dense * 4})
    return rows


def _cmd_stats(args):
    import numpy as np

    from .checkpoint import load_checkpoint
    from .config import RunConfig, echo_args
    from .figures import save_stats_chart
    from .models import build_model

    if args.checkpoint:
        model, _, _ = load_checkpoint(args.checkpoint)
    else:
        cfg = RunConfig.from_file(args.config, args.set or ())
        model = build_model(cfg.model_config(),
                            rng=np.random.default_rng(0), dtype=np.float32)
    rows = model_stats(model)
    plane_row = next(r for r in rows if "planes_hr" in r["component"]
                     or "canonical_planes_hr" in r["component"])
    dense_row = rows[-1]
    width = max(len(r["component"]) for r in rows)
    print(f"{'component'.ljust(width)}  {'params':>12}  {'bytes':>14}")
    for r in rows:
        print(f"{r['component'].ljust(width)}  {r['params']:>12,}  "
              f"{r['bytes']:>14,}")
    ratio = dense_row["bytes"] / plane_row["bytes"]
    print(f"dense-grid vs fine plane set: {ratio:,.1f}x "
          f"(n^4 -> n^2 factorization)")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        csv_path = os.path.join(args.out, "stats.csv")
        with open(csv_path, "w") as fh:
            fh.write("component,params,bytes\n")
            for r in rows:
                fh.write(f"{r['component']},{r['params']},{r['bytes']}\n")
        save_stats_chart(rows, os.path.join(args.out, "stats.png"))
        echo_args(args.out, {"stats.checkpoint": args.checkpoint,
                             "stats.config": args.config},
                  name="stats_config.txt")
        print(f"wrote {csv_path}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(
        prog="dynaplane",
        description="Dynamic neural SDF scenes on factorized feature planes")
    p.add_argument("--threads", type=int, default=0,
                   help="BLAS/OpenMP threads (1 = bitwise reproducible; "
                        "0 = library default)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate an analytic-scene dataset")
    g.add_argument("--scene", required=True)
    g.add_argument("--rig", required=True,
                   help="kind:count, e.g. forward_sparse:6, ring:12, orbit:32")
    g.add_argument("--frames", type=int, default=16)
    g.add_argument("--res", type=int, default=96)
    g.add_argument("--radius", type=float, default=2.9)
    g.add_argument("--focal-factor", type=float, default=1.35)
    g.add_argument("--holdout", default="",
                   help="comma-separated camera indices tagged holdout")
    g.add_argument("--background", default="0,0,0")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_gen)

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("--config", default=None)
    t.add_argument("--set", action="append", metavar="KEY=VALUE")
    t.add_argument("--dataset", default=None)
    t.add_argument("--resume", default=None, help="checkpoint to resume")
    t.add_argument("--quiet", action="store_true")
    t.add_argument("--skip-final-eval", action="store_true")
    t.add_argument("--out", required=True)
    t.set_defaults(func=_cmd_train)

    r = sub.add_parser("render", help="render novel (view, time) pairs")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--times", required=True,
                   help="comma-separated timestamps")
    r.add_argument("--dataset", default=None)
    r.add_argument("--view-index", type=int, default=None)
    r.add_argument("--frame-index", type=int, default=0)
    r.add_argument("--azim", type=float, default=0.0)
    r.add_argument("--elev", type=float, default=0.0)
    r.add_argument("--radius", type=float, default=2.9)
    r.add_argument("--res", type=int, default=96)
    r.add_argument("--focal-factor", type=float, default=1.35)
    r.add_argument("--n-samples", type=int, default=0)
    r.add_argument("--dump-weights", action="store_true",
                   help="write fp32 weight-sum sidecars")
    r.add_argument("--out", required=True)
    r.set_defaults(func=_cmd_render)

    e = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", choices=("train", "holdout", "all"),
                   default="holdout")
    e.add_argument("--n-samples", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=_cmd_eval)

    s = sub.add_parser("stats", help="parameter/byte accounting")
    s.add_argument("--config", default=None)
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--checkpoint", default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(func=_cmd_stats)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else USAGE_ERROR
    if args.threads > 0:
        _set_threads(args.threads)
    try:
        return args.func(args)
    except BrokenPipeError:
        return RUNTIME_ERROR
    except Exception as e:  # noqa: BLE001 - map everything to exit codes
        from .config import ConfigError
        from .scenes import DatasetError
        usage = isinstance(e, (ConfigError, DatasetError, ValueError))
        print(f"error: {e}", file=sys.stderr)
        return USAGE_ERROR if usage else RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
