"""Command-line entry point.

Subcommands: synth, fit, render, animate, eval, gradcheck, bench, report.
Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
failure (divergence, NaN, or a failed gradient check).

Heavy imports happen inside the subcommand handlers so that --threads can cap
the numeric libraries' thread pools before they load.
"""

import argparse
import os
import sys


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _cap_threads(n):
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[var] = str(n)


def _parse_noise(text):
    parts = text.split(",")
    if len(parts) != 2:
        raise UsageError(f"--noise expects 'sigma_rot,sigma_trans', got '{text}'")
    return float(parts[0]), float(parts[1])


def _build_config(args):
    from .config import apply_overrides, parse_config_file
    from .trainer import TrainConfig
    overrides = {}
    if getattr(args, "config", None):
        overrides.update(parse_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got '{item}'")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    cfg = apply_overrides(TrainConfig(), overrides)
    if getattr(args, "seed", None) is not None:
        import dataclasses
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    from .dataio import synth_preset
    synth_preset(args.preset, n_frames=args.frames,
                 noise=_parse_noise(args.noise), seed=args.seed,
                 out_dir=args.out, image_size=args.image_size,
                 n_points=args.points, segments=args.segments,
                 joints=args.joints)
    print(f"wrote {args.frames}-frame '{args.preset}' dataset to {args.out}")
    return 0


def cmd_fit(args):
    import dataclasses
    from .dataio import load_dataset
    from .trainer import (rebuild_uv_maps, train_stage1, train_stage2)
    cfg = _build_config(args)
    if args.no_motion_opt:
        cfg = dataclasses.replace(cfg, motion_opt=False)
    if args.print_config:
        from .config import format_config
        print(format_config(cfg), end="")
    dataset = load_dataset(args.data)
    if args.stage1_only:
        train_stage1(dataset, cfg, out_dir=args.out)
        print(f"stage-1 checkpoint written to {args.out}")
        return 0
    stage1_dir = os.path.join(args.out, "stage1")
    model, motion = train_stage1(dataset, cfg, out_dir=stage1_dir)
    rebuild_uv_maps(dataset, model, motion, out_dir=stage1_dir)
    train_stage2(dataset, model, motion, cfg, out_dir=args.out,
                 stage1_metrics=os.path.join(stage1_dir, "metrics.csv"))
    print(f"final checkpoint written to {args.out} "
          f"(stage-1 checkpoint in {stage1_dir})")
    return 0


def _load_ckpt_and_data(args):
    from .dataio import load_dataset
    from .trainer import load_checkpoint
    model, motion, cfg, manifest = load_checkpoint(args.checkpoint)
    data_root = getattr(args, "data", None) or manifest.get("dataset_root")
    dataset = load_dataset(data_root) if data_root and os.path.exists(
        os.path.join(data_root, "manifest.json")) else None
    return model, motion, cfg, dataset


def _orbit_camera(cam, degrees, center):
    import numpy as np
    from .rasterizer import Camera
    from .rotations import axis_angle_to_matrix
    rad = np.deg2rad(degrees)
    R_y = axis_angle_to_matrix([0.0, rad, 0.0])
    eye = -cam.R.T @ cam.t
    new_eye = R_y @ (eye - center) + center
    R = cam.R @ R_y.T
    return Camera(cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height,
                  R, -R @ new_eye, cam.near, cam.far)


def cmd_render(args, require_poses=False):
    import numpy as np
    from .dataio import read_pose_file
    from .rasterizer import save_image_npy, save_image_png
    from .trainer import eval_pose_for
    model, motion, cfg, dataset = _load_ckpt_and_data(args)
    os.makedirs(args.out, exist_ok=True)
    bg = tuple(cfg.background)

    if require_poses and not args.poses:
        raise UsageError("animate requires --poses")
    if args.poses:
        poses = read_pose_file(args.poses, model.template.n_joints)
        if dataset is not None:
            cam = dataset.frames[min(args.camera_index, len(dataset) - 1)].camera
        else:
            from .dataio import default_camera
            cam = default_camera(model.template)
        jobs = [(f"pose{i:04d}", p, cam) for i, p in enumerate(poses)]
    else:
        if dataset is None:
            raise UsageError("no dataset available: pass --data or --poses")
        if args.frames:
            indices = [int(x) for x in args.frames.split(",")]
        else:
            indices = dataset.split_indices(args.split)
        jobs = []
        for i in indices:
            pose = eval_pose_for(dataset, motion, i)
            jobs.append((f"frame{i:04d}", pose, dataset.frames[i].camera))

    center = model.template.vertices.mean(axis=0)
    for name, pose, cam in jobs:
        if args.orbit:
            cam = _orbit_camera(cam, args.orbit, center)
        out = model.render_frame(pose, cam, bg)
        save_image_png(out.rgb, os.path.join(args.out, name + ".png"))
        if args.npy:
            save_image_npy(out.rgb, os.path.join(args.out, name + ".npy"))
    print(f"rendered {len(jobs)} image(s) to {args.out}")
    return 0


def cmd_eval(args):
    from .report import render_eval_report
    from .trainer import evaluate_split, pose_error_report
    model, motion, cfg, dataset = _load_ckpt_and_data(args)
    if dataset is None:
        raise UsageError("eval needs the dataset: pass --data")
    result = evaluate_split(model, dataset, args.split, motion,
                            tuple(cfg.background))
    print(f"split '{args.split}':")
    for row in result["rows"]:
        print(f"  frame {row['frame']:4d}: psnr {row['psnr']:7.3f} dB  "
              f"ssim {row['ssim']:.4f}  l1 {row['l1']:.5f}")
    if result["mean"]:
        print(f"  mean: psnr {result['mean']['psnr']:7.3f} dB  "
              f"ssim {result['mean']['ssim']:.4f}  l1 {result['mean']['l1']:.5f}")
    errors = pose_error_report(dataset, motion)
    if errors is not None:
        print(f"pose error vs ground truth (train split): rotation "
              f"{errors['rot_err_initial']:.4f} -> {errors['rot_err_optimized']:.4f} rad, "
              f"translation {errors['trans_err_initial']:.4f} -> "
              f"{errors['trans_err_optimized']:.4f} m")
    if args.out:
        files = render_eval_report(result, args.out, errors)
        print("report files: " + ", ".join(files))
    return 0


def cmd_gradcheck(args):
    from .gradcheck import run_all
    modules = [args.module] if args.module else None
    results = run_all(modules, seed=args.seed,
                      perturb_cutoff=args.perturb_cutoff)
    failed = False
    for r in results:
        print(r.line())
        if not r.passed and not r.skipped:
            failed = True
    return 3 if failed else 0


def cmd_bench(args):
    from .rasterizer import render_throughput_bench
    w, h = (int(x) for x in args.size.split("x"))
    rep = render_throughput_bench(args.splats, (w, h), args.repeats,
                                  seed=args.seed)
    print(f"{rep['n_splats']} splats @ {w}x{h}, {rep['repeats']} repeat(s)")
    print(f"  tiled: {rep['tiled_fps_mean']:9.3f} fps (sigma {rep['tiled_fps_std']:.3f})")
    print(f"  naive: {rep['naive_fps_mean']:9.3f} fps (sigma {rep['naive_fps_std']:.3f})")
    print(f"  speedup {rep['speedup']:.2f}x, max image difference "
          f"{rep['max_abs_diff']:.2e}")
    if args.out:
        from .report import render_bench_report
        files = render_bench_report(rep, args.out)
        print("report files: " + ", ".join(files))
    return 0


def cmd_report(args):
    from .report import render_metrics_report
    metrics = args.metrics
    if os.path.isdir(metrics):
        metrics = os.path.join(metrics, "metrics.csv")
    files = render_metrics_report(metrics, args.out)
    print("report files: " + ", ".join(files))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="splatfit",
                description="Animatable Gaussian avatar fitting on a CPU: "
                            "synthesize data, fit, render, evaluate.")
    p.add_argument("--threads", type=int, default=None,
                   help="cap internal parallelism (default: library defaults)")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--preset", required=True,
                    choices=["static-avatar", "dynamic-avatar"])
    sp.add_argument("--frames", type=int, required=True)
    sp.add_argument("--noise", default="0.1,0.05",
                    help="sigma_rot,sigma_trans (radians, meters)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--image-size", type=int, default=128)
    sp.add_argument("--points", type=int, default=1500,
                    help="ground-truth Gaussian count")
    sp.add_argument("--segments", type=int, default=12)
    sp.add_argument("--joints", type=int, default=5)
    sp.set_defaults(func=cmd_synth)

    fp = sub.add_parser("fit", help="two-stage avatar fitting")
    fp.add_argument("data", help="dataset directory")
    fp.add_argument("--out", required=True, help="checkpoint directory")
    fp.add_argument("--stage1-only", action="store_true",
                    help="skip stage 2 (no pose encoder)")
    fp.add_argument("--no-motion-opt", action="store_true",
                    help="freeze motion updates (baseline ablation)")
    fp.add_argument("--config", help="key=value config file")
    fp.add_argument("--set", action="append", metavar="KEY=VALUE",
                    help="override one config key (repeatable)")
    fp.add_argument("--seed", type=int, default=None)
    fp.add_argument("--print-config", action="store_true",
                    help="echo the effective configuration")
    fp.set_defaults(func=cmd_fit)

    for name, helptext, require_poses in (
            ("render", "render a checkpoint at dataset frames or given poses",
             False),
            ("animate", "render a checkpoint along a novel pose sequence",
             True)):
        rp = sub.add_parser(name, help=helptext)
        rp.add_argument("checkpoint")
        rp.add_argument("--out", required=True)
        rp.add_argument("--data", help="dataset directory (defaults to the "
                                       "one recorded in the checkpoint)")
        rp.add_argument("--split", default="test",
                        choices=["train", "val", "test"])
        rp.add_argument("--frames", help="comma-separated frame indices")
        rp.add_argument("--poses", required=require_poses,
                        help="pose file for novel-pose rendering")
        rp.add_argument("--camera-index", type=int, default=0)
        rp.add_argument("--orbit", type=float, default=0.0,
                        help="rotate the camera by DEG around the avatar")
        rp.add_argument("--npy", action="store_true",
                        help="also dump lossless .npy images")
        rp.set_defaults(func=lambda a, rq=require_poses: cmd_render(a, rq))

    ep = sub.add_parser("eval", help="PSNR/SSIM metrics over a split")
    ep.add_argument("checkpoint")
    ep.add_argument("--data")
    ep.add_argument("--split", default="test", choices=["train", "val", "test"])
    ep.add_argument("--out", help="write the CSV/figure report here")
    ep.set_defaults(func=cmd_eval)

    gp = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    gp.add_argument("--module", choices=["lbs", "rasterizer", "encoder",
                                         "decoder", "losses", "end_to_end"])
    gp.add_argument("--seed", type=int, default=0)
    gp.add_argument("--perturb-cutoff", action="store_true",
                    help="probe at the 3-sigma cutoff (expected failures, "
                         "reported as skipped)")
    gp.set_defaults(func=cmd_gradcheck)

    bp = sub.add_parser("bench", help="tiled vs naive renderer throughput")
    bp.add_argument("--splats", type=int, default=50_000)
    bp.add_argument("--size", default="512x512")
    bp.add_argument("--repeats", type=int, default=3)
    bp.add_argument("--seed", type=int, default=0)
    bp.add_argument("--out", help="write the CSV/figure report here")
    bp.set_defaults(func=cmd_bench)

    tp = sub.add_parser("report", help="figures + summary from a metrics log")
    tp.add_argument("metrics", help="metrics.csv or a checkpoint directory")
    tp.add_argument("--out", required=True)
    tp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _cap_threads(args.threads)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (FileNotFoundError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 -- map exception families to exit codes
        from .config import ConfigError
        from .dataio import DataError
        from .template import TemplateError
        from .trainer import TrainingDiverged
        if isinstance(e, ConfigError):
            print(f"config error: {e}", file=sys.stderr)
            return 1
        if isinstance(e, (DataError, TemplateError)):
            print(f"data error: {e}", file=sys.stderr)
            return 2
        if isinstance(e, TrainingDiverged):
            print(f"numerical failure: {e}", file=sys.stderr)
            return 3
        if isinstance(e, ValueError):
            print(f"data error: {e}", file=sys.stderr)
            return 2
        raise


if __name__ == "__main__":
    sys.exit(main())
