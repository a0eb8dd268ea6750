"""Figures and summary tables for training metrics and evaluation results.

The report path renders matplotlib figures to files next to the delimited
summaries, so a run directory is self-describing: metrics.csv (written by the
trainer) in, loss/quality curves plus summary.csv out.
"""

import csv
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .losses import read_metrics


def _stage_boundary(records):
    for r in records:
        if r["stage"] == 2:
            return r["epoch"]
    return None


def render_metrics_report(metrics_path, out_dir):
    """Loss/quality curves and a per-stage summary for one training run.

    Writes loss_curves.png, quality_curves.png and summary.csv into
    ``out_dir``; returns the list of files written.
    """
    records = read_metrics(metrics_path)
    if not records:
        raise ValueError(f"no records in {metrics_path}")
    os.makedirs(out_dir, exist_ok=True)
    epochs = np.array([r["epoch"] for r in records])
    boundary = _stage_boundary(records)
    written = []

    def series(key):
        return np.array([r[key] if r[key] is not None else np.nan
                         for r in records])

    fig, ax = plt.subplots(figsize=(7, 4.2))
    for key, label in (("loss", "total"), ("l1", "L1"),
                       ("ssim_loss", "1 - SSIM"), ("reg_offset", "offset reg"),
                       ("reg_scale", "scale reg"), ("reg_f", "feature reg"),
                       ("reg_p", "pose-feature reg")):
        y = series(key)
        if np.isfinite(y).any():
            ax.plot(epochs, y, label=label, linewidth=1.2)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss component")
    if boundary is not None:
        ax.axvline(boundary - 0.5, color="gray", linestyle="--", linewidth=0.8)
        ax.text(boundary, ax.get_ylim()[1], " stage 2", va="top", fontsize=8,
                color="gray")
    ax.legend(fontsize=8, ncol=2)
    fig.tight_layout()
    path = os.path.join(out_dir, "loss_curves.png")
    fig.savefig(path, dpi=130)
    plt.close(fig)
    written.append(path)

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.5, 3.6))
    ax1.plot(epochs, series("psnr"), color="tab:blue")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train PSNR (dB)")
    ax2.plot(epochs, series("ssim"), color="tab:orange")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("train SSIM")
    for ax in (ax1, ax2):
        if boundary is not None:
            ax.axvline(boundary - 0.5, color="gray", linestyle="--",
                       linewidth=0.8)
    fig.tight_layout()
    path = os.path.join(out_dir, "quality_curves.png")
    fig.savefig(path, dpi=130)
    plt.close(fig)
    written.append(path)

    summary = os.path.join(out_dir, "summary.csv")
    with open(summary, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["stage", "epochs", "final_loss", "final_l1", "final_psnr",
                    "final_ssim"])
        for stage in (1, 2):
            rows = [r for r in records if r["stage"] == stage]
            if rows:
                last = rows[-1]
                w.writerow([stage, len(rows), last["loss"], last["l1"],
                            last["psnr"], last["ssim"]])
    written.append(summary)
    return written


def render_eval_report(result, out_dir, pose_errors=None, prefix="eval"):
    """Per-frame metric table (CSV) and bar figure for one evaluated split."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    table = os.path.join(out_dir, f"{prefix}_{result['split']}.csv")
    with open(table, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame", "psnr", "ssim", "l1"])
        for r in result["rows"]:
            w.writerow([r["frame"], r["psnr"], r["ssim"], r["l1"]])
        if result["mean"]:
            w.writerow(["mean", result["mean"]["psnr"], result["mean"]["ssim"],
                        result["mean"]["l1"]])
    written.append(table)

    if result["rows"]:
        frames = [r["frame"] for r in result["rows"]]
        psnrs = [r["psnr"] for r in result["rows"]]
        fig, ax = plt.subplots(figsize=(7, 3.4))
        ax.bar(frames, psnrs, color="tab:blue", width=0.8)
        ax.axhline(result["mean"]["psnr"], color="tab:red", linewidth=1.0,
                   label=f"mean {result['mean']['psnr']:.2f} dB")
        ax.set_xlabel("frame")
        ax.set_ylabel("PSNR (dB)")
        ax.set_title(f"{result['split']} split")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = os.path.join(out_dir, f"{prefix}_{result['split']}_psnr.png")
        fig.savefig(path, dpi=130)
        plt.close(fig)
        written.append(path)

    if pose_errors is not None:
        path = os.path.join(out_dir, f"{prefix}_pose_errors.csv")
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["quantity", "initial", "optimized"])
            w.writerow(["rotation geodesic (rad)", pose_errors["rot_err_initial"],
                        pose_errors["rot_err_optimized"]])
            w.writerow(["translation (m)", pose_errors["trans_err_initial"],
                        pose_errors["trans_err_optimized"]])
        written.append(path)
    return written


def render_bench_report(report, out_dir):
    """FPS table (CSV) and bar chart for a throughput benchmark run."""
    os.makedirs(out_dir, exist_ok=True)
    table = os.path.join(out_dir, "bench.csv")
    with open(table, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["renderer", "fps_mean", "fps_std", "seconds_mean"])
        w.writerow(["tiled", report["tiled_fps_mean"], report["tiled_fps_std"],
                    report["tiled_seconds_mean"]])
        w.writerow(["naive", report["naive_fps_mean"], report["naive_fps_std"],
                    report["naive_seconds_mean"]])
    fig, ax = plt.subplots(figsize=(4.2, 3.4))
    ax.bar(["tiled", "naive"],
           [report["tiled_fps_mean"], report["naive_fps_mean"]],
           color=["tab:blue", "tab:gray"])
    ax.set_ylabel("frames / s")
    ax.set_title(f"{report['n_splats']} splats @ "
                 f"{report['width']}x{report['height']} "
                 f"(speedup {report['speedup']:.1f}x)")
    fig.tight_layout()
    path = os.path.join(out_dir, "bench_fps.png")
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return [table, path]
