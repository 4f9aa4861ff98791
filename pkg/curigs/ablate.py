#!/usr/bin/env python3
#
# Paired runs with and without the student curriculum
#
# October 2026

import json
import os

import click
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from .evaluate import evaluate
from .pytools import ConfigError
from .training import TrainingDiverged, run

ARMS = (("Full", True), ("w/o Cur.", False))
METRICS = ["psnr", "ssim", "perc-proxy"]


@click.command(name="ablate")
@click.option("--data", "-d", type=click.Path(), required=True, help="Dataset folder.")
@click.option("--config", "-c", type=click.Path(), help="Training parameters.")
@click.option(
    "--views",
    type=click.IntRange(min=1),
    multiple=True,
    default=[3],
    show_default=True,
    help="Teacher view count (repeatable).",
)
@click.option(
    "--seed",
    type=int,
    multiple=True,
    default=[0],
    show_default=True,
    help="Random seed (repeatable, results are averaged).",
)
@click.option("--out", "-o", type=click.Path(), default="ablation", show_default=True)
def CLI_ablate(data, config, views, seed, out):
    """Trains with and without curriculum and compares held-out metrics.

    Each arm shares the dataset and seeds. Outputs ablation.csv (two rows per
    view count), curves.csv, curves.png and summary.json in OUT.
    """
    try:
        ablate(data, out, views, seed, config)
    except (ConfigError, TrainingDiverged, OSError, ValueError, KeyError) as err:
        print(f"ERROR: {err}")
        raise SystemExit(1)


def running_gap(curve):
    """Final value, running maximum and their difference of a metric curve."""
    curve = np.asarray(curve, dtype=float)
    final, best = float(curve[-1]), float(np.max(curve))
    return dict(final=final, running_max=best, drop=best - final)


def ablate(data, out, views=(3,), seeds=(0,), config=None, verbose=True):
    os.makedirs(out, exist_ok=True)
    rows, curves, summary = [], [], []

    for n in views:
        for arm, curriculum in ARMS:
            scores = []
            for seed in seeds:
                run_dir = os.path.join(out, f"{'full' if curriculum else 'nocur'}_v{n}_s{seed}")
                print(f"Ablation arm '{arm}', {n} views, seed {seed}.")
                result = run(
                    data, run_dir, config, views=n, curriculum=curriculum, seed=seed,
                    verbose=verbose,
                )
                table = evaluate(
                    os.path.join(run_dir, "ckpt_final.hdf5"), data, run_dir,
                    use_masks=bool(result.params["use_masks"]),
                )
                scores.append(table[table.view_id == "mean"][METRICS].iloc[0])

                mean = result.metrics[result.metrics.view_id == "mean"]
                curve = mean[["iteration", *METRICS]].copy()
                curve.insert(0, "seed", seed)
                curve.insert(0, "arm", arm)
                curve.insert(0, "views", n)
                curves.append(curve)
                if len(curve):
                    summary.append(
                        dict(views=n, arm=arm, seed=seed, **running_gap(curve["psnr"]))
                    )
            mean_scores = pd.DataFrame(scores).mean()
            rows.append(dict(views=n, arm=arm, **mean_scores.to_dict()))

    table = pd.DataFrame(rows, columns=["views", "arm", *METRICS])
    curves = pd.concat(curves, ignore_index=True) if curves else pd.DataFrame()
    table.to_csv(os.path.join(out, "ablation.csv"), index=False)
    curves.to_csv(os.path.join(out, "curves.csv"), index=False)
    with open(os.path.join(out, "summary.json"), "w") as f:
        json.dump(dict(table=rows, curves=summary), f, indent=1)
    if len(curves):
        plot_curves(curves, os.path.join(out, "curves.png"))

    print(table.to_string(index=False, float_format="%.4f"))
    return table, curves, summary


def plot_curves(curves, filename):
    fig, axes = plt.subplots(1, len(METRICS), figsize=(4 * len(METRICS), 3.2))
    for (n, arm), group in curves.groupby(["views", "arm"], sort=False):
        mean = group.groupby("iteration")[METRICS].mean()
        for ax, metric in zip(axes, METRICS):
            ax.plot(mean.index, mean[metric], label=f"{arm} ({n} views)")
    for ax, metric in zip(axes, METRICS):
        ax.set_xlabel("iteration")
        ax.set_title(metric)
    axes[0].legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(filename, dpi=100)
    plt.close(fig)
