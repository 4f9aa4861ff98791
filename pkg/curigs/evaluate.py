#!/usr/bin/env python3
#
# Held-out evaluation and rendering of checkpoints
#
# The perceptual column is the built-in gradient-magnitude proxy and is
# reported as "perc-proxy".
#
# October 2026

import os
from functools import partial

import click
import numpy as np
import pandas as pd
from progressbar import progressbar

from . import GaussianCloud as GC
from .CameraPose import load_cameras
from .metrics import TooSmall, builtin_perceptual, psnr, ssim
from .pytools import quantize, save_pfm, save_png
from .rasterizer import render
from .synthetic import load_dataset

progress = partial(progressbar, redirect_stdout=True)

COLUMNS = ["view_id", "psnr", "ssim", "perc-proxy"]


def score_view(image, reference, mask=None):
    if mask is not None:
        image = image * mask[..., None]
        reference = reference * mask[..., None]
    try:
        s = ssim(image, reference)
    except TooSmall:
        s = np.nan
    return dict(
        psnr=psnr(image, reference, mask),
        ssim=s,
        **{"perc-proxy": builtin_perceptual(image, reference)},
    )


def score_views(cloud, cameras, references, masks=None, quantized=True):
    """Per-view PSNR, SSIM and perceptual proxy followed by a `mean` row.

    Renders are quantized to 8 bits like the references read from PNG."""
    rows = []
    for cam in cameras:
        image = render(cloud, cam).color
        if quantized:
            image = quantize(image)
        mask = None if masks is None else masks.get(cam.id)
        rows.append(dict(view_id=cam.id, **score_view(image, references[cam.id], mask)))
    table = pd.DataFrame(rows, columns=COLUMNS)
    mean = table[COLUMNS[1:]].mean()
    table.loc[len(table)] = ["mean", *mean.values]
    return table


@click.command(name="eval")
@click.argument("checkpoint", type=click.Path())
@click.option("--data", "-d", type=click.Path(), required=True, help="Dataset folder.")
@click.option("--out", "-o", type=click.Path(), help="Folder receiving eval.csv.")
@click.option("--no-masks", is_flag=True, help="Ignore the foreground masks.")
@click.option(
    "--split",
    type=click.Choice(["test", "train"]),
    default="test",
    show_default=True,
    help="Views to evaluate.",
)
def CLI_eval(checkpoint, data, out, no_masks, split):
    """Evaluates a checkpoint on the held-out views of a dataset.

    Reports PSNR, SSIM and the perceptual proxy per view and on average.
    Masks are applied when the dataset provides them.
    """
    try:
        evaluate(checkpoint, data, out, use_masks=not no_masks, split=split)
    except (OSError, ValueError, KeyError) as err:
        print(f"ERROR: {err}")
        raise SystemExit(1)


def evaluate(checkpoint, data, out=None, use_masks=True, split="test"):
    if not os.path.isfile(checkpoint):
        raise FileNotFoundError(f"Checkpoint '{checkpoint}' not found.")
    if not os.path.isdir(data):
        raise FileNotFoundError(f"Dataset '{data}' not found.")

    cloud = GC.Open(checkpoint)
    scene = load_dataset(data)
    ids = scene.split[split]
    if not ids:
        raise ValueError(f"The {split} split of '{data}' is empty.")

    cameras = [scene.camera(i) for i in ids]
    masks = scene.masks if (use_masks and scene.masks) else None
    table = score_views(cloud, progress(cameras), scene.images, masks)

    label = "masked" if masks is not None else "unmasked"
    print(f"Evaluation of {checkpoint} on {len(ids)} {split} views ({label}):")
    print(table.to_string(index=False, float_format="%.4f"))
    if out is not None:
        os.makedirs(out, exist_ok=True)
        table.to_csv(os.path.join(out, "eval.csv"), index=False)
    return table


@click.command(name="render")
@click.argument("checkpoint", type=click.Path())
@click.option("--data", "-d", type=click.Path(), help="Dataset folder.")
@click.option("--cameras", "-c", type=click.Path(), help="Camera file (JSON).")
@click.option("--out", "-o", type=click.Path(), default="renders", show_default=True)
def CLI_render(checkpoint, data, cameras, out):
    """Renders a checkpoint from every camera of a dataset or camera file.

    Writes <id>.png (color) and <id>.pfm (expected depth) in OUT.
    """
    if (data is None) == (cameras is None):
        raise click.UsageError("Give exactly one of --data and --cameras.")
    try:
        render_cameras(checkpoint, out, data=data, cameras=cameras)
    except (OSError, ValueError, KeyError) as err:
        print(f"ERROR: {err}")
        raise SystemExit(1)


def render_cameras(checkpoint, out, data=None, cameras=None):
    if not os.path.isfile(checkpoint):
        raise FileNotFoundError(f"Checkpoint '{checkpoint}' not found.")
    cloud = GC.Open(checkpoint)
    if data is not None:
        cams = load_cameras(os.path.join(data, "cameras.json"))
    else:
        cams = load_cameras(cameras)

    os.makedirs(out, exist_ok=True)
    for cam in progress(cams):
        write_render(render(cloud, cam), out, cam.id)
    print(f"{len(cams)} views rendered in '{out}'.")


def write_render(output, folder, name):
    save_png(os.path.join(folder, f"{name}.png"), output.color)
    save_pfm(os.path.join(folder, f"{name}.pfm"), output.depth)
