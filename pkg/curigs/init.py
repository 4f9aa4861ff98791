#!/usr/bin/env python3

import os
import shutil
from glob import glob

import click

from .pytools import example_path


@click.command(name="init")
@click.option("--force", is_flag=True, help="Overwrite existing parameter files.")
def CLI_init(force):
    """Initialize an execution folder.

    Copies the example parameter files (train_params.in, synth_params.in)
    in the current directory.
    """
    init(force=force)


def init(folder=".", force=False):
    print("Initializing CuriGS execution folder.")
    copied = []
    for filename in sorted(glob(example_path("*.in"))):
        target = os.path.join(folder, os.path.basename(filename))
        if os.path.exists(target) and not force:
            print(f"WARNING: '{target}' exists, left untouched.")
            continue
        shutil.copy2(filename, target)
        copied.append(target)
    return copied
