#!/usr/bin/env python3

from importlib import import_module

import click

import curigs


@click.group()
@click.version_option(curigs.__version__, prog_name="CuriGS")
def curigs():
    r"""Curriculum-guided sparse-view Gaussian splatting.

    See 'curigs COMMAND --help' to read about specific subcommand.

    Below is detailed the typical use case:

    1. init -- Copy the example parameter files in the working folder.

    2. synth -- Generate a synthetic dataset once the desired values are set
    in `synth_params.in` (or given as options).

    3. train -- Train on a dataset with the parameters of `train_params.in`.
    `--views` keeps a sparse subset of the training views.

    4. eval -- Evaluate a checkpoint on the held-out views.

    5. render -- (Optional) Render a checkpoint from a set of cameras.

    The curriculum can be assessed with `ablate`, which trains with and
    without it and compares the held-out metrics.
    """
    pass  # Entry point


functions = (
    (".ablate", "CLI_ablate"),
    (".evaluate", "CLI_eval"),
    (".evaluate", "CLI_render"),
    (".init", "CLI_init"),
    (".synthetic", "CLI_synth"),
    (".training", "CLI_train"),
)

for module_name, method in functions:
    module = import_module(module_name, package="curigs")
    curigs.add_command(getattr(module, method))
