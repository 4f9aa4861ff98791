#!/usr/bin/env python3
#
# Library of useful functions related to image, depth and parameter files
#
# Images are kept in linear RGB in memory and sRGB encoded on disk.
#
# October 2026

import os as _os
from copy import deepcopy as _clone

import numpy as _np
import yaml as _yaml
from PIL import Image as _Image

import curigs


class ConfigError(ValueError):
    pass


def example_path(*names):
    """Path to a file of the `Example` folder shipped next to the package."""
    curigspath = _os.path.dirname(curigs.__path__[0])
    return _os.path.join(curigspath, "Example", *names)


def linear_to_srgb(x):
    x = _np.clip(x, 0.0, 1.0)
    return _np.where(x <= 0.0031308, 12.92 * x, 1.055 * x ** (1 / 2.4) - 0.055)


def srgb_to_linear(x):
    x = _np.asarray(x, dtype=float)
    return _np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def to_uint8(img):
    """Encode a linear image to 8-bit sRGB."""
    return _np.round(linear_to_srgb(img) * 255).astype(_np.uint8)


def from_uint8(data):
    """Decode 8-bit sRGB to linear floats."""
    return srgb_to_linear(_np.asarray(data, dtype=float) / 255.0)


def quantize(img):
    """Round-trip a linear image through its 8-bit sRGB encoding.

    Renders compared against references read from PNG files go through
    this so both sides carry the same quantization."""
    return from_uint8(to_uint8(img))


def save_png(filename, img):
    """Saves a linear RGB image as an 8-bit sRGB PNG file."""
    _Image.fromarray(to_uint8(img)).save(filename)


def load_png(filename):
    """Loads a PNG file as a linear RGB float image (H, W, 3)."""
    with _Image.open(filename) as im:
        data = _np.array(im.convert("RGB"))
    return from_uint8(data)


def save_mask(filename, mask):
    """Saves a binary map as a grayscale PNG (255 where True)."""
    data = _np.where(_np.asarray(mask, dtype=bool), 255, 0).astype(_np.uint8)
    _Image.fromarray(data).save(filename)


def load_mask(filename):
    with _Image.open(filename) as im:
        data = _np.array(im.convert("L"))
    return data >= 128


def save_pfm(filename, data):
    """Saves a single channel or RGB array as a little-endian PFM file.

    Data is stored as 32-bit floats, rows from bottom to top."""
    data = _np.asarray(data, dtype=_np.float32)
    if data.ndim == 2:
        kind = "Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        kind = "PF"
    else:
        raise ValueError(f"Can't store an array of shape {data.shape} as PFM.")

    head = f"{kind}\n{data.shape[1]} {data.shape[0]}\n-1.0\n"
    with open(filename, "wb") as f:
        f.write(head.encode("ascii"))
        _np.flipud(data).astype("<f4").tofile(f)


def load_pfm(filename):
    """Loads a PFM file.

    Returns a float32 array of shape (H, W) or (H, W, 3)."""
    with open(filename, "rb") as f:
        kind = f.readline().decode("ascii").strip()
        width, height = map(int, f.readline().decode("ascii").split())
        scale = float(f.readline().decode("ascii").strip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = _np.fromfile(f, dtype=dtype)

    if kind == "PF":
        shape = (height, width, 3)
    elif kind == "Pf":
        shape = (height, width)
    else:
        raise ValueError(f"{filename} is not a PFM file.")
    return _np.flipud(data.reshape(shape)).astype(_np.float32)


def merge_params(base, update):
    """Recursively overlays `update` on a copy of `base`."""
    merged = _clone(base)
    for key, val in update.items():
        if isinstance(val, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_params(merged[key], val)
        else:
            merged[key] = _clone(val)
    return merged


def load_params(filename=None, overrides=None):
    """Loads the training parameters.

    The packaged defaults of `Example/train_params.in` are overlaid with the
    curriculum preset named by the user file (if any), then with the user
    file itself and finally with `overrides`. YAML being a superset of JSON,
    JSON parameter files are accepted as well."""
    with open(example_path("train_params.in")) as f:
        params = _yaml.safe_load(f)

    user = dict()
    if filename is not None:
        with open(filename) as f:
            user = _yaml.safe_load(f) or dict()
        if not isinstance(user, dict):
            raise ConfigError(f"{filename} does not hold a mapping.")

    if overrides:
        user = merge_params(user, overrides)

    unknown = set(user) - set(params)
    if unknown:
        raise ConfigError("Unknown parameter(s): " + ", ".join(sorted(unknown)))

    name = user.get("preset", params.get("preset"))
    if name is not None:
        from curigs.curriculum import preset

        try:
            params = merge_params(params, preset(name))
        except KeyError as err:
            raise ConfigError(f"Unknown preset '{name}'.") from err

    return merge_params(params, user)


def version_string():
    """`git describe` of the source tree, or the package version outside git."""
    try:
        import git
    except ImportError:
        return f"curigs-{curigs.__version__}"

    try:
        repo = git.Repo(curigs.__path__[0], search_parent_directories=True)
        return repo.git.describe("--always", "--dirty", "--tags")
    except (git.InvalidGitRepositoryError, git.NoSuchPathError, git.GitCommandError):
        return f"curigs-{curigs.__version__}"
