#!/usr/bin/env python3

from setuptools import setup

with open("curigs/__init__.py") as f:
    info = {}
    for line in f:
        if line.startswith("__version__"):
            exec(line, info)
            break

setup(
    name="curigs",
    version=info["__version__"],
    packages=["curigs"],
    python_requires=">=3.10",
    install_requires=[
        "Click",
        "GitPython",
        "h5py",
        "matplotlib",
        "numpy",
        "pandas",
        "pillow",
        "progressbar2",
        "pyyaml",
        "scipy<1.14",
    ],
    extras_require={
        "dev": [
            "black",
            "flake8",
            "hypothesis",
            "ipython",
            "isort",
            "pytest",
        ],
    },
    entry_points="""
        [console_scripts]
        curigs=curigs.main:curigs
    """,
)
