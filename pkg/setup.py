#!/usr/bin/env python3
"""
Setup script for DCML kinship
"""

from setuptools import setup, find_packages
from pathlib import Path

this_directory = Path(__file__).parent
readme = this_directory / "README.md"
long_description = readme.read_text(encoding="utf-8") if readme.exists() else ""

setup(
    name="dcml-kinship",
    version="1.0.0",
    description="Unsupervised kinship retrieval with de-aged and race-aware contrastive face embeddings",
    long_description=long_description,
    long_description_content_type="text/markdown",
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
    ],
    packages=find_packages(exclude=["tests", "examples", "examples.*"]),
    python_requires=">=3.8",
    install_requires=[
        "numpy>=1.21.0",
    ],
    entry_points={
        "console_scripts": [
            "dcml=src.dcml_main:main",
        ],
    },
    include_package_data=True,
    zip_safe=False,
)
