import os
from setuptools import setup, find_packages

version = "v0.0.0"

setup(
    name="sparsetrain",
    version=os.environ.get("SPTR_VER", version).lstrip("v"),
    description="Dynamic sparse reparameterization training engine with static and dynamic baselines",
    long_description=open("README.md", encoding="utf8").read(),
    long_description_content_type="text/markdown",
    packages=find_packages(include=["SparseTrain", "SparseTrain.*", "tools", "tools.*"]),
    package_data={
        "SparseTrain.res": ["md5_map.json", "presets/*.json"],
    },
    license="AGPLv3+",
    install_requires=[
        "matplotlib",
        "numba",
        "numpy<2.0.0",
        "requests",
        "torch>=2.1.0",
        "tqdm",
    ],
    extras_require={
        "test": ["hypothesis"],
    },
    entry_points={
        "console_scripts": ["sparsetrain=SparseTrain.cli:main"],
    },
    platforms="any",
    classifiers=[
        "Programming Language :: Python :: 3",
        "Operating System :: OS Independent",
        "License :: OSI Approved :: GNU Affero General Public License v3 or later (AGPLv3+)",
    ],
)
