import os
import json
import hashlib
from pathlib import Path
from typing import Dict, Optional
from mmap import mmap, ACCESS_READ

import requests

from .log import logger

MNIST_MIRROR = "https://ossci-datasets.s3.amazonaws.com/mnist/"

MNIST_FILES = (
    "train-images-idx3-ubyte.gz",
    "train-labels-idx1-ubyte.gz",
    "t10k-images-idx3-ubyte.gz",
    "t10k-labels-idx1-ubyte.gz",
)


def md5(fileno: int) -> str:
    if os.fstat(fileno).st_size == 0:
        return hashlib.md5(b"").hexdigest()
    data = mmap(fileno, 0, access=ACCESS_READ)
    h = hashlib.md5(data).hexdigest()
    del data
    return h


def load_md5_map(path: str) -> Dict[str, str]:
    with open(path, "r", encoding="utf8") as f:
        return json.load(f)


def check_file(dir_name: Path, file_name: str, hash: str, remove_incorrect=False) -> bool:
    target = Path(dir_name) / file_name
    relname = target.as_posix()
    logger.get_logger().debug(f"checking {relname}...")
    if not os.path.exists(target):
        logger.get_logger().info(f"{target} not exist.")
        return False
    with open(target, "rb") as f:
        digest = md5(f.fileno())
    if digest != hash:
        logger.get_logger().warning(f"{target} md5 hash mismatch.")
        logger.get_logger().info(f"expected: {hash}")
        logger.get_logger().info(f"real val: {digest}")
        if remove_incorrect:
            os.remove(str(target))
        return False
    return True


def download_file(url: str, target: Path) -> bool:
    logger.get_logger().info(f"downloading {url}")
    try:
        response = requests.get(url, stream=True, timeout=(5, 30))
        response.raise_for_status()
    except requests.RequestException as e:
        logger.get_logger().error(f"download of {url} failed: {e}")
        return False
    tmp = f"{target}.part"
    with open(tmp, "wb") as out_file:
        for chunk in response.iter_content(chunk_size=1 << 16):
            out_file.write(chunk)
    os.replace(tmp, target)
    logger.get_logger().info(f"downloaded into {target}")
    return True


def download_mnist(folder: str, md5_map: Dict[str, str], mirror: Optional[str] = None) -> bool:
    """
    Fetch the four gzipped MNIST IDX files into `folder`, skipping files that
    are already present with the expected digest. Returns False when any file
    could not be fetched or verified.
    """
    base = mirror or os.environ.get("SPARSETRAIN_MNIST_MIRROR", MNIST_MIRROR)
    folder_path = Path(folder)
    os.makedirs(folder_path, exist_ok=True)
    for name in MNIST_FILES:
        digest = md5_map[f"md5_mnist_{name.split('.')[0].replace('-', '_')}"]
        if check_file(folder_path, name, digest):
            continue
        if not download_file(base + name, folder_path / name):
            return False
        if not check_file(folder_path, name, digest, remove_incorrect=True):
            logger.get_logger().error(f"{name} does not match its recorded digest")
            return False
    logger.get_logger().info("all mnist files are present.")
    return True
