import os
import json
from typing import Any, Dict, List, Optional

from .log import logger

RUN_FILES = ("config.json", "epochs.csv", "realloc.csv", "init.ckpt", "final.ckpt", "summary.json")


def latest_checkpoint(run_dir: str) -> Optional[str]:
    ckpts = [f for f in os.listdir(run_dir) if f.endswith(".ckpt") and f != "init.ckpt"]
    if not ckpts:
        logger.get_logger().warning(f"no checkpoint found in {run_dir}")
        return None
    return max((os.path.join(run_dir, f) for f in ckpts), key=os.path.getmtime)


def make_run_dir(root: str, name: str) -> str:
    path = os.path.join(root, name)
    os.makedirs(path, exist_ok=True)
    return path


def write_json(path: str, obj: Any):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
    os.replace(tmp, path)


def read_json(path: str) -> Dict[str, Any]:
    with open(path, encoding="utf8") as f:
        return json.load(f)


def resolve_runs(ids: List[str], root: str) -> List[str]:
    """Run ids are directory paths or names under `root`; both must hold a summary.json."""
    out = []
    for i in ids:
        path = i if os.path.isdir(i) else os.path.join(root, i)
        if not os.path.exists(os.path.join(path, "summary.json")):
            raise FileNotFoundError(f"run {i!r} has no summary.json (looked in {path})")
        out.append(path)
    return out
