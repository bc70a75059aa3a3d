import os, sys

now_dir = os.getcwd()
sys.path.append(now_dir)

import logging
import statistics

from SparseTrain import Trainer
from SparseTrain.config import load_preset
from SparseTrain.dataset import has_mnist
from tools.logger import get_logger

logger = get_logger("Test", lv=logging.WARN)

# SPARSETRAIN_FULL_ACCEPTANCE=1 runs three seeds for 100 epochs; the default is one 25-epoch seed
full = os.environ.get("SPARSETRAIN_FULL_ACCEPTANCE", "") == "1"

base = load_preset("lenet300_mnist")
folder = base.data.resolved_dir()
if not has_mnist(folder):
    logger.warning("no MNIST files in %s, skipping the acceptance run", folder)
    sys.exit(0)

base.data.download = False
base.train.show_tqdm = False
if not full:
    base = base.with_epochs(25)
seeds = (0, 1, 2) if full else (0,)
out_dir = os.environ.get("SPARSETRAIN_ACCEPTANCE_DIR") or None

trainer = Trainer(get_logger("SparseTrain", lv=logging.WARN))
fail = False


def accuracy(method: str, sparsity: float) -> list:
    runs = []
    for seed in seeds:
        cfg = base.with_method(method)
        cfg.seed = seed
        cfg.sparsity = sparsity
        runs.append(trainer.train(cfg.validate(), out_dir).summary)
    return runs


dyn = accuracy("dynamic_sparse", 0.95)
acc = {
    "dynamic_sparse": statistics.mean(s["test_acc"] for s in dyn),
    "set": statistics.mean(s["test_acc"] for s in accuracy("set", 0.95)),
    "static_sparse": statistics.mean(s["test_acc"] for s in accuracy("static_sparse", 0.95)),
}
logger.warning("s=0.95 mean test accuracy: %s", acc)
if not acc["dynamic_sparse"] >= acc["set"] >= acc["static_sparse"]:
    logger.warning("ordering dynamic >= set >= static does not hold")
    fail = True
if full and acc["dynamic_sparse"] < acc["static_sparse"] + 0.003:
    logger.warning("dynamic sparse is not 0.3 points above static sparse")
    fail = True

# the classifier ends up denser than both hidden layers
denser_top = 0
for s in dyn:
    t = s["tensors"]
    top = 1 - t["fc3.weight"]["active"] / t["fc3.weight"]["numel"]
    hidden = [1 - t[n]["active"] / t[n]["numel"] for n in ("fc1.weight", "fc2.weight")]
    denser_top += top < min(hidden)
if denser_top < (2 if full else 1):
    logger.warning("classifier is not the least sparse layer in enough runs (%d)", denser_top)
    fail = True

extreme = statistics.mean(s["test_acc"] for s in accuracy("dynamic_sparse", 0.99))
floor = 0.90 if full else 0.85
if extreme < floor:
    logger.warning("dynamic sparse at s=0.99 reached %.4f, below %.2f", extreme, floor)
    fail = True
if full:
    static = statistics.mean(s["test_acc"] for s in accuracy("static_sparse", 0.99))
    if extreme < static + 0.02:
        logger.warning("static sparse at s=0.99 (%.4f) does not trail dynamic (%.4f) by 2 points", static, extreme)
        fail = True

if fail:
    sys.exit(1)
