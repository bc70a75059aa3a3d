import os, sys

now_dir = os.getcwd()
sys.path.append(now_dir)

import logging

import torch

from SparseTrain.config import ReallocConfig
from SparseTrain.model import (
    MaskedTensor,
    ReallocState,
    adjust_threshold,
    apportion,
    prune_by_threshold,
    realloc_step,
    realloc_step_structured,
)
from SparseTrain.model.realloc import growth_counts
from SparseTrain.verify import conservation_suite, oracle_suite, setpoint_suite, zero_growth_suite
from tools.logger import get_logger

logger = get_logger("Test", lv=logging.WARN)

fail = False


def masked(values, mask):
    return MaskedTensor(torch.tensor(values, dtype=torch.float64), torch.tensor(mask))


for total, weights, want in (
    (10, [1, 1, 1], [4, 3, 3]),
    (5, [1, 1], [2, 3]),
    (7, [0, 5, 0], [0, 7, 0]),
    (0, [3, 4], [0, 0]),
    (3, [0, 0], [0, 0]),
    (4, [1, 1, 1, 1, 1, 1], [0, 0, 1, 1, 1, 1]),
):
    got = apportion(total, weights)
    if got != want:
        logger.warning("apportion(%d, %s) = %s, want %s", total, weights, got, want)
        fail = True

# pruning is strictly below the threshold
t = masked([0.5, -0.1, 0.2, 0.0, 0.05], [True, True, True, False, True])
k, idx = prune_by_threshold(t, 0.2)
if k != 2 or idx.tolist() != [1, 4] or t.mask.tolist() != [True, False, True, False, False]:
    logger.warning("prune_by_threshold removed %s, mask %s", idx.tolist(), t.mask.tolist())
    fail = True
try:
    prune_by_threshold(t, -1.0)
    logger.warning("negative threshold accepted")
    fail = True
except ValueError:
    pass

cfg = ReallocConfig(n_prune=100, tolerance=0.1)
for K, want in ((89, 0.02), (90, 0.01), (110, 0.01), (111, 0.005)):
    if adjust_threshold(0.01, K, cfg) != want:
        logger.warning("adjust_threshold(0.01, %d) != %s", K, want)
        fail = True

# surplus growth past a tensor's free room moves to the others
G, excess = growth_counts([9, 1], [2, 10], 6)
if G != [2, 4] or excess != 3:
    logger.warning("overflow redistribution gave %s (excess %d)", G, excess)
    fail = True

# regrowth never lands on just-pruned positions while other room exists
a = masked([0.001, 0.5, 0.0, 0.0], [True, True, False, False])
b = masked([0.3, 0.0], [True, False])
_, state, report = realloc_step([a, b], ReallocState(0.01), cfg, 0)
if report.K != 1 or a.mask[0] or a.active_count + b.active_count != 3:
    logger.warning("growth reused a pruned slot or lost an entry: %s %s", a.mask.tolist(), b.mask.tolist())
    fail = True
if report.G != report.K or state.step != 1 or state.H != 0.02:
    logger.warning("step report %s, state H %s", report, state.H)
    fail = True
if a.values[a.mask].abs().min() != 0.0 and b.values[b.mask].abs().min() != 0.0:
    logger.warning("grown entry is not zero-initialized")
    fail = True

# a fully dense set can only regrow where it pruned
full = masked([0.001, 0.5, 0.002], [True, True, True])
realloc_step([full], ReallocState(0.01), cfg, 0)
if full.active_count != 3 or full.values.tolist() != [0.0, 0.5, 0.0]:
    logger.warning("dense tensor did not refill its pruned slots: %s", full.values.tolist())
    fail = True

# every tensor emptied: regrowth follows free capacity
c = masked([0.001, 0.0, 0.0, 0.0], [True, False, False, False])
d = masked([0.001, 0.0], [True, False])
_, _, report = realloc_step([c, d], ReallocState(0.01), cfg, 0)
if sum(report.grown) != 2 or c.active_count + d.active_count != 2:
    logger.warning("all-pruned step grew %s", report.grown)
    fail = True

k3 = MaskedTensor(torch.zeros((2, 2, 3, 3), dtype=torch.float64), torch.zeros((2, 2, 3, 3), dtype=torch.bool))
k3.mask[0, 0] = True
k3.mask[1, 1] = True
k3.values[0, 0] = 0.001
k3.values[1, 1] = 1.0
_, _, report = realloc_step_structured([k3], ReallocState(0.05), cfg, 0)
groups = k3.mask.view(-1, 9)
if report.K != 1 or int(groups.all(1).sum()) != 2 or bool((groups.any(1) & ~groups.all(1)).any()):
    logger.warning("kernel step broke kernel structure: %s", groups.any(1).tolist())
    fail = True
try:
    realloc_step_structured([masked([0.1], [True])], ReallocState(0.05), cfg, 0)
    logger.warning("kernel step accepted a non-conv tensor")
    fail = True
except ValueError:
    pass

for suite in (
    lambda: oracle_suite(instances=60),
    lambda: conservation_suite(steps=200),
    setpoint_suite,
    zero_growth_suite,
):
    r = suite()
    if not r.passed:
        logger.warning("%s", r)
        fail = True

# survivors pull new weights: the tensor whose weights all survive gains active entries
strong = masked([1.0] * 5 + [0.0] * 5, [True] * 5 + [False] * 5)
weak = masked([1.0, 1.0, 0.001, 0.001, 0.001] + [0.0] * 5, [True] * 5 + [False] * 5)
_, _, report = realloc_step([strong, weak], ReallocState(0.01), ReallocConfig(n_prune=3), 0)
if (strong.active_count, weak.active_count) != (7, 3) or report.grown != [2, 1]:
    logger.warning("layer counts after reallocation %d / %d, grown %s", strong.active_count, weak.active_count, report.grown)
    fail = True

if fail:
    sys.exit(1)
