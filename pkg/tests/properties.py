import os, sys

now_dir = os.getcwd()
sys.path.append(now_dir)

import logging
from fractions import Fraction

import torch
from hypothesis import given, settings, strategies as st

from SparseTrain.config import ReallocConfig, fit_schedule
from SparseTrain.config.config import check_schedule
from SparseTrain.model import MaskedTensor, ReallocState, apportion, hash_indices, prune_to_sparsity, realloc_step
from SparseTrain.model.realloc import growth_counts
from SparseTrain.verify import _int_apportion
from tools.logger import get_logger

logger = get_logger("Test", lv=logging.WARN)

failures = []


def check(name):
    def wrap(fn):
        def run():
            try:
                fn()
            except AssertionError as e:
                logger.warning("%s: %s", name, e)
                failures.append(name)

        return run

    return wrap


@check("apportion")
@settings(max_examples=300, deadline=None)
@given(st.integers(0, 500), st.lists(st.integers(0, 1000), min_size=1, max_size=8))
def apportion_sums_and_stays_close(total, weights):
    shares = apportion(total, weights)
    assert shares == _int_apportion(total, weights), "fraction and integer forms disagree"
    if sum(weights) == 0:
        assert shares == [0] * len(weights)
        return
    assert sum(shares) == total, f"{shares} does not sum to {total}"
    for s, w in zip(shares, weights):
        assert abs(Fraction(s) - Fraction(total * w, sum(weights))) < 1, f"share {s} too far from its quota"
        assert s >= 0


@check("growth_counts")
@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 50), st.integers(0, 50)), min_size=1, max_size=6), st.data())
def growth_respects_capacity(rows, data):
    surviving = [r for r, _ in rows]
    capacity = [c for _, c in rows]
    K = data.draw(st.integers(0, sum(capacity)))
    G, _ = growth_counts(surviving, capacity, K)
    assert sum(G) == K
    assert all(0 <= g <= c for g, c in zip(G, capacity)), f"{G} exceeds {capacity}"


@st.composite
def masked_sets(draw):
    tensors = []
    for _ in range(draw(st.integers(1, 3))):
        n = draw(st.integers(1, 30))
        mask = draw(st.lists(st.booleans(), min_size=n, max_size=n))
        vals = draw(st.lists(st.floats(-1, 1, allow_nan=False), min_size=n, max_size=n))
        t = MaskedTensor(torch.tensor(vals, dtype=torch.float64), torch.tensor(mask))
        tensors.append(t.apply_mask())
    return tensors


@check("realloc_step")
@settings(max_examples=200, deadline=None)
@given(masked_sets(), st.floats(0.0, 1.0), st.integers(1, 40), st.integers(0, 2**31 - 1))
def realloc_conserves(tensors, H, n_prune, seed):
    before = sum(t.active_count for t in tensors)
    kept = [t.values.abs() >= H for t in tensors]
    _, state, report = realloc_step(tensors, ReallocState(H), ReallocConfig(n_prune=n_prune), seed)
    assert sum(t.active_count for t in tensors) == before, "active count changed"
    assert report.K == report.G
    assert state.H in (H, 2 * H, H / 2)
    for t, k in zip(tensors, kept):
        t.check()
        # surviving entries keep their values, new entries are zero
        survived = t.mask & k
        assert bool((t.values[t.mask & ~k] == 0).all())
        assert bool((t.values[survived].abs() >= H).all())


@check("prune_to_sparsity")
@settings(max_examples=200, deadline=None)
@given(masked_sets(), st.floats(0.0, 0.99))
def prune_hits_target(tensors, target):
    for t in tensors:
        t.mask.fill_(True)
    n = sum(t.numel for t in tensors)
    prune_to_sparsity(tensors, target)
    keep = sum(t.active_count for t in tensors)
    assert abs(keep - (1 - target) * n) <= 0.5 + 1e-9, f"{keep} active of {n} at target {target}"


@check("hash_indices")
@settings(max_examples=100, deadline=None)
@given(st.integers(1, 300), st.data(), st.integers(0, 2**32))
def hash_in_range(n, data, seed):
    m = data.draw(st.integers(1, n))
    idx = hash_indices(n, m, seed)
    assert len(idx) == n and idx.min() >= 0 and idx.max() < m
    if m == n:
        assert sorted(idx.tolist()) == list(range(n))


@check("fit_schedule")
@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 30), min_size=1, max_size=5), st.integers(1, 200))
def fitted_schedules_tile(lengths, epochs):
    rows, first = [], 1
    for i, ln in enumerate(lengths):
        rows.append([first, first + ln - 1, float(i)])
        first += ln
    fitted = fit_schedule(rows, epochs)
    assert check_schedule(fitted, epochs, "fitted") == [], f"{fitted} does not tile {epochs}"


for test in (
    apportion_sums_and_stays_close,
    growth_respects_capacity,
    realloc_conserves,
    prune_hits_target,
    hash_in_range,
    fitted_schedules_tile,
):
    test()

if failures:
    sys.exit(1)
