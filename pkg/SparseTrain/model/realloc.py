import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from .sparse import MaskedTensor, group_size
from ..utils.log import logger
from ..utils.rng import generator_from


@dataclass(repr=False, eq=False)
class ReallocState:
    H: float
    step: int = 0


@dataclass(repr=False, eq=False)
class StepReport:
    step: int = 0
    pruned: List[int] = field(default_factory=list)
    surviving: List[int] = field(default_factory=list)
    grown: List[int] = field(default_factory=list)
    h_before: float = 0.0
    h_after: float = 0.0
    overflow_redistributed: int = 0
    granularity: str = "weight"

    @property
    def K(self) -> int:
        return sum(self.pruned)

    @property
    def R(self) -> int:
        return sum(self.surviving)

    @property
    def G(self) -> int:
        return sum(self.grown)

    def as_row(self, names: Sequence[str]) -> Dict[str, object]:
        row: Dict[str, object] = {
            "step": self.step,
            "H_before": self.h_before,
            "H_after": self.h_after,
            "K": self.K,
            "R": self.R,
            "G": self.G,
            "overflow": self.overflow_redistributed,
        }
        for name, k, g in zip(names, self.pruned, self.grown):
            row[f"K_{name}"] = k
            row[f"G_{name}"] = g
        return row

    def __repr__(self) -> str:
        return (
            f"StepReport(step={self.step}, K={self.pruned}, R={self.surviving}, G={self.grown}, "
            f"H={self.h_before:g}->{self.h_after:g}, overflow={self.overflow_redistributed})"
        )


def round_half_up_fraction(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def apportion(total: int, weights: Sequence[int]) -> List[int]:
    """
    Split the integer `total` proportionally to `weights`.

    Each share is round-half-up of total * w_l / sum(w); the sum is then fixed
    to `total` by largest-remainder correction, ties going to the lowest index,
    so every share stays within 1 of its exact value.
    """
    if total < 0:
        raise ValueError(f"cannot apportion a negative total {total}")
    denom = sum(weights)
    if total == 0 or denom == 0:
        return [0] * len(weights)
    exact = [Fraction(total * w, denom) for w in weights]
    shares = [round_half_up_fraction(x) for x in exact]
    diff = total - sum(shares)
    if diff > 0:
        order = sorted(range(len(shares)), key=lambda i: (-(exact[i] - shares[i]), i))
        for i in order[:diff]:
            shares[i] += 1
    elif diff < 0:
        order = sorted(
            (i for i in range(len(shares)) if shares[i] > 0),
            key=lambda i: (exact[i] - shares[i], i),
        )
        for i in order[:-diff]:
            shares[i] -= 1
    return shares


def _groups(t: MaskedTensor, gs: int) -> int:
    return t.numel // gs


def _group_active(t: MaskedTensor, gs: int) -> torch.Tensor:
    return t.mask.view(-1, gs)[:, 0]


def _group_magnitude(t: MaskedTensor, gs: int) -> torch.Tensor:
    return t.values.view(-1, gs).abs().sum(1)


def _expand(groups: torch.Tensor, gs: int) -> torch.Tensor:
    if gs == 1:
        return groups
    return (groups.unsqueeze(1) * gs + torch.arange(gs)).view(-1)


def prune_by_threshold(
    t: MaskedTensor, H: float, granularity: str = "weight"
) -> Tuple[int, torch.Tensor]:
    """
    Deactivate every active position (or 3x3 kernel, compared by L1 norm)
    whose magnitude is strictly below `H`. Returns the count removed and the
    removed flat group indices in ascending order.
    """
    if H < 0:
        raise ValueError(f"threshold must be >= 0, got {H}")
    gs = group_size(granularity)
    active = _group_active(t, gs)
    below = active & (_group_magnitude(t, gs) < H)
    pruned = below.nonzero().view(-1)
    if len(pruned):
        t.deactivate(_expand(pruned, gs))
    return len(pruned), pruned


def adjust_threshold(H: float, K: int, cfg) -> float:
    if K < (1.0 - cfg.tolerance) * cfg.n_prune:
        return H * 2.0
    if K > (1.0 + cfg.tolerance) * cfg.n_prune:
        return H / 2.0
    return H


def growth_counts(
    surviving: Sequence[int],
    capacity: Sequence[int],
    K: int,
    names: Optional[Sequence[str]] = None,
) -> Tuple[List[int], int]:
    """
    Per-tensor growth counts G_l summing to exactly K, proportional to the
    surviving counts and clamped to each tensor's free capacity. The clamped
    excess is apportioned over the remaining room. Returns (G, excess).
    """
    log = logger.get_logger()
    assert sum(capacity) >= K, f"growth needs {K} free slots but only {sum(capacity)} exist"
    weights = list(surviving)
    if K and sum(weights) == 0:
        log.warning("every sparse tensor pruned to zero, regrowing in proportion to free capacity")
        weights = list(capacity)
    G = apportion(K, weights)
    excess = sum(max(0, g - c) for g, c in zip(G, capacity))
    if excess:
        G = [min(g, c) for g, c in zip(G, capacity)]
        room = [c - g for g, c in zip(G, capacity)]
        extra = apportion(excess, room)
        G = [g + e for g, e in zip(G, extra)]
        assert all(g <= c for g, c in zip(G, capacity)), "overflow redistribution exceeded capacity"
        if names is not None:
            log.debug("growth overflow: %d redistributed over %s", excess, list(names))
    assert sum(G) == K, f"grew {sum(G)} instead of {K}"
    return G, excess


def grow(
    tensors: Sequence[MaskedTensor],
    K: int,
    report: StepReport,
    generator,
    pruned: Optional[Sequence[torch.Tensor]] = None,
    granularity: str = "weight",
) -> List[MaskedTensor]:
    """
    Activate K zero-initialized positions (or kernels) across `tensors`,
    G_l = round(R_l / sum(R) * K) in tensor l, sampled uniformly from the
    positions that were inactive before this step's pruning. Just-pruned
    positions become eligible only when that pool is globally too small.
    """
    g = generator_from(generator)
    gs = group_size(granularity)
    if pruned is None:
        pruned = [torch.zeros(0, dtype=torch.long) for _ in tensors]
    surviving = [int(_group_active(t, gs).sum()) for t in tensors]
    report.surviving = surviving
    if not report.pruned:
        report.pruned = [len(p) for p in pruned]
    free = [_groups(t, gs) - r - len(p) for t, r, p in zip(tensors, surviving, pruned)]
    reuse = sum(free) < K
    capacity = [f + len(p) for f, p in zip(free, pruned)] if reuse else free
    if reuse:
        logger.get_logger().debug("growth pool short by %d, just-pruned positions re-enabled", K - sum(free))
    G, excess = growth_counts(surviving, capacity, K)
    report.grown = G
    report.overflow_redistributed = excess
    for t, gl, p in zip(tensors, G, pruned):
        if gl == 0:
            continue
        eligible = ~_group_active(t, gs)
        if not reuse and len(p):
            eligible = eligible.clone()
            eligible[p] = False
        cand = eligible.nonzero().view(-1)
        pick = cand[torch.randperm(len(cand), generator=g)[:gl]]
        t.activate(_expand(pick, gs))
    return list(tensors)


def realloc_step(
    tensors: Sequence[MaskedTensor],
    state: ReallocState,
    cfg,
    generator,
    names: Optional[Sequence[str]] = None,
    granularity: Optional[str] = None,
) -> Tuple[List[MaskedTensor], ReallocState, StepReport]:
    """
    One reallocation: prune every tensor against the global threshold H,
    adapt H from the pruned total K, then regrow exactly K zero-initialized
    positions across tensors in proportion to their survivors.
    """
    log = logger.get_logger()
    granularity = granularity or getattr(cfg, "granularity", "weight")
    gs = group_size(granularity)
    before = sum(int(_group_active(t, gs).sum()) for t in tensors)
    report = StepReport(step=state.step, h_before=state.H, granularity=granularity)
    pruned_idx = []
    for t in tensors:
        k, idx = prune_by_threshold(t, state.H, granularity)
        report.pruned.append(k)
        pruned_idx.append(idx)
    K = report.K
    H = adjust_threshold(state.H, K, cfg)
    grow(tensors, K, report, generator, pruned_idx, granularity)
    report.h_after = H
    after = sum(int(_group_active(t, gs).sum()) for t in tensors)
    assert after == before, f"active count changed from {before} to {after}"
    for i, r in enumerate(report.surviving):
        if r == 0 and report.grown[i] == 0:
            label = names[i] if names is not None else str(i)
            log.warning("sparse tensor %s has no active entries left", label)
    log.debug("%s", report)
    return list(tensors), ReallocState(H, state.step + 1), report


def realloc_step_structured(
    tensors: Sequence[MaskedTensor],
    state: ReallocState,
    cfg,
    generator,
    names: Optional[Sequence[str]] = None,
) -> Tuple[List[MaskedTensor], ReallocState, StepReport]:
    for i, t in enumerate(tensors):
        shape = t.dense_shape
        if len(shape) != 4 or shape[2:] != (3, 3):
            label = names[i] if names is not None else str(i)
            raise ValueError(f"kernel granularity needs 3x3 conv weights, tensor {label} has shape {shape}")
    return realloc_step(tensors, state, cfg, generator, names, granularity="kernel")
