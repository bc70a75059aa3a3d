import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import torch

from .tensor import LayerSpec, NetworkSpec
from .sparse import MaskedTensor, round_half_up
from .realloc import apportion
from ..utils.log import logger
from ..utils.rng import generator_from


def set_step(
    tensors: Sequence[MaskedTensor],
    n_prune: int,
    generator,
    names: Optional[Sequence[str]] = None,
) -> List[int]:
    """
    Sparse evolutionary step: `n_prune` is split over tensors in proportion
    to their active counts; each tensor drops its k_l smallest-magnitude
    active weights and regrows k_l zero weights at random inactive positions
    of the same tensor. Per-tensor active counts never change. A tensor
    asked for more than it holds prunes all of its active weights.
    """
    g = generator_from(generator)
    counts = [t.active_count for t in tensors]
    ks = apportion(n_prune, counts)
    for i, (t, k) in enumerate(zip(tensors, ks)):
        room = counts[i]
        if k > room:
            label = names[i] if names is not None else str(i)
            logger.get_logger().warning("set step: tensor %s prunes %d instead of %d", label, room, k)
            ks[i] = room
    for t, k in zip(tensors, ks):
        if k == 0:
            continue
        act = t.active_indices()
        mags = t.values.view(-1)[act].abs()
        order = torch.sort(mags, stable=True).indices[:k]
        removed = act[order]
        t.deactivate(removed)
        eligible = ~t.mask.view(-1)
        if int(eligible.sum()) - k >= k:
            eligible[removed] = False
        cand = eligible.nonzero().view(-1)
        t.activate(cand[torch.randperm(len(cand), generator=g)[:k]])
    logger.get_logger().debug("set step: pruned and regrew %s", ks)
    return ks


@dataclass(repr=False, eq=False)
class DeepRState:
    # +1 / -1 per position; meaningful only where the connection is active
    signs: List[torch.Tensor] = field(default_factory=list)

    @classmethod
    def from_tensors(cls, tensors: Sequence[MaskedTensor], generator) -> "DeepRState":
        g = generator_from(generator)
        signs = []
        for t in tensors:
            fresh = torch.randint(0, 2, t.dense_shape, generator=g, dtype=torch.float64) * 2.0 - 1.0
            own = torch.where(t.values < 0, -torch.ones_like(t.values), torch.ones_like(t.values))
            s = torch.where(t.mask, own, fresh)
            signs.append(s)
        return cls(signs)


def deepr_step(
    tensors: Sequence[MaskedTensor],
    grads: Sequence[torch.Tensor],
    lr: float,
    alpha: float,
    temperature: float,
    state: DeepRState,
    noise_generator,
    realloc_generator,
) -> int:
    """
    Stochastic rewiring on sign-constrained connections. With theta = sign * w,
    every active connection moves by

        theta' = theta - lr * sign * g - lr * alpha + sqrt(2 lr T) * N(0, 1)

    and is deactivated once theta' < 0. The same number of dormant positions,
    drawn uniformly over all tensors, is activated at zero with a fresh sign.
    Returns the number of rewired connections.
    """
    if lr < 0 or temperature < 0 or alpha < 0:
        raise ValueError("deepr needs lr, temperature and alpha >= 0")
    gn = generator_from(noise_generator)
    gr = generator_from(realloc_generator)
    std = math.sqrt(2.0 * lr * temperature)
    crossed = []
    for t, grad, sign in zip(tensors, grads, state.signs):
        theta = sign * t.values
        theta = theta - lr * sign * grad - lr * alpha
        if std > 0:
            theta = theta + std * torch.randn(t.dense_shape, generator=gn, dtype=torch.float64)
        dead = t.mask & (theta < 0)
        t.values.copy_(torch.where(t.mask & ~dead, sign * theta, torch.zeros_like(theta)))
        t.mask &= ~dead
        crossed.append(dead.view(-1).nonzero().view(-1))
    total = sum(len(c) for c in crossed)
    if total == 0:
        return 0
    pools = []
    for t, c in zip(tensors, crossed):
        eligible = ~t.mask.view(-1)
        eligible[c] = False
        pools.append(eligible.nonzero().view(-1))
    if sum(len(p) for p in pools) < total:
        pools = [(~t.mask.view(-1)).nonzero().view(-1) for t in tensors]
    sizes = [len(p) for p in pools]
    pick = torch.sort(torch.randperm(sum(sizes), generator=gr)[:total]).values
    new_signs = torch.randint(0, 2, (total,), generator=gr, dtype=torch.float64) * 2.0 - 1.0
    start, used = 0, 0
    for t, p, sign, n in zip(tensors, pools, state.signs, sizes):
        mine = pick[(pick >= start) & (pick < start + n)] - start
        if len(mine):
            flat = p[mine]
            t.activate(flat)
            sign.view(-1)[flat] = new_signs[used : used + len(mine)]
            used += len(mine)
        start += n
    return total


def prune_to_sparsity(
    tensors: Sequence[MaskedTensor],
    target: float,
    per_layer: bool = False,
) -> int:
    """
    Remove the smallest-magnitude active weights until the sparsity over
    `tensors` is exactly 1 - round((1 - target) * N) / N, globally or per
    tensor. Returns the number removed.
    """
    if not 0 <= target < 1:
        raise ValueError(f"target sparsity must be in [0, 1), got {target}")
    if per_layer:
        removed = 0
        for t in tensors:
            removed += _prune_smallest(
                [t], t.active_count - round_half_up((1.0 - target) * t.numel)
            )
        return removed
    n = sum(t.numel for t in tensors)
    m = sum(t.active_count for t in tensors)
    return _prune_smallest(tensors, m - round_half_up((1.0 - target) * n))


def _prune_smallest(tensors: Sequence[MaskedTensor], count: int) -> int:
    if count < 0:
        raise ValueError(f"sparsity schedule would regrow {-count} weights; schedule must be non-decreasing")
    if count == 0:
        return 0
    mags = torch.cat(
        [torch.where(t.mask, t.values.abs(), torch.full_like(t.values, math.inf)).view(-1) for t in tensors]
    )
    drop = torch.sort(mags, stable=True).indices[:count]
    start = 0
    for t in tensors:
        mine = drop[(drop >= start) & (drop < start + t.numel)] - start
        if len(mine):
            t.deactivate(mine)
        start += t.numel
    return count


def compress_iterative(
    tensors: Sequence[MaskedTensor],
    schedule,
    finetune: Callable[[int, int], None],
    skip_events: int = 0,
    after_prune: Optional[Callable[[], None]] = None,
) -> List[float]:
    """
    Gradual magnitude pruning of dense-started tensors. At event t = 1..T the
    sparsity is raised to `schedule.sparsity_at(t)` and `finetune(t, epochs)`
    trains for `schedule.epochs_between` epochs; a final `finetune(T + 1,
    epochs_post)` closes the run. Returns the sparsity reached at each event.

    The first `skip_events` events are taken as already pruned (resumed
    runs): they are not pruned again but their `finetune` calls still happen.
    """
    log = logger.get_logger()
    n = sum(t.numel for t in tensors)
    trace = []
    previous = 0.0
    for t in range(1, schedule.iterations + 1):
        level = schedule.sparsity_at(t)
        if level < previous:
            raise ValueError(f"compression schedule decreases at event {t}: {previous} -> {level}")
        if t <= skip_events:
            trace.append(level)
            previous = level
            if schedule.epochs_between:
                finetune(t, schedule.epochs_between)
            continue
        removed = prune_to_sparsity(tensors, level, per_layer=schedule.per_layer)
        if after_prune is not None:
            after_prune()
        reached = 1.0 - sum(x.active_count for x in tensors) / n
        trace.append(reached)
        log.info("pruning event %d/%d: target %.4f reached %.4f (%d removed)", t, schedule.iterations, level, reached, removed)
        previous = level
        if schedule.epochs_between:
            finetune(t, schedule.epochs_between)
    if schedule.epochs_post:
        finetune(schedule.iterations + 1, schedule.epochs_post)
    return trace


def sparse_and_dense_counts(net: NetworkSpec):
    sparse = sum(p.numel for p in net.param_specs() if p.sparse)
    return sparse, net.num_params() - sparse


def scale_widths(net: NetworkSpec, scale: float, name: Optional[str] = None) -> NetworkSpec:
    """Dense copy of `net` with every hidden width multiplied by `scale`."""
    last_linear = max(i for i, l in enumerate(net.layers) if l.kind == "linear")
    channels = net.input_shape[0]
    layers = []
    for i, l in enumerate(net.layers):
        if l.kind in ("linear", "conv3x3"):
            out = l.c_out if i == last_linear else max(1, round_half_up(l.c_out * scale))
            layers.append(LayerSpec(l.kind, channels, out, l.stride, False, l.name))
            channels = out
        elif l.kind == "batchnorm":
            layers.append(LayerSpec(l.kind, channels, channels, name=l.name))
        else:
            layers.append(LayerSpec(l.kind, name=l.name))
    return NetworkSpec(name or net.name, net.input_shape, layers)


def thin_dense_target(net: NetworkSpec, sparsity: float) -> float:
    sparse, dense = sparse_and_dense_counts(net)
    return ((1.0 - sparsity) + 1.0 / 32.0) * sparse + dense


def build_thin_dense(net: NetworkSpec, sparsity: float, max_scale: float = 4.0) -> NetworkSpec:
    """
    Dense network with uniformly narrowed hidden layers whose parameter count
    is closest to the descriptive length of `net` at `sparsity`, i.e.
    ((1 - s) + 1/32) N_sparse plus the tensors that stay dense anyway.
    """
    target = thin_dense_target(net, sparsity)
    name = f"{net.name}_thin"

    def count(c: float) -> int:
        return scale_widths(net, c, name).num_params()

    lo, hi = 0.0, max_scale
    if count(hi) < target:
        raise ValueError(f"no width scale up to {max_scale} reaches {target:.0f} parameters")
    for _ in range(60):
        mid = (lo + hi) / 2.0
        if count(mid) >= target:
            hi = mid
        else:
            lo = mid
    best = min((hi, lo), key=lambda c: (abs(count(c) - target), -c))
    thin = scale_widths(net, best, name)
    logger.get_logger().info(
        "thin dense %s: %d parameters for target %.1f (scale %.4f)", thin, thin.num_params(), target, best
    )
    return thin
