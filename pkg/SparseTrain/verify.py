import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch

from tools.seeder import TorchSeedContext

from .config import ReallocConfig
from .model import (
    HashedTensor,
    LayerSpec,
    MaskedTensor,
    NetworkSpec,
    ReallocState,
    backward,
    forward,
    init_sparse,
    mlp,
    prune_by_threshold,
    realloc_step,
    softmax_cross_entropy,
    trainable_of,
)
from .model.hashed import hash_indices
from .utils.log import logger
from .utils.rng import generator_from


@dataclass(repr=False, eq=False)
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def __repr__(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} ({self.seconds:.2f}s): {self.detail}"


def _int_apportion(total: int, weights: List[int]) -> List[int]:
    denom = sum(weights)
    if total == 0 or denom == 0:
        return [0] * len(weights)
    shares = [(2 * total * w + denom) // (2 * denom) for w in weights]
    # remainder numerators: exact - share = (total * w - share * denom) / denom
    rem = [total * w - s * denom for w, s in zip(weights, shares)]
    diff = total - sum(shares)
    if diff > 0:
        for i in sorted(range(len(shares)), key=lambda i: (-rem[i], i))[:diff]:
            shares[i] += 1
    elif diff < 0:
        for i in sorted([i for i in range(len(shares)) if shares[i] > 0], key=lambda i: (rem[i], i))[:-diff]:
            shares[i] -= 1
    return shares


def reference_realloc_step(
    values: List[List[float]],
    masks: List[List[bool]],
    H: float,
    n_prune: int,
    tolerance: float,
    generator: torch.Generator,
) -> Tuple[List[List[float]], List[List[bool]], List[int], List[int], float]:
    """
    Index-by-index reallocation over plain lists, kept independent of the
    tensor implementation. Returns (values, masks, K, G, H').
    """
    values = [list(v) for v in values]
    masks = [list(m) for m in masks]
    L = len(values)
    was_active = [list(m) for m in masks]
    K = [0] * L
    for l in range(L):
        for i in range(len(values[l])):
            if masks[l][i] and abs(values[l][i]) < H:
                masks[l][i] = False
                values[l][i] = 0.0
                K[l] += 1
    total = sum(K)
    if total < (1.0 - tolerance) * n_prune:
        H_next = H * 2.0
    elif total > (1.0 + tolerance) * n_prune:
        H_next = H / 2.0
    else:
        H_next = H
    R = [sum(1 for x in masks[l] if x) for l in range(L)]
    free = [sum(1 for x in was_active[l] if not x) for l in range(L)]
    reuse = sum(free) < total
    capacity = [free[l] + K[l] for l in range(L)] if reuse else free
    assert sum(capacity) >= total
    weights = R if sum(R) > 0 else capacity
    G = _int_apportion(total, weights)
    excess = 0
    for l in range(L):
        if G[l] > capacity[l]:
            excess += G[l] - capacity[l]
            G[l] = capacity[l]
    if excess:
        extra = _int_apportion(excess, [capacity[l] - G[l] for l in range(L)])
        G = [G[l] + extra[l] for l in range(L)]
    for l in range(L):
        if G[l] == 0:
            continue
        cand = []
        for i in range(len(values[l])):
            if masks[l][i]:
                continue
            if not reuse and was_active[l][i]:
                continue
            cand.append(i)
        order = torch.randperm(len(cand), generator=generator)[: G[l]].tolist()
        for j in order:
            masks[l][cand[j]] = True
            values[l][cand[j]] = 0.0
    return values, masks, K, G, H_next


def oracle_suite(instances: int = 200, seed: int = 0) -> SuiteResult:
    began = time.perf_counter()
    g = generator_from(seed)
    for n in range(instances):
        L = int(torch.randint(1, 4, (1,), generator=g))
        values, masks = [], []
        for _ in range(L):
            size = int(torch.randint(1, 21, (1,), generator=g))
            m = torch.rand(size, generator=g) < 0.6
            v = torch.randn(size, generator=g, dtype=torch.float64) * 0.1
            v[~m] = 0.0
            values.append(v.tolist())
            masks.append(m.tolist())
        H = float(torch.rand(1, generator=g, dtype=torch.float64)) * 0.15
        cfg = ReallocConfig(n_prune=int(torch.randint(1, 12, (1,), generator=g)), tolerance=0.1)
        step_seed = int(torch.randint(0, 2**31, (1,), generator=g))

        ref_v, ref_m, ref_k, ref_g, ref_h = reference_realloc_step(
            values, masks, H, cfg.n_prune, cfg.tolerance, generator_from(step_seed)
        )
        tensors = [
            MaskedTensor(torch.tensor(v, dtype=torch.float64), torch.tensor(m, dtype=torch.bool))
            for v, m in zip(values, masks)
        ]
        _, state, report = realloc_step(tensors, ReallocState(H), cfg, generator_from(step_seed))
        got_m = [t.mask.tolist() for t in tensors]
        got_v = [t.values.tolist() for t in tensors]
        if (got_m, got_v, report.pruned, report.grown, state.H) != (ref_m, ref_v, ref_k, ref_g, ref_h):
            return SuiteResult(
                "oracle", False,
                f"instance {n}: K {report.pruned} vs {ref_k}, G {report.grown} vs {ref_g}, H {state.H} vs {ref_h}",
                time.perf_counter() - began,
            )
    return SuiteResult("oracle", True, f"{instances} instances match", time.perf_counter() - began)


def conservation_suite(steps: int = 1000, seed: int = 1) -> SuiteResult:
    began = time.perf_counter()
    g = generator_from(seed)
    cfg = ReallocConfig(n_prune=20, tolerance=0.1, h0=0.01)
    tensors, state = [], None
    for n in range(steps):
        if n % 100 == 0:
            sizes = torch.randint(20, 200, (3,), generator=g).tolist()
            s = 0.5 + 0.45 * float(torch.rand(1, generator=g))
            net = mlp([sizes[0], sizes[1], sizes[2], 4])
            tensors = [p for p in init_sparse(net, s, g) if isinstance(p, MaskedTensor)]
            state = ReallocState(cfg.h0)
        total = sum(t.active_count for t in tensors)
        for t in tensors:
            t.values.add_(torch.randn(t.dense_shape, generator=g, dtype=torch.float64) * 0.01).mul_(t.mask)
        _, state, _ = realloc_step(tensors, state, cfg, g)
        after = sum(t.active_count for t in tensors)
        if after != total:
            return SuiteResult("conservation", False, f"step {n}: {total} -> {after} active", time.perf_counter() - began)
        for t in tensors:
            if bool((t.values[~t.mask] != 0).any()):
                return SuiteResult("conservation", False, f"step {n}: non-zero inactive value", time.perf_counter() - began)
    return SuiteResult("conservation", True, f"{steps} steps conserve the active count", time.perf_counter() - began)


def setpoint_suite(
    seed: int = 2,
    enter_within: int = 30,
    hold_steps: int = 100,
    hold_fraction: float = 0.9,
) -> SuiteResult:
    """
    60000 active magnitudes redrawn from U(0, 0.8) before every step, so the
    expected pruned count at threshold H is 75000 H; H0 = 0.001 reaches the
    band around N_p = 600 by doubling.
    """
    began = time.perf_counter()
    g = generator_from(seed)
    cfg = ReallocConfig(n_prune=600, tolerance=0.1, h0=0.001)
    n, m = 120000, 60000
    mask = torch.zeros(n, dtype=torch.bool)
    mask[torch.randperm(n, generator=g)[:m]] = True
    t = MaskedTensor(torch.zeros(n, dtype=torch.float64), mask)
    state = ReallocState(cfg.h0)
    lo, hi = (1 - cfg.tolerance) * cfg.n_prune, (1 + cfg.tolerance) * cfg.n_prune
    ks = []
    for _ in range(enter_within + hold_steps):
        sign = torch.randint(0, 2, (n,), generator=g, dtype=torch.float64) * 2 - 1
        t.values.copy_(torch.rand(n, generator=g, dtype=torch.float64) * 0.8 * sign)
        t.apply_mask()
        _, state, report = realloc_step([t], state, cfg, g)
        ks.append(report.K)
    entered = next((i for i, k in enumerate(ks[:enter_within]) if lo <= k <= hi), None)
    if entered is None:
        return SuiteResult("setpoint", False, f"K never entered [{lo}, {hi}] in {enter_within} steps: {ks[:enter_within]}", time.perf_counter() - began)
    after = ks[entered + 1 : entered + 1 + hold_steps]
    inside = sum(1 for k in after if lo <= k <= hi) / len(after)
    ok = inside >= hold_fraction
    return SuiteResult(
        "setpoint", ok, f"entered at step {entered + 1}, in band {inside:.0%} of the next {len(after)}",
        time.perf_counter() - began,
    )


def _relu_safe(net: NetworkSpec, params: list, x: torch.Tensor, margin: float = 1e-3) -> bool:
    """True when no relu input of an mlp lies within `margin` of the kink."""
    offsets = net.param_offsets()
    h = x
    for i, layer in enumerate(net.layers):
        if layer.kind == "relu":
            if bool((h.abs() <= margin).any()):
                return False
            h = h.clamp_min(0)
        elif layer.kind == "linear":
            h = torch.addmm(params[offsets[i] + 1], h, params[offsets[i]].t())
    return True


def _gradcheck_nets() -> Dict[str, Callable[[], Tuple[NetworkSpec, int]]]:
    return {
        "linear": lambda: (mlp([4, 3]), 5),
        "relu": lambda: (mlp([4, 6, 3]), 5),
        "conv_stride1": lambda: (
            NetworkSpec("c1", (2, 5, 5), [LayerSpec("conv3x3", 2, 3), LayerSpec("gap"), LayerSpec("linear", 3, 3), LayerSpec("softmax_ce")]),
            3,
        ),
        "conv_stride2": lambda: (
            NetworkSpec("c2", (2, 5, 5), [LayerSpec("conv3x3", 2, 3, stride=2), LayerSpec("gap"), LayerSpec("linear", 3, 3), LayerSpec("softmax_ce")]),
            3,
        ),
        "batchnorm_2d": lambda: (
            NetworkSpec("b2", (4,), [LayerSpec("linear", 4, 5), LayerSpec("batchnorm", 5), LayerSpec("linear", 5, 3), LayerSpec("softmax_ce")]),
            6,
        ),
        "batchnorm_4d": lambda: (
            NetworkSpec("b4", (2, 4, 4), [LayerSpec("conv3x3", 2, 3), LayerSpec("batchnorm", 3), LayerSpec("gap"), LayerSpec("linear", 3, 3), LayerSpec("softmax_ce")]),
            3,
        ),
        "gap": lambda: (
            NetworkSpec("g", (3, 4, 4), [LayerSpec("gap"), LayerSpec("linear", 3, 3), LayerSpec("softmax_ce")]),
            4,
        ),
        "softmax_ce": lambda: (mlp([3, 3]), 4),
        "hashed_linear": lambda: (mlp([6, 4], sparse=True), 5),
        "hashed_conv": lambda: (
            NetworkSpec("hc", (2, 5, 5), [LayerSpec("conv3x3", 2, 3, stride=2, sparse=True), LayerSpec("gap"), LayerSpec("linear", 3, 3), LayerSpec("softmax_ce")]),
            3,
        ),
    }


def _random_params(net: NetworkSpec, kind: str) -> list:
    params = []
    for spec in net.param_specs():
        w = torch.randn(spec.shape, dtype=torch.float64) * 0.7
        if spec.name.endswith(".gamma"):
            w = 1.0 + 0.3 * w
        if kind.startswith("hashed") and spec.sparse:
            m = max(1, spec.numel // 3)
            params.append(HashedTensor(w.reshape(-1)[:m].clone(), torch.from_numpy(hash_indices(spec.numel, m, 7)), spec.shape))
        else:
            params.append(w)
    return params


def _check_positions(shape: Tuple[int, ...], max_entries: int, per_channel: int) -> torch.Tensor:
    n = math.prod(shape)
    if len(shape) == 4:
        per = n // shape[0]
        offsets = torch.linspace(0, per - 1, min(per, per_channel)).round().long()
        return (torch.arange(shape[0]).unsqueeze(1) * per + offsets).view(-1)
    return torch.linspace(0, n - 1, min(n, max_entries)).round().long().unique()


def gradient_check(
    net: NetworkSpec,
    params: list,
    x: torch.Tensor,
    y: torch.Tensor,
    h: float = 1e-5,
    max_entries: int = 12,
    per_channel: int = 3,
) -> float:
    """
    Largest relative error between backward() and central differences.
    Checked entries are spread evenly over each tensor; conv weights get
    `per_channel` entries in every output channel.
    """
    def loss_of() -> float:
        logits, _ = forward(net, params, x)
        return softmax_cross_entropy(logits, y)[0]

    logits, cache = forward(net, params, x)
    _, grad = softmax_cross_entropy(logits, y)
    grads = backward(cache, grad)
    worst = 0.0
    for p, g in zip(params, grads):
        t = trainable_of(p)
        w = t.view(-1)
        gv = g.reshape(-1)
        for i in _check_positions(tuple(t.shape), max_entries, per_channel).tolist():
            old = float(w[i])
            w[i] = old + h
            right = loss_of()
            w[i] = old - h
            left = loss_of()
            w[i] = old
            numeric = (right - left) / (2.0 * h)
            analytic = float(gv[i])
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst


def gradcheck_suite(instances: int = 50, seed: int = 3, tolerance: float = 1e-4) -> SuiteResult:
    began = time.perf_counter()
    worst: Dict[str, float] = {}
    with TorchSeedContext(seed):
        for kind, make in _gradcheck_nets().items():
            worst[kind] = 0.0
            for _ in range(instances):
                net, batch = make()
                while True:
                    params = _random_params(net, kind)
                    x = torch.randn((batch,) + net.input_shape, dtype=torch.float64)
                    if kind != "relu" or _relu_safe(net, params, x):
                        break
                y = torch.randint(0, net.num_classes, (batch,))
                worst[kind] = max(worst[kind], gradient_check(net, params, x, y))
    failed = {k: v for k, v in worst.items() if v >= tolerance}
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return SuiteResult("gradcheck", not failed, detail, time.perf_counter() - began)


def zero_growth_suite(seed: int = 4) -> SuiteResult:
    """Growth adds exact zeros: forward output after growth equals the output after pruning alone."""
    began = time.perf_counter()
    net = mlp([8, 16, 12, 4])
    params = init_sparse(net, 0.7, seed)
    x = torch.randn((10, 8), generator=generator_from(seed), dtype=torch.float64)
    masked = [p for p in params if isinstance(p, MaskedTensor)]
    cfg = ReallocConfig(n_prune=5, tolerance=0.1)
    before, _ = forward(net, params, x)
    low = min(float(t.values[t.mask].abs().min()) for t in masked) / 2.0
    realloc_step(masked, ReallocState(low), cfg, seed)
    after, _ = forward(net, params, x)
    if not torch.equal(before, after):
        return SuiteResult("zero_growth", False, "no-prune step changed the output", time.perf_counter() - began)

    H = 0.1
    pruned_only = [p.clone() if isinstance(p, MaskedTensor) else p for p in params]
    for p in pruned_only:
        if isinstance(p, MaskedTensor):
            prune_by_threshold(p, H)
    expected, _ = forward(net, pruned_only, x)
    _, _, report = realloc_step(masked, ReallocState(H), cfg, seed)
    got, _ = forward(net, params, x)
    ok = torch.equal(expected, got) and report.G == report.K > 0
    return SuiteResult(
        "zero_growth", ok, f"K = G = {report.K}, outputs {'identical' if ok else 'differ'}", time.perf_counter() - began
    )


SUITES = {
    "oracle": oracle_suite,
    "conservation": conservation_suite,
    "setpoint": setpoint_suite,
    "gradcheck": gradcheck_suite,
    "zero_growth": zero_growth_suite,
}


def run_suites(names: Optional[Sequence[str]] = None) -> List[SuiteResult]:
    log = logger.get_logger()
    results = []
    for name in names or list(SUITES):
        if name not in SUITES:
            raise ValueError(f"unknown suite {name!r}, available: {list(SUITES)}")
        r = SUITES[name]()
        (log.info if r.passed else log.error)("%s", r)
        results.append(r)
    return results
