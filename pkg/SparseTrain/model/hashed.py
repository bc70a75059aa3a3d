from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from numba import jit

from .tensor import NetworkSpec
from .sparse import init_dense, round_half_up
from ..utils.rng import generator_from

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_MUL2 = np.uint64(0x94D049BB133111EB)


@jit(nopython=True)
def _mix64(n: int, seed: np.uint64) -> np.ndarray:
    out = np.empty(n, dtype=np.uint64)
    for i in range(n):
        z = np.uint64(i) + seed * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MUL1
        z = (z ^ (z >> np.uint64(27))) * _MUL2
        out[i] = z ^ (z >> np.uint64(31))
    return out


def mix64(n: int, seed: int) -> np.ndarray:
    """splitmix64 finalizer of (i + seed * golden) for every flat index i < n."""
    return _mix64(n, np.uint64(seed))


def hash_indices(n: int, m: int, seed: int) -> np.ndarray:
    """
    Map flat indices 0..n-1 onto m shared slots. With m == n the mapping is
    the rank of each index's hash, a seeded permutation, so no two positions
    share a slot.
    """
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= M <= N, got M={m}, N={n}")
    h = mix64(n, seed)
    if m == n:
        rank = np.empty(n, dtype=np.int64)
        rank[np.argsort(h, kind="stable")] = np.arange(n, dtype=np.int64)
        return rank
    return (h % np.uint64(m)).astype(np.int64)


class HashedTensor:
    """A dense weight whose entries are read from `phi` through a fixed hash."""

    def __init__(self, phi: torch.Tensor, index: torch.Tensor, dense_shape: Sequence[int]):
        self.phi = phi.to(torch.float64)
        self.index = index.to(torch.long)
        self.dense_shape = tuple(dense_shape)
        n = 1
        for d in self.dense_shape:
            n *= d
        if self.index.numel() != n:
            raise ValueError(f"index has {self.index.numel()} entries for a {self.dense_shape} weight")
        if n and int(self.index.max()) >= self.phi.numel():
            raise ValueError("hash index points past the shared parameter vector")

    @property
    def numel(self) -> int:
        return self.index.numel()

    @property
    def unique(self) -> int:
        return self.phi.numel()

    def dense(self) -> torch.Tensor:
        return self.phi[self.index].view(self.dense_shape)

    def trainable(self) -> torch.Tensor:
        return self.phi

    def reduce_grad(self, grad: torch.Tensor) -> torch.Tensor:
        return torch.zeros_like(self.phi).index_add_(0, self.index, grad.reshape(-1))

    def clone(self) -> "HashedTensor":
        return HashedTensor(self.phi.clone(), self.index.clone(), self.dense_shape)

    def __repr__(self) -> str:
        return f"HashedTensor(shape={self.dense_shape}, unique={self.unique})"


def hashed_forward(
    t: HashedTensor,
    x: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
    stride: int = 1,
) -> torch.Tensor:
    w = t.dense()
    if w.dim() == 2:
        return x.mm(w.t()) if bias is None else torch.addmm(bias, x, w.t())
    return F.conv2d(x, w, bias, stride=stride, padding=1)


def hashed_sizes(net: NetworkSpec, sparsity: float) -> List[Tuple[str, int, int]]:
    return [
        (spec.name, spec.numel, max(1, round_half_up((1.0 - sparsity) * spec.numel)))
        for spec in net.param_specs()
        if spec.sparse
    ]


def init_hashed(
    net: NetworkSpec,
    sparsity: float,
    seed,
    hash_seed: int = 1,
    dense_values: Optional[List[torch.Tensor]] = None,
) -> list:
    """
    Every reparameterized weight gets max(1, round((1 - s) N_l)) shared slots
    filled from the first entries of its dense initial values; tensor number
    k among the sparse ones is hashed with `hash_seed + k`.
    """
    if not 0 < sparsity < 1:
        raise ValueError(f"sparsity must be in (0, 1), got {sparsity}")
    values = dense_values if dense_values is not None else init_dense(net, generator_from(seed))
    params = []
    ordinal = 0
    for spec, v in zip(net.param_specs(), values):
        if not spec.sparse:
            params.append(v.clone())
            continue
        m = max(1, round_half_up((1.0 - sparsity) * spec.numel))
        index = torch.from_numpy(hash_indices(spec.numel, m, hash_seed + ordinal))
        params.append(HashedTensor(v.reshape(-1)[:m].clone(), index, spec.shape))
        ordinal += 1
    return params
