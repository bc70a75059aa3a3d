import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch

from .tensor import NetworkSpec
from ..utils.rng import generator_from


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


class MaskedTensor:
    """
    Dense-shaped values plus a boolean mask of active positions.

    Holds the sparse reparameterization of one weight tensor: the active
    values and their positions. Inactive positions always store exactly 0.0.
    """

    def __init__(self, values: torch.Tensor, mask: torch.Tensor):
        if values.shape != mask.shape:
            raise ValueError(f"values {tuple(values.shape)} and mask {tuple(mask.shape)} differ in shape")
        self.values = values.to(torch.float64)
        self.mask = mask.to(torch.bool)
        self.apply_mask()

    @classmethod
    def full(cls, values: torch.Tensor) -> "MaskedTensor":
        return cls(values, torch.ones_like(values, dtype=torch.bool))

    @property
    def dense_shape(self) -> Tuple[int, ...]:
        return tuple(self.values.shape)

    @property
    def numel(self) -> int:
        return self.values.numel()

    @property
    def active_count(self) -> int:
        return int(self.mask.sum())

    @property
    def sparsity(self) -> float:
        return 1.0 - self.active_count / self.numel

    def dense(self) -> torch.Tensor:
        return self.values

    def trainable(self) -> torch.Tensor:
        return self.values

    def apply_mask(self) -> "MaskedTensor":
        self.values.masked_fill_(~self.mask, 0.0)
        return self

    def active_indices(self) -> torch.Tensor:
        return self.mask.view(-1).nonzero().view(-1)

    def deactivate(self, flat: torch.Tensor):
        self.mask.view(-1)[flat] = False
        self.values.view(-1)[flat] = 0.0

    def activate(self, flat: torch.Tensor):
        # grown positions start at exactly zero
        self.mask.view(-1)[flat] = True
        self.values.view(-1)[flat] = 0.0

    def check(self):
        assert self.mask.shape == self.values.shape, "mask/value shape mismatch"
        assert bool((self.values[~self.mask] == 0).all()), "non-zero value at an inactive position"

    def clone(self) -> "MaskedTensor":
        return MaskedTensor(self.values.clone(), self.mask.clone())

    def __repr__(self) -> str:
        return f"MaskedTensor(shape={self.dense_shape}, active={self.active_count}/{self.numel})"


def glorot_uniform(shape: Tuple[int, ...], generator: torch.Generator) -> torch.Tensor:
    if len(shape) == 4:
        fan_in, fan_out = shape[1] * shape[2] * shape[3], shape[0] * shape[2] * shape[3]
    else:
        fan_in, fan_out = shape[1], shape[0]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return (torch.rand(shape, generator=generator, dtype=torch.float64) * 2.0 - 1.0) * bound


def init_dense(net: NetworkSpec, seed) -> List[torch.Tensor]:
    """Dense-equivalent initial values for every parameter tensor of `net`."""
    g = generator_from(seed)
    params = []
    for spec in net.param_specs():
        if spec.name.endswith(".weight"):
            params.append(glorot_uniform(spec.shape, g))
        elif spec.name.endswith(".gamma"):
            params.append(torch.ones(spec.shape, dtype=torch.float64))
        else:
            params.append(torch.zeros(spec.shape, dtype=torch.float64))
    return params


def group_size(granularity: str) -> int:
    if granularity == "weight":
        return 1
    if granularity == "kernel":
        return 9
    raise ValueError(f"unknown granularity {granularity!r}")


def sample_mask(
    shape: Tuple[int, ...],
    active: int,
    generator: torch.Generator,
    granularity: str = "weight",
) -> torch.Tensor:
    gs = group_size(granularity)
    n = 1
    for d in shape:
        n *= d
    groups = n // gs
    chosen = torch.randperm(groups, generator=generator)[:active]
    mask = torch.zeros(groups, dtype=torch.bool)
    mask[chosen] = True
    return mask.repeat_interleave(gs).view(shape)


def init_sparse(
    net: NetworkSpec,
    global_sparsity: float,
    seed,
    granularity: str = "weight",
    dense_values: Optional[List[torch.Tensor]] = None,
) -> list:
    """
    Every sparse tensor gets round((1 - s) * N_l) active positions (or 3x3
    kernel groups) sampled uniformly without replacement; active values come
    from the dense initializer, inactive ones are zeroed. Dense values are
    drawn before any position, so dense and sparse runs share them per seed.
    """
    if not 0 < global_sparsity < 1:
        raise ValueError(f"global sparsity must be in (0, 1), got {global_sparsity}")
    g = generator_from(seed)
    values = dense_values if dense_values is not None else init_dense(net, g)
    gs = group_size(granularity)
    params = []
    for spec, v in zip(net.param_specs(), values):
        if not spec.sparse:
            params.append(v.clone())
            continue
        if gs > 1 and (len(spec.shape) != 4 or spec.shape[2:] != (3, 3)):
            raise ValueError(f"{spec.name}: kernel granularity needs a 3x3 conv weight, got {spec.shape}")
        groups = spec.numel // gs
        active = round_half_up((1.0 - global_sparsity) * groups)
        if active == 0:
            raise ValueError(
                f"{spec.name}: sparsity {global_sparsity} leaves no active entries out of {groups}"
            )
        params.append(MaskedTensor(v.clone(), sample_mask(spec.shape, active, g, granularity)))
    return params


def apply_mask(t: MaskedTensor) -> MaskedTensor:
    return t.apply_mask()


def masked_of(params: Sequence) -> List[Tuple[int, MaskedTensor]]:
    return [(i, p) for i, p in enumerate(params) if isinstance(p, MaskedTensor)]


@dataclass(repr=False, eq=False)
class TensorSparsity:
    name: str
    numel: int
    active: int

    @property
    def sparsity(self) -> float:
        return 1.0 - self.active / self.numel


@dataclass(repr=False, eq=False)
class SparsityReport:
    tensors: List[TensorSparsity] = field(default_factory=list)

    @property
    def numel(self) -> int:
        return sum(t.numel for t in self.tensors)

    @property
    def active(self) -> int:
        return sum(t.active for t in self.tensors)

    @property
    def sparsity(self) -> float:
        n = self.numel
        return 1.0 - self.active / n if n else 0.0


def sparsity_report(params: Sequence, names: Sequence[str]) -> SparsityReport:
    return SparsityReport(
        [TensorSparsity(names[i], p.numel, p.active_count) for i, p in masked_of(params)]
    )


def count_parameters(params: Sequence) -> Tuple[int, int]:
    """
    (stored, dense): trainable values actually stored, counting active
    entries of masked tensors and unique slots of hashed tensors, and the
    dense-equivalent total.
    """
    stored = dense = 0
    for p in params:
        if isinstance(p, MaskedTensor):
            stored += p.active_count
            dense += p.numel
        elif isinstance(p, torch.Tensor):
            stored += p.numel()
            dense += p.numel()
        else:
            # hashed: unique slots stored, virtual dense shape counted
            stored += p.unique
            dense += p.numel
    return stored, dense


@dataclass(repr=False, eq=False)
class SizeAccount:
    dense_count: int
    sparsity: float
    nonzero_count: float
    descriptive_length_bits: float
    thin_dense_count: float


def descriptive_length(n: int, s: float) -> SizeAccount:
    """
    Storage of a sparse tensor set with `n` dense 32-bit positions at
    sparsity `s`: one mask bit per position plus 32 bits per kept value,
    (32 (1 - s) + 1) n bits, i.e. the size of a dense model with
    ((1 - s) + 1/32) n weights.
    """
    kept = 1.0 - s
    return SizeAccount(
        dense_count=n,
        sparsity=s,
        nonzero_count=kept * n,
        descriptive_length_bits=(32.0 * kept + 1.0) * n,
        thin_dense_count=(kept + 1.0 / 32.0) * n,
    )
