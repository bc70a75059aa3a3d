from typing import List, Optional, Sequence

import torch

from .tensor import trainable_of, NonFiniteError


def _mask_of(p) -> Optional[torch.Tensor]:
    return getattr(p, "mask", None)


def sgd_step(
    params: list,
    grads: Sequence[torch.Tensor],
    lr: float,
    momentum: float,
    weight_decay: float,
    l1: float = 0.0,
    buffers: Optional[List[torch.Tensor]] = None,
    nesterov: bool = True,
    skip: Sequence[int] = (),
):
    """
    In-place SGD with Nesterov momentum, L2 weight decay and an L1 pull.

    For masked tensors the update direction and the momentum buffer are
    zeroed at inactive positions, so those stay exactly 0.0. Indices in
    `skip` are left to another update rule (DeepR drives its own tensors).
    """
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    if lr == 0:
        return
    if momentum and buffers is None:
        raise ValueError("momentum needs buffers")
    skipped = set(skip)
    for i, (p, g) in enumerate(zip(params, grads)):
        if i in skipped:
            continue
        w = trainable_of(p)
        mask = _mask_of(p)
        d = g
        if weight_decay:
            d = d + weight_decay * w
        if l1:
            d = d + l1 * torch.sign(w)
        if mask is not None:
            d = d * mask
        if momentum:
            buf = buffers[i]
            buf.mul_(momentum).add_(d)
            if mask is not None:
                buf.mul_(mask)
            d = d + momentum * buf if nesterov else buf
        w.add_(d, alpha=-lr)
        if mask is not None:
            p.apply_mask()
        if not torch.isfinite(w).all():
            raise NonFiniteError(f"non-finite parameter after update of tensor {i}")


class NesterovSGD:
    def __init__(
        self,
        params: list,
        momentum: float = 0.9,
        weight_decay: float = 0.0,
        l1: float = 0.0,
        nesterov: bool = True,
    ):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.l1 = l1
        self.nesterov = nesterov
        self.buffers = [torch.zeros_like(trainable_of(p)) for p in params]

    def step(self, params: list, grads: Sequence[torch.Tensor], lr: float, skip: Sequence[int] = ()):
        sgd_step(
            params,
            grads,
            lr,
            self.momentum,
            self.weight_decay,
            l1=self.l1,
            buffers=self.buffers,
            nesterov=self.nesterov,
            skip=skip,
        )

    def mask_buffers(self, params: list):
        """Drop momentum at positions a reparameterization step just changed."""
        for p, buf in zip(params, self.buffers):
            mask = _mask_of(p)
            if mask is not None:
                buf.mul_(mask)
