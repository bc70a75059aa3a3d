from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

LAYER_KINDS = ("linear", "conv3x3", "relu", "batchnorm", "gap", "softmax_ce")

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class NonFiniteError(ArithmeticError):
    pass


@dataclass(repr=False, eq=False)
class LayerSpec:
    kind: str
    c_in: int = 0
    c_out: int = 0
    stride: int = 1
    sparse: bool = False
    name: str = ""

    def param_shapes(self) -> List[Tuple[str, Tuple[int, ...], bool]]:
        if self.kind == "linear":
            return [
                ("weight", (self.c_out, self.c_in), self.sparse),
                ("bias", (self.c_out,), False),
            ]
        if self.kind == "conv3x3":
            return [("weight", (self.c_out, self.c_in, 3, 3), self.sparse)]
        if self.kind == "batchnorm":
            return [("gamma", (self.c_in,), False), ("beta", (self.c_in,), False)]
        return []

    def __repr__(self) -> str:
        if self.kind in ("linear", "conv3x3"):
            tag = "sparse" if self.sparse else "dense"
            return f"{self.name}({self.c_in}->{self.c_out}, {tag})"
        return self.name or self.kind


@dataclass(repr=False, eq=False)
class ParamSpec:
    name: str
    shape: Tuple[int, ...]
    sparse: bool
    layer: int

    @property
    def numel(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n


@dataclass(repr=False, eq=False)
class NetworkSpec:
    name: str
    input_shape: Tuple[int, ...]
    layers: List[LayerSpec] = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        counters: Dict[str, int] = {}
        for layer in self.layers:
            if layer.kind not in LAYER_KINDS:
                raise ValueError(f"unknown layer kind {layer.kind!r}")
            if layer.sparse and layer.kind not in ("linear", "conv3x3"):
                raise ValueError(f"{layer.kind} layers carry no sparse weight tensor")
            if not layer.name:
                prefix = {"linear": "fc", "conv3x3": "conv", "batchnorm": "bn"}.get(
                    layer.kind, layer.kind
                )
                counters[prefix] = counters.get(prefix, 0) + 1
                layer.name = f"{prefix}{counters[prefix]}"
        self.shapes()

    def shapes(self) -> List[Tuple[int, ...]]:
        """Per-sample output shape after every layer; raises on a broken chain."""
        if not self.layers or self.layers[-1].kind != "softmax_ce":
            raise ValueError(f"{self.name}: the last layer must be softmax_ce")
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            k = layer.kind
            if k == "linear":
                if len(shape) != 1 or shape[0] != layer.c_in:
                    raise ValueError(f"{self.name}: layer {i} {layer.name} expects ({layer.c_in},), got {shape}")
                shape = (layer.c_out,)
            elif k == "conv3x3":
                if len(shape) != 3 or shape[0] != layer.c_in:
                    raise ValueError(f"{self.name}: layer {i} {layer.name} expects ({layer.c_in}, H, W), got {shape}")
                if layer.stride < 1:
                    raise ValueError(f"{self.name}: layer {i} stride must be >= 1")
                s = layer.stride
                shape = (layer.c_out, (shape[1] - 1) // s + 1, (shape[2] - 1) // s + 1)
            elif k == "batchnorm":
                if len(shape) not in (1, 3) or shape[0] != layer.c_in:
                    raise ValueError(f"{self.name}: layer {i} {layer.name} expects {layer.c_in} channels, got {shape}")
            elif k == "gap":
                if len(shape) != 3:
                    raise ValueError(f"{self.name}: layer {i} gap expects (C, H, W), got {shape}")
                shape = (shape[0],)
            elif k == "softmax_ce":
                if i != len(self.layers) - 1 or len(shape) != 1:
                    raise ValueError(f"{self.name}: softmax_ce must close the network on a flat input")
            out.append(shape)
        return out

    @property
    def num_classes(self) -> int:
        return self.shapes()[-1][0]

    def param_specs(self) -> List[ParamSpec]:
        specs = []
        for i, layer in enumerate(self.layers):
            for pname, shape, sparse in layer.param_shapes():
                specs.append(ParamSpec(f"{layer.name}.{pname}", shape, sparse, i))
        return specs

    def param_offsets(self) -> List[int]:
        offsets, n = [], 0
        for layer in self.layers:
            offsets.append(n)
            n += len(layer.param_shapes())
        return offsets

    def num_params(self) -> int:
        return sum(p.numel for p in self.param_specs())

    def __repr__(self) -> str:
        return f"{self.name}[{', '.join(repr(l) for l in self.layers)}]"


def mlp(sizes: Sequence[int], sparse: bool = True, name: str = "mlp") -> NetworkSpec:
    layers = []
    for i in range(len(sizes) - 1):
        layers.append(LayerSpec("linear", sizes[i], sizes[i + 1], sparse=sparse))
        if i < len(sizes) - 2:
            layers.append(LayerSpec("relu"))
    layers.append(LayerSpec("softmax_ce"))
    return NetworkSpec(name, (sizes[0],), layers)


def lenet_300_100(in_features: int = 784, classes: int = 10, sparse: bool = True) -> NetworkSpec:
    # every linear layer, the classifier included, is reparameterized
    return mlp([in_features, 300, 100, classes], sparse=sparse, name="lenet300")


def small_cnn(
    in_channels: int = 3,
    size: int = 32,
    width: int = 8,
    classes: int = 10,
    sparse: bool = True,
) -> NetworkSpec:
    """
    Pre-activation CNN: the first conv and the stride-2 downsampling conv stay
    dense, the 3x3 convs in between are sparse, the classifier is dense.
    """
    w = width
    layers = [
        LayerSpec("conv3x3", in_channels, w),
        LayerSpec("batchnorm", w),
        LayerSpec("relu"),
        LayerSpec("conv3x3", w, w, sparse=sparse),
        LayerSpec("batchnorm", w),
        LayerSpec("relu"),
        LayerSpec("conv3x3", w, 2 * w, stride=2),
        LayerSpec("batchnorm", 2 * w),
        LayerSpec("relu"),
        LayerSpec("conv3x3", 2 * w, 2 * w, sparse=sparse),
        LayerSpec("batchnorm", 2 * w),
        LayerSpec("relu"),
        LayerSpec("gap"),
        LayerSpec("linear", 2 * w, classes),
        LayerSpec("softmax_ce"),
    ]
    return NetworkSpec("small_cnn", (in_channels, size, size), layers)


def trainable_of(p) -> torch.Tensor:
    """The tensor the optimizer updates: masked values, shared slots or the tensor itself."""
    return p.trainable() if hasattr(p, "trainable") else p


def dense_of(p) -> torch.Tensor:
    return p.dense() if hasattr(p, "dense") else p


def init_buffers(net: NetworkSpec) -> Dict[int, Tuple[torch.Tensor, torch.Tensor]]:
    """Running (mean, var) per batchnorm layer index."""
    return {
        i: (
            torch.zeros(layer.c_in, dtype=torch.float64),
            torch.ones(layer.c_in, dtype=torch.float64),
        )
        for i, layer in enumerate(net.layers)
        if layer.kind == "batchnorm"
    }


@dataclass(repr=False, eq=False)
class ForwardCache:
    net: NetworkSpec
    params: list
    weights: List[torch.Tensor]
    records: list
    train: bool


def _check(t: torch.Tensor, what: str):
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite {what}")


def _bn_axes(x: torch.Tensor):
    if x.dim() == 2:
        return (0,), (1, -1)
    return (0, 2, 3), (1, -1, 1, 1)


def forward(
    net: NetworkSpec,
    params: list,
    batch: torch.Tensor,
    buffers: Optional[Dict[int, Tuple[torch.Tensor, torch.Tensor]]] = None,
    train: bool = True,
) -> Tuple[torch.Tensor, ForwardCache]:
    if tuple(batch.shape[1:]) != net.input_shape:
        raise ValueError(
            f"{net.name}: batch of per-sample shape {tuple(batch.shape[1:])} does not match {net.input_shape}"
        )
    specs = net.param_specs()
    if len(params) != len(specs):
        raise ValueError(f"{net.name}: expected {len(specs)} parameter tensors, got {len(params)}")
    weights = [dense_of(p) for p in params]
    for w, spec in zip(weights, specs):
        if tuple(w.shape) != spec.shape:
            raise ValueError(f"{spec.name}: shape {tuple(w.shape)} does not match {spec.shape}")
    from .hashed import HashedTensor, hashed_forward

    offsets = net.param_offsets()
    records = []
    x = batch
    for i, layer in enumerate(net.layers):
        k, o = layer.kind, offsets[i]
        shared = k in ("linear", "conv3x3") and isinstance(params[o], HashedTensor)
        if k == "linear":
            w, b = weights[o], weights[o + 1]
            records.append((x,))
            x = hashed_forward(params[o], x, b) if shared else torch.addmm(b, x, w.t())
        elif k == "conv3x3":
            w = weights[o]
            n, _, h, wd = x.shape
            cols = F.unfold(x, 3, padding=1, stride=layer.stride)
            ho, wo = (h - 1) // layer.stride + 1, (wd - 1) // layer.stride + 1
            records.append(((h, wd), cols))
            if shared:
                x = hashed_forward(params[o], x, stride=layer.stride)
            else:
                x = torch.matmul(w.reshape(layer.c_out, -1), cols).view(n, layer.c_out, ho, wo)
        elif k == "relu":
            keep = x > 0
            records.append((keep,))
            x = x * keep
        elif k == "batchnorm":
            gamma, beta = weights[o], weights[o + 1]
            axes, view = _bn_axes(x)
            if train:
                mean = x.mean(axes)
                var = x.var(axes, unbiased=False)
                if buffers is not None and i in buffers:
                    rm, rv = buffers[i]
                    m = x.numel() // x.shape[1]
                    rm.mul_(1 - BN_MOMENTUM).add_(mean, alpha=BN_MOMENTUM)
                    rv.mul_(1 - BN_MOMENTUM).add_(var * (m / max(m - 1, 1)), alpha=BN_MOMENTUM)
            elif buffers is not None and i in buffers:
                mean, var = buffers[i]
            else:
                raise ValueError(f"{layer.name}: evaluation needs running statistics")
            inv_std = torch.rsqrt(var + BN_EPS)
            xhat = (x - mean.view(view)) * inv_std.view(view)
            records.append((xhat, inv_std, train))
            x = xhat * gamma.view(view) + beta.view(view)
        elif k == "gap":
            records.append((x.shape,))
            x = x.mean((2, 3))
        elif k == "softmax_ce":
            records.append(())
        _check(x, f"activation after layer {i} ({layer.name})")
    return x, ForwardCache(net, params, weights, records, train)


def backward(cache: ForwardCache, grad_logits: torch.Tensor) -> List[torch.Tensor]:
    """
    One gradient per parameter tensor, in `param_specs()` order. Gradients of
    masked tensors are reported densely (inactive positions included); tensors
    with shared storage fold the dense gradient into their slots.
    """
    net, weights = cache.net, cache.weights
    offsets = net.param_offsets()
    grads: List[Optional[torch.Tensor]] = [None] * len(weights)
    dy = grad_logits
    for i in range(len(net.layers) - 1, -1, -1):
        layer, rec, o = net.layers[i], cache.records[i], offsets[i]
        k = layer.kind
        if k == "linear":
            (x,) = rec
            grads[o] = dy.t().mm(x)
            grads[o + 1] = dy.sum(0)
            dy = dy.mm(weights[o])
        elif k == "conv3x3":
            (h, wd), cols = rec
            n = dy.shape[0]
            dy2 = dy.reshape(n, layer.c_out, -1)
            wm = weights[o].reshape(layer.c_out, -1)
            grads[o] = torch.matmul(dy2, cols.transpose(1, 2)).sum(0).view_as(weights[o])
            dcols = torch.matmul(wm.t(), dy2)
            dy = F.fold(dcols, (h, wd), 3, padding=1, stride=layer.stride)
        elif k == "relu":
            (keep,) = rec
            dy = dy * keep
        elif k == "batchnorm":
            xhat, inv_std, was_train = rec
            gamma = weights[o]
            axes, view = _bn_axes(dy)
            grads[o] = (dy * xhat).sum(axes)
            grads[o + 1] = dy.sum(axes)
            dxhat = dy * gamma.view(view)
            if was_train:
                m = dy.numel() // dy.shape[1]
                dy = (inv_std.view(view) / m) * (
                    m * dxhat
                    - dxhat.sum(axes, keepdim=True)
                    - xhat * (dxhat * xhat).sum(axes, keepdim=True)
                )
            else:
                dy = dxhat * inv_std.view(view)
        elif k == "gap":
            (shape,) = rec
            dy = (dy / (shape[2] * shape[3])).view(shape[0], shape[1], 1, 1).expand(shape).contiguous()
        elif k == "softmax_ce":
            pass
        _check(dy, f"gradient below layer {i} ({layer.name})")
    out = []
    for p, g in zip(cache.params, grads):
        _check(g, "parameter gradient")
        out.append(p.reduce_grad(g) if hasattr(p, "reduce_grad") else g)
    return out


def softmax_cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> Tuple[float, torch.Tensor]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    logp = torch.log_softmax(logits, dim=1)
    n = logits.shape[0]
    idx = torch.arange(n)
    loss = -logp[idx, labels].mean()
    grad = logp.exp()
    grad[idx, labels] -= 1.0
    grad /= n
    return float(loss), grad


def accuracy(logits: torch.Tensor, labels: torch.Tensor) -> float:
    return float((logits.argmax(1) == labels).double().mean())
