import os, sys

now_dir = os.getcwd()
sys.path.append(now_dir)

import math
import logging

import torch

from SparseTrain.model import (
    LayerSpec,
    MaskedTensor,
    NesterovSGD,
    NetworkSpec,
    NonFiniteError,
    backward,
    forward,
    init_buffers,
    mlp,
    small_cnn,
    softmax_cross_entropy,
)
from SparseTrain.verify import _check_positions, gradcheck_suite
from tools.logger import get_logger

logger = get_logger("Test", lv=logging.WARN)

fail = False

r = gradcheck_suite(instances=5)
if not r.passed:
    logger.warning("gradient check failed: %s", r.detail)
    fail = True

pos = _check_positions((4, 2, 3, 3), 12, 3)
if sorted({int(i) // 18 for i in pos}) != [0, 1, 2, 3] or len(pos) != 12:
    logger.warning("conv gradient check skips output channels: %s", pos.tolist())
    fail = True
if _check_positions((100,), 12, 3).tolist()[-1] != 99:
    logger.warning("gradient check positions do not reach the end of the tensor")
    fail = True

logits = torch.zeros((4, 5), dtype=torch.float64)
loss, grad = softmax_cross_entropy(logits, torch.tensor([0, 1, 2, 3]))
if abs(loss - math.log(5)) > 1e-12:
    logger.warning("uniform logits should cost log(5), got %f", loss)
    fail = True
if abs(float(grad.sum())) > 1e-12:
    logger.warning("softmax gradient rows must sum to zero")
    fail = True

net = mlp([4, 3])
params = [torch.zeros((3, 4), dtype=torch.float64), torch.zeros(3, dtype=torch.float64)]
try:
    forward(net, params, torch.zeros((2, 5), dtype=torch.float64))
    logger.warning("wrong input shape accepted")
    fail = True
except ValueError:
    pass
try:
    forward(net, params[:1], torch.zeros((2, 4), dtype=torch.float64))
    logger.warning("missing parameter tensor accepted")
    fail = True
except ValueError:
    pass
try:
    forward(net, params, torch.full((2, 4), math.inf, dtype=torch.float64))
    logger.warning("non-finite activations not reported")
    fail = True
except NonFiniteError:
    pass

try:
    NetworkSpec("broken", (4,), [LayerSpec("linear", 4, 3)])
    logger.warning("network without softmax_ce accepted")
    fail = True
except ValueError:
    pass
try:
    NetworkSpec("broken", (4,), [LayerSpec("relu", sparse=True), LayerSpec("softmax_ce")])
    logger.warning("sparse relu accepted")
    fail = True
except ValueError:
    pass

cnn = small_cnn(1, 8, 2, 3)
if cnn.shapes()[-1] != (3,) or [s.sparse for s in cnn.param_specs()].count(True) != 2:
    logger.warning("unexpected small_cnn layout %s", cnn)
    fail = True

# evaluation mode uses running statistics, training mode updates them
bn_net = NetworkSpec("bn", (3,), [LayerSpec("batchnorm", 3), LayerSpec("softmax_ce")])
buffers = init_buffers(bn_net)
bn_params = [torch.ones(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64)]
x = torch.randn((8, 3), generator=torch.Generator().manual_seed(0), dtype=torch.float64) + 2.0
forward(bn_net, bn_params, x, buffers, train=True)
mean, _ = buffers[0]
if not torch.allclose(mean, 0.1 * x.mean(0)):
    logger.warning("running mean not updated with momentum 0.1")
    fail = True
try:
    forward(bn_net, bn_params, x, None, train=False)
    logger.warning("evaluation without running statistics accepted")
    fail = True
except ValueError:
    pass

# masked optimizer steps keep inactive positions at exactly zero
mask = torch.tensor([[True, False, True, False]] * 3)
w = MaskedTensor(torch.randn((3, 4), generator=torch.Generator().manual_seed(1), dtype=torch.float64), mask)
w.apply_mask()
params = [w, torch.zeros(3, dtype=torch.float64)]
opt = NesterovSGD(params, momentum=0.9, weight_decay=1e-4, l1=1e-4)
xs = torch.randn((6, 4), generator=torch.Generator().manual_seed(2), dtype=torch.float64)
ys = torch.tensor([0, 1, 2, 0, 1, 2])
for _ in range(5):
    logits, cache = forward(net, params, xs)
    _, g = softmax_cross_entropy(logits, ys)
    opt.step(params, backward(cache, g), 0.1)
if bool((w.values[~mask] != 0).any()) or bool((opt.buffers[0][~mask] != 0).any()):
    logger.warning("optimizer wrote to inactive positions")
    fail = True

try:
    opt.step(params, backward(cache, g), -0.1)
    logger.warning("negative learning rate accepted")
    fail = True
except ValueError:
    pass

if fail:
    sys.exit(1)
