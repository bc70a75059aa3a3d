import os, sys

now_dir = os.getcwd()
sys.path.append(now_dir)

import io
import logging
import tempfile

import torch

from SparseTrain.model import (
    HashedTensor,
    MaskedTensor,
    count_parameters,
    descriptive_length,
    dense_of,
    forward,
    init_dense,
    init_hashed,
    init_sparse,
    lenet_300_100,
    small_cnn,
    sparsity_report,
)
from SparseTrain.model.hashed import hashed_forward, hashed_sizes
from SparseTrain.model.sparse import round_half_up
from SparseTrain.utils.ckpt import Checkpoint, CheckpointError, dump, load, load_checkpoint, save_checkpoint
from tools.logger import get_logger

logger = get_logger("Test", lv=logging.WARN)

fail = False

net = lenet_300_100()
params = init_sparse(net, 0.9, 0)
specs = net.param_specs()
for spec, p in zip(specs, params):
    if not spec.sparse:
        continue
    want = round_half_up(0.1 * spec.numel)
    if p.active_count != want:
        logger.warning("%s: %d active, want %d", spec.name, p.active_count, want)
        fail = True
    if bool((p.values[~p.mask] != 0).any()):
        logger.warning("%s: inactive position holds a value", spec.name)
        fail = True

stored, total = count_parameters(params)
biases = sum(s.numel for s in specs if not s.sparse)
if stored != sum(p.active_count for p in params if isinstance(p, MaskedTensor)) + biases or total != net.num_params():
    logger.warning("count_parameters gave %d / %d for a masked network", stored, total)
    fail = True

report = sparsity_report(params, [s.name for s in specs])
if abs(report.sparsity - 0.9) > 1e-3:
    logger.warning("global sparsity %f, want about 0.9", report.sparsity)
    fail = True

# same seed, same init; dense and sparse runs share values at active positions
again = init_sparse(net, 0.9, 0)
dense = init_dense(net, 0)
for p, q, d in zip(params, again, dense):
    if isinstance(p, MaskedTensor):
        if not torch.equal(p.mask, q.mask) or not torch.equal(p.values, q.values):
            logger.warning("init_sparse is not deterministic")
            fail = True
            break
        if not torch.equal(p.values[p.mask], d[p.mask]):
            logger.warning("active values differ from the dense initializer")
            fail = True
            break

for bad in (0.0, 1.0, -0.5):
    try:
        init_sparse(net, bad, 0)
        logger.warning("sparsity %s accepted", bad)
        fail = True
    except ValueError:
        pass

cnn = small_cnn(1, 8, 4, 3)
kparams = init_sparse(cnn, 0.5, 3, granularity="kernel")
for p in kparams:
    if isinstance(p, MaskedTensor):
        per_kernel = p.mask.view(-1, 9)
        if not bool((per_kernel.all(1) | ~per_kernel.any(1)).all()):
            logger.warning("kernel granularity produced a partial kernel")
            fail = True
try:
    init_sparse(lenet_300_100(), 0.5, 0, granularity="kernel")
    logger.warning("kernel granularity accepted for linear weights")
    fail = True
except ValueError:
    pass

acct = descriptive_length(1000, 0.9)
if abs(acct.descriptive_length_bits - 4200.0) > 1e-9 or abs(acct.thin_dense_count - 131.25) > 1e-9:
    logger.warning("descriptive length %s / %s", acct.descriptive_length_bits, acct.thin_dense_count)
    fail = True

hashed = init_hashed(net, 0.9, 0)
stored, total = count_parameters(hashed)
if total != net.num_params():
    logger.warning("dense equivalent %d, want %d", total, net.num_params())
    fail = True
for spec, p in zip(specs, hashed):
    if spec.sparse and (not isinstance(p, HashedTensor) or p.unique != round_half_up(0.1 * spec.numel)):
        logger.warning("%s: wrong hashed size", spec.name)
        fail = True

x = torch.randn((3, 784), generator=torch.Generator().manual_seed(4), dtype=torch.float64)
layer = hashed_forward(hashed[0], x, hashed[1])
if not torch.allclose(layer, x.mm(hashed[0].dense().t()) + hashed[1]):
    logger.warning("hashed layer output differs from its virtual dense weight")
    fail = True
if [m for _, _, m in hashed_sizes(net, 0.9)] != [p.unique for p in hashed if isinstance(p, HashedTensor)]:
    logger.warning("hashed_sizes disagrees with init_hashed")
    fail = True
x_net = torch.randn((3, 784), generator=torch.Generator().manual_seed(6), dtype=torch.float64)
shared_logits, _ = forward(net, hashed, x_net)
plain_logits, _ = forward(net, [dense_of(p) for p in hashed], x_net)
if not torch.allclose(shared_logits, plain_logits):
    logger.warning("network with hashed weights differs from its dense expansion")
    fail = True
conv = init_hashed(small_cnn(1, 6, 2, 3), 0.5, 1)
w = next(p for p in conv if isinstance(p, HashedTensor))
img = torch.randn((2, 2, 6, 6), generator=torch.Generator().manual_seed(5), dtype=torch.float64)
if hashed_forward(w, img).shape != (2, 2, 6, 6):
    logger.warning("hashed conv changed the spatial shape")
    fail = True

# checkpoints keep masks, values and every tensor kind
ckpt = Checkpoint(
    meta={"epoch": 3, "H": 0.004},
    params=params[:2] + [hashed[0]],
    aux={"momentum.0": torch.ones(3, dtype=torch.float64)},
    rng={"realloc": bytes(range(16))},
)
with tempfile.TemporaryDirectory() as tmp:
    path = os.path.join(tmp, "x.ckpt")
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    if back.meta != ckpt.meta or back.rng != ckpt.rng:
        logger.warning("checkpoint header or rng state changed")
        fail = True
    p0, b0 = ckpt.params[0], back.params[0]
    if not (torch.equal(p0.mask, b0.mask) and torch.equal(p0.values, b0.values)):
        logger.warning("masked tensor changed through a checkpoint")
        fail = True
    if not torch.equal(back.params[2].dense(), hashed[0].dense()):
        logger.warning("hashed tensor changed through a checkpoint")
        fail = True

buf = io.BytesIO()
dump(ckpt, buf)
raw = buf.getvalue()
for broken in (b"NOTACKPT" + raw[8:], raw[: len(raw) // 2]):
    try:
        load(io.BytesIO(broken))
        logger.warning("corrupt checkpoint accepted")
        fail = True
    except CheckpointError:
        pass

if fail:
    sys.exit(1)
