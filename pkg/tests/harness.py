import os, sys

now_dir = os.getcwd()
sys.path.append(now_dir)

import json
import logging
import tempfile

import torch

import SparseTrain.core as core
from SparseTrain import Trainer
from SparseTrain.cli import main
from SparseTrain.config import METHODS, CompressionSchedule, load_config, load_preset
from SparseTrain.core import TicketSpec
from SparseTrain.model import MaskedTensor
from SparseTrain.utils import MetricLog
from SparseTrain.utils.ckpt import load_checkpoint
from SparseTrain.utils.io import RUN_FILES
from tools.logger import get_logger

logger = get_logger("Test", lv=logging.WARN)

fail = False

trainer = Trainer(logger)
cfg = load_preset("smoke_synthetic")


def same_params(a: list, b: list) -> bool:
    for p, q in zip(a, b):
        if isinstance(p, MaskedTensor):
            if not (torch.equal(p.mask, q.mask) and torch.equal(p.values, q.values)):
                return False
        elif not torch.equal(p, q):
            return False
    return len(a) == len(b)


with tempfile.TemporaryDirectory() as tmp:
    # keep every per-epoch checkpoint so a run can be resumed from the middle
    saved = core.save_checkpoint

    def keep_epochs(ckpt, path):
        saved(ckpt, path)
        if path.endswith("last.ckpt"):
            saved(ckpt, os.path.join(os.path.dirname(path), f"epoch{ckpt.meta['epoch']}.ckpt"))

    core.save_checkpoint = keep_epochs
    run = trainer.train(cfg, os.path.join(tmp, "a"))
    core.save_checkpoint = saved

    for f in RUN_FILES:
        if not os.path.exists(os.path.join(run.run_dir, f)):
            logger.warning("run directory misses %s", f)
            fail = True
    epochs = MetricLog.read(os.path.join(run.run_dir, "epochs.csv"))
    if epochs.column("epoch") != [0, 1, 2, 3, 4]:
        logger.warning("epochs.csv rows %s", epochs.column("epoch"))
        fail = True
    reallocs = MetricLog.read(os.path.join(run.run_dir, "realloc.csv"))
    if len(reallocs) == 0 or any(r["K"] != r["G"] for r in reallocs.rows):
        logger.warning("realloc.csv is empty or grew a different count than it pruned")
        fail = True
    actives = set(epochs.column("active_count"))
    if len(actives) != 1:
        logger.warning("active count drifted across epochs: %s", actives)
        fail = True
    if run.summary["test_acc"] < 0.6:
        logger.warning("smoke run only reached %.3f test accuracy", run.summary["test_acc"])
        fail = True

    again = trainer.train(cfg, os.path.join(tmp, "b"))
    if not same_params(run.params, again.params) or epochs.column("test_loss") != again.epochs.column("test_loss"):
        logger.warning("two runs with one seed differ")
        fail = True

    resumed = trainer.train(cfg, os.path.join(tmp, "c"), resume=os.path.join(run.run_dir, "epoch2.ckpt"))
    if not same_params(run.params, resumed.params):
        logger.warning("resumed run left the uninterrupted trajectory")
        fail = True

    short = cfg.with_epochs(2)
    for method in METHODS:
        c = short.with_method(method)
        if method == "compressed_sparse":
            c.compression = CompressionSchedule(
                iterations=2, epochs_between=1, epochs_post=1, lr_schedule=[[1, 3, 0.01]], target=c.sparsity
            )
        if method == "static_sparse":
            r = trainer.static_sparse_run(short, os.path.join(tmp, "methods"))
        else:
            r = trainer.train(c.validate(), os.path.join(tmp, "methods"))
        s = r.summary
        if method in ("dynamic_sparse", "static_sparse", "set", "deepr", "compressed_sparse", "hashed"):
            if abs(s["global_sparsity"] - c.sparsity) > 0.01:
                logger.warning("%s ended at sparsity %s", method, s["global_sparsity"])
                fail = True
        if method == "thin_dense" and (s["params_stored"] >= run.summary["params_dense_equivalent"] or s["epochs"] != 4):
            logger.warning("thin dense run is not thinner or not doubled")
            fail = True
        if not 0.0 <= s["test_acc"] <= 1.0:
            fail = True

    source = run.run_dir
    ticket = trainer.run_ticket(TicketSpec(source, epochs_multiplier=1), os.path.join(tmp, "tickets"))
    final = load_checkpoint(os.path.join(source, "final.ckpt"))
    for p, q in zip(final.params, ticket.params):
        if isinstance(p, MaskedTensor) and not torch.equal(p.mask, q.mask):
            logger.warning("ticket retraining moved the mask")
            fail = True
    for p, q in zip(final.params, ticket.params):
        if isinstance(p, MaskedTensor) and p.active_count != q.active_count:
            logger.warning("ticket ended with %d active entries, source with %d", q.active_count, p.active_count)
            fail = True
    fresh = trainer.run_ticket(TicketSpec(source, init="fresh_random", epochs_multiplier=1), os.path.join(tmp, "tickets"))
    if fresh.run_dir == ticket.run_dir:
        logger.warning("both ticket variants wrote one directory")
        fail = True
    # init.ckpt of a ticket holds the values it started from
    source_init = load_checkpoint(os.path.join(source, "init.ckpt")).params
    kept_init = load_checkpoint(os.path.join(ticket.run_dir, "init.ckpt")).params
    fresh_init = load_checkpoint(os.path.join(fresh.run_dir, "init.ckpt")).params
    for p, a, b, c in zip(final.params, source_init, kept_init, fresh_init):
        if not isinstance(p, MaskedTensor):
            continue
        if not torch.equal(a[p.mask], b[p.mask]):
            logger.warning("snapshot ticket did not record the source initial values")
            fail = True
        if torch.equal(a[p.mask], c[p.mask]):
            logger.warning("fresh ticket recorded the source initial values")
            fail = True

    rows = trainer.run_earlystop_sweep(short, [0, 1, 2], os.path.join(tmp, "stop"))
    if [r["stop_epoch"] for r in rows] != [0, 1, 2]:
        fail = True
    stop0 = MetricLog.read(os.path.join(tmp, "stop", f"{short.run_name}-stop0", "realloc.csv"))
    if len(stop0) != 0:
        logger.warning("reallocation ran after its stop epoch")
        fail = True

    overhead = trainer.measure_overhead(short, epochs=10, out_dir=os.path.join(tmp, "overhead"))
    if [r["method"] for r in overhead] != ["static_sparse", "dynamic_sparse", "set", "deepr"]:
        logger.warning("overhead rows %s", [r["method"] for r in overhead])
        fail = True
    if any(not r["ratio"] > 0 for r in overhead) or overhead[0]["ratio"] != 1.0:
        logger.warning("overhead ratios %s", [r["ratio"] for r in overhead])
        fail = True

    try:
        trainer.measure_overhead(short, epochs=3)
        logger.warning("overhead accepted fewer than 10 epochs")
        fail = True
    except ValueError:
        pass

    out = trainer.report([run.run_dir, ticket.run_dir], os.path.join(tmp, "report"))
    for path in out.values():
        if not os.path.exists(path):
            logger.warning("report did not write %s", path)
            fail = True

    bad = os.path.join(tmp, "bad.json")
    for raw in (
        {"method": "dynamic_sparse", "bogus": 1},
        {"method": "dynamic_sparse", "sparsity": 1.5},
        {"method": "static_sparse", "train": {"epochs": 4, "lr_schedule": [[1, 2, 0.1], [4, 4, 0.1]]}},
        {"method": "set"},
    ):
        with open(bad, "w") as f:
            json.dump(raw, f)
        try:
            load_config(bad)
            logger.warning("config %s accepted", raw)
            fail = True
        except ValueError:
            pass

    cli_log = os.path.join(tmp, "cli.log")
    if main(["--log-file", cli_log, "--out-dir", os.path.join(tmp, "cli"), "train", "--preset", "smoke_synthetic", "--epochs", "1", "--seed", "3"]):
        logger.warning("cli train failed")
        fail = True
    if not os.path.exists(os.path.join(tmp, "cli", "dynamic_sparse-s0.8-seed3", "summary.json")):
        logger.warning("cli run wrote no summary")
        fail = True
    if not os.path.exists(cli_log):
        logger.warning("--log-file was not created")
        fail = True
    cli_run = os.path.join(tmp, "cli", "dynamic_sparse-s0.8-seed3")
    if main(["--out-dir", os.path.join(tmp, "cli"), "train", "--preset", "smoke_synthetic", "--epochs", "1", "--seed", "3", "--resume", cli_run]):
        logger.warning("cli resume from a run directory failed")
        fail = True
    if main(["--out-dir", tmp, "train", "--preset", "smoke_synthetic", "--resume", tmp]) != 2:
        logger.warning("resume from a directory without checkpoints did not fail cleanly")
        fail = True
    if main(["--out-dir", tmp, "train", "--preset", "no_such_preset"]) != 2:
        logger.warning("unknown preset did not fail cleanly")
        fail = True

if fail:
    sys.exit(1)
