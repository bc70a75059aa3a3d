import os
import math
import time
import logging
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import torch
from tqdm import tqdm

from .config import Config, RunConfig, load_config, save_config, schedule_value, to_dict, from_dict
from .dataset import (
    Dataset,
    augment_cifar,
    has_mnist,
    iterate_batches,
    load_cifar10,
    load_mnist,
    synthetic_centers,
    synthetic_classification,
)
from .model import (
    DeepRState,
    HashedTensor,
    MaskedTensor,
    NesterovSGD,
    NetworkSpec,
    NonFiniteError,
    ReallocState,
    accuracy,
    backward,
    build_thin_dense,
    compress_iterative,
    count_parameters,
    deepr_step,
    dense_of,
    descriptive_length,
    forward,
    init_buffers,
    init_dense,
    init_hashed,
    init_sparse,
    lenet_300_100,
    mlp,
    realloc_step,
    realloc_step_structured,
    set_step,
    small_cnn,
    softmax_cross_entropy,
)
from .utils import MetricLog, RngStreams, make_run_dir, read_json, write_json
from .utils import logger as utils_logger
from .utils.ckpt import Checkpoint, load_checkpoint, save_checkpoint
from .utils.dl import download_mnist, load_md5_map
from .utils.io import resolve_runs
from .utils.metrics import epoch_columns, realloc_columns


class DivergenceError(RuntimeError):
    pass


@dataclass(repr=False, eq=False)
class TicketSpec:
    source: str
    init: Literal["original_snapshot", "fresh_random"] = "original_snapshot"
    mask: Literal["final"] = "final"
    epochs_multiplier: int = 2
    fresh_seed_offset: int = 1000
    name: str = ""


@dataclass(repr=False, eq=False)
class TrainRun:
    run_dir: Optional[str]
    config: RunConfig
    net: NetworkSpec
    params: list
    buffers: dict
    epochs: MetricLog
    reallocs: MetricLog
    summary: Dict[str, object] = field(default_factory=dict)


def stretch_schedule(schedule: List[List[float]], m: int) -> List[List[float]]:
    return [[(a - 1) * m + 1, b * m, v] for a, b, v in schedule]


def flat_schedule(schedule: List[List[float]], epochs: int) -> List[List[float]]:
    return [[1, epochs, schedule[0][2]]]


def _train_worker(cfg_dict: dict, out_dir: Optional[str], lv: int) -> Dict[str, object]:
    from tools.logger import get_logger

    trainer = Trainer(get_logger("SparseTrain.worker", lv))
    return trainer.train(from_dict(RunConfig, cfg_dict).validate(), out_dir).summary


class Trainer:
    def __init__(self, logger=logging.getLogger(__name__)):
        self.logger = logger
        utils_logger.set_logger(logger)

        self.config = Config()
        self.md5_map = load_md5_map(self.config.path.md5_map)
        self._data_cache: Dict[Tuple, Tuple[Dataset, Dataset]] = {}

    def load_data(self, cfg: RunConfig) -> Tuple[Dataset, Dataset]:
        d = cfg.data
        key = tuple(sorted(to_dict(d).items())) + (cfg.seed if d.dataset == "synthetic" else None,)
        if key in self._data_cache:
            return self._data_cache[key]
        if d.dataset == "synthetic":
            # data depends on the master seed only, never on the method
            centers = synthetic_centers(d.synthetic_dim, d.synthetic_classes, d.synthetic_margin, cfg.seed + 7919)
            train = synthetic_classification(
                d.synthetic_n, d.synthetic_dim, d.synthetic_classes, cfg.seed + 7919,
                d.synthetic_margin, "train", centers,
            )
            test = synthetic_classification(
                d.synthetic_test_n, d.synthetic_dim, d.synthetic_classes, cfg.seed + 104729,
                d.synthetic_margin, "test", centers,
            )
        elif d.dataset == "mnist":
            folder = d.resolved_dir()
            if not has_mnist(folder):
                if not d.download:
                    raise FileNotFoundError(f"no MNIST files in {folder}; set data.download or SPARSETRAIN_DATA_DIR")
                if not download_mnist(folder, self.md5_map):
                    raise FileNotFoundError(f"downloading MNIST into {folder} failed")
            train, test = load_mnist(folder, d.mean, d.std)
        else:
            train, test = load_cifar10(d.resolved_dir())
        train, test = train.subset(d.limit_train), test.subset(d.limit_test)
        if cfg.net == "small_cnn" and len(train.sample_shape) == 1:
            side = int(round(train.sample_shape[0] ** 0.5))
            if side * side != train.sample_shape[0]:
                raise ValueError(f"small_cnn needs image data, {train.sample_shape[0]} features are not a square")
            train.images = train.images.view(len(train), 1, side, side)
            test.images = test.images.view(len(test), 1, side, side)
        elif cfg.net != "small_cnn":
            train, test = train.flatten(), test.flatten()
        self.logger.info("data: %s / %s", train, test)
        self._data_cache[key] = (train, test)
        return train, test

    def build_net(self, cfg: RunConfig, sample_shape: Tuple[int, ...], classes: int) -> NetworkSpec:
        if cfg.net == "lenet300":
            net = lenet_300_100(sample_shape[0], classes)
        elif cfg.net == "mlp":
            net = mlp([sample_shape[0]] + list(cfg.hidden) + [classes])
        else:
            net = small_cnn(sample_shape[0], sample_shape[1], cfg.cnn_width, classes)
        if cfg.method == "thin_dense":
            net = build_thin_dense(net, cfg.sparsity)
        return net

    def init_params(self, cfg: RunConfig, net: NetworkSpec, rng: RngStreams) -> Tuple[list, List[torch.Tensor]]:
        dense = init_dense(net, rng.init)
        m = cfg.method
        if m in ("dynamic_sparse", "static_sparse", "set", "deepr"):
            granularity = cfg.realloc.granularity if cfg.realloc is not None else "weight"
            params = init_sparse(net, cfg.sparsity, rng.init, granularity, dense_values=dense)
        elif m == "compressed_sparse":
            params = [MaskedTensor.full(v.clone()) if s.sparse else v.clone() for s, v in zip(net.param_specs(), dense)]
        elif m == "hashed":
            params = init_hashed(net, cfg.sparsity, rng.init, cfg.hashed.seed, dense_values=dense)
        else:
            params = [v.clone() for v in dense]
        return params, dense

    def evaluate(self, net: NetworkSpec, params: list, buffers: dict, ds: Dataset, batch_size: int) -> Tuple[float, float]:
        total_loss = correct = 0.0
        for x, y in iterate_batches(ds, batch_size, shuffle=False):
            logits, _ = forward(net, params, x, buffers, train=False)
            loss, _ = softmax_cross_entropy(logits, y)
            total_loss += loss * len(y)
            correct += accuracy(logits, y) * len(y)
        return total_loss / len(ds), correct / len(ds)

    def train(
        self,
        cfg: RunConfig,
        out_dir: Optional[str] = None,
        resume: Optional[str] = None,
        initial_params: Optional[list] = None,
        data: Optional[Tuple[Dataset, Dataset]] = None,
        extra_summary: Optional[Dict[str, object]] = None,
    ) -> TrainRun:
        """
        Run one configured experiment end to end and return its state and
        logs. With `out_dir`, the run directory `out_dir/<run name>` receives
        config.json, init.ckpt, last.ckpt after every epoch, final.ckpt,
        epochs.csv, realloc.csv and summary.json. `resume` continues from a
        checkpoint written by an earlier call with the same config.
        """
        cfg.validate()
        torch.use_deterministic_algorithms(True)
        train_ds, test_ds = data if data is not None else self.load_data(cfg)
        net = self.build_net(cfg, train_ds.sample_shape, train_ds.num_classes)
        specs = net.param_specs()
        rng = RngStreams(cfg.seed)
        params, dense = self.init_params(cfg, net, rng)
        if initial_params is not None:
            params = initial_params
            dense = [dense_of(p).clone() for p in params]
        masked = [i for i, p in enumerate(params) if isinstance(p, MaskedTensor)]
        shared = [i for i, p in enumerate(params) if isinstance(p, HashedTensor)]
        names = [specs[i].name for i in masked + shared]
        buffers = init_buffers(net)
        t = cfg.train
        opt = NesterovSGD(params, t.momentum, t.l2, t.l1, t.nesterov)
        deepr_idx = masked if cfg.method == "deepr" else []
        deepr_state = DeepRState.from_tensors([params[i] for i in deepr_idx], rng.realloc) if deepr_idx else None
        state = ReallocState(cfg.realloc.h0) if cfg.realloc is not None else None
        stretch = cfg.epoch_multiplier
        pre_epochs = t.epochs * stretch
        total_epochs = pre_epochs + (cfg.compression.total_epochs if cfg.compression is not None else 0)

        run_dir = make_run_dir(out_dir, cfg.run_name) if out_dir else None
        path = (lambda f: os.path.join(run_dir, f)) if run_dir else (lambda f: None)
        epochs_log = MetricLog(path("epochs.csv"), epoch_columns(names))
        realloc_log = MetricLog(path("realloc.csv"), realloc_columns(names))
        start_epoch, iteration = 0, 0
        if resume is not None:
            start_epoch, iteration = self._restore(resume, net, params, buffers, opt, rng, state, deepr_state)
            if run_dir and os.path.exists(path("epochs.csv")):
                for log, file in ((epochs_log, "epochs.csv"), (realloc_log, "realloc.csv")):
                    old = MetricLog.read(path(file)) if os.path.exists(path(file)) else MetricLog()
                    log.rows = [r for r in old.rows if int(r["epoch"]) <= start_epoch]
            self.logger.info("resumed %s at epoch %d, iteration %d", cfg.run_name, start_epoch, iteration)
        elif run_dir:
            save_config(cfg, path("config.json"))
            save_checkpoint(Checkpoint(meta=self._meta(cfg, net, 0, 0, state), params=dense), path("init.ckpt"))

        def snapshot(epoch: int) -> Checkpoint:
            aux = {f"momentum.{i}": b for i, b in enumerate(opt.buffers)}
            for i, (mean, var) in buffers.items():
                aux[f"bn.{i}.mean"], aux[f"bn.{i}.var"] = mean, var
            if deepr_state is not None:
                aux.update({f"deepr.sign.{j}": s for j, s in enumerate(deepr_state.signs)})
            return Checkpoint(self._meta(cfg, net, epoch, iteration, state_box[0]), params, aux, rng.get_state())

        def log_epoch(epoch: int, lr, train_loss, train_acc, seconds):
            test_loss, test_acc = self.evaluate(net, params, buffers, test_ds, t.eval_batch_size)
            row = {
                "epoch": epoch, "lr": lr, "train_loss": train_loss, "train_acc": train_acc,
                "test_loss": test_loss, "test_acc": test_acc, "seconds": seconds,
            }
            row.update(self._sparsity_columns(params, masked + shared, names))
            epochs_log.append(row)
            epochs_log.flush()
            self.logger.info(
                "%s epoch %d/%d: test loss %.4f, test acc %.4f, sparsity %.4f",
                cfg.run_name, epoch, total_epochs, test_loss, test_acc, row["global_sparsity"],
            )

        def run_epoch(epoch: int, lr: float):
            nonlocal iteration
            began = time.perf_counter()
            loss_sum = acc_sum = 0.0
            seen = 0
            n_batches = (len(train_ds) + t.batch_size - 1) // t.batch_size
            pbar = tqdm(
                total=n_batches,
                desc=f"epoch {epoch}",
                leave=False,
                bar_format="{l_bar}{bar}| {n_fmt}/{total_fmt} [{elapsed}, {rate_fmt}{postfix}]",
                disable=not t.show_tqdm,
            )
            for x, y in iterate_batches(train_ds, t.batch_size, rng.shuffle):
                if cfg.data.augment and x.dim() == 4:
                    x = augment_cifar(x, rng.shuffle)
                try:
                    logits, cache = forward(net, params, x, buffers, train=True)
                    loss, grad = softmax_cross_entropy(logits, y)
                    if not math.isfinite(loss):
                        raise NonFiniteError(f"loss {loss}")
                    grads = backward(cache, grad)
                    opt.step(params, grads, lr, skip=deepr_idx)
                    if deepr_state is not None:
                        deepr_step(
                            [params[i] for i in deepr_idx], [grads[i] for i in deepr_idx], lr,
                            cfg.deepr.alpha, cfg.deepr.temperature_at(epoch, stretch), deepr_state,
                            rng.noise, rng.realloc,
                        )
                except NonFiniteError as e:
                    pbar.close()
                    raise DivergenceError(
                        f"{cfg.run_name} diverged at epoch {epoch}, iteration {iteration + 1}, lr {lr}: {e}"
                    ) from e
                iteration += 1
                loss_sum += loss * len(y)
                acc_sum += accuracy(logits, y) * len(y)
                seen += len(y)
                self._reparameterize(cfg, epoch, stretch, iteration, params, masked, names, opt, rng, realloc_log, state_box)
                pbar.update(1)
            pbar.close()
            seconds = time.perf_counter() - began
            log_epoch(epoch, lr, loss_sum / seen, acc_sum / seen, seconds)
            realloc_log.flush()
            if run_dir:
                save_checkpoint(snapshot(epoch), path("last.ckpt"))

        state_box = [state]
        if start_epoch == 0:
            log_epoch(0, "", "", "", "")
        for epoch in range(start_epoch + 1, pre_epochs + 1):
            run_epoch(epoch, t.lr_at(epoch, stretch))
        trace = []
        if cfg.compression is not None:
            cursor = [pre_epochs]
            sched = cfg.compression
            done = sum(
                1 for e in range(1, sched.iterations + 1)
                if pre_epochs + (e - 1) * sched.epochs_between + 1 <= start_epoch
            )

            def finetune(event: int, n: int):
                for _ in range(n):
                    cursor[0] += 1
                    if cursor[0] > start_epoch:
                        run_epoch(cursor[0], schedule_value(sched.lr_schedule, cursor[0] - pre_epochs))

            trace = compress_iterative(
                [params[i] for i in masked], sched, finetune, skip_events=done, after_prune=lambda: opt.mask_buffers(params)
            )
        final_loss, final_acc = epochs_log.last().get("test_loss"), epochs_log.last().get("test_acc")
        stored, dense_total = count_parameters(params)
        sparse_n = sum(specs[i].numel for i in masked + shared)
        s_global = epochs_log.last().get("global_sparsity", 0.0)
        seconds = [r["seconds"] for r in epochs_log.rows if r["epoch"] != 0 and r["seconds"] != ""]
        summary: Dict[str, object] = {
            "run": cfg.run_name,
            "method": cfg.method,
            "net": repr(net),
            "sparsity": cfg.sparsity,
            "seed": cfg.seed,
            "epochs": total_epochs,
            "iterations": iteration,
            "test_loss": final_loss,
            "test_acc": final_acc,
            "global_sparsity": s_global,
            "params_stored": stored,
            "params_dense_equivalent": dense_total,
            "params_sparse_tensors": sparse_n,
            "params_other_dense": stored - sum(
                (params[i].active_count if isinstance(params[i], MaskedTensor) else params[i].unique)
                for i in masked + shared
            ),
            "median_epoch_seconds": statistics.median(seconds) if seconds else 0.0,
            "tensors": {
                names[j]: {
                    "numel": specs[i].numel,
                    "active": params[i].active_count if isinstance(params[i], MaskedTensor) else params[i].unique,
                }
                for j, i in enumerate(masked + shared)
            },
            "size": vars(descriptive_length(sparse_n, float(s_global))) if sparse_n else {},
            "compression_trace": trace,
            "threshold": state_box[0].H if state_box[0] is not None else None,
        }
        if extra_summary:
            summary.update(extra_summary)
        if run_dir:
            save_checkpoint(snapshot(total_epochs), path("final.ckpt"))
            write_json(path("summary.json"), summary)
            self.logger.info("run %s finished: test acc %s, written to %s", cfg.run_name, final_acc, run_dir)
        return TrainRun(run_dir, cfg, net, params, buffers, epochs_log, realloc_log, summary)

    def _reparameterize(self, cfg, epoch, stretch, iteration, params, masked, names, opt, rng, realloc_log, state_box):
        if cfg.method == "dynamic_sparse" and cfg.realloc.active_at(epoch):
            if iteration % cfg.realloc.period_at(epoch, stretch):
                return
            tensors = [params[i] for i in masked]
            step = realloc_step_structured if cfg.realloc.granularity == "kernel" else realloc_step
            _, state_box[0], report = step(tensors, state_box[0], cfg.realloc, rng.realloc, names)
            opt.mask_buffers(params)
            row = {"epoch": epoch, "iteration": iteration}
            row.update(report.as_row(names))
            realloc_log.append(row)
        elif cfg.method == "set":
            if iteration % cfg.set.period_at(epoch, stretch):
                return
            ks = set_step([params[i] for i in masked], cfg.set.n_prune, rng.realloc, names)
            opt.mask_buffers(params)
            row = {"epoch": epoch, "iteration": iteration, "step": len(realloc_log), "K": sum(ks), "G": sum(ks)}
            for n, k in zip(names, ks):
                row[f"K_{n}"] = row[f"G_{n}"] = k
            realloc_log.append(row)

    @staticmethod
    def _sparsity_columns(params: list, idx: Sequence[int], names: Sequence[str]) -> Dict[str, object]:
        n = active = 0
        row: Dict[str, object] = {}
        for name, i in zip(names, idx):
            p = params[i]
            a = p.active_count if isinstance(p, MaskedTensor) else p.unique
            n += p.numel
            active += a
            row[f"s_{name}"] = 1.0 - a / p.numel
        if not idx:
            active = count_parameters(params)[0]
        row["global_sparsity"] = 1.0 - active / n if n else 0.0
        row["active_count"] = active
        return row

    @staticmethod
    def _meta(cfg: RunConfig, net: NetworkSpec, epoch: int, iteration: int, state) -> Dict[str, object]:
        return {
            "run": cfg.run_name,
            "method": cfg.method,
            "net": net.name,
            "epoch": epoch,
            "iteration": iteration,
            "H": state.H if state is not None else None,
            "step": state.step if state is not None else None,
            "names": [s.name for s in net.param_specs()],
        }

    def _restore(self, path, net, params, buffers, opt, rng, state, deepr_state) -> Tuple[int, int]:
        ckpt = load_checkpoint(path)
        names = [s.name for s in net.param_specs()]
        if ckpt.meta.get("names") != names:
            raise ValueError(f"{path}: checkpoint tensors {ckpt.meta.get('names')} do not match {names}")
        params[:] = ckpt.params
        for i, (mean, var) in buffers.items():
            mean.copy_(ckpt.aux[f"bn.{i}.mean"])
            var.copy_(ckpt.aux[f"bn.{i}.var"])
        opt.buffers = [ckpt.aux[f"momentum.{i}"].view_as(b) for i, b in enumerate(opt.buffers)]
        if deepr_state is not None:
            deepr_state.signs = [ckpt.aux[f"deepr.sign.{j}"] for j in range(len(deepr_state.signs))]
        if state is not None:
            state.H, state.step = ckpt.meta["H"], ckpt.meta["step"]
        rng.set_state(ckpt.rng)
        return int(ckpt.meta["epoch"]), int(ckpt.meta["iteration"])

    def compress(self, cfg: RunConfig, out_dir: Optional[str] = None) -> TrainRun:
        if cfg.method != "compressed_sparse":
            cfg = cfg.with_method("compressed_sparse")
        return self.train(cfg, out_dir)

    def static_sparse_run(self, cfg: RunConfig, out_dir: Optional[str] = None) -> TrainRun:
        """Random mask at init, never changed; epochs doubled unless disabled in the config."""
        if cfg.method != "static_sparse":
            cfg = cfg.with_method("static_sparse")
        return self.train(cfg, out_dir)

    def run_ticket(self, ts: TicketSpec, out_dir: Optional[str] = None) -> TrainRun:
        """
        Retrain the final mask of a finished sparse run with its structure
        frozen, starting either from the source run's own initial values or
        from a fresh draw, for `epochs_multiplier` times the source epochs.
        """
        if ts.mask != "final":
            raise ValueError(f"unknown mask source {ts.mask!r}")
        if ts.init not in ("original_snapshot", "fresh_random"):
            raise ValueError(f"unknown init source {ts.init!r}")
        if ts.epochs_multiplier < 0:
            raise ValueError("epochs_multiplier must be >= 0")
        src_cfg = load_config(os.path.join(ts.source, "config.json"))
        final = load_checkpoint(os.path.join(ts.source, "final.ckpt"))
        masks = [p.mask for p in final.params if isinstance(p, MaskedTensor)]
        if not masks:
            raise ValueError(f"run {ts.source} has no masked tensors to replay")

        cfg = src_cfg.with_method("static_sparse")
        cfg.name = ts.name or f"{src_cfg.run_name}-ticket-{ts.init}"
        m = ts.epochs_multiplier * src_cfg.epoch_multiplier
        cfg.train.double_static_epochs = False
        cfg.train.lr_schedule = stretch_schedule(src_cfg.train.lr_schedule, m) if m else src_cfg.train.lr_schedule
        cfg.train.epochs = src_cfg.train.epochs * m
        if src_cfg.compression is not None:
            raise ValueError("ticket replay of compressed runs is not supported")

        train_ds, test_ds = self.load_data(cfg)
        net = self.build_net(cfg, train_ds.sample_shape, train_ds.num_classes)
        if ts.init == "original_snapshot":
            values = load_checkpoint(os.path.join(ts.source, "init.ckpt")).params
        else:
            values = init_dense(net, RngStreams(cfg.seed + ts.fresh_seed_offset).init)
        params, k = [], 0
        for spec, v in zip(net.param_specs(), values):
            if spec.sparse:
                params.append(MaskedTensor(v.clone(), masks[k].clone()))
                k += 1
            else:
                params.append(v.clone())
        self.logger.info("ticket %s: mask from %s, init %s, %d epochs", cfg.name, ts.source, ts.init, cfg.train.epochs)
        return self.train(
            cfg, out_dir, initial_params=params, data=(train_ds, test_ds),
            extra_summary={"ticket_source": ts.source, "ticket_init": ts.init},
        )

    def run_earlystop_sweep(
        self,
        cfg: RunConfig,
        stop_epochs: Sequence[int],
        out_dir: Optional[str] = None,
        workers: int = 1,
    ) -> List[Dict[str, object]]:
        """One dynamic run per stop epoch with the total epoch count fixed."""
        if cfg.method != "dynamic_sparse":
            cfg = cfg.with_method("dynamic_sparse")
        configs = []
        for stop in stop_epochs:
            c = from_dict(RunConfig, to_dict(cfg))
            c.realloc.stop_epoch = int(stop)
            c.name = f"{cfg.run_name}-stop{stop}"
            configs.append(c.validate())
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_train_worker, to_dict(c), out_dir, self.logger.level) for c in configs]
                summaries = [f.result() for f in futures]
        else:
            summaries = [self.train(c, out_dir).summary for c in configs]
        rows = [
            {"stop_epoch": stop, "run": s["run"], "test_acc": s["test_acc"], "test_loss": s["test_loss"],
             "global_sparsity": s["global_sparsity"]}
            for stop, s in zip(stop_epochs, summaries)
        ]
        if out_dir:
            log = MetricLog(os.path.join(out_dir, f"{cfg.run_name}-earlystop.csv"))
            for r in rows:
                log.append(r)
            log.flush()
        return rows

    def measure_overhead(
        self,
        cfg: RunConfig,
        epochs: int = 10,
        methods: Sequence[str] = ("dynamic_sparse", "set", "deepr"),
        out_dir: Optional[str] = None,
    ) -> List[Dict[str, object]]:
        """
        Median training seconds per epoch (evaluation excluded) of each method
        relative to a static sparse run on identical data and epoch count.
        """
        if epochs < 10:
            raise ValueError(f"overhead needs at least 10 epochs, got {epochs}")
        data = self.load_data(cfg)
        timings: Dict[str, List[float]] = {}
        for method in ("static_sparse",) + tuple(methods):
            c = cfg.with_method(method)
            c.name = f"{cfg.run_name}-overhead-{method}"
            c.train.double_static_epochs = False
            c.train.epochs = epochs
            c.train.lr_schedule = flat_schedule(c.train.lr_schedule, epochs)
            if c.realloc is not None:
                c.realloc.period_schedule = flat_schedule(c.realloc.period_schedule, epochs)
            if c.set is not None:
                c.set.period_schedule = flat_schedule(c.set.period_schedule, epochs)
            if c.deepr is not None:
                c.deepr.temperature_schedule = flat_schedule(c.deepr.temperature_schedule, epochs)
            run = self.train(c, out_dir, data=data)
            timings[method] = [float(r["seconds"]) for r in run.epochs.rows if r["epoch"] != 0]
        base = timings["static_sparse"]
        base_median = statistics.median(base)
        rows = []
        for method, secs in timings.items():
            ratios = [a / b for a, b in zip(secs, base)]
            rows.append(
                {
                    "method": method,
                    "median_seconds": statistics.median(secs),
                    "ratio": statistics.median(secs) / base_median,
                    "ratio_std": statistics.stdev(ratios) if len(ratios) > 1 else 0.0,
                }
            )
            self.logger.info("overhead %s: ratio %.3f", method, rows[-1]["ratio"])
        if out_dir:
            log = MetricLog(os.path.join(out_dir, f"{cfg.run_name}-overhead.csv"))
            for r in rows:
                log.append(r)
            log.flush()
        return rows

    def report(self, run_ids: Sequence[str], out_dir: str, root: Optional[str] = None) -> Dict[str, str]:
        """
        Accuracy against parameter count, per-tensor final sparsity and size
        accounting for finished runs, as CSV tables and SVG figures. Parameter
        counts are the stored entries of sparse tensors plus every dense tensor.
        """
        if not run_ids:
            raise ValueError("report needs at least one run id")
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        dirs = resolve_runs(list(run_ids), root or self.config.path.run_root)
        summaries = [read_json(os.path.join(d, "summary.json")) for d in dirs]
        os.makedirs(out_dir, exist_ok=True)
        out = {k: os.path.join(out_dir, f"{k}.csv") for k in ("accuracy_vs_params", "layer_sparsity", "size_accounting")}

        acc = MetricLog(out["accuracy_vs_params"])
        layers = MetricLog(out["layer_sparsity"])
        size = MetricLog(out["size_accounting"])
        for s in summaries:
            acc.append({"run": s["run"], "method": s["method"], "sparsity": s["sparsity"], "seed": s["seed"],
                        "params": s["params_stored"], "test_acc": s["test_acc"]})
            for name, t in s["tensors"].items():
                layers.append({"run": s["run"], "tensor": name, "numel": t["numel"], "active": t["active"],
                               "sparsity": 1.0 - t["active"] / t["numel"]})
            sz = s.get("size") or {}
            size.append({
                "run": s["run"], "method": s["method"],
                "sparse_dense_count": sz.get("dense_count", 0), "sparsity": sz.get("sparsity", 0.0),
                "nonzero_count": sz.get("nonzero_count", 0), "descriptive_length_bits": sz.get("descriptive_length_bits", 0),
                "thin_dense_count": sz.get("thin_dense_count", 0), "other_dense": s["params_other_dense"],
                "params_reported": s["params_stored"],
            })
        for log in (acc, layers, size):
            log.flush()

        fig, ax = plt.subplots(figsize=(6, 4))
        for method in sorted({s["method"] for s in summaries}):
            pts = sorted((s["params_stored"], s["test_acc"]) for s in summaries if s["method"] == method)
            ax.plot([p for p, _ in pts], [a for _, a in pts], marker="o", label=method)
        ax.set_xscale("log")
        ax.set_xlabel("parameters (sparse non-zeros + dense tensors)")
        ax.set_ylabel("test accuracy")
        ax.legend()
        out["accuracy_vs_params_svg"] = os.path.join(out_dir, "accuracy_vs_params.svg")
        fig.savefig(out["accuracy_vs_params_svg"], format="svg")
        plt.close(fig)

        fig, ax = plt.subplots(figsize=(6, 4))
        width = 0.8 / len(summaries)
        for k, s in enumerate(summaries):
            names = list(s["tensors"])
            ax.bar(
                [i + k * width for i in range(len(names))],
                [1.0 - t["active"] / t["numel"] for t in s["tensors"].values()],
                width, label=s["run"],
            )
            ax.set_xticks(range(len(names)), names)
        ax.set_ylabel("final sparsity")
        ax.legend(fontsize="small")
        out["layer_sparsity_svg"] = os.path.join(out_dir, "layer_sparsity.svg")
        fig.savefig(out["layer_sparsity_svg"], format="svg")
        plt.close(fig)
        self.logger.info("report of %d runs written to %s", len(summaries), out_dir)
        return out
