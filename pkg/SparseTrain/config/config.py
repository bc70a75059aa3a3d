import os
import json
from dataclasses import dataclass, field, fields, is_dataclass, asdict
from typing import Any, Dict, List, Optional, Union, get_args, get_origin, get_type_hints

METHODS = (
    "dynamic_sparse",
    "static_sparse",
    "thin_dense",
    "compressed_sparse",
    "set",
    "deepr",
    "hashed",
)

NETS = ("lenet300", "mlp", "small_cnn")

# [first_epoch, last_epoch, value], 1-based and inclusive
Schedule = List[List[float]]


def schedule_value(schedule: Schedule, epoch: int) -> float:
    for first, last, value in schedule:
        if first <= epoch <= last:
            return value
    raise ValueError(f"epoch {epoch} is not covered by schedule {schedule}")


def fit_schedule(schedule: Schedule, epochs: int) -> Schedule:
    """Stretch or squeeze the ranges of `schedule` so they tile [1, epochs]; empty ranges are dropped."""
    if epochs < 1 or not schedule:
        return [list(row) for row in schedule]
    end = schedule[-1][1]
    rows, first = [], 1
    for _, last, value in schedule:
        last = min(epochs, int(last * epochs / end + 0.5))
        if last < first:
            continue
        rows.append([first, last, value])
        first = last + 1
    rows[-1][1] = epochs
    return rows


def check_schedule(schedule: Schedule, epochs: int, name: str) -> List[str]:
    errors = []
    if not isinstance(schedule, list) or not schedule:
        return [f"{name}: must be a non-empty list of [first, last, value]"]
    expect = 1
    for row in schedule:
        if not isinstance(row, (list, tuple)) or len(row) != 3:
            errors.append(f"{name}: row {row!r} is not [first, last, value]")
            return errors
        first, last, _ = row
        if int(first) != first or int(last) != last:
            errors.append(f"{name}: epoch bounds must be integers, got {row!r}")
        elif first != expect:
            errors.append(f"{name}: expected a range starting at epoch {expect}, got {row!r}")
        elif last < first:
            errors.append(f"{name}: empty range {row!r}")
        expect = int(last) + 1
    if not errors and expect - 1 != epochs:
        errors.append(f"{name}: ranges end at epoch {expect - 1}, run has {epochs} epochs")
    return errors


@dataclass(repr=False, eq=False)
class Data:
    dataset: str = "mnist"
    dir: str = ""
    download: bool = False
    mean: float = 0.1307
    std: float = 0.3081
    augment: bool = False
    limit_train: int = 0
    limit_test: int = 0
    synthetic_n: int = 2000
    synthetic_test_n: int = 500
    synthetic_dim: int = 20
    synthetic_classes: int = 2
    synthetic_margin: float = 4.0

    def resolved_dir(self) -> str:
        if self.dir:
            return self.dir
        return os.environ.get("SPARSETRAIN_DATA_DIR", os.path.join(os.getcwd(), "data"))

    def validate(self) -> List[str]:
        errors = []
        if self.dataset not in ("mnist", "cifar10", "synthetic"):
            errors.append(f"data.dataset: unknown dataset {self.dataset!r}")
        if self.std <= 0:
            errors.append("data.std: must be > 0")
        if self.limit_train < 0 or self.limit_test < 0:
            errors.append("data.limit_*: must be >= 0")
        if self.synthetic_classes < 2:
            errors.append("data.synthetic_classes: need at least 2 classes")
        if self.synthetic_n < self.synthetic_classes or self.synthetic_dim < 1:
            errors.append("data.synthetic_n/synthetic_dim: too small")
        return errors


@dataclass(repr=False, eq=False)
class Train:
    epochs: int = 100
    batch_size: int = 100
    lr_schedule: Schedule = field(
        default_factory=lambda: [[1, 25, 0.1], [26, 50, 0.02], [51, 75, 0.04], [76, 100, 0.008]]
    )
    momentum: float = 0.9
    nesterov: bool = True
    l1: float = 0.0001
    l2: float = 0.0
    double_static_epochs: bool = True
    eval_batch_size: int = 1000
    show_tqdm: bool = True

    def lr_at(self, epoch: int, stretch: int = 1) -> float:
        # doubled-epoch baselines walk the same schedule at half speed
        return schedule_value(self.lr_schedule, (epoch + stretch - 1) // stretch)

    def validate(self) -> List[str]:
        errors = []
        if self.epochs < 0:
            errors.append("train.epochs: must be >= 0")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            errors.append("train.batch_size: must be >= 1")
        if self.momentum < 0 or self.momentum >= 1:
            errors.append("train.momentum: must be in [0, 1)")
        if self.l1 < 0 or self.l2 < 0:
            errors.append("train.l1/l2: must be >= 0")
        if self.epochs > 0:
            errors += check_schedule(self.lr_schedule, self.epochs, "train.lr_schedule")
            if any(row[2] < 0 for row in self.lr_schedule if len(row) == 3):
                errors.append("train.lr_schedule: learning rates must be >= 0")
        return errors


@dataclass(repr=False, eq=False)
class ReallocConfig:
    n_prune: int = 600
    tolerance: float = 0.1
    h0: float = 0.001
    period_schedule: Schedule = field(
        default_factory=lambda: [[1, 25, 100], [26, 50, 200], [51, 75, 400], [76, 100, 800]]
    )
    granularity: str = "weight"
    stop_epoch: Optional[int] = None

    def period_at(self, epoch: int, stretch: int = 1) -> int:
        return int(schedule_value(self.period_schedule, (epoch + stretch - 1) // stretch))

    def active_at(self, epoch: int) -> bool:
        return self.stop_epoch is None or epoch <= self.stop_epoch

    def validate(self, epochs: Optional[int] = None) -> List[str]:
        errors = []
        if self.n_prune < 1:
            errors.append("realloc.n_prune: N_p must be >= 1")
        if not 0 < self.tolerance < 1:
            errors.append("realloc.tolerance: delta must be in (0, 1)")
        if self.h0 <= 0:
            errors.append("realloc.h0: initial threshold must be > 0")
        if self.granularity not in ("weight", "kernel"):
            errors.append(f"realloc.granularity: unknown granularity {self.granularity!r}")
        if self.stop_epoch is not None and self.stop_epoch < 0:
            errors.append("realloc.stop_epoch: must be >= 0")
        if epochs:
            errors += check_schedule(self.period_schedule, epochs, "realloc.period_schedule")
            if any(row[2] < 1 for row in self.period_schedule if len(row) == 3):
                errors.append("realloc.period_schedule: P must be >= 1")
        return errors


@dataclass(repr=False, eq=False)
class SETConfig:
    n_prune: int = 600
    period_schedule: Schedule = field(
        default_factory=lambda: [[1, 25, 100], [26, 50, 200], [51, 75, 400], [76, 100, 800]]
    )

    def period_at(self, epoch: int, stretch: int = 1) -> int:
        return int(schedule_value(self.period_schedule, (epoch + stretch - 1) // stretch))

    def validate(self, epochs: Optional[int] = None) -> List[str]:
        errors = []
        if self.n_prune < 0:
            errors.append("set.n_prune: must be >= 0")
        if epochs:
            errors += check_schedule(self.period_schedule, epochs, "set.period_schedule")
        return errors


@dataclass(repr=False, eq=False)
class DeepRConfig:
    alpha: float = 1e-4
    temperature_schedule: Schedule = field(
        default_factory=lambda: [[1, 25, 1e-3], [26, 50, 1e-4], [51, 75, 1e-5], [76, 100, 1e-6]]
    )

    def temperature_at(self, epoch: int, stretch: int = 1) -> float:
        return schedule_value(self.temperature_schedule, (epoch + stretch - 1) // stretch)

    def validate(self, epochs: Optional[int] = None) -> List[str]:
        errors = []
        if self.alpha < 0:
            errors.append("deepr.alpha: must be >= 0")
        if epochs:
            errors += check_schedule(self.temperature_schedule, epochs, "deepr.temperature_schedule")
            if any(row[2] < 0 for row in self.temperature_schedule if len(row) == 3):
                errors.append("deepr.temperature_schedule: T must be >= 0")
        return errors


@dataclass(repr=False, eq=False)
class CompressionSchedule:
    iterations: int = 10
    epochs_between: int = 2
    epochs_post: int = 20
    lr_schedule: Schedule = field(
        default_factory=lambda: [[1, 20, 0.02], [21, 30, 0.004], [31, 40, 0.0008]]
    )
    per_layer: bool = False
    levels: Optional[List[float]] = None
    target: float = 0.9

    @property
    def total_epochs(self) -> int:
        return self.iterations * self.epochs_between + self.epochs_post

    def sparsity_at(self, t: int) -> float:
        """
        Cubic ramp from dense (t = 0) to the target sparsity (t = T):
        s_t = s * (1 - (1 - t/T)^3). The form printed in the compression
        literature, s + (1 - s)(1 - t/T)^3, starts at 1 and is not used.
        """
        if not 0 <= t <= self.iterations:
            raise ValueError(f"pruning event {t} outside [0, {self.iterations}]")
        if self.levels is not None:
            return 0.0 if t == 0 else float(self.levels[t - 1])
        if t == self.iterations:
            return self.target
        return self.target * (1.0 - (1.0 - t / self.iterations) ** 3)

    def validate(self) -> List[str]:
        errors = []
        if self.iterations < 1:
            errors.append("compression.iterations: T must be >= 1")
        if self.epochs_between < 0 or self.epochs_post < 0:
            errors.append("compression.epochs_*: must be >= 0")
        if not 0 < self.target < 1:
            errors.append("compression.target: must be in (0, 1)")
        if self.levels is not None:
            if len(self.levels) != self.iterations:
                errors.append("compression.levels: need exactly one level per pruning event")
            elif any(b < a for a, b in zip([0.0] + list(self.levels), self.levels)):
                errors.append("compression.levels: schedule must be non-decreasing")
            elif abs(self.levels[-1] - self.target) > 1e-12:
                errors.append("compression.levels: last level must equal the target sparsity")
        if self.total_epochs > 0:
            errors += check_schedule(self.lr_schedule, self.total_epochs, "compression.lr_schedule")
        return errors


@dataclass(repr=False, eq=False)
class HashedConfig:
    seed: int = 1

    def validate(self) -> List[str]:
        return [] if self.seed >= 0 else ["hashed.seed: must be >= 0"]


METHOD_SECTIONS = {
    "dynamic_sparse": ("realloc",),
    "static_sparse": (),
    "thin_dense": (),
    "compressed_sparse": ("compression",),
    "set": ("set",),
    "deepr": ("deepr",),
    "hashed": ("hashed",),
}

# schedules indexed by training epoch; compression has its own clock
EPOCH_SCHEDULES = {
    "realloc": ("period_schedule",),
    "set": ("period_schedule",),
    "deepr": ("temperature_schedule",),
}

SECTION_TYPES = {
    "realloc": ReallocConfig,
    "set": SETConfig,
    "deepr": DeepRConfig,
    "compression": CompressionSchedule,
    "hashed": HashedConfig,
}


@dataclass(repr=False, eq=False)
class RunConfig:
    method: str = "dynamic_sparse"
    net: str = "lenet300"
    sparsity: float = 0.9
    seed: int = 0
    name: str = ""
    hidden: List[int] = field(default_factory=lambda: [300, 100])
    cnn_width: int = 8
    data: Data = field(default_factory=Data)
    train: Train = field(default_factory=Train)
    realloc: Optional[ReallocConfig] = None
    set: Optional[SETConfig] = None
    deepr: Optional[DeepRConfig] = None
    compression: Optional[CompressionSchedule] = None
    hashed: Optional[HashedConfig] = None

    @property
    def epoch_multiplier(self) -> int:
        if self.method in ("static_sparse", "thin_dense") and self.train.double_static_epochs:
            return 2
        return 1

    @property
    def run_name(self) -> str:
        return self.name or f"{self.method}-s{self.sparsity:g}-seed{self.seed}"

    def with_method(self, method: str) -> "RunConfig":
        """
        Copy with `method` switched and its section filled with defaults.
        SET and dynamic sparse share N_p and the period schedule: a fresh
        `set` section takes them from `realloc` and the other way round.
        """
        cfg = from_dict(RunConfig, to_dict(self), "run")
        cfg.method = method
        for section in SECTION_TYPES:
            keep = section in METHOD_SECTIONS.get(method, ())
            if keep and getattr(cfg, section) is None:
                fresh = SECTION_TYPES[section]()
                twin = {"set": self.realloc, "realloc": self.set}.get(section)
                if twin is not None:
                    fresh.n_prune = twin.n_prune
                    fresh.period_schedule = [list(row) for row in twin.period_schedule]
                for attr in EPOCH_SCHEDULES.get(section, ()):
                    setattr(fresh, attr, fit_schedule(getattr(fresh, attr), cfg.train.epochs))
                setattr(cfg, section, fresh)
            elif not keep:
                setattr(cfg, section, None)
        if cfg.compression is not None:
            cfg.compression.target = cfg.sparsity
        return cfg

    def with_epochs(self, epochs: int) -> "RunConfig":
        """Copy with `train.epochs` changed and every per-epoch schedule refitted."""
        cfg = from_dict(RunConfig, to_dict(self), "run")
        cfg.train.epochs = epochs
        cfg.train.lr_schedule = fit_schedule(cfg.train.lr_schedule, epochs)
        for section, attrs in EPOCH_SCHEDULES.items():
            sec = getattr(cfg, section)
            for attr in attrs if sec is not None else ():
                setattr(sec, attr, fit_schedule(getattr(sec, attr), epochs))
        return cfg

    def validate(self):
        errors = _check_types(self, "run")
        if self.method not in METHODS:
            errors.append(f"run.method: unknown method {self.method!r}")
        if self.net not in NETS:
            errors.append(f"run.net: unknown network {self.net!r}")
        if not 0 < self.sparsity < 1:
            errors.append("run.sparsity: global sparsity must be in (0, 1)")
        if self.cnn_width < 1 or any(h < 1 for h in self.hidden):
            errors.append("run.hidden/cnn_width: widths must be >= 1")
        errors += self.data.validate()
        errors += self.train.validate()
        required = METHOD_SECTIONS.get(self.method, ())
        for section in SECTION_TYPES:
            present = getattr(self, section) is not None
            if section in required and not present:
                errors.append(f"run.{section}: required by method {self.method!r}")
            elif section not in required and present:
                errors.append(f"run.{section}: not used by method {self.method!r}")
        epochs = self.train.epochs
        if self.realloc is not None:
            errors += self.realloc.validate(epochs)
            if self.realloc.granularity == "kernel" and self.net != "small_cnn":
                errors.append("realloc.granularity: kernel granularity needs conv weights (small_cnn)")
        if self.set is not None:
            errors += self.set.validate(epochs)
        if self.deepr is not None:
            errors += self.deepr.validate(epochs)
        if self.compression is not None:
            errors += self.compression.validate()
            if abs(self.compression.target - self.sparsity) > 1e-12:
                errors.append("compression.target: must equal run.sparsity")
        if self.hashed is not None:
            errors += self.hashed.validate()
        if errors:
            raise ValueError("invalid run config:\n  " + "\n  ".join(errors))
        return self


@dataclass(repr=False, eq=False)
class Path:
    presets_dir: str = os.path.join(os.path.dirname(os.path.dirname(__file__)), "res", "presets")
    md5_map: str = os.path.join(os.path.dirname(os.path.dirname(__file__)), "res", "md5_map.json")
    run_root: str = "runs"


@dataclass(repr=False, eq=False)
class Config:
    path: Path = field(default_factory=Path)
    run: RunConfig = field(default_factory=RunConfig)


def _dataclass_of(tp) -> Optional[type]:
    if is_dataclass(tp):
        return tp
    if get_origin(tp) is Union:
        for arg in get_args(tp):
            if is_dataclass(arg):
                return arg
    return None


def _check_types(obj, where: str) -> List[str]:
    errors = []
    hints = get_type_hints(type(obj))
    for f in fields(obj):
        tp = hints[f.name]
        v = getattr(obj, f.name)
        if v is None:
            if get_origin(tp) is not Union:
                errors.append(f"{where}.{f.name}: must not be null")
            continue
        base = tp
        if get_origin(tp) is Union:
            base = next(a for a in get_args(tp) if a is not type(None))
        if is_dataclass(base):
            errors += _check_types(v, f"{where}.{f.name}")
        elif base is bool:
            if not isinstance(v, bool):
                errors.append(f"{where}.{f.name}: expected bool, got {v!r}")
        elif base is int:
            if isinstance(v, bool) or not isinstance(v, int):
                errors.append(f"{where}.{f.name}: expected int, got {v!r}")
        elif base is float:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                errors.append(f"{where}.{f.name}: expected number, got {v!r}")
        elif base is str:
            if not isinstance(v, str):
                errors.append(f"{where}.{f.name}: expected string, got {v!r}")
        elif get_origin(base) is list:
            if not isinstance(v, list):
                errors.append(f"{where}.{f.name}: expected list, got {v!r}")
    return errors


def from_dict(cls, d: Dict[str, Any], where: str = "run"):
    if not isinstance(d, dict):
        raise ValueError(f"{where}: expected an object, got {type(d).__name__}")
    hints = get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ValueError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for f in fields(cls):
        if f.name not in d:
            continue
        v = d[f.name]
        sub = _dataclass_of(hints[f.name])
        if sub is not None and v is not None:
            v = from_dict(sub, v, f"{where}.{f.name}")
        kwargs[f.name] = v
    return cls(**kwargs)


def to_dict(cfg) -> Dict[str, Any]:
    return asdict(cfg)


def load_config(path: str) -> RunConfig:
    with open(path, encoding="utf8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: not valid JSON: {e}") from e
    cfg = from_dict(RunConfig, raw, "run")
    if cfg.compression is not None:
        cfg.compression.target = cfg.sparsity
    return cfg.validate()


def load_preset(name: str) -> RunConfig:
    p = Path().presets_dir
    target = os.path.join(p, name if name.endswith(".json") else f"{name}.json")
    if not os.path.exists(target):
        available = sorted(x[:-5] for x in os.listdir(p) if x.endswith(".json"))
        raise ValueError(f"unknown preset {name!r}, available: {available}")
    return load_config(target)


def save_config(cfg: RunConfig, path: str):
    with open(path, "w", encoding="utf8") as f:
        json.dump(to_dict(cfg), f, indent=2)
