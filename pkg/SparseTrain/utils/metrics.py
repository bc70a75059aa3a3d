import os
import csv
from typing import Dict, List, Optional, Sequence


class MetricLog:
    """
    Append-only CSV table. Rows live in memory and `flush()` rewrites the whole
    file through a temporary sibling and `os.replace`, so a reader never sees
    a half-written row. Column order is fixed by the first row (or `columns`).
    """

    def __init__(self, path: Optional[str] = None, columns: Optional[Sequence[str]] = None):
        self.path = path
        self.columns: List[str] = list(columns) if columns else []
        self.rows: List[Dict[str, object]] = []

    def append(self, row: Dict[str, object]):
        if not self.columns:
            self.columns = list(row.keys())
        unknown = [k for k in row if k not in self.columns]
        if unknown:
            raise ValueError(f"columns {unknown} not in log schema {self.columns}")
        self.rows.append(dict(row))

    def flush(self):
        if self.path is None:
            return
        tmp = f"{self.path}.tmp"
        with open(tmp, "w", newline="", encoding="utf8") as f:
            w = csv.DictWriter(f, fieldnames=self.columns)
            w.writeheader()
            for row in self.rows:
                w.writerow({k: _fmt(row.get(k, "")) for k in self.columns})
        os.replace(tmp, self.path)

    def column(self, name: str) -> list:
        return [r.get(name) for r in self.rows]

    def last(self) -> Dict[str, object]:
        return self.rows[-1] if self.rows else {}

    def __len__(self) -> int:
        return len(self.rows)

    @classmethod
    def read(cls, path: str) -> "MetricLog":
        with open(path, newline="", encoding="utf8") as f:
            reader = csv.DictReader(f)
            log = cls(None, reader.fieldnames or [])
            for row in reader:
                log.rows.append({k: _parse(v) for k, v in row.items()})
        log.path = path
        return log


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _parse(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


EPOCH_COLUMNS = (
    "epoch",
    "lr",
    "train_loss",
    "train_acc",
    "test_loss",
    "test_acc",
    "seconds",
    "global_sparsity",
    "active_count",
)


def epoch_columns(names: Sequence[str]) -> List[str]:
    return list(EPOCH_COLUMNS) + [f"s_{n}" for n in names]


def realloc_columns(names: Sequence[str]) -> List[str]:
    cols = ["epoch", "iteration", "step", "H_before", "H_after", "K", "R", "G", "overflow"]
    for n in names:
        cols += [f"K_{n}", f"G_{n}"]
    return cols
