"""Per-epoch metrics records and their CSV persistence."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Union

CSV_HEADER = ("epoch", "train_loss", "train_top1", "eval_loss", "eval_top1", "lr", "wall_time_s")


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    train_top1_error: float
    eval_loss: float
    eval_top1_error: float
    lr: float
    wall_time_seconds: float
    diverged: bool = False

    def __post_init__(self):
        for err in (self.train_top1_error, self.eval_top1_error):
            if not math.isnan(err) and not 0.0 <= err <= 100.0:
                raise ValueError(f"top-1 error {err} outside [0, 100]")


def _fmt(x: float) -> str:
    return format(float(x), ".6g")


def format_row(rec: MetricsRecord) -> str:
    fields = (rec.train_loss, rec.train_top1_error, rec.eval_loss, rec.eval_top1_error,
              rec.lr, rec.wall_time_seconds)
    return ",".join([str(int(rec.epoch))] + [_fmt(v) for v in fields])


def write_metrics_csv(records: Iterable[MetricsRecord], path: Union[str, Path]) -> None:
    """Header plus one row per record; floats to 6 significant digits, UTF-8, LF."""
    lines = [",".join(CSV_HEADER)] + [format_row(r) for r in records]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_metrics_csv(path: Union[str, Path]) -> list[MetricsRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_HEADER:
            raise ValueError(f"unexpected metrics header: {header}")
        out = []
        for row in reader:
            if not row:
                continue
            epoch, *vals = row
            nums = [float(v) for v in vals]
            diverged = math.isnan(nums[0])
            out.append(MetricsRecord(int(epoch), *nums, diverged=diverged))
    return out


class CsvSink:
    """Append-only sink that rewrites the CSV after every record."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.records: list[MetricsRecord] = []
        write_metrics_csv(self.records, self.path)

    def append(self, record: MetricsRecord) -> None:
        self.records.append(record)
        with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
            fh.write(format_row(record) + "\n")
