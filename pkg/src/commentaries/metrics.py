"""Append-only per-step metric records with a fixed CSV schema."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import astuple, dataclass
from pathlib import Path

COLUMNS = ("phase", "step", "seed", "train_loss", "val_loss", "test_acc", "wall_time_ms")


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class MetricsRow:
    phase: str
    step: int
    seed: int
    train_loss: float = math.nan
    val_loss: float = math.nan
    test_acc: float = math.nan
    wall_time_ms: int = 0


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


class MetricsLog:
    """Rows keep strictly increasing steps within each (phase, seed).

    ``timed=False`` records zero wall time so that output is a pure
    function of the run configuration.
    """

    def __init__(self, timed: bool = False):
        self.rows: list[MetricsRow] = []
        self.timed = timed
        self._last: dict[tuple[str, int], int] = {}
        self._t0 = time.perf_counter()

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def append(self, phase: str, step: int, seed: int, train_loss=math.nan, val_loss=math.nan,
               test_acc=math.nan) -> MetricsRow:
        key = (phase, int(seed))
        if key in self._last and step <= self._last[key]:
            raise MetricsError(f"step {step} not after {self._last[key]} for {key}")
        wall = int((time.perf_counter() - self._t0) * 1000) if self.timed else 0
        row = MetricsRow(phase, int(step), int(seed), float(train_loss), float(val_loss),
                         float(test_acc), wall)
        self.rows.append(row)
        self._last[key] = row.step
        return row

    def extend(self, other: "MetricsLog") -> None:
        for r in other.rows:
            key = (r.phase, r.seed)
            if key in self._last and r.step <= self._last[key]:
                raise MetricsError(f"merging would repeat step {r.step} for {key}")
            self.rows.append(r)
            self._last[key] = r.step

    def phases(self) -> list[str]:
        return list(dict.fromkeys(r.phase for r in self.rows))

    def select(self, phase: str, seed: int | None = None) -> list[MetricsRow]:
        return [r for r in self.rows if r.phase == phase and (seed is None or r.seed == seed)]

    def series(self, phase: str, column: str) -> dict[int, list[tuple[int, float]]]:
        out: dict[int, list[tuple[int, float]]] = {}
        for r in self.select(phase):
            out.setdefault(r.seed, []).append((r.step, getattr(r, column)))
        return out

    def write_csv(self, path) -> Path:
        if not self.rows:
            raise MetricsError("refusing to export an empty log")
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(v) for v in astuple(r)])
        return path

    @classmethod
    def read_csv(cls, path) -> "MetricsLog":
        log = cls()
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if tuple(header or ()) != COLUMNS:
                raise MetricsError(f"{path}: unexpected header {header}")
            for rec in reader:
                phase, step, seed, tl, vl, acc, wall = rec
                row = MetricsRow(phase, int(step), int(seed), float(tl), float(vl), float(acc), int(wall))
                key = (row.phase, row.seed)
                if key in log._last and row.step <= log._last[key]:
                    raise MetricsError(f"{path}: non-increasing step for {key}")
                log.rows.append(row)
                log._last[key] = row.step
        return log
