"""Per-height phase timings and the run summary."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

CSV_HEADER = ("round", "height", "propose_ms", "vote_ms", "commit_ms", "storage_ms",
              "total_ms", "tx_count")


def _us(ms: float) -> int:
    return int(round(ms * 1000))


def _ms(us: int) -> str:
    return f"{us / 1000:.3f}"


@dataclass(frozen=True)
class RoundRow:
    """Phase durations kept in whole microseconds so the total is an exact sum."""

    round: int
    height: int
    propose_us: int
    vote_us: int
    commit_us: int
    storage_us: int
    tx_count: int

    @classmethod
    def from_ms(cls, round_: int, height: int, propose: float, vote: float, commit: float,
                storage: float, tx_count: int) -> "RoundRow":
        return cls(round_, height, _us(propose), _us(vote), _us(commit), _us(storage), tx_count)

    @property
    def total_us(self) -> int:
        return self.propose_us + self.vote_us + self.commit_us + self.storage_us

    @property
    def consensus_us(self) -> int:
        return self.propose_us + self.vote_us + self.commit_us

    def cells(self) -> list[str]:
        return [str(self.round), str(self.height), _ms(self.propose_us), _ms(self.vote_us),
                _ms(self.commit_us), _ms(self.storage_us), _ms(self.total_us), str(self.tx_count)]


def distribution(values: Sequence[float]) -> dict[str, float]:
    if not values:
        return {"count": 0}
    arr = np.asarray(values, dtype=float)
    return {
        "count": int(arr.size),
        "mean": round(float(arr.mean()), 3),
        "median": round(float(np.percentile(arr, 50)), 3),
        "p90": round(float(np.percentile(arr, 90)), 3),
        "p99": round(float(np.percentile(arr, 99)), 3),
        "max": round(float(arr.max()), 3),
    }


@dataclass
class MetricsReport:
    rows: list[RoundRow] = field(default_factory=list)
    resolve_ms: list[float] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def phase_means(self) -> dict[str, float]:
        if not self.rows:
            return {}
        n = len(self.rows)
        cols = {
            "propose_ms": sum(r.propose_us for r in self.rows),
            "vote_ms": sum(r.vote_us for r in self.rows),
            "commit_ms": sum(r.commit_us for r in self.rows),
            "storage_ms": sum(r.storage_us for r in self.rows),
            "total_ms": sum(r.total_us for r in self.rows),
        }
        return {k: round(v / n / 1000, 3) for k, v in cols.items()}

    @property
    def mean_total_ms(self) -> float:
        return self.phase_means().get("total_ms", 0.0)

    @property
    def consensus_share(self) -> float:
        total = sum(r.total_us for r in self.rows)
        return sum(r.consensus_us for r in self.rows) / total if total else 0.0

    def summary(self) -> dict:
        out = {
            "blocks": len(self.rows),
            "phase_means": self.phase_means(),
            "consensus_share": round(self.consensus_share, 4),
            "total_ms": distribution([r.total_us / 1000 for r in self.rows]),
            "tx_committed_in_blocks": sum(r.tx_count for r in self.rows),
            "max_block_txs": max((r.tx_count for r in self.rows), default=0),
            "resolve_ms": distribution(self.resolve_ms),
        }
        out.update(self.extra)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for row in self.rows:
            w.writerow(row.cells())
        return buf.getvalue()

    def summary_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=2) + "\n"

    def write(self, out_dir: str | Path, stem: str = "metrics") -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"csv": out / f"{stem}.csv", "json": out / f"{stem}.json"}
        paths["csv"].write_text(self.to_csv())
        paths["json"].write_text(self.summary_json())
        return paths

    @classmethod
    def read_csv(cls, text: str) -> "MetricsReport":
        rows = []
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if tuple(header) != CSV_HEADER:
            raise ValueError(f"unexpected header {header}")
        for cells in reader:
            rows.append(RoundRow(int(cells[0]), int(cells[1]), *(_us(float(c)) for c in cells[2:6]),
                                 int(cells[7])))
        return cls(rows)
