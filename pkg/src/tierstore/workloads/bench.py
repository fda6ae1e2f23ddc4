"""Layout modes, bench reports and phase timing shared by the workloads."""
from __future__ import annotations

import csv
import enum
import io
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from tierstore.store import Store, StoreMetrics
from tierstore.tiers import TierConfig


class LayoutMode(str, enum.Enum):
    NO_PMEM = "no-pmem"
    ALL_PMEM = "all-pmem"
    SELECT_PMEM = "select-pmem"

    @classmethod
    def parse(cls, text: str) -> LayoutMode:
        t = text.strip().lower().replace("_", "-")
        for m in cls:
            if m.value == t:
                return m
        raise ValueError(f"unknown layout mode {text!r} (choose from {[m.value for m in cls]})")


@dataclass
class BenchReport:
    workload: str
    mode: str
    records: int
    load_ns: float
    exec_ns: float
    load_wall_ns: int
    exec_wall_ns: int
    load_injected_ns: float
    exec_injected_ns: float
    load_serde_events: int
    serde_events: int
    bytes_materialized: int
    checksum: str

    def to_csv(self, timing: bool = True) -> str:
        row = asdict(self)
        if not timing:
            for k in ("load_ns", "exec_ns", "load_wall_ns", "exec_wall_ns"):
                row.pop(k)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(row))
        w.writerow([_fmt(v) for v in row.values()])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> BenchReport:
        rows = list(csv.reader(io.StringIO(text)))
        data = dict(zip(rows[0], rows[1]))
        kw = {}
        for f in fields(cls):
            v = data.get(f.name)
            if v is None:
                kw[f.name] = 0 if f.type in ("int", "float") else ""
            elif f.type == "int":
                kw[f.name] = int(v)
            elif f.type == "float":
                kw[f.name] = float(v)
            else:
                kw[f.name] = v
        return cls(**kw)


def _fmt(v) -> str:
    if isinstance(v, float):
        return str(int(v)) if v.is_integer() else repr(v)
    return str(v)


class Phase:
    """Times a block: wall clock plus latency injected by the tiers meanwhile."""

    def __init__(self, store: Store):
        self.store = store

    def __enter__(self) -> Phase:
        self._m0 = self.store.metrics()
        self._t0 = time.perf_counter_ns()
        return self

    def __exit__(self, *exc):
        self.wall_ns = time.perf_counter_ns() - self._t0
        self.delta: StoreMetrics = self.store.metrics() - self._m0
        self.injected_ns = self.delta.injected_ns
        self.total_ns = self.wall_ns + self.injected_ns


def make_report(workload: str, mode: LayoutMode | str, records: int, load: Phase, run: Phase,
                checksum: str) -> BenchReport:
    return BenchReport(
        workload=workload,
        mode=mode.value if isinstance(mode, LayoutMode) else str(mode),
        records=records,
        load_ns=load.total_ns,
        exec_ns=run.total_ns,
        load_wall_ns=load.wall_ns,
        exec_wall_ns=run.wall_ns,
        load_injected_ns=load.injected_ns,
        exec_injected_ns=run.injected_ns,
        load_serde_events=load.delta.serde_events,
        serde_events=run.delta.serde_events,
        bytes_materialized=run.delta.bytes_materialized,
        checksum=checksum,
    )


# (ns per access, read ns/byte, write ns/byte); DRAM 0.1 us and pmem 1 us per
# access, disk 100x pmem per byte
SYNTHETIC_LATENCY = {
    "dram": (100.0, 0.01, 0.01),
    "pmem": (1000.0, 0.1, 0.1),
    "disk": (20_000.0, 10.0, 10.0),
}


def bench_tiers(workdir: str | Path, dram: int = 256 << 20, pmem: int = 512 << 20,
                disk: int = 4 << 30, latency: bool = True) -> list[TierConfig]:
    """Default dram/pmem/disk tiers under ``workdir``."""
    workdir = Path(workdir)

    def lat(name):
        if not latency:
            return {}
        a, r, w = SYNTHETIC_LATENCY[name]
        return {"ns_per_access": a, "read_ns_per_byte": r, "write_ns_per_byte": w}

    return [
        TierConfig("dram", dram, "volatile", **lat("dram")),
        TierConfig("pmem", pmem, "mapped", workdir / "pmem.arena", **lat("pmem")),
        TierConfig("disk", disk, "dir", workdir / "disk", **lat("disk")),
    ]
