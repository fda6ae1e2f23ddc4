"""Collect the inputs of the placement optimizer.

Per field: access count F and stored size B.  Per device: capacity S and
failure probability P.  Per (field, device): access time C and
recomputation time R.  These round-trip through a small sectioned CSV::

    fields:
    age,120,4
    devices:
    pmem,1048576,0
    C:
    age,pmem,310.5
    R:
    age,pmem,0
"""
from __future__ import annotations

import bisect
import statistics
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

from tierstore.tiers import Tier


class ProfileError(ValueError):
    pass


@dataclass
class _FieldStats:
    reads: int = 0
    writes: int = 0
    bytes: int = 0

    @property
    def count(self) -> int:
        return self.reads + self.writes


class Profiler:
    """Exact (unsampled) access counters fed by an instrumented store."""

    def __init__(self):
        self._lock = threading.Lock()
        self._fields: dict[str, _FieldStats] = defaultdict(_FieldStats)
        # (field, device) -> [count, mean ns]
        self._latency: dict[tuple[str, str], list] = {}

    def record_access(self, field: str, device: str, nbytes: int, ns: float, write: bool = False) -> None:
        with self._lock:
            st = self._fields[field]
            if write:
                st.writes += 1
            else:
                st.reads += 1
            st.bytes += nbytes
            cell = self._latency.setdefault((field, device), [0, 0.0])
            cell[0] += 1
            cell[1] += (ns - cell[1]) / cell[0]

    def frequency(self, field: str) -> int:
        with self._lock:
            st = self._fields.get(field)
            return st.count if st else 0

    def write_fraction(self, field: str) -> float:
        st = self._fields.get(field)
        return st.writes / st.count if st and st.count else 0.0

    def mean_bytes(self, field: str) -> float:
        st = self._fields.get(field)
        return st.bytes / st.count if st and st.count else 0.0

    def observed_latency(self, field: str, device: str) -> float | None:
        cell = self._latency.get((field, device))
        return cell[1] if cell else None

    @property
    def fields(self) -> list[str]:
        return list(self._fields)


@dataclass(frozen=True)
class LatencyEstimate:
    read_ns: float
    write_ns: float


def microbench_device(tier: Tier, sizes: Iterable[int], repetitions: int = 32) -> dict[int, LatencyEstimate]:
    """Median device time per buffer write and read at each payload size.

    Device time is the configured injected latency when the tier has one,
    otherwise the measured wall time of the medium access.
    """
    if repetitions <= 0:
        raise ValueError("repetitions must be positive")
    out = {}
    m = tier.metrics
    for size in sizes:
        payload = bytes(size)
        reads, writes = [], []
        for _ in range(repetitions):
            t0 = m.device_ns
            h = tier.create_buffer(payload)
            t1 = m.device_ns
            tier.retrieve_buffer(h)
            t2 = m.device_ns
            tier.free(h, tier.buffer_size(size))
            writes.append(t1 - t0)
            reads.append(t2 - t1)
        out[size] = LatencyEstimate(statistics.median(reads), statistics.median(writes))
    return out


def interpolate(curve: Mapping[int, float], size: float) -> float:
    """Piecewise-linear lookup; constant below the smallest sample, linear extrapolation above."""
    xs = sorted(curve)
    if not xs:
        raise ProfileError("empty latency curve")
    if len(xs) == 1 or size <= xs[0]:
        return curve[xs[0]]
    i = bisect.bisect_left(xs, size)
    if i >= len(xs):
        i = len(xs) - 1
    x0, x1 = xs[i - 1], xs[i]
    y0, y1 = curve[x0], curve[x1]
    return y0 + (y1 - y0) * (size - x0) / (x1 - x0)


@dataclass
class ProfileData:
    fields: dict[str, tuple[float, float]] = field(default_factory=dict)  # name -> (F, B)
    devices: dict[str, tuple[float, float]] = field(default_factory=dict)  # name -> (S, P)
    C: dict[tuple[str, str], float] = field(default_factory=dict)
    R: dict[tuple[str, str], float] = field(default_factory=dict)

    def validate(self) -> None:
        for name, (F, B) in self.fields.items():
            if F < 0 or B <= 0:
                raise ProfileError(f"field {name!r}: need F >= 0 and B > 0, got F={F}, B={B}")
        for name, (S, P) in self.devices.items():
            if S <= 0 or not 0 <= P <= 1:
                raise ProfileError(f"device {name!r}: need S > 0 and 0 <= P <= 1, got S={S}, P={P}")
        missing = [(f, d) for f in self.fields for d in self.devices if (f, d) not in self.C]
        if missing:
            pairs = ", ".join(f"{f}/{d}" for f, d in missing)
            raise ProfileError(f"missing access time C for: {pairs}")
        for key in list(self.C) + list(self.R):
            if key[0] not in self.fields or key[1] not in self.devices:
                raise ProfileError(f"cost entry for unknown field/device {key[0]}/{key[1]}")
        for key, v in self.C.items():
            if v <= 0:
                raise ProfileError(f"C[{key[0]},{key[1]}] must be positive")
        for key, v in self.R.items():
            if v < 0:
                raise ProfileError(f"R[{key[0]},{key[1]}] must be non-negative")

    def to_problem(self, objects: int = 1, capacities: Mapping[str, float] | None = None):
        from tierstore.placement import PlacementProblem

        self.validate()
        fnames = list(self.fields)
        dnames = list(self.devices)
        caps = dict(capacities or {})
        return PlacementProblem(
            fields=fnames,
            devices=dnames,
            F=[self.fields[f][0] for f in fnames],
            B=[self.fields[f][1] for f in fnames],
            S=[caps.get(d, self.devices[d][0]) for d in dnames],
            P=[self.devices[d][1] for d in dnames],
            C=[[self.C[f, d] for d in dnames] for f in fnames],
            R=[[self.R.get((f, d), 0) for d in dnames] for f in fnames],
            X=objects,
        )


def _num(v) -> str:
    if isinstance(v, int):
        return str(v)
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def _parse_num(s: str):
    try:
        return int(s)
    except ValueError:
        return float(s)


def dumps_profile(profile: ProfileData) -> str:
    lines = ["fields:"]
    lines += [f"{n},{_num(F)},{_num(B)}" for n, (F, B) in profile.fields.items()]
    lines.append("devices:")
    lines += [f"{n},{_num(S)},{_num(P)}" for n, (S, P) in profile.devices.items()]
    lines.append("C:")
    lines += [f"{f},{d},{_num(v)}" for (f, d), v in profile.C.items()]
    lines.append("R:")
    lines += [f"{f},{d},{_num(v)}" for (f, d), v in profile.R.items()]
    return "\n".join(lines) + "\n"


def loads_profile(text: str) -> ProfileData:
    prof = ProfileData()
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.endswith(":") and "," not in line:
            section = line[:-1]
            if section not in ("fields", "devices", "C", "R"):
                raise ProfileError(f"line {lineno}: unknown section {section!r}")
            continue
        parts = [p.strip() for p in line.split(",")]
        try:
            if section == "fields" and len(parts) == 3:
                prof.fields[parts[0]] = (_parse_num(parts[1]), _parse_num(parts[2]))
            elif section == "devices" and len(parts) == 3:
                prof.devices[parts[0]] = (_parse_num(parts[1]), _parse_num(parts[2]))
            elif section in ("C", "R") and len(parts) == 3:
                getattr(prof, section)[parts[0], parts[1]] = _parse_num(parts[2])
            else:
                raise ValueError
        except ValueError:
            raise ProfileError(f"line {lineno}: malformed row {line!r} in section {section!r}") from None
    prof.validate()
    return prof


def export_profile(profile: ProfileData, path: str | Path) -> None:
    Path(path).write_text(dumps_profile(profile))


def import_profile(path: str | Path) -> ProfileData:
    return loads_profile(Path(path).read_text())


def build_profile(
    profiler: Profiler,
    devices: Mapping[str, tuple[float, float]],
    latency: Mapping[str, Mapping[int, LatencyEstimate]],
    recompute: Callable[[str, str], float] | Mapping[tuple[str, str], float] | None = None,
    fields: Iterable[str] | None = None,
    sizes: Mapping[str, float] | None = None,
) -> ProfileData:
    """Assemble a profile from counters and per-device latency curves.

    C for (field, device) is the device's read/write latency at the field's
    mean size, mixed by the field's observed write fraction.
    """
    prof = ProfileData(devices={d: (S, P) for d, (S, P) in devices.items()})
    for f in fields if fields is not None else profiler.fields:
        B = (sizes or {}).get(f) or profiler.mean_bytes(f) or 1
        prof.fields[f] = (profiler.frequency(f), B)
        wf = profiler.write_fraction(f)
        for d in devices:
            curve = latency[d]
            r = interpolate({s: e.read_ns for s, e in curve.items()}, B)
            w = interpolate({s: e.write_ns for s, e in curve.items()}, B)
            prof.C[f, d] = max((1 - wf) * r + wf * w, 1e-3)
            if recompute is None:
                prof.R[f, d] = 0
            elif callable(recompute):
                prof.R[f, d] = recompute(f, d)
            else:
                prof.R[f, d] = recompute.get((f, d), 0)
    prof.validate()
    return prof
