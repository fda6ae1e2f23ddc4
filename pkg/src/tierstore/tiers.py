"""Storage tiers behind one allocator interface.

Every tier hands out 64-bit handles (tier id in the top byte, arena offset
in the low 56 bits) and supports the same primitives: ``alloc``/``free``,
fixed-width ``get_val``/``set_val``, raw ``read``/``write`` and
length-prefixed ``create_buffer``/``retrieve_buffer``.

Three backings exist:

* ``volatile``  -- a ``bytearray`` arena (DRAM).
* ``mapped``    -- a memory-mapped file arena with a 32-byte header (emulated pmem).
* ``dir``       -- one blob file per allocation plus ``index.log`` (disk).
  Every access to a dir tier is a (de)serialization and is counted.

Injected latency is charged to a simulated device clock instead of being
slept, so experiments are reproducible on any host.
"""
from __future__ import annotations

import bisect
import mmap
import os
import struct
import threading
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from tierstore.schema import DEFAULT_TIERS, kind_format

OFFSET_BITS = 56
OFFSET_MASK = (1 << OFFSET_BITS) - 1
NULL_HANDLE = 0

HEADER = struct.Struct("<4sIQQQ")  # magic, version, capacity, cursor, root
MAGIC = b"TIER"
FORMAT_VERSION = 1
LEN_PREFIX = struct.Struct("<Q")


class TierError(Exception):
    pass


class CapacityExhausted(TierError):
    def __init__(self, tier: str, requested: int, used: int, capacity: int):
        self.tier = tier
        self.requested = requested
        super().__init__(
            f"tier {tier!r}: cannot allocate {requested} bytes ({used}/{capacity} used)"
        )


class CorruptTier(TierError):
    pass


class OutOfBounds(TierError):
    pass


def encode_handle(tier_id: int, offset: int) -> int:
    if not 0 <= tier_id <= 255:
        raise ValueError(f"tier id {tier_id} outside [0, 255]")
    if not 0 <= offset <= OFFSET_MASK:
        raise ValueError(f"offset {offset} does not fit in {OFFSET_BITS} bits")
    return (tier_id << OFFSET_BITS) | offset


def decode_handle(handle: int) -> tuple[int, int]:
    return handle >> OFFSET_BITS, handle & OFFSET_MASK


def handle_tier(handle: int) -> int:
    return handle >> OFFSET_BITS


@dataclass(frozen=True)
class TierConfig:
    name: str
    capacity: int
    backing: str = "volatile"  # volatile | mapped | dir
    path: Path | None = None
    tier_id: int | None = None
    ns_per_access: float = 0.0
    read_ns_per_byte: float = 0.0
    write_ns_per_byte: float = 0.0

    def __post_init__(self):
        if self.tier_id is None:
            object.__setattr__(self, "tier_id", DEFAULT_TIERS.get(self.name, 3))
        if self.capacity <= 0:
            raise ValueError(f"tier {self.name!r}: capacity must be positive")
        if self.backing not in ("volatile", "mapped", "dir"):
            raise ValueError(f"unknown backing {self.backing!r}")
        if self.backing != "volatile" and self.path is None:
            raise ValueError(f"tier {self.name!r}: {self.backing} backing needs a path")
        if self.path is not None:
            object.__setattr__(self, "path", Path(self.path))

    @property
    def has_latency(self) -> bool:
        return bool(self.ns_per_access or self.read_ns_per_byte or self.write_ns_per_byte)

    def to_line(self) -> str:
        backing = self.backing if self.path is None else f"{self.backing}:{self.path}"
        parts = [self.name, str(self.capacity), backing]
        if self.has_latency:
            parts.append(_num(self.ns_per_access))
            if self.read_ns_per_byte or self.write_ns_per_byte:
                parts += [_num(self.read_ns_per_byte), _num(self.write_ns_per_byte)]
        return ",".join(parts)


def _num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


_SUFFIXES = {"k": 1 << 10, "kib": 1 << 10, "m": 1 << 20, "mib": 1 << 20, "g": 1 << 30, "gib": 1 << 30}


def parse_size(text: str) -> int:
    t = text.strip().lower()
    for suffix in sorted(_SUFFIXES, key=len, reverse=True):
        if t.endswith(suffix):
            return int(float(t[: -len(suffix)]) * _SUFFIXES[suffix])
    return int(t)


def parse_tier_line(line: str, base_dir: Path | None = None, tier_id: int | None = None) -> TierConfig:
    """Parse ``name,capacity,backing[,ns_per_access[,read_ns_per_byte,write_ns_per_byte]]``."""
    parts = [p.strip() for p in line.split(",")]
    if len(parts) not in (3, 4, 6):
        raise ValueError(f"bad tier line {line!r}")
    name, capacity, backing = parts[:3]
    path = None
    if ":" in backing:
        backing, raw = backing.split(":", 1)
        path = Path(raw)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
    nums = [float(p) for p in parts[3:]]
    return TierConfig(
        name=name,
        capacity=parse_size(capacity),
        backing=backing,
        path=path,
        tier_id=tier_id,
        ns_per_access=nums[0] if nums else 0.0,
        read_ns_per_byte=nums[1] if len(nums) > 1 else 0.0,
        write_ns_per_byte=nums[2] if len(nums) > 2 else 0.0,
    )


def load_tier_configs(path: str | os.PathLike) -> list[TierConfig]:
    path = Path(path)
    configs = []
    used_ids = set()
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            cfg = parse_tier_line(line, path.parent)
        except ValueError as e:
            raise ValueError(f"{path}:{lineno}: {e}") from None
        if cfg.name not in DEFAULT_TIERS:
            tid = 3
            while tid in used_ids:
                tid += 1
            cfg = replace(cfg, tier_id=tid)
        if cfg.tier_id in used_ids:
            raise ValueError(f"{path}:{lineno}: duplicate tier {cfg.name!r}")
        used_ids.add(cfg.tier_id)
        configs.append(cfg)
    return configs


@dataclass
class TierMetrics:
    reads: int = 0
    writes: int = 0
    bytes_read: int = 0
    bytes_written: int = 0
    serde_events: int = 0
    device_ns: float = 0.0
    injected_ns: float = 0.0

    def copy(self) -> TierMetrics:
        return TierMetrics(**asdict(self))


@dataclass(frozen=True)
class Usage:
    used: int
    capacity: int

    @property
    def free(self) -> int:
        return self.capacity - self.used


class Tier:
    """Allocator base: offset-space bookkeeping, metrics and latency charging."""

    block_device = False

    def __init__(self, config: TierConfig):
        if config.capacity <= 0:
            raise ValueError(f"tier {config.name!r}: capacity must be positive")
        self.config = config
        self.name = config.name
        self.tier_id = config.tier_id
        # tier 0 skips its first word so no allocation can encode to the null handle
        self._reserve = 8 if self.tier_id == 0 else 0
        if self._reserve + config.capacity > OFFSET_MASK:
            raise ValueError(
                f"tier {config.name!r}: capacity {config.capacity} exceeds the {OFFSET_BITS}-bit offset range"
            )
        self.capacity = config.capacity
        self._limit = self._reserve + config.capacity
        self._cursor = self._reserve
        self._free: list[tuple[int, int]] = []
        self._free_bytes = 0
        self._lock = threading.RLock()
        self.metrics = TierMetrics()
        self._root = NULL_HANDLE

    # offset-space bookkeeping -------------------------------------------

    @property
    def used(self) -> int:
        return self._cursor - self._reserve - self._free_bytes

    def usage(self) -> Usage:
        with self._lock:
            return Usage(self.used, self.capacity)

    def _find_extent(self, size: int) -> int | None:
        for i, (off, n) in enumerate(self._free):
            if n >= size:
                return i
        return None

    def can_fit(self, size: int) -> bool:
        with self._lock:
            if self.used + size > self.capacity:
                return False
            return self._find_extent(size) is not None or self._cursor + size <= self._limit

    def _take(self, size: int) -> int:
        if size <= 0:
            raise ValueError("allocation size must be positive")
        with self._lock:
            if self.used + size > self.capacity:
                raise CapacityExhausted(self.name, size, self.used, self.capacity)
            i = self._find_extent(size)
            if i is not None:
                off, n = self._free[i]
                if n == size:
                    del self._free[i]
                else:
                    self._free[i] = (off + size, n - size)
                self._free_bytes -= size
                return off
            if self._cursor + size > self._limit:
                raise CapacityExhausted(self.name, size, self.used, self.capacity)
            off = self._cursor
            self._cursor += size
            self._cursor_moved()
            return off

    def _give_back(self, off: int, size: int) -> None:
        with self._lock:
            i = bisect.bisect_left(self._free, (off, 0))
            if i < len(self._free) and self._free[i][0] < off + size:
                raise TierError(f"tier {self.name!r}: double free at offset {off}")
            if i > 0 and sum(self._free[i - 1]) > off:
                raise TierError(f"tier {self.name!r}: double free at offset {off}")
            self._free.insert(i, (off, size))
            self._free_bytes += size
            # coalesce with neighbours
            if i + 1 < len(self._free) and off + size == self._free[i + 1][0]:
                self._free[i] = (off, size + self._free[i + 1][1])
                del self._free[i + 1]
            if i > 0 and sum(self._free[i - 1]) == off:
                prev = self._free[i - 1]
                self._free[i - 1] = (prev[0], prev[1] + self._free[i][1])
                del self._free[i]
            # a free extent touching the cursor is returned to the bump region
            if self._free and sum(self._free[-1]) == self._cursor:
                off, n = self._free.pop()
                self._free_bytes -= n
                self._cursor = off
                self._cursor_moved()

    def _cursor_moved(self) -> None:
        pass

    def _check_handle(self, handle: int) -> int:
        tid, off = decode_handle(handle)
        if handle == NULL_HANDLE:
            raise TierError("null handle")
        if tid != self.tier_id:
            raise TierError(f"handle for tier {tid} used on tier {self.name!r} ({self.tier_id})")
        return off

    def _charge(self, nbytes: int, write: bool, wall_ns: int) -> None:
        cfg = self.config
        with self._lock:
            m = self.metrics
            if write:
                m.writes += 1
                m.bytes_written += nbytes
            else:
                m.reads += 1
                m.bytes_read += nbytes
            if self.block_device:
                m.serde_events += 1
            if cfg.has_latency:
                per_byte = cfg.write_ns_per_byte if write else cfg.read_ns_per_byte
                inj = cfg.ns_per_access + nbytes * per_byte
                m.injected_ns += inj
                m.device_ns += inj
            else:
                m.device_ns += wall_ns

    # public API -----------------------------------------------------------

    def alloc(self, size: int) -> int:
        """Reserve ``size`` zeroed bytes; returns the handle of the region."""
        off = self._take(size)
        self._zero(off, size)
        return encode_handle(self.tier_id, off)

    def free(self, handle: int, size: int) -> None:
        off = self._check_handle(handle)
        self._release(off, size)
        self._give_back(off, size)

    def get_val(self, handle: int, offset: int, kind: str):
        fmt = kind_format(kind)
        return struct.unpack(fmt, self.read(handle, offset, struct.calcsize(fmt)))[0]

    def set_val(self, handle: int, offset: int, value, kind: str) -> None:
        self.write(handle, offset, struct.pack(kind_format(kind), value))

    def get_handle(self, handle: int, offset: int) -> int:
        return LEN_PREFIX.unpack(self.read(handle, offset, 8))[0]

    def set_handle(self, handle: int, offset: int, value: int) -> None:
        self.write(handle, offset, LEN_PREFIX.pack(value))

    def buffer_size(self, payload_len: int) -> int:
        return LEN_PREFIX.size + payload_len

    @property
    def root(self) -> int:
        return self._root

    @root.setter
    def root(self, handle: int) -> None:
        self._root = handle
        self._store_root(handle)

    def _store_root(self, handle: int) -> None:
        pass

    # backend hooks
    def _zero(self, off: int, size: int) -> None:
        raise NotImplementedError

    def _release(self, off: int, size: int) -> None:
        pass

    def read(self, handle: int, offset: int, n: int) -> bytes:
        raise NotImplementedError

    def write(self, handle: int, offset: int, data: bytes) -> None:
        raise NotImplementedError

    def create_buffer(self, payload: bytes) -> int:
        raise NotImplementedError

    def retrieve_buffer(self, handle: int) -> bytes:
        raise NotImplementedError

    def stored_length(self, handle: int) -> int:
        """Payload length of the buffer at ``handle`` without materializing it."""
        raise NotImplementedError

    def sync(self) -> None:
        pass

    def close(self) -> None:
        pass

    def __repr__(self):
        return f"<{type(self).__name__} {self.name} id={self.tier_id} used={self.used}/{self.capacity}>"


class ArenaTier(Tier):
    """Byte-addressable tier over a contiguous memory object."""

    _mem: bytearray | mmap.mmap
    _base = 0

    def _zero(self, off, size):
        start = self._base + off
        self._mem[start : start + size] = bytes(size)

    def _span(self, handle: int, offset: int, n: int) -> int:
        off = self._check_handle(handle) + offset
        if offset < 0 or off < self._reserve or off + n > self._cursor:
            raise OutOfBounds(
                f"tier {self.name!r}: access [{off}, {off + n}) outside allocated space"
            )
        return self._base + off

    def read(self, handle, offset, n):
        t0 = time.perf_counter_ns()
        start = self._span(handle, offset, n)
        data = bytes(self._mem[start : start + n])
        self._charge(n, False, time.perf_counter_ns() - t0)
        return data

    def write(self, handle, offset, data):
        t0 = time.perf_counter_ns()
        start = self._span(handle, offset, len(data))
        self._mem[start : start + len(data)] = data
        self._charge(len(data), True, time.perf_counter_ns() - t0)

    def create_buffer(self, payload):
        payload = bytes(payload)
        t0 = time.perf_counter_ns()
        off = self._take(LEN_PREFIX.size + len(payload))
        start = self._base + off
        end = start + LEN_PREFIX.size + len(payload)
        self._mem[start:end] = LEN_PREFIX.pack(len(payload)) + payload
        self._charge(end - start, True, time.perf_counter_ns() - t0)
        return encode_handle(self.tier_id, off)

    def stored_length(self, handle):
        start = self._span(handle, 0, LEN_PREFIX.size)
        return LEN_PREFIX.unpack_from(self._mem, start)[0]

    def retrieve_buffer(self, handle):
        t0 = time.perf_counter_ns()
        start = self._span(handle, 0, LEN_PREFIX.size)
        n = LEN_PREFIX.unpack_from(self._mem, start)[0]
        if start - self._base + LEN_PREFIX.size + n > self._cursor:
            raise CorruptTier(f"tier {self.name!r}: buffer length {n} runs past allocated space")
        data = bytes(self._mem[start + LEN_PREFIX.size : start + LEN_PREFIX.size + n])
        self._charge(LEN_PREFIX.size + n, False, time.perf_counter_ns() - t0)
        return data

    def view(self, handle: int, offset: int, n: int) -> memoryview:
        """Zero-copy view; callers account for what they materialize."""
        start = self._span(handle, offset, n)
        return memoryview(self._mem)[start : start + n]


class VolatileTier(ArenaTier):
    def __init__(self, config: TierConfig):
        super().__init__(config)
        self._mem = bytearray(self._limit)


class MappedTier(ArenaTier):
    """Arena in a memory-mapped file; header and free list survive reopen after sync."""

    _base = HEADER.size

    def __init__(self, config: TierConfig):
        super().__init__(config)
        path = config.path
        size = HEADER.size + self._limit
        self._free_path = path.with_name(path.name + ".free")
        if path.exists():
            with open(path, "rb") as f:
                raw = f.read(HEADER.size)
            if len(raw) < HEADER.size:
                raise CorruptTier(f"{path}: truncated header")
            magic, version, capacity, cursor, root = HEADER.unpack(raw)
            if magic != MAGIC:
                raise CorruptTier(f"{path}: bad magic {magic!r}")
            if version != FORMAT_VERSION:
                raise CorruptTier(f"{path}: unsupported format version {version}")
            if capacity != config.capacity:
                raise TierError(f"{path}: capacity mismatch (file {capacity}, config {config.capacity})")
            if not self._reserve <= cursor <= self._limit or os.path.getsize(path) < size:
                raise CorruptTier(f"{path}: cursor {cursor} inconsistent with arena size")
            self._cursor = cursor
            self._root = root
            self._load_free_list()
        else:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "wb") as f:
                f.write(HEADER.pack(MAGIC, FORMAT_VERSION, config.capacity, self._cursor, 0))
                f.truncate(size)
        self._fd = open(path, "r+b")
        self._mem = mmap.mmap(self._fd.fileno(), size)

    def _load_free_list(self):
        if not self._free_path.exists():
            return
        for line in self._free_path.read_text().splitlines():
            off, n = (int(x) for x in line.split(","))
            self._free.append((off, n))
            self._free_bytes += n
        self._free.sort()

    def _cursor_moved(self):
        mem = getattr(self, "_mem", None)
        if mem is not None:
            struct.pack_into("<Q", mem, 16, self._cursor)

    def _store_root(self, handle):
        struct.pack_into("<Q", self._mem, 24, handle)

    def sync(self):
        with self._lock:
            self._cursor_moved()
            self._mem.flush()
            tmp = self._free_path.with_name(self._free_path.name + ".tmp")
            tmp.write_text("".join(f"{o},{n}\n" for o, n in self._free))
            os.replace(tmp, self._free_path)

    def close(self):
        if not self._mem.closed:
            self._mem.close()
            self._fd.close()


class DiskTier(Tier):
    """Block tier: each allocation is one file named by its offset."""

    block_device = True

    def __init__(self, config: TierConfig):
        super().__init__(config)
        self.dir = config.path
        self.dir.mkdir(parents=True, exist_ok=True)
        self._sizes: dict[int, int] = {}
        self._bases: list[int] = []
        self._dirty: set[int] = set()
        index = self.dir / "index.log"
        if index.exists():
            self._replay(index)
        root = self.dir / "root"
        if root.exists():
            self._root = int(root.read_text().strip() or "0")
        self._index = open(index, "a")

    def _replay(self, index: Path):
        for lineno, line in enumerate(index.read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                off, n = (int(x) for x in line.split(","))
            except ValueError:
                raise CorruptTier(f"{index}:{lineno}: bad index line {line!r}") from None
            if n == 0:
                self._sizes.pop(off, None)
            else:
                self._sizes[off] = n
        self._bases = sorted(self._sizes)
        # gaps between live blobs are free space; the cursor ends at the last live blob
        pos = self._reserve
        for off in self._bases:
            if off > pos:
                self._free.append((pos, off - pos))
                self._free_bytes += off - pos
            pos = off + self._sizes[off]
        self._cursor = pos

    def _blob(self, off: int) -> Path:
        return self.dir / f"{off:016x}.blob"

    def _register(self, off: int, size: int):
        with self._lock:
            self._sizes[off] = size
            bisect.insort(self._bases, off)
            self._index.write(f"{off},{size}\n")
            self._dirty.add(off)

    def _zero(self, off, size):
        with open(self._blob(off), "wb") as f:
            f.truncate(size)
        self._register(off, size)

    def _release(self, off, size):
        with self._lock:
            if self._sizes.get(off) != size:
                raise TierError(f"tier {self.name!r}: free of unknown blob at {off}")
            del self._sizes[off]
            self._bases.remove(off)
            self._dirty.discard(off)
            self._index.write(f"{off},0\n")
        self._blob(off).unlink(missing_ok=True)

    def _locate(self, handle: int, offset: int, n: int) -> tuple[int, int]:
        off = self._check_handle(handle) + offset
        with self._lock:
            i = bisect.bisect_right(self._bases, off) - 1
            base = self._bases[i] if i >= 0 else None
            if base is None or offset < 0 or off + n > base + self._sizes[base]:
                raise OutOfBounds(f"tier {self.name!r}: access [{off}, {off + n}) outside any blob")
        return base, off - base

    def read(self, handle, offset, n):
        t0 = time.perf_counter_ns()
        base, rel = self._locate(handle, offset, n)
        with open(self._blob(base), "rb") as f:
            f.seek(rel)
            data = f.read(n)
        self._charge(n, False, time.perf_counter_ns() - t0)
        return data

    def write(self, handle, offset, data):
        t0 = time.perf_counter_ns()
        base, rel = self._locate(handle, offset, len(data))
        with open(self._blob(base), "r+b") as f:
            f.seek(rel)
            f.write(data)
        with self._lock:
            self._dirty.add(base)
        self._charge(len(data), True, time.perf_counter_ns() - t0)

    def create_buffer(self, payload):
        payload = bytes(payload)
        t0 = time.perf_counter_ns()
        size = LEN_PREFIX.size + len(payload)
        off = self._take(size)
        fd = os.open(self._blob(off), os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o644)
        try:
            os.write(fd, LEN_PREFIX.pack(len(payload)) + payload)
        finally:
            os.close(fd)
        self._register(off, size)
        self._charge(size, True, time.perf_counter_ns() - t0)
        return encode_handle(self.tier_id, off)

    def stored_length(self, handle):
        base, rel = self._locate(handle, 0, LEN_PREFIX.size)
        return self._sizes[base] - LEN_PREFIX.size

    def retrieve_buffer(self, handle):
        t0 = time.perf_counter_ns()
        base, rel = self._locate(handle, 0, LEN_PREFIX.size)
        if rel != 0:
            raise TierError(f"tier {self.name!r}: handle does not start a buffer")
        fd = os.open(self._blob(base), os.O_RDONLY)
        try:
            raw = os.read(fd, self._sizes[base] + 1)
        finally:
            os.close(fd)
        if len(raw) < LEN_PREFIX.size:
            raise CorruptTier(f"tier {self.name!r}: buffer at {base} is truncated")
        n = LEN_PREFIX.unpack_from(raw)[0]
        if n != len(raw) - LEN_PREFIX.size:
            raise CorruptTier(
                f"tier {self.name!r}: buffer at {base} declares {n} bytes, holds {len(raw) - 8}"
            )
        self._charge(len(raw), False, time.perf_counter_ns() - t0)
        return raw[LEN_PREFIX.size :]

    def _store_root(self, handle):
        (self.dir / "root").write_text(str(handle))

    def sync(self):
        with self._lock:
            dirty, self._dirty = self._dirty, set()
            self._index.flush()
            os.fsync(self._index.fileno())
        for off in dirty:
            try:
                fd = os.open(self._blob(off), os.O_RDONLY)
            except FileNotFoundError:
                continue
            try:
                os.fsync(fd)
            finally:
                os.close(fd)
        dfd = os.open(self.dir, os.O_RDONLY)
        try:
            os.fsync(dfd)
        finally:
            os.close(dfd)

    def close(self):
        if not self._index.closed:
            self._index.close()


def open_tier(config: TierConfig) -> Tier:
    if config.backing == "volatile":
        return VolatileTier(config)
    if config.backing == "mapped":
        return MappedTier(config)
    return DiskTier(config)
