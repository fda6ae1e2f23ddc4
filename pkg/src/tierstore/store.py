"""Durable schema-typed objects whose fields live on different tiers.

Fixed-width fields are stored inline in the record region; ``bytes`` and
``string`` fields store a handle to a buffer created on whichever tagged
tier has room.  Multi-tagged payloads can be demoted (or promoted) between
tiers, and a placement that must land on one tier evicts multi-tagged
residents, oldest first.
"""
from __future__ import annotations

import csv
import io
import itertools
import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from tierstore.schema import (
    LayoutPlan,
    ObjectSchema,
    SchemaError,
    Slot,
    compute_layout,
    parse_schema,
    unpack_value,
)
from tierstore.tiers import (
    NULL_HANDLE,
    CapacityExhausted,
    Tier,
    TierConfig,
    TierMetrics,
    decode_handle,
    open_tier,
    parse_tier_line,
)


class StoreError(Exception):
    pass


class KindMismatch(StoreError, TypeError):
    pass


class AllTiersFull(StoreError):
    def __init__(self, field: str, tiers: Iterable[str], size: int):
        self.field = field
        self.tiers = list(tiers)
        super().__init__(f"field {field!r}: no tier in {self.tiers} has room for {size} bytes")


class InsufficientSpace(StoreError):
    def __init__(self, tier: str, size: int, demotions: list):
        self.tier = tier
        self.demotions = demotions
        super().__init__(f"tier {tier!r}: cannot reclaim {size} bytes by demotion")


@dataclass(frozen=True)
class Demotion:
    root: int
    field: str
    source: str
    target: str
    size: int


@dataclass
class ObjectRef:
    store: Store
    schema: ObjectSchema
    layout: LayoutPlan
    root: int
    links: dict[str, int] = field(default_factory=dict)

    def get(self, name: str):
        return self.store.get_field(self, name)

    def set(self, name: str, value) -> None:
        self.store.set_field(self, name, value)

    __getitem__ = get
    __setitem__ = set

    def to_dict(self) -> dict:
        return {name: self.get(name) for name in self.schema.field_names}


@dataclass
class StoreMetrics:
    bytes_materialized: int = 0
    tiers: dict[str, TierMetrics] = field(default_factory=dict)

    @property
    def serde_events(self) -> int:
        return sum(m.serde_events for m in self.tiers.values())

    @property
    def injected_ns(self) -> float:
        return sum(m.injected_ns for m in self.tiers.values())

    def __sub__(self, other: StoreMetrics) -> StoreMetrics:
        tiers = {}
        for name, m in self.tiers.items():
            o = other.tiers.get(name, TierMetrics())
            tiers[name] = TierMetrics(
                **{k: getattr(m, k) - getattr(o, k) for k in m.__dataclass_fields__}
            )
        return StoreMetrics(self.bytes_materialized - other.bytes_materialized, tiers)

    def rows(self) -> list[tuple[str, float]]:
        rows = [("bytes_materialized", self.bytes_materialized), ("serde_events", self.serde_events)]
        for name, m in self.tiers.items():
            rows += [
                (f"{name}.bytes_read", m.bytes_read),
                (f"{name}.bytes_written", m.bytes_written),
                (f"{name}.serde_events", m.serde_events),
                (f"{name}.injected_ns", m.injected_ns),
            ]
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["counter", "value"])
        for name, value in self.rows():
            w.writerow([name, _fmt(value)])
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float) and v.is_integer():
        return str(int(v))
    return str(v)


@dataclass
class _Resident:
    obj: ObjectRef
    field: str
    tier: str
    size: int


def _check_kind(slot: Slot, value):
    kind = slot.kind
    if kind == "string":
        ok = isinstance(value, str)
    elif kind == "bytes":
        ok = isinstance(value, (bytes, bytearray, memoryview))
    elif kind.startswith("i"):
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    if not ok:
        raise KindMismatch(f"field {slot.name!r} is {kind}, got {type(value).__name__}")


class Store:
    def __init__(self, tiers: Iterable[Tier], profiler=None):
        self.tiers: dict[str, Tier] = {}
        self._by_id: dict[int, Tier] = {}
        for t in tiers:
            if t.name in self.tiers or t.tier_id in self._by_id:
                raise StoreError(f"duplicate tier {t.name!r}")
            self.tiers[t.name] = t
            self._by_id[t.tier_id] = t
        self.profiler = profiler
        self._materialized = 0
        self._counter_lock = threading.Lock()
        self._placement_lock = threading.RLock()
        self._locks: dict[int, threading.RLock] = {}
        self._locks_guard = threading.Lock()
        self._residents: OrderedDict[tuple[int, str], _Resident] = OrderedDict()

    @classmethod
    def open(cls, configs: Iterable[TierConfig], profiler=None) -> Store:
        return cls([open_tier(c) for c in configs], profiler=profiler)

    @property
    def tier_ids(self) -> dict[str, int]:
        return {name: t.tier_id for name, t in self.tiers.items()}

    def tier(self, name: str) -> Tier:
        try:
            return self.tiers[name]
        except KeyError:
            raise StoreError(f"no tier named {name!r}") from None

    def tier_of(self, handle: int) -> Tier:
        tid, _ = decode_handle(handle)
        try:
            return self._by_id[tid]
        except KeyError:
            raise StoreError(f"handle refers to unknown tier id {tid}") from None

    def _lock(self, root: int) -> threading.RLock:
        with self._locks_guard:
            lock = self._locks.get(root)
            if lock is None:
                lock = self._locks[root] = threading.RLock()
            return lock

    def _materialize(self, n: int) -> None:
        with self._counter_lock:
            self._materialized += n

    def parse_schema(self, text: str) -> ObjectSchema:
        return parse_schema(text, self.tier_ids)

    def layout(self, schema: ObjectSchema, assignment: Mapping[str, str] | None = None) -> LayoutPlan:
        return compute_layout(schema, assignment, self.tier_ids)

    # objects ----------------------------------------------------------------

    def create_object(self, schema: ObjectSchema, layout: LayoutPlan | None = None) -> ObjectRef:
        """Allocate a zeroed record; variable fields start unset."""
        layout = layout or self.layout(schema)
        sizes = layout.sizes
        home = self.tier(layout.home)
        root = home.alloc(layout.record_size)
        links = {}
        try:
            for region, offset in layout.links:
                h = self.tier(region).alloc(sizes[region])
                home.set_handle(root, offset, h)
                links[region] = h
        except CapacityExhausted:
            for region, h in links.items():
                self.tier(region).free(h, sizes[region])
            home.free(root, layout.record_size)
            raise
        return ObjectRef(self, schema, layout, root, links)

    def attach(self, schema: ObjectSchema, layout: LayoutPlan | None, root: int) -> ObjectRef:
        """Rebind to an existing record (for example after reopening the store)."""
        layout = layout or self.layout(schema)
        if root == NULL_HANDLE:
            raise StoreError("cannot attach to the null handle")
        home = self.tier_of(root)
        links = {region: home.get_handle(root, offset) for region, offset in layout.links}
        return ObjectRef(self, schema, layout, root, links)

    def _region(self, obj: ObjectRef, slot: Slot) -> tuple[Tier, int]:
        handle = obj.root if slot.region == obj.layout.home else obj.links[slot.region]
        return self.tier_of(handle), handle

    def _payload_handle(self, obj: ObjectRef, slot: Slot) -> int:
        home = self.tier_of(obj.root)
        return home.get_handle(obj.root, slot.offset)

    def payload_tier(self, obj: ObjectRef, name: str) -> str | None:
        """Tier currently holding the payload of a variable field (None when unset)."""
        slot = obj.layout.slot(name)
        if not slot.variable:
            return self._region(obj, slot)[0].name
        h = self._payload_handle(obj, slot)
        return None if h == NULL_HANDLE else self.tier_of(h).name

    def _record(self, name: str, tiers: list[Tier], before: list[float], nbytes: int,
                write: bool = False) -> None:
        ns = sum(t.metrics.device_ns - b for t, b in zip(tiers, before))
        self.profiler.record_access(name, tiers[-1].name, nbytes, ns, write=write)

    def get_field(self, obj: ObjectRef, name: str):
        """Return the field value; unset variable fields return None."""
        slot = obj.layout.slot(name)
        with self._lock(obj.root):
            if not slot.variable:
                tier, handle = self._region(obj, slot)
                before = [tier.metrics.device_ns] if self.profiler else None
                raw = tier.read(handle, slot.offset, slot.width)
                self._materialize(slot.width)
                if self.profiler:
                    self._record(name, [tier], before, slot.width)
                return unpack_value(slot.kind, raw)
            home = self.tier_of(obj.root)
            h = home.get_handle(obj.root, slot.offset)
            if h == NULL_HANDLE:
                return None
            payload_tier = self.tier_of(h)
            before = [home.metrics.device_ns, payload_tier.metrics.device_ns] if self.profiler else None
            data = payload_tier.retrieve_buffer(h)
        self._materialize(len(data))
        if self.profiler:
            self._record(name, [home, payload_tier], before, len(data))
        return data.decode("utf-8") if slot.kind == "string" else data

    def set_field(self, obj: ObjectRef, name: str, value) -> None:
        slot = obj.layout.slot(name)
        _check_kind(slot, value)
        if not slot.variable:
            with self._lock(obj.root):
                tier, handle = self._region(obj, slot)
                before = [tier.metrics.device_ns] if self.profiler else None
                try:
                    tier.set_val(handle, slot.offset, value, slot.kind)
                except struct.error:
                    raise ValueError(f"field {name!r}: {value!r} does not fit {slot.kind}") from None
                if self.profiler:
                    self._record(name, [tier], before, slot.width, write=True)
            return

        data = value.encode("utf-8") if isinstance(value, str) else bytes(value)
        spec = obj.schema.field(name)
        with self._placement_lock:
            size = self.tier(slot.tier).buffer_size(len(data))
            try:
                target = self.place_field(obj, name, size)
            except AllTiersFull:
                if len(spec.tags) != 1:
                    raise
                self.evict_for(spec.tags[0], size)
                target = spec.tags[0]
            tier = self.tier(target)
            with self._lock(obj.root):
                home = self.tier_of(obj.root)
                before = [home.metrics.device_ns, tier.metrics.device_ns] if self.profiler else None
                old = home.get_handle(obj.root, slot.offset)
                new = tier.create_buffer(data)
                home.set_handle(obj.root, slot.offset, new)
                if old != NULL_HANDLE:
                    self._free_buffer(old)
                self._note_resident(obj, spec.name, spec.tags, target, size)
            if self.profiler:
                self._record(name, [home, tier], before, len(data), write=True)

    def _free_buffer(self, handle: int) -> None:
        tier = self.tier_of(handle)
        tier.free(handle, tier.buffer_size(tier.stored_length(handle)))

    def _note_resident(self, obj: ObjectRef, name: str, tags, tier: str, size: int) -> None:
        key = (obj.root, name)
        self._residents.pop(key, None)
        if len(tags) > 1:
            self._residents[key] = _Resident(obj, name, tier, size)

    # placement --------------------------------------------------------------

    def place_field(self, obj: ObjectRef, name: str, size: int | None = None) -> str:
        """First tier in the field's preference order with room for ``size`` bytes.

        The layout's assigned tier is tried first, then the remaining tags in order.
        """
        spec = obj.schema.field(name)
        slot = obj.layout.slot(name)
        if size is None:
            size = self.tier(slot.tier).buffer_size(0)
        order = [slot.tier] + [t for t in spec.tags if t != slot.tier]
        for t in order:
            if t in self.tiers and self.tiers[t].can_fit(size):
                return t
        raise AllTiersFull(name, order, size)

    def _move(self, obj: ObjectRef, name: str, to: str) -> Demotion | None:
        spec = obj.schema.field(name)
        slot = obj.layout.slot(name)
        if not slot.variable:
            raise StoreError(f"field {name!r} is inline ({slot.kind}); it moves only with its record")
        if to not in spec.tags:
            raise StoreError(f"tier {to!r} is not among the tags {list(spec.tags)} of field {name!r}")
        target = self.tier(to)
        with self._placement_lock, self._lock(obj.root):
            home = self.tier_of(obj.root)
            old = home.get_handle(obj.root, slot.offset)
            if old == NULL_HANDLE:
                raise StoreError(f"field {name!r} is unset; nothing to move")
            source = self.tier_of(old)
            if source is target:
                return None
            data = source.retrieve_buffer(old)
            size = target.buffer_size(len(data))
            new = target.create_buffer(data)
            home.set_handle(obj.root, slot.offset, new)
            source.free(old, source.buffer_size(len(data)))
            self._note_resident(obj, name, spec.tags, to, size)
        return Demotion(obj.root, name, source.name, to, size)

    def demote_field(self, obj: ObjectRef, name: str, to: str) -> None:
        self._move(obj, name, to)

    def promote_field(self, obj: ObjectRef, name: str, to: str) -> None:
        self._move(obj, name, to)

    def evict_for(self, tier_name: str, size: int) -> list[Demotion]:
        """Demote multi-tagged payloads off ``tier_name`` until ``size`` bytes fit."""
        tier = self.tier(tier_name)
        with self._placement_lock:
            if tier.can_fit(size):
                return []
            candidates = [r for r in self._residents.values() if r.tier == tier_name]

            def target_for(r: _Resident) -> str | None:
                tags = r.obj.schema.field(r.field).tags
                for t in tags[tags.index(tier_name) + 1 :]:
                    if t in self.tiers and self.tiers[t].can_fit(r.size):
                        return t
                return None

            reclaimable = sum(r.size for r in candidates if target_for(r) is not None)
            if tier.capacity - tier.used + reclaimable < size:
                raise InsufficientSpace(tier_name, size, [])
            done = []
            for r in candidates:
                if tier.can_fit(size):
                    break
                to = target_for(r)
                if to is None:
                    continue
                d = self._move(r.obj, r.field, to)
                if d is not None:
                    done.append(d)
            if not tier.can_fit(size):
                raise InsufficientSpace(tier_name, size, done)
            return done

    def residents(self, tier_name: str | None = None) -> list[tuple[int, str, str]]:
        return [
            (r.obj.root, r.field, r.tier)
            for r in self._residents.values()
            if tier_name is None or r.tier == tier_name
        ]

    # raw buffers --------------------------------------------------------------

    def put_blob(self, tier_name: str, data: bytes) -> int:
        return self.tier(tier_name).create_buffer(data)

    def get_blob(self, handle: int) -> bytes:
        """Retrieve a whole buffer into working memory, counting it as materialized."""
        data = self.tier_of(handle).retrieve_buffer(handle)
        self._materialize(len(data))
        return data

    def count_materialized(self, n: int) -> None:
        self._materialize(n)

    # durability and reporting ------------------------------------------------

    def root_map(self, tier_name: str | None = None):
        """The store's durable root directory (a DurableMap anchored in the tier header)."""
        from tierstore.durable import DurableMap

        tier = self.tier(tier_name or ("pmem" if "pmem" in self.tiers else next(iter(self.tiers))))
        with self._placement_lock:
            if tier.root == NULL_HANDLE:
                m = DurableMap.create(self, tier.name)
                tier.root = m.header
                return m
            return DurableMap(self, tier.root)

    def metrics(self) -> StoreMetrics:
        return StoreMetrics(
            self._materialized, {name: t.metrics.copy() for name, t in self.tiers.items()}
        )

    def sync(self) -> None:
        for t in self.tiers.values():
            t.sync()

    def close(self) -> None:
        for t in self.tiers.values():
            t.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# manifest ----------------------------------------------------------------


def write_manifest(
    path: str | Path,
    configs: Iterable[TierConfig],
    schema_path: str | Path | None = None,
    assignment: Mapping[str, str] | None = None,
) -> None:
    lines = ["# tierstore manifest"]
    lines += [f"tier {c.to_line()}" for c in configs]
    if schema_path is not None:
        lines.append(f"schema {schema_path}")
    for name, tier in (assignment or {}).items():
        lines.append(f"assign {name} {tier}")
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class Manifest:
    tiers: list[TierConfig]
    schema_path: Path | None = None
    assignment: dict[str, str] = field(default_factory=dict)

    def open(self, profiler=None) -> tuple[Store, ObjectSchema | None, LayoutPlan | None]:
        store = Store.open(self.tiers, profiler=profiler)
        if self.schema_path is None:
            return store, None, None
        schema = store.parse_schema(self.schema_path.read_text())
        layout = store.layout(schema, self.assignment or None)
        return store, schema, layout


def read_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    m = Manifest([])
    ids = itertools.count(3)
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, rest = line.partition(" ")
        rest = rest.strip()
        try:
            if key == "tier":
                cfg = parse_tier_line(rest, path.parent)
                if cfg.tier_id == 3:
                    cfg = parse_tier_line(rest, path.parent, tier_id=next(ids))
                m.tiers.append(cfg)
            elif key == "schema":
                p = Path(rest)
                m.schema_path = p if p.is_absolute() else path.parent / p
            elif key == "assign":
                name, tier = rest.split()
                m.assignment[name] = tier
            else:
                raise ValueError(f"unknown directive {key!r}")
        except ValueError as e:
            raise SchemaError(f"{path}:{lineno}: {e}") from None
    return m
