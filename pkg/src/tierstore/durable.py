"""Durable array and hash map built on store handles.

Both live entirely inside one tier and are reachable from a single header
handle, so they survive a sync and reopen of a mapped or disk tier.
"""
from __future__ import annotations

import struct
from typing import Iterator

from tierstore.schema import LayoutPlan, ObjectSchema, SchemaError
from tierstore.store import ObjectRef, Store, StoreError
from tierstore.tiers import NULL_HANDLE, OFFSET_MASK

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = (1 << 64) - 1


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & MASK64
    return h


class DurableArray:
    """Fixed-length array of records laid out back to back after a 16-byte header."""

    HEADER = struct.Struct("<QQ")  # length, record size

    def __init__(self, store: Store, schema: ObjectSchema, header: int, layout: LayoutPlan | None = None):
        self.store = store
        self.schema = schema
        self.layout = layout or store.layout(schema)
        if self.layout.links:
            raise SchemaError("array elements must keep every inline field in one record region")
        self.header = header
        self.tier = store.tier_of(header)
        self.length, rs = self.HEADER.unpack(self.tier.read(header, 0, self.HEADER.size))
        if rs != self.layout.record_size:
            raise StoreError(f"array record size {rs} does not match layout ({self.layout.record_size})")
        self.record_size = rs
        self.base = header + self.HEADER.size

    @classmethod
    def create(cls, store: Store, schema: ObjectSchema, n: int, tier: str = "pmem",
               layout: LayoutPlan | None = None) -> DurableArray:
        layout = layout or store.layout(schema)
        if n < 0:
            raise ValueError("array length must be non-negative")
        t = store.tier(tier)
        header = t.alloc(cls.HEADER.size + n * layout.record_size)
        t.write(header, 0, cls.HEADER.pack(n, layout.record_size))
        return cls(store, schema, header, layout)

    def __len__(self) -> int:
        return self.length

    def _check(self, i: int) -> None:
        if not 0 <= i < self.length:
            raise IndexError(f"index {i} out of range for array of length {self.length}")

    def element(self, i: int) -> ObjectRef:
        self._check(i)
        return ObjectRef(self.store, self.schema, self.layout, self.base + i * self.record_size)

    def address(self, i: int, name: str) -> int:
        """Arena offset of field ``name`` of element ``i``."""
        self._check(i)
        return (self.base + i * self.record_size + self.layout.slot(name).offset) & OFFSET_MASK

    def get(self, i: int, name: str):
        return self.store.get_field(self.element(i), name)

    def set(self, i: int, name: str, value) -> None:
        self.store.set_field(self.element(i), name, value)

    def read_records(self, start: int, count: int) -> bytes:
        """Raw bytes of ``count`` consecutive records, materialized into working memory."""
        if count == 0:
            return b""
        self._check(start)
        self._check(start + count - 1)
        data = self.tier.read(self.base, start * self.record_size, count * self.record_size)
        self.store.count_materialized(len(data))
        return data

    def write_records(self, start: int, data: bytes) -> None:
        if len(data) % self.record_size:
            raise ValueError("data is not a whole number of records")
        count = len(data) // self.record_size
        if count == 0:
            return
        self._check(start)
        self._check(start + count - 1)
        self.tier.write(self.base, start * self.record_size, data)


class DurableMap:
    """Chained hash map from byte keys to 64-bit values (usually object handles).

    Header: bucket count, entry count, bucket-array handle.  Each entry is
    (key buffer handle, value, next entry handle, key hash).  The bucket
    array doubles before the load factor would exceed 0.75.
    """

    HEADER = struct.Struct("<QQQ")
    ENTRY = struct.Struct("<QQQQ")
    INITIAL_BUCKETS = 16
    MAX_LOAD = 0.75

    def __init__(self, store: Store, header: int):
        self.store = store
        self.header = header
        self.tier = store.tier_of(header)
        self._load_header()

    @classmethod
    def create(cls, store: Store, tier: str = "pmem", buckets: int = INITIAL_BUCKETS) -> DurableMap:
        t = store.tier(tier)
        header = t.alloc(cls.HEADER.size)
        array = t.alloc(8 * buckets)
        t.write(header, 0, cls.HEADER.pack(buckets, 0, array))
        return cls(store, header)

    def _load_header(self):
        self.nbuckets, self.size, self.buckets = self.HEADER.unpack(
            self.tier.read(self.header, 0, self.HEADER.size)
        )

    def _save_header(self):
        self.tier.write(self.header, 0, self.HEADER.pack(self.nbuckets, self.size, self.buckets))

    def _entry(self, h: int) -> tuple[int, int, int, int]:
        return self.ENTRY.unpack(self.tier.read(h, 0, self.ENTRY.size))

    def _find(self, key: bytes) -> tuple[int, int, int]:
        """Return (entry, previous entry, bucket index); entry is NULL when absent."""
        hv = fnv1a_64(key)
        b = hv % self.nbuckets
        prev = NULL_HANDLE
        e = self.tier.get_handle(self.buckets, 8 * b)
        while e != NULL_HANDLE:
            khandle, _, nxt, ehash = self._entry(e)
            if ehash == hv and self.tier.retrieve_buffer(khandle) == key:
                return e, prev, b
            prev, e = e, nxt
        return NULL_HANDLE, prev, b

    def __len__(self) -> int:
        return self.size

    def __contains__(self, key: bytes) -> bool:
        return self._find(bytes(key))[0] != NULL_HANDLE

    def get(self, key: bytes, default=None):
        e = self._find(bytes(key))[0]
        if e == NULL_HANDLE:
            return default
        return self._entry(e)[1]

    def get_object(self, key: bytes, schema: ObjectSchema, layout: LayoutPlan | None = None):
        h = self.get(key)
        return None if h is None else self.store.attach(schema, layout, h)

    def put(self, key: bytes, value) -> None:
        key = bytes(key)
        if isinstance(value, ObjectRef):
            value = value.root
        e, _, _ = self._find(key)
        if e != NULL_HANDLE:
            self.tier.set_handle(e, 8, value)
            return
        if (self.size + 1) > self.MAX_LOAD * self.nbuckets:
            self._resize(self.nbuckets * 2)
        hv = fnv1a_64(key)
        b = hv % self.nbuckets
        khandle = self.tier.create_buffer(key)
        head = self.tier.get_handle(self.buckets, 8 * b)
        try:
            entry = self.tier.alloc(self.ENTRY.size)
        except Exception:
            self.tier.free(khandle, self.tier.buffer_size(len(key)))
            raise
        self.tier.write(entry, 0, self.ENTRY.pack(khandle, value, head, hv))
        self.tier.set_handle(self.buckets, 8 * b, entry)
        self.size += 1
        self._save_header()

    def delete(self, key: bytes) -> bool:
        key = bytes(key)
        e, prev, b = self._find(key)
        if e == NULL_HANDLE:
            return False
        khandle, _, nxt, _ = self._entry(e)
        if prev == NULL_HANDLE:
            self.tier.set_handle(self.buckets, 8 * b, nxt)
        else:
            self.tier.set_handle(prev, 16, nxt)
        self.size -= 1
        self._save_header()
        self.tier.free(e, self.ENTRY.size)
        self.tier.free(khandle, self.tier.buffer_size(len(key)))
        return True

    __getitem__ = get

    def __setitem__(self, key, value):
        self.put(key, value)

    def __delitem__(self, key):
        if not self.delete(key):
            raise KeyError(key)

    def _entries(self) -> Iterator[tuple[int, tuple[int, int, int, int]]]:
        raw = self.tier.read(self.buckets, 0, 8 * self.nbuckets)
        for (head,) in struct.iter_unpack("<Q", raw):
            e = head
            while e != NULL_HANDLE:
                ent = self._entry(e)
                yield e, ent
                e = ent[2]

    def items(self) -> Iterator[tuple[bytes, int]]:
        for _, (khandle, value, _, _) in list(self._entries()):
            yield self.tier.retrieve_buffer(khandle), value

    def keys(self) -> Iterator[bytes]:
        for k, _ in self.items():
            yield k

    def __iter__(self):
        return self.keys()

    def _resize(self, nbuckets: int) -> None:
        entries = list(self._entries())
        new = self.tier.alloc(8 * nbuckets)
        heads = [NULL_HANDLE] * nbuckets
        for e, (khandle, value, _, hv) in entries:
            b = hv % nbuckets
            self.tier.set_handle(e, 16, heads[b])
            heads[b] = e
        self.tier.write(new, 0, struct.pack(f"<{nbuckets}Q", *heads))
        old, old_n = self.buckets, self.nbuckets
        self.buckets, self.nbuckets = new, nbuckets
        self._save_header()
        self.tier.free(old, 8 * old_n)
