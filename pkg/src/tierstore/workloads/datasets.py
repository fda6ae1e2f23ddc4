"""Dataset files, synthetic generators and SNAP edge-list ingestion.

A dataset file is a schema header followed by length-prefixed records::

    b"TSDS" | version u32 | schema length u32 | schema text | count u64
    (record length u32 | record bytes) * count

Records encode fixed-width fields little-endian in declaration order and
variable fields as a u32 length followed by the bytes.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from tierstore.schema import ObjectSchema, kind_format, parse_schema

MAGIC = b"TSDS"
VERSION = 1
_HEAD = struct.Struct("<4sII")
_COUNT = struct.Struct("<Q")
_LEN = struct.Struct("<I")


class DatasetError(ValueError):
    pass


def encode_record(schema: ObjectSchema, values) -> bytes:
    if isinstance(values, dict):
        values = [values[f.name] for f in schema.fields]
    out = bytearray()
    for f, v in zip(schema.fields, values):
        if f.variable:
            data = v.encode("utf-8") if isinstance(v, str) else bytes(v)
            out += _LEN.pack(len(data)) + data
        else:
            out += struct.pack(kind_format(f.kind), v)
    return bytes(out)


def decode_record(schema: ObjectSchema, data: bytes) -> dict:
    pos = 0
    out = {}
    for f in schema.fields:
        if f.variable:
            (n,) = _LEN.unpack_from(data, pos)
            pos += _LEN.size
            raw = data[pos : pos + n]
            pos += n
            out[f.name] = raw.decode("utf-8") if f.kind == "string" else bytes(raw)
        else:
            fmt = kind_format(f.kind)
            out[f.name] = struct.unpack_from(fmt, data, pos)[0]
            pos += struct.calcsize(fmt)
    if pos != len(data):
        raise DatasetError(f"record has {len(data) - pos} trailing bytes")
    return out


class DatasetWriter:
    def __init__(self, path: str | Path, schema: ObjectSchema):
        self.path = Path(path)
        self.schema = schema
        self.count = 0
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._f = open(self.path, "wb")
        text = schema.to_text().encode("utf-8")
        self._f.write(_HEAD.pack(MAGIC, VERSION, len(text)) + text)
        self._count_pos = self._f.tell()
        self._f.write(_COUNT.pack(0))

    def write_raw(self, record: bytes) -> None:
        self._f.write(_LEN.pack(len(record)) + record)
        self.count += 1

    def write(self, values) -> None:
        self.write_raw(encode_record(self.schema, values))

    def close(self) -> None:
        self._f.seek(self._count_pos)
        self._f.write(_COUNT.pack(self.count))
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class Dataset:
    path: Path
    schema: ObjectSchema
    count: int
    data_offset: int

    def records(self) -> Iterator[bytes]:
        with open(self.path, "rb") as f:
            f.seek(self.data_offset)
            for i in range(self.count):
                head = f.read(_LEN.size)
                if len(head) < _LEN.size:
                    raise DatasetError(f"{self.path}: truncated at record {i}")
                (n,) = _LEN.unpack(head)
                rec = f.read(n)
                if len(rec) < n:
                    raise DatasetError(f"{self.path}: truncated at record {i}")
                yield rec

    def rows(self) -> Iterator[dict]:
        for rec in self.records():
            yield decode_record(self.schema, rec)


def open_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(_HEAD.size)
        if len(head) < _HEAD.size:
            raise DatasetError(f"{path}: too short for a dataset header")
        magic, version, slen = _HEAD.unpack(head)
        if magic != MAGIC or version != VERSION:
            raise DatasetError(f"{path}: not a dataset file (magic {magic!r}, version {version})")
        schema = parse_schema(f.read(slen).decode("utf-8"))
        (count,) = _COUNT.unpack(f.read(_COUNT.size))
        return Dataset(path, schema, count, f.tell())


def file_checksum(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# points -----------------------------------------------------------------


@dataclass
class PointsInfo:
    path: Path
    centers: np.ndarray
    means: np.ndarray  # empirical mean of each generated blob


def point_schema(d: int, tier: str = "pmem") -> ObjectSchema:
    return parse_schema("object point {\n" + "".join(f"  x{j}: f64 @{tier}\n" for j in range(d)) + "}\n")


def gen_points(path: str | Path, n: int, d: int, k: int, seed: int,
               spread: float = 1.0, separation: float = 20.0) -> PointsInfo:
    """Gaussian blobs; point i belongs to blob ``i % k``."""
    if n < 1 or d < 1 or k < 1:
        raise ValueError("n, d and k must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-separation * k, separation * k, size=(k, d))
    labels = np.arange(n) % k
    points = centers[labels] + rng.normal(0.0, spread, size=(n, d))
    schema = point_schema(d)
    with DatasetWriter(path, schema) as w:
        rec = struct.Struct(f"<{d}d")
        for p in points:
            w.write_raw(rec.pack(*p))
    means = np.stack([points[labels == c].mean(axis=0) for c in range(min(k, n))])
    return PointsInfo(Path(path), centers, means)


# graphs -----------------------------------------------------------------

FEATURES = ("company", "city", "school", "hometown", "employer", "language", "location", "degree")


def node_schema(features: Sequence[str], tags: dict[str, str] | None = None) -> ObjectSchema:
    tags = tags or {}
    lines = [f"  id: i64 @{tags.get('id', 'pmem')}"]
    lines += [f"  {f}: string @{tags.get(f, 'pmem')}" for f in features]
    lines.append(f"  payload: bytes @{tags.get('payload', 'pmem')}")
    return parse_schema("object node {\n" + "\n".join(lines) + "\n}\n")


EDGE_SCHEMA_TEXT = "object edge {\n  src: i64 @pmem\n  dst: i64 @pmem\n}\n"


@dataclass
class GraphInfo:
    nodes_path: Path
    edges_path: Path
    features: list[str]
    query: dict[str, str]
    planted: list[int] = field(default_factory=list)

    def save_meta(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({
            "nodes": str(self.nodes_path),
            "edges": str(self.edges_path),
            "features": self.features,
            "query": self.query,
            "planted": self.planted,
        }, indent=1))

    @classmethod
    def load_meta(cls, path: str | Path) -> GraphInfo:
        meta = json.loads(Path(path).read_text())
        return cls(Path(meta["nodes"]), Path(meta["edges"]), meta["features"], meta["query"], meta["planted"])


def _word(rng: np.random.Generator, width: int) -> str:
    letters = rng.integers(0, 26, size=width)
    return "".join(chr(97 + int(c)) for c in letters)


def gen_graph(out_dir: str | Path, nodes: int, edges: int, feature_widths: Sequence[int] = (12, 12),
              seed: int = 0, payload_size: int = 10_000, planted_fraction: float = 0.01,
              query_features: int = 2, vocabulary: int = 50,
              edge_list: np.ndarray | None = None) -> GraphInfo:
    """Nodes with string features and an opaque payload, plus a random edge list.

    A ``planted_fraction`` of the nodes carry the query values on the first
    ``query_features`` features; no other node matches all of them.
    """
    if len(feature_widths) > len(FEATURES):
        raise ValueError(f"at most {len(FEATURES)} features are supported")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    features = list(FEATURES[: len(feature_widths)])
    vocab = {f: [_word(rng, w) for _ in range(vocabulary)] for f, w in zip(features, feature_widths)}
    qf = features[:query_features]
    query = {f: vocab[f][0] for f in qf}
    n_planted = int(round(planted_fraction * nodes)) if qf else 0
    planted = sorted(int(x) for x in rng.choice(nodes, size=n_planted, replace=False)) if n_planted else []
    planted_set = set(planted)

    schema = node_schema(features)
    with DatasetWriter(out / "nodes.tsds", schema) as w:
        for node in range(nodes):
            values = {"id": node}
            for f in features:
                values[f] = vocab[f][int(rng.integers(vocabulary))]
            if node in planted_set:
                values.update(query)
            elif qf and all(values[f] == query[f] for f in qf):
                values[qf[-1]] = vocab[qf[-1]][int(rng.integers(1, vocabulary))]
            values["payload"] = rng.bytes(payload_size)
            w.write(values)

    if edge_list is None:
        src = rng.integers(0, max(nodes, 1), size=edges)
        dst = (src + rng.integers(1, max(nodes, 2), size=edges)) % max(nodes, 1)
        edge_list = np.stack([src, dst], axis=1) if edges else np.zeros((0, 2), dtype=np.int64)
    with DatasetWriter(out / "edges.tsds", parse_schema(EDGE_SCHEMA_TEXT)) as w:
        for s, t in edge_list:
            w.write((int(s), int(t)))
    info = GraphInfo(out / "nodes.tsds", out / "edges.tsds", features, query, planted)
    info.save_meta(out / "meta.json")
    return info


class SnapFormatError(DatasetError):
    def __init__(self, path, lineno: int, line: str):
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: malformed edge line {line!r}")


def load_snap_edges(path: str | Path) -> np.ndarray:
    """Read a whitespace-separated node-id pair per line; ``#`` lines are comments."""
    pairs = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 2:
                raise SnapFormatError(path, lineno, s)
            try:
                pairs.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise SnapFormatError(path, lineno, s) from None
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)
