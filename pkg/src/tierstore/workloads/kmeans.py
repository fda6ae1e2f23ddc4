"""Lloyd's k-means over points held in tiered storage.

In the pmem layouts the points live in a DurableArray on the pmem tier and
each pass reads record bytes straight from the arena.  In NO_PMEM every
point is a serialized buffer on the disk tier and each pass deserializes
all of them again.
"""
from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from tierstore.durable import DurableArray
from tierstore.store import Store
from tierstore.workloads.bench import BenchReport, LayoutMode, Phase, make_report
from tierstore.workloads.datasets import open_dataset, point_schema

BATCH = 4096


class KMeansError(ValueError):
    pass


def _batches_array(arr: DurableArray, d: int):
    n = len(arr)
    for start in range(0, n, BATCH):
        count = min(BATCH, n - start)
        yield np.frombuffer(arr.read_records(start, count), dtype="<f8").reshape(count, d)


def _batches_blobs(store: Store, handles: list[int], d: int):
    for start in range(0, len(handles), BATCH):
        chunk = [store.get_blob(h) for h in handles[start : start + BATCH]]
        yield np.frombuffer(b"".join(chunk), dtype="<f8").reshape(len(chunk), d)


def _initial_centroids(batches, k: int) -> np.ndarray:
    """First k distinct points in storage order."""
    chosen: list[np.ndarray] = []
    seen: set[bytes] = set()
    for batch in batches:
        for p in batch:
            key = p.tobytes()
            if key not in seen:
                seen.add(key)
                chosen.append(p.copy())
                if len(chosen) == k:
                    return np.stack(chosen)
    raise KMeansError(f"k={k} exceeds the number of distinct points ({len(chosen)})")


def lloyd_step(batches, centroids: np.ndarray) -> np.ndarray:
    k, d = centroids.shape
    sums = np.zeros((k, d))
    counts = np.zeros(k, dtype=np.int64)
    for x in batches:
        dist = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = dist.argmin(axis=1)
        np.add.at(sums, labels, x)
        counts += np.bincount(labels, minlength=k)
    new = centroids.copy()
    nonempty = counts > 0
    new[nonempty] = sums[nonempty] / counts[nonempty, None]
    return new


def centroid_checksum(centroids: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(centroids, dtype="<f8").tobytes()).hexdigest()[:16]


def kmeans(dataset: str | Path, k: int, iters: int, mode: LayoutMode, store: Store) -> tuple[BenchReport, np.ndarray]:
    mode = LayoutMode(mode)
    ds = open_dataset(dataset)
    d = len(ds.schema.fields)
    if any(f.kind != "f64" for f in ds.schema.fields):
        raise KMeansError("k-means datasets must hold only f64 coordinates")
    if k < 1:
        raise KMeansError("k must be positive")

    with Phase(store) as load:
        if mode is LayoutMode.NO_PMEM:
            handles = [store.put_blob("disk", rec) for rec in ds.records()]
            batches = lambda: _batches_blobs(store, handles, d)  # noqa: E731
        else:
            arr = DurableArray.create(store, point_schema(d, "pmem"), ds.count, "pmem")
            buf, start = [], 0
            for rec in ds.records():
                buf.append(rec)
                if len(buf) == BATCH:
                    arr.write_records(start, b"".join(buf))
                    start += len(buf)
                    buf = []
            arr.write_records(start, b"".join(buf))
            batches = lambda: _batches_array(arr, d)  # noqa: E731

    with Phase(store) as run:
        centroids = _initial_centroids(batches(), k)
        for _ in range(iters):
            centroids = lloyd_step(batches(), centroids)

    report = make_report("kmeans", mode, ds.count, load, run, centroid_checksum(centroids))
    return report, centroids
