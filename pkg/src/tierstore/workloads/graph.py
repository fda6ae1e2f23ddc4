"""Multi-constraint node search ("friends at company X living in city Y").

The node payload is large and never needed by the search.  SELECT_PMEM
keeps only the id and the constrained features on pmem, so a search
touches a few short strings per node; NO_PMEM deserializes every whole
record from disk.
"""
from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Sequence

from tierstore.schema import ObjectSchema
from tierstore.store import Store
from tierstore.workloads.bench import BenchReport, LayoutMode, Phase, make_report
from tierstore.workloads.datasets import decode_record, open_dataset


class UnknownFeature(ValueError):
    pass


def mode_schema(base: ObjectSchema, mode: LayoutMode, constrained: Sequence[str]) -> ObjectSchema:
    """Retag the node schema for a layout mode."""
    if mode is LayoutMode.ALL_PMEM:
        return base.with_tags({f.name: ("pmem",) for f in base.fields})
    keep = {"id", *constrained}
    return base.with_tags({f.name: ("pmem",) if f.name in keep else ("disk",) for f in base.fields})


def ids_checksum(ids: Sequence[int]) -> str:
    return hashlib.sha256(",".join(map(str, ids)).encode()).hexdigest()[:16]


def graph_search(
    nodes: str | Path,
    constraints: Sequence[tuple[str, str]],
    mode: LayoutMode | str,
    store: Store,
    schema: ObjectSchema | None = None,
) -> tuple[BenchReport, list[int]]:
    """Load the node dataset in the given layout, then return ids matching every constraint.

    ``schema`` overrides the mode's placement with explicit tags (first tag wins).
    """
    ds = open_dataset(nodes)
    names = set(ds.schema.field_names)
    for feature, _ in constraints:
        if feature not in names or feature in ("id", "payload"):
            raise UnknownFeature(f"unknown search feature {feature!r}")
    constrained = [f for f, _ in constraints]
    label = "schema" if schema is not None else LayoutMode(mode).value
    mode = LayoutMode(mode) if schema is None else None

    with Phase(store) as load:
        if mode is LayoutMode.NO_PMEM:
            holders = [store.put_blob("disk", rec) for rec in ds.records()]
        else:
            target = schema if schema is not None else mode_schema(ds.schema, mode, constrained)
            layout = store.layout(target)
            holders = []
            for row in ds.rows():
                obj = store.create_object(target, layout)
                for f in target.fields:
                    obj.set(f.name, row[f.name])
                holders.append(obj)

    ids = []
    with Phase(store) as run:
        if mode is LayoutMode.NO_PMEM:
            for h in holders:
                row = decode_record(ds.schema, store.get_blob(h))
                if all(row[f] == v for f, v in constraints):
                    ids.append(row["id"])
        else:
            for obj in holders:
                if all(obj.get(f) == v for f, v in constraints):
                    ids.append(obj.get("id"))
    ids.sort()
    return make_report("graph", label, ds.count, load, run, ids_checksum(ids)), ids
