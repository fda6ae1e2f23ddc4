"""Batch command line: layout, profile, optimize, sweep, bench, store-demo."""
from __future__ import annotations

import argparse
import sys
import tempfile
from pathlib import Path

import numpy as np

from tierstore import placement
from tierstore.placement import Infeasible
from tierstore.profiling import ProfileError, Profiler, build_profile, dumps_profile, import_profile, microbench_device
from tierstore.schema import SchemaError, compute_layout, parse_schema
from tierstore.store import AllTiersFull, InsufficientSpace, Store, StoreError
from tierstore.tiers import CapacityExhausted, TierError, load_tier_configs
from tierstore.workloads import bench as benchmod
from tierstore.workloads.bench import LayoutMode
from tierstore.workloads.datasets import DatasetError, GraphInfo, gen_graph, gen_points, open_dataset, point_schema
from tierstore.workloads.graph import UnknownFeature, graph_search
from tierstore.workloads.kmeans import KMeansError, kmeans

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_INFEASIBLE = 3
EXIT_CAPACITY = 4
EXIT_INPUT = 5

PERSON_SCHEMA = """\
object person {
    age: i32 @pmem
    image: bytes @disk
    place: string @pmem
    name: string @pmem
}
"""


class UsageError(Exception):
    pass


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--tiers", type=Path, default=argparse.SUPPRESS,
                   help="tier config file (name,capacity,backing[,ns_per_access[,read_ns/B,write_ns/B]])")
    p.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="output path (default: stdout)")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--workdir", type=Path, default=argparse.SUPPRESS,
                   help="directory for default tier backing files and generated datasets")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="tierstore", parents=[common])
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("layout", parents=[common], help="print field offsets and tiers of a schema")
    p.add_argument("schema", type=Path)
    p.add_argument("--assign", action="append", default=[], metavar="FIELD=TIER")

    p = sub.add_parser("profile", parents=[common], help="run an instrumented workload and write a profile")
    p.add_argument("action", choices=["bench"])
    p.add_argument("workload", choices=["graph", "kmeans"])
    _workload_args(p)
    p.add_argument("--fail-prob", action="append", default=[], metavar="TIER=P",
                   help="failure probability per tier (volatile tiers default to 0.01, durable to 0)")
    p.add_argument("--reps", type=int, default=16, help="microbenchmark repetitions per size")

    p = sub.add_parser("optimize", parents=[common], help="solve the placement problem for a profile")
    p.add_argument("--profile", type=Path, required=True)
    p.add_argument("--objects", type=int, required=True, help="number of objects X")
    p.add_argument("--capacity", action="append", default=[], metavar="DEVICE=BYTES")
    p.add_argument("--schema", type=Path, help="schema to re-emit with the optimized tags")
    p.add_argument("--schema-out", type=Path, help="where to write the annotated schema")

    p = sub.add_parser("sweep", parents=[common], help="solve over a 2-D parameter grid")
    p.add_argument("--profile", type=Path, help="profile to sweep (default: iterative recompute preset)")
    p.add_argument("--objects", type=int, default=1)
    p.add_argument("--axis1", help="PARAM[:FIELD][:DEVICE]=START:STOP:COUNT")
    p.add_argument("--axis2", help="PARAM[:FIELD][:DEVICE]=START:STOP:COUNT")
    p.add_argument("--max-iters", type=int, default=20, help="preset: iteration range 1..N on both axes")

    p = sub.add_parser("bench", parents=[common], help="run a benchmark workload")
    p.add_argument("workload", choices=["graph", "kmeans"])
    p.add_argument("--mode", default="select-pmem", help="no-pmem | all-pmem | select-pmem")
    p.add_argument("--schema", type=Path, help="graph: place fields by this schema's tags instead of --mode")
    p.add_argument("--no-timing", action="store_true", help="omit wall-clock columns from the report")
    _workload_args(p)

    sub.add_parser("store-demo", parents=[common], help="create a person object and read it back")
    return parser


def _workload_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--nodes", type=int, default=10_000)
    p.add_argument("--edges", type=int, default=80_000)
    p.add_argument("--payload", type=int, default=10_000, help="graph payload bytes per node")
    p.add_argument("--features", type=int, default=4)
    p.add_argument("--constraints", type=int, default=2)
    p.add_argument("--points", type=int, default=100_000)
    p.add_argument("--dims", type=int, default=12)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--no-latency", action="store_true", help="default tiers without synthetic latency")


def _kv(items, conv=float) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"expected KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = conv(v)
    return out


def _emit(args, text: str) -> None:
    out = getattr(args, "out", None)
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _workdir(args) -> Path:
    wd = getattr(args, "workdir", None)
    if wd is None:
        wd = Path(tempfile.mkdtemp(prefix="tierstore-"))
    wd.mkdir(parents=True, exist_ok=True)
    return wd


def _open_store(args, workdir: Path, profiler=None) -> Store:
    cfg = getattr(args, "tiers", None)
    if cfg is not None:
        configs = load_tier_configs(cfg)
    else:
        configs = benchmod.bench_tiers(workdir, latency=not getattr(args, "no_latency", False))
    return Store.open(configs, profiler=profiler)


# commands ---------------------------------------------------------------


def cmd_layout(args) -> int:
    schema = parse_schema(args.schema.read_text())
    assignment = schema.default_assignment()
    assignment.update(_kv(args.assign, str))
    plan = compute_layout(schema, assignment)
    lines = ["field,kind,offset,width,region,tier"]
    for s in plan.slots:
        lines.append(f"{s.name},{s.kind},{s.offset},{s.width},{s.region},{s.tier}")
    for region, size in plan.region_sizes:
        lines.append(f"# record_size {region} {size}")
    _emit(args, "\n".join(lines) + "\n")
    return EXIT_OK


def _graph_dataset(args, workdir: Path, query_features: int) -> GraphInfo:
    seed = getattr(args, "seed", 0)
    return gen_graph(workdir / "graph", args.nodes, args.edges, [12] * args.features, seed=seed,
                     payload_size=args.payload, query_features=query_features)


def cmd_profile(args) -> int:
    workdir = _workdir(args)
    prof = Profiler()
    store = _open_store(args, workdir, profiler=prof)
    seed = getattr(args, "seed", 0)
    try:
        if args.workload == "graph":
            info = _graph_dataset(args, workdir, args.constraints)
            constraints = list(info.query.items())[: args.constraints]
            report, _ = graph_search(info.nodes_path, constraints, LayoutMode.ALL_PMEM, store)
            schema = open_dataset(info.nodes_path).schema
            fields = schema.field_names
        else:
            path = workdir / "points.tsds"
            gen_points(path, args.points, args.dims, args.k, seed)
            schema = point_schema(args.dims)
            fields = schema.field_names
            report, _ = kmeans(path, args.k, args.iters, LayoutMode.ALL_PMEM, store)
            # bulk record scans bypass per-field hooks; every coordinate is read
            # once per pass (seeding plus iterations), so F counts passes
            for f in fields:
                for _ in range(args.iters + 1):
                    prof.record_access(f, "pmem", 8, 0.0)
        fail = _kv(args.fail_prob)
        devices = {}
        for name, tier in store.tiers.items():
            volatile = tier.config.backing == "volatile"
            devices[name] = (tier.capacity, fail.get(name, 0.01 if volatile else 0.0))
        sizes = [8, 64, 512, 4096, 16384]
        latency = {name: microbench_device(t, sizes, args.reps) for name, t in store.tiers.items()}
        # losing a field on a volatile tier means reloading its record; the
        # simulated clock keeps this deterministic when latency is injected
        load = report.load_injected_ns or report.load_ns
        reload_ns = load / max(report.records, 1)

        def recompute(field, device):
            return reload_ns if store.tier(device).config.backing == "volatile" else 0

        profile = build_profile(prof, devices, latency, recompute, fields=fields)
    finally:
        store.close()
    text = dumps_profile(profile)
    _emit(args, text)
    out = getattr(args, "out", None)
    if out is not None:
        Path(out).with_suffix(".schema").write_text(schema.to_text())
    return EXIT_OK


def cmd_optimize(args) -> int:
    profile = import_profile(args.profile)
    caps = _kv(args.capacity)
    problem = profile.to_problem(args.objects, caps)
    solution = placement.solve(problem)
    _emit(args, solution.to_csv())
    if args.schema is not None:
        schema = parse_schema(args.schema.read_text())
        text = placement.emit_tags(solution, schema)
        target = args.schema_out
        if target is None and getattr(args, "out", None) is not None:
            target = Path(args.out).with_suffix(".schema")
        if target is None:
            sys.stdout.write(text)
        else:
            target.write_text(text)
    return EXIT_OK


def _parse_axis(problem, spec: str):
    try:
        lhs, rhs = spec.split("=", 1)
        start, stop, count = rhs.split(":")
        values = [float(v) for v in np.linspace(float(start), float(stop), int(count))]
        parts = lhs.split(":")
        param = parts[0]
        rest = parts[1:]
        field = device = None
        if param in ("F", "B"):
            (field,) = rest
        elif param in ("S", "P"):
            (device,) = rest
        elif param in ("C", "R"):
            field, device = rest
        elif param != "X" or rest:
            raise ValueError
        return placement.param_axis(problem, param, values, field, device)
    except ValueError:
        raise UsageError(f"bad axis spec {spec!r}") from None


def cmd_sweep(args) -> int:
    if args.profile is None:
        problem = placement.iterative_recompute_problem()
        its = [float(i) for i in range(1, args.max_iters + 1)]
        a1 = placement.iterations_axis(0, its)
        a2 = placement.iterations_axis(1, its)
    else:
        if not (args.axis1 and args.axis2):
            raise UsageError("--axis1 and --axis2 are required with --profile")
        problem = import_profile(args.profile).to_problem(args.objects)
        a1 = _parse_axis(problem, args.axis1)
        a2 = _parse_axis(problem, args.axis2)
    cells = placement.sweep(problem, a1, a2)
    _emit(args, placement.sweep_csv(cells, problem.fields))
    return EXIT_OK


def cmd_bench(args) -> int:
    mode = LayoutMode.parse(args.mode)
    workdir = _workdir(args)
    store = _open_store(args, workdir)
    seed = getattr(args, "seed", 0)
    try:
        if args.workload == "graph":
            info = _graph_dataset(args, workdir, args.constraints)
            constraints = list(info.query.items())[: args.constraints]
            schema = parse_schema(args.schema.read_text(), store.tier_ids) if args.schema else None
            report, _ = graph_search(info.nodes_path, constraints, mode, store, schema=schema)
        else:
            path = workdir / "points.tsds"
            gen_points(path, args.points, args.dims, args.k, seed)
            report, _ = kmeans(path, args.k, args.iters, mode, store)
    finally:
        store.close()
    _emit(args, report.to_csv(timing=not args.no_timing))
    return EXIT_OK


def cmd_store_demo(args) -> int:
    workdir = _workdir(args)
    store = _open_store(args, workdir)
    try:
        schema = store.parse_schema(PERSON_SCHEMA)
        layout = store.layout(schema)
        person = store.create_object(schema, layout)
        person["age"] = 10
        person["image"] = bytes(range(256)) * 4
        person["place"] = "USA"
        person["name"] = "BOB"
        lines = ["field,offset,tier,value"]
        for s in layout.slots:
            v = person[s.name]
            shown = f"<{len(v)} bytes>" if isinstance(v, bytes) else v
            lines.append(f"{s.name},{s.offset},{store.payload_tier(person, s.name)},{shown}")
        store.sync()
        text = "\n".join(lines) + "\n" + store.metrics().to_csv()
    finally:
        store.close()
    _emit(args, text)
    return EXIT_OK


COMMANDS = {
    "layout": cmd_layout,
    "profile": cmd_profile,
    "optimize": cmd_optimize,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
    "store-demo": cmd_store_demo,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE

    def fail(category: str, code: int, err: Exception) -> int:
        print(f"tierstore: error[{category}]: {err}", file=sys.stderr)
        return code

    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        return fail("usage", EXIT_USAGE, e)
    except Infeasible as e:
        return fail("infeasible", EXIT_INFEASIBLE, e)
    except (CapacityExhausted, AllTiersFull, InsufficientSpace) as e:
        return fail("capacity", EXIT_CAPACITY, e)
    except (SchemaError, ProfileError, DatasetError, UnknownFeature, KMeansError, ValueError, OSError) as e:
        return fail("input", EXIT_INPUT, e)
    except (TierError, StoreError) as e:
        return fail("storage", EXIT_ERROR, e)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
