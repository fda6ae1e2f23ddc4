from tierstore.workloads.bench import BenchReport, LayoutMode, bench_tiers
from tierstore.workloads.datasets import gen_graph, gen_points, load_snap_edges, open_dataset
from tierstore.workloads.graph import graph_search
from tierstore.workloads.kmeans import kmeans

__all__ = [
    "BenchReport",
    "LayoutMode",
    "bench_tiers",
    "gen_graph",
    "gen_points",
    "graph_search",
    "kmeans",
    "load_snap_edges",
    "open_dataset",
]
