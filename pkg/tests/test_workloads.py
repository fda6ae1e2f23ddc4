import os

import numpy as np
import pytest

from conftest import small_tiers
from tierstore.store import Store
from tierstore.workloads.bench import BenchReport, LayoutMode, bench_tiers
from tierstore.workloads.datasets import (
    SnapFormatError,
    file_checksum,
    gen_graph,
    gen_points,
    load_snap_edges,
    open_dataset,
)
from tierstore.workloads.graph import UnknownFeature, graph_search
from tierstore.workloads.kmeans import KMeansError, kmeans

MODES = list(LayoutMode)


def run_kmeans(tmp_path, path, k, iters, mode):
    with Store.open(bench_tiers(tmp_path / f"t-{mode.value}", 1 << 20, 64 << 20, 1 << 30)) as s:
        return kmeans(path, k, iters, mode, s)


def test_k1_is_the_mean(tmp_path):
    info = gen_points(tmp_path / "p.tsds", 500, 3, 4, seed=1)
    _, c = run_kmeans(tmp_path, info.path, 1, 3, LayoutMode.ALL_PMEM)
    pts = np.frombuffer(b"".join(open_dataset(info.path).records()), dtype="<f8").reshape(-1, 3)
    assert np.allclose(c[0], pts.mean(axis=0), rtol=0, atol=1e-9)


def test_two_blobs_recovered(tmp_path):
    info = gen_points(tmp_path / "p.tsds", 2000, 4, 2, seed=5)
    _, c = run_kmeans(tmp_path, info.path, 2, 10, LayoutMode.ALL_PMEM)
    order = np.argsort(c[:, 0])
    assert np.abs(c[order] - info.means[np.argsort(info.means[:, 0])]).max() < 0.1


def test_modes_agree_and_serde_split(tmp_path):
    n = 3000
    info = gen_points(tmp_path / "p.tsds", n, 5, 3, seed=9)
    reports = {m: run_kmeans(tmp_path, info.path, 3, 2, m)[0] for m in MODES}
    assert len({r.checksum for r in reports.values()}) == 1
    assert reports[LayoutMode.ALL_PMEM].serde_events == 0
    assert reports[LayoutMode.SELECT_PMEM].serde_events == 0
    # seeding pass plus two iterations over disk blobs
    assert reports[LayoutMode.NO_PMEM].serde_events >= 3 * n


def test_k_exceeds_distinct_points(tmp_path):
    info = gen_points(tmp_path / "p.tsds", 3, 2, 1, seed=0)
    with pytest.raises(KMeansError):
        run_kmeans(tmp_path, info.path, 5, 1, LayoutMode.ALL_PMEM)


def test_isolated_nodes_and_determinism(tmp_path):
    a = gen_graph(tmp_path / "a", 10, 0, seed=3, payload_size=16)
    b = gen_graph(tmp_path / "b", 10, 0, seed=3, payload_size=16)
    assert open_dataset(a.nodes_path).count == 10
    assert open_dataset(a.edges_path).count == 0
    assert file_checksum(a.nodes_path) == file_checksum(b.nodes_path)


def small_graph(tmp_path, nodes=400, features=3, query_features=2):
    return gen_graph(tmp_path / "g", nodes, 4 * nodes, [8] * features, seed=11,
                     payload_size=2048, planted_fraction=0.05, query_features=query_features)


def search(tmp_path, info, constraints, mode, tag=""):
    with Store.open(bench_tiers(tmp_path / f"s-{mode.value}{tag}", 1 << 20, 64 << 20, 1 << 30)) as s:
        return graph_search(info.nodes_path, constraints, mode, s)


def test_planted_matches_identical_across_modes(tmp_path):
    info = small_graph(tmp_path)
    q = list(info.query.items())
    results = {m: search(tmp_path, info, q, m) for m in MODES}
    for rep, ids in results.values():
        assert ids == info.planted
    assert len({rep.checksum for rep, _ in results.values()}) == 1
    sel, _ = results[LayoutMode.SELECT_PMEM]
    # exactly the constrained features evaluated (short-circuit) plus 8-byte ids
    # of matches; no payload byte is ever materialized
    expected = 0
    for row in open_dataset(info.nodes_path).rows():
        for f, v in q:
            expected += len(row[f].encode())
            if row[f] != v:
                break
        else:
            expected += 8
    assert sel.bytes_materialized == expected
    assert results[LayoutMode.NO_PMEM][0].bytes_materialized > 400 * 2048


def test_zero_constraints_match_everything(tmp_path):
    info = small_graph(tmp_path, nodes=50)
    for m in MODES:
        assert search(tmp_path, info, [], m)[1] == list(range(50))


def test_unknown_feature(tmp_path):
    info = small_graph(tmp_path, nodes=20)
    with pytest.raises(UnknownFeature):
        search(tmp_path, info, [("salary", "x")], LayoutMode.ALL_PMEM)


def test_execution_work_grows_with_constraints(tmp_path):
    info = small_graph(tmp_path, features=4, query_features=3)
    q = list(info.query.items())
    for m in MODES:
        runs = [search(tmp_path, info, q[:c], m, tag=str(c))[0] for c in (1, 2, 3)]
        execs = [r.exec_injected_ns for r in runs]
        assert execs == sorted(execs), (m, execs)
        if m is not LayoutMode.SELECT_PMEM:
            loads = [r.load_injected_ns for r in runs]
            assert max(loads) - min(loads) <= 1e-6 * max(loads)


def test_report_csv_roundtrip(tmp_path):
    info = small_graph(tmp_path, nodes=30)
    rep, _ = search(tmp_path, info, list(info.query.items()), LayoutMode.SELECT_PMEM)
    back = BenchReport.from_csv(rep.to_csv())
    assert back == rep
    assert "exec_ns" not in rep.to_csv(timing=False)


def test_snap_edges(tmp_path):
    p = tmp_path / "edges.txt"
    p.write_text("# comment\n0 1\n1\t2\n\n2 0\n")
    assert load_snap_edges(p).tolist() == [[0, 1], [1, 2], [2, 0]]
    p.write_text("0 1\n1 x\n")
    with pytest.raises(SnapFormatError) as exc:
        load_snap_edges(p)
    assert exc.value.lineno == 2


SNAP = os.environ.get("TIERSTORE_SNAP_FACEBOOK")


@pytest.mark.skipif(not SNAP, reason="set TIERSTORE_SNAP_FACEBOOK to the facebook_combined.txt edge list")
def test_snap_facebook_edge_count():
    assert len(load_snap_edges(SNAP)) > 80_000


def test_snap_edges_feed_generator(tmp_path):
    p = tmp_path / "edges.txt"
    p.write_text("0 1\n1 2\n2 3\n")
    info = gen_graph(tmp_path / "g", 4, 0, seed=0, payload_size=8, edge_list=load_snap_edges(p))
    assert open_dataset(info.edges_path).count == 3


def test_capacity_error_surfaces(tmp_path):
    info = gen_points(tmp_path / "p.tsds", 1000, 4, 2, seed=0)
    with Store.open(small_tiers(tmp_path, pmem=1024)) as s:
        with pytest.raises(Exception, match="pmem"):
            kmeans(info.path, 2, 1, LayoutMode.ALL_PMEM, s)
