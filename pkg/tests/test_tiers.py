import subprocess
import sys
import textwrap

import pytest
from hypothesis import given, settings, strategies as st

from tierstore.tiers import (
    NULL_HANDLE,
    CapacityExhausted,
    CorruptTier,
    OutOfBounds,
    TierConfig,
    TierError,
    decode_handle,
    encode_handle,
    load_tier_configs,
    open_tier,
    parse_tier_line,
)


@pytest.fixture(params=["volatile", "mapped", "dir"])
def tier(request, tmp_path):
    backing = request.param
    path = None if backing == "volatile" else tmp_path / backing
    t = open_tier(TierConfig("pmem", 1 << 20, backing, path, tier_id=1))
    yield t
    t.close()


OFFSETS = [0, 1, 2**8, 2**31 + 5, 2**55, 2**56 - 1]


def test_handle_roundtrip_exhaustive_over_tier_ids():
    for t in range(256):
        for o in OFFSETS:
            if (t, o) == (0, 0):
                continue
            assert decode_handle(encode_handle(t, o)) == (t, o)


@given(st.integers(0, 255), st.integers(0, 2**56 - 1))
def test_handle_roundtrip_sampled(t, o):
    assert decode_handle(encode_handle(t, o)) == (t, o)


@pytest.mark.parametrize("t, o", [(256, 0), (-1, 0), (1, 2**56), (1, -1)])
def test_handle_out_of_range(t, o):
    with pytest.raises(ValueError):
        encode_handle(t, o)


def test_first_allocations_bump(tier):
    assert tier.used == 0
    h = tier.alloc(28)
    assert decode_handle(h) == (1, 0)
    assert tier.used == 28
    assert decode_handle(tier.alloc(8))[1] == 28


def test_tier_zero_never_hands_out_null(tmp_path):
    t = open_tier(TierConfig("dram", 64, "volatile", tier_id=0))
    assert t.alloc(8) != NULL_HANDLE


@pytest.mark.parametrize(
    "kind, off, value",
    [("i32", 0, 10), ("i64", 0, 0), ("f64", 4, -1.5), ("i16", 10, -7), ("f32", 2, 0.5)],
)
def test_set_get_val(tier, kind, off, value):
    h = tier.alloc(16)
    tier.set_val(h, off, value, kind)
    assert tier.get_val(h, off, kind) == value


def test_little_endian_on_medium(tier):
    h = tier.alloc(8)
    tier.set_val(h, 0, 0x01020304, "i32")
    assert tier.read(h, 0, 4) == b"\x04\x03\x02\x01"


def test_out_of_bounds(tier):
    h = tier.alloc(8)
    with pytest.raises(OutOfBounds):
        tier.read(h, 1 << 20, 4)


@pytest.mark.parametrize("payload", [b"USA", b"", bytes(range(256)) * 40])
def test_buffers(tier, payload):
    h = tier.create_buffer(payload)
    assert tier.retrieve_buffer(h) == payload
    assert tier.stored_length(h) == len(payload)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.binary(max_size=600), max_size=8))
def test_buffer_roundtrip_property(tmp_path_factory, payloads):
    root = tmp_path_factory.mktemp("buf")
    for backing, path in [("volatile", None), ("mapped", root / "m"), ("dir", root / "d")]:
        t = open_tier(TierConfig("x", 1 << 16, backing, path, tier_id=2))
        handles = [t.create_buffer(p) for p in payloads]
        assert [t.retrieve_buffer(h) for h in handles] == payloads
        t.close()


def test_fill_to_capacity(tmp_path):
    t = open_tier(TierConfig("pmem", 64, "mapped", tmp_path / "a", tier_id=1))
    for _ in range(8):
        t.alloc(8)
    assert t.usage().used == 64 == t.capacity
    with pytest.raises(CapacityExhausted):
        t.alloc(1)
    t.close()


def test_free_reuses_space(tier):
    a = tier.alloc(100)
    tier.alloc(100)
    tier.free(a, 100)
    assert tier.used == 100
    assert tier.alloc(60) == a


def test_double_free_detected(tier):
    a = tier.alloc(16)
    tier.alloc(16)
    tier.free(a, 16)
    with pytest.raises(TierError):
        tier.free(a, 16)


def test_capacity_beyond_offset_width():
    with pytest.raises(ValueError):
        open_tier(TierConfig("big", 2**57, "volatile", tier_id=1))


def test_sync_trivial_cases(tier):
    tier.sync()
    tier.sync()


@pytest.mark.parametrize("backing", ["mapped", "dir"])
def test_reopen_restores_cursor_and_data(tmp_path, backing):
    cfg = TierConfig("pmem", 1 << 16, backing, tmp_path / backing, tier_id=1)
    t = open_tier(cfg)
    h = t.alloc(28)
    t.set_val(h, 0, 10, "i32")
    b = t.create_buffer(b"hello")
    dead = t.create_buffer(b"x" * 50)
    t.free(dead, t.buffer_size(50))
    used = t.used
    t.root = h
    t.sync()
    t.close()
    t = open_tier(cfg)
    assert t.used == used
    assert t.get_val(h, 0, "i32") == 10
    assert t.retrieve_buffer(b) == b"hello"
    assert t.root == h
    t.close()


def test_corrupt_header(tmp_path):
    p = tmp_path / "arena"
    t = open_tier(TierConfig("pmem", 4096, "mapped", p, tier_id=1))
    t.close()
    raw = bytearray(p.read_bytes())
    raw[0:4] = b"JUNK"
    p.write_bytes(bytes(raw))
    with pytest.raises(CorruptTier):
        open_tier(TierConfig("pmem", 4096, "mapped", p, tier_id=1))


def test_capacity_mismatch(tmp_path):
    p = tmp_path / "arena"
    open_tier(TierConfig("pmem", 4096, "mapped", p, tier_id=1)).close()
    with pytest.raises(TierError, match="capacity mismatch"):
        open_tier(TierConfig("pmem", 8192, "mapped", p, tier_id=1))


def test_disk_counts_serde_and_pmem_does_not(tmp_path):
    d = open_tier(TierConfig("disk", 1 << 16, "dir", tmp_path / "d", tier_id=2))
    m = open_tier(TierConfig("pmem", 1 << 16, "mapped", tmp_path / "m", tier_id=1))
    for t in (d, m):
        t.retrieve_buffer(t.create_buffer(b"abc"))
    assert d.metrics.serde_events == 2
    assert m.metrics.serde_events == 0
    assert m.metrics.bytes_written >= 3 and m.metrics.bytes_read >= 3


def test_latency_is_charged_not_slept():
    t = open_tier(TierConfig("pmem", 4096, "volatile", None, 1, 1000.0, 0.5, 2.0))
    h = t.create_buffer(b"x" * 100)
    before = t.metrics.injected_ns
    t.retrieve_buffer(h)
    # one read access of the 8-byte length prefix plus payload
    assert t.metrics.injected_ns - before == pytest.approx(1000.0 + 108 * 0.5)


def test_tier_config_lines(tmp_path):
    (tmp_path / "tiers.conf").write_text(
        "# name,capacity,backing\n"
        "dram,1M,volatile,100\n"
        "pmem,4M,mapped:pm.arena,1000,0.1,0.2\n"
        "disk,1G,dir:blobs\n"
        "tape,1G,dir:tape\n"
    )
    cfgs = load_tier_configs(tmp_path / "tiers.conf")
    assert [c.name for c in cfgs] == ["dram", "pmem", "disk", "tape"]
    assert [c.tier_id for c in cfgs] == [0, 1, 2, 3]
    assert cfgs[1].capacity == 4 << 20
    assert cfgs[1].path == tmp_path / "pm.arena"
    assert cfgs[0].ns_per_access == 100
    assert parse_tier_line(cfgs[1].to_line(), tier_id=1) == cfgs[1]
    with pytest.raises(ValueError):
        parse_tier_line("pmem,0,volatile")


def test_sync_survives_kill(tmp_path):
    """Child writes, syncs and is SIGKILLed before any clean close."""
    script = textwrap.dedent(
        f"""
        import os, signal
        from tierstore.tiers import TierConfig, open_tier
        t = open_tier(TierConfig("pmem", 1 << 16, "mapped", {str(tmp_path / "a")!r}, tier_id=1))
        d = open_tier(TierConfig("disk", 1 << 16, "dir", {str(tmp_path / "d")!r}, tier_id=2))
        h = t.alloc(16)
        t.set_val(h, 8, 123456789, "i64")
        t.root = h
        d.root = d.create_buffer(b"on disk")
        t.sync(); d.sync()
        os.kill(os.getpid(), signal.SIGKILL)
        """
    )
    r = subprocess.run([sys.executable, "-c", script])
    assert r.returncode == -9
    t = open_tier(TierConfig("pmem", 1 << 16, "mapped", tmp_path / "a", tier_id=1))
    d = open_tier(TierConfig("disk", 1 << 16, "dir", tmp_path / "d", tier_id=2))
    assert t.get_val(t.root, 8, "i64") == 123456789
    assert d.retrieve_buffer(d.root) == b"on disk"
