import random

import pytest
from hypothesis import settings, strategies as st
from hypothesis.stateful import RuleBasedStateMachine, invariant, rule

from conftest import PERSON, small_tiers
from tierstore.durable import DurableArray, DurableMap, fnv1a_64
from tierstore.store import Store

ROW = "object row {\n  x: i32 @pmem\n  y: f64 @pmem\n}\n"


def test_fnv_reference_vectors():
    # published FNV-1a 64 test vectors
    assert fnv1a_64(b"") == 0xCBF29CE484222325
    assert fnv1a_64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a_64(b"foobar") == 0x85944171F73967E8


def test_array_examples(store):
    a = DurableArray.create(store, store.parse_schema(ROW), 3)
    assert len(a) == 3
    assert a.get(0, "x") == 0
    a.set(1, "x", 7)
    assert a.get(1, "x") == 7
    with pytest.raises(IndexError):
        a.get(3, "x")


def test_array_address_arithmetic(store):
    a = DurableArray.create(store, store.parse_schema(ROW), 50)
    rs = a.layout.record_size
    assert rs == 12
    for i in (1, 7, 49):
        assert a.address(i, "y") - a.address(0, "y") == i * rs


def test_array_bulk_records(store):
    a = DurableArray.create(store, store.parse_schema(ROW), 4)
    a.set(2, "y", 2.5)
    raw = a.read_records(2, 1)
    assert len(raw) == 12
    a.write_records(0, raw)
    assert a.get(0, "y") == 2.5


def test_map_basics(store):
    m = DurableMap.create(store)
    assert m.get(b"absent") is None
    assert b"absent" not in m
    m.put(b"k", 41)
    m[b"k"] = 42
    assert m[b"k"] == 42 and len(m) == 1
    assert m.delete(b"k") is True
    assert m.delete(b"k") is False
    with pytest.raises(KeyError):
        del m[b"k"]


def test_map_holds_objects(store):
    schema = store.parse_schema(PERSON)
    m = DurableMap.create(store)
    p = store.create_object(schema)
    p.set("name", "BOB")
    m.put(b"bob", p)
    assert m.get_object(b"bob", schema).get("name") == "BOB"
    assert m.get_object(b"nobody", schema) is None


def test_map_resizes_under_load(store):
    m = DurableMap.create(store, buckets=4)
    for i in range(100):
        m.put(str(i).encode(), i)
        assert m.size <= 0.75 * m.nbuckets
    assert m.nbuckets >= 128
    assert sorted(m.items()) == sorted((str(i).encode(), i) for i in range(100))


def test_map_survives_reopen(tmp_path):
    cfgs = small_tiers(tmp_path)
    rng = random.Random(7)
    keys = {rng.randbytes(rng.randint(1, 24)): rng.getrandbits(63) for _ in range(1000)}
    with Store.open(cfgs) as s:
        m = s.root_map()
        for k, v in keys.items():
            m.put(k, v)
        s.sync()
    with Store.open(cfgs) as s:
        m = s.root_map()
        assert len(m) == len(keys)
        assert all(m.get(k) == v for k, v in keys.items())


def test_map_model_equivalence_long_run(store):
    """12 000 seeded random operations against a dict over a small key space."""
    m = DurableMap.create(store, buckets=2)
    model = {}
    rng = random.Random(2024)
    keys = [f"key{i}".encode() for i in range(300)]
    for _ in range(12_000):
        k = rng.choice(keys)
        op = rng.random()
        if op < 0.45:
            v = rng.getrandbits(64)
            m.put(k, v)
            model[k] = v
        elif op < 0.75:
            assert m.get(k) == model.get(k)
        else:
            assert m.delete(k) == (model.pop(k, None) is not None)
    assert len(m) == len(model)
    assert dict(m.items()) == model


class MapMachine(RuleBasedStateMachine):
    def __init__(self):
        super().__init__()
        self.store = Store.open(small_tiers_volatile())
        self.map = DurableMap.create(self.store, "dram", buckets=1)
        self.model = {}

    keys = st.binary(max_size=6)

    @rule(k=keys, v=st.integers(0, 2**64 - 1))
    def put(self, k, v):
        self.map.put(k, v)
        self.model[k] = v

    @rule(k=keys)
    def get(self, k):
        assert self.map.get(k) == self.model.get(k)

    @rule(k=keys)
    def delete(self, k):
        assert self.map.delete(k) == (self.model.pop(k, None) is not None)

    @invariant()
    def same_size(self):
        assert len(self.map) == len(self.model)

    def teardown(self):
        self.store.close()


def small_tiers_volatile():
    from tierstore.tiers import TierConfig

    return [TierConfig("dram", 1 << 20, "volatile")]


MapMachine.TestCase.settings = settings(max_examples=30, stateful_step_count=80, deadline=None)
TestMapMachine = MapMachine.TestCase
