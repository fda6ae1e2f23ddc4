from __future__ import annotations

import sys

import pytest

from tierstore.store import Store
from tierstore.tiers import TierConfig

PERSON = """\
object person {
    age: i32 @pmem
    image: bytes @disk
    place: string @pmem
    name: string @pmem
}
"""


def small_tiers(root, dram=1 << 20, pmem=4 << 20, disk=64 << 20):
    return [
        TierConfig("dram", dram, "volatile"),
        TierConfig("pmem", pmem, "mapped", root / "pmem.arena"),
        TierConfig("disk", disk, "dir", root / "disk"),
    ]


@pytest.fixture
def configs(tmp_path):
    return small_tiers(tmp_path)


@pytest.fixture
def store(configs):
    s = Store.open(configs)
    yield s
    s.close()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.format_results():
        terminalreporter.write_line(line)
