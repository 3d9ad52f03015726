import pytest

from dvoxres.bench import bench_one, estimate_bytes, parse_size, run_bench
from dvoxres.errors import CapacityError, ConfigError


def test_offset_channels_follow_3k3():
    rows = run_bench(["6:2:3", "6:2:5"], repeats=1)
    assert [r.offset_channels for r in rows] == [81, 375]
    for r in rows:
        assert r.offset_map_bytes == 3 * r.kernel**3 * r.extent**3 * 4
        assert r.regular_s > 0 and r.deformable_s > 0


def test_capacity_checked_before_allocation():
    with pytest.raises(CapacityError):
        run_bench(["6:2:3", "512:64:5"])
    assert estimate_bytes(512, 64, 5) > 2 * 1024**3
    with pytest.raises(CapacityError):
        bench_one(16, 4, 3, max_bytes=1024)


def test_size_parsing():
    assert parse_size("16:8:3") == (16, 8, 3)
    for bad in ("16:8", "a:b:c", "16:8:4", "0:1:3"):
        with pytest.raises(ConfigError):
            parse_size(bad)
    with pytest.raises(ConfigError):
        run_bench([])
