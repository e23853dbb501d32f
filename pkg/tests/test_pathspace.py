import itertools

import pytest
from hypothesis import given, strategies as st

from pam.pathspace import (
    CostTable,
    LayerSpec,
    Path,
    bucket_range,
    budget_bucket,
    cost_bounds,
    enumerate_paths,
    is_feasible,
    layer_flops,
    path_cost,
)
from pam.supernet import cost_table


@pytest.fixture(scope="module")
def table(default_config):
    return cost_table(default_config)


# --- Path ---------------------------------------------------------------------


def test_path_rejects_non_binary():
    with pytest.raises(ValueError):
        Path((0, 2, 1))
    with pytest.raises(ValueError):
        Path(())


@pytest.mark.parametrize("n", [1, 3, 4, 6])
def test_index_is_a_bijection(n):
    seen = {Path.from_index(i, n) for i in range(2**n)}
    assert len(seen) == 2**n
    assert sorted(p.index for p in seen) == list(range(2**n))


def test_bit_i_is_stage_i():
    assert Path.from_index(1, 4).decisions == (1, 0, 0, 0)
    assert Path.from_index(8, 4).decisions == (0, 0, 0, 1)
    assert str(Path.from_index(1, 4)) == "1000"
    assert Path.from_bits("0110").index == 6


def test_from_index_range():
    with pytest.raises(ValueError):
        Path.from_index(16, 4)


# --- layer_flops --------------------------------------------------------------


def test_pointwise_single_mac():
    assert layer_flops(LayerSpec("pointwise-conv", 1, 1, 1, 1, 1)) == 2


def test_depthwise_example():
    # 2 * 25 * 32 * 256
    assert layer_flops(LayerSpec("depthwise-conv", 5, 32, 32, 16, 16)) == 409_600


def test_regular_conv_example():
    # 2 * 9 * 4 * 16 * 1024
    assert layer_flops(LayerSpec("regular-conv", 3, 4, 16, 32, 32)) == 1_179_648


def test_free_kinds():
    assert layer_flops(LayerSpec("pooling", 1, 8, 8, 4, 4)) == 0
    assert layer_flops(LayerSpec("upsample", 1, 8, 8, 4, 4)) == 0


@pytest.mark.parametrize("field", ["kernel_size", "in_channels", "out_channels", "out_height", "out_width", "stride"])
def test_invalid_spec_names_field(field):
    kwargs = dict(kind="regular-conv", kernel_size=3, in_channels=4, out_channels=4, out_height=2, out_width=2)
    kwargs[field] = 0
    with pytest.raises(ValueError, match=field):
        LayerSpec(**kwargs)


def test_depthwise_channel_mismatch():
    with pytest.raises(ValueError, match="in_channels"):
        LayerSpec("depthwise-conv", 3, 4, 8, 2, 2)


# --- CostTable / enumeration --------------------------------------------------


def test_cost_table_invariants():
    with pytest.raises(ValueError):
        CostTable(10, (1, 1), (1, 0))  # bypass not below execute
    with pytest.raises(ValueError):
        CostTable(-1, (1,), (0,))
    with pytest.raises(ValueError):
        CostTable(10, (), ())  # zero stages


def test_enumerate_small():
    assert [p.decisions for p in enumerate_paths(1)] == [(0,), (1,)]
    assert [p.decisions for p in enumerate_paths(2)] == [(0, 0), (1, 0), (0, 1), (1, 1)]
    assert len(enumerate_paths(4)) == 16


@pytest.mark.parametrize("n", [0, 21])
def test_enumerate_guard(n):
    with pytest.raises(ValueError):
        enumerate_paths(n)


# --- path_cost / bounds -------------------------------------------------------


def test_default_table_values(table):
    assert table.execute == (2_506_752,) * 4
    assert table.bypass == (262_144,) * 4


def test_execute_minus_bypass(table):
    assert path_cost(Path.all_execute(4), table) - path_cost(Path.all_bypass(4), table) == 8_978_432


def test_single_stage_delta(table):
    assert path_cost(Path((1, 0, 0, 0)), table) - path_cost(Path.all_bypass(4), table) == 2_244_608


def test_bounds_toy():
    assert cost_bounds(CostTable(10, (1,) * 4, (0,) * 4)) == (10, 14)


def test_bounds_default(table):
    c_min, c_max = cost_bounds(table)
    assert c_max - c_min == 8_978_432
    assert c_min == table.fixed + sum(table.bypass)
    assert c_max == table.fixed + sum(table.execute)


def test_length_mismatch(table):
    with pytest.raises(ValueError):
        path_cost(Path((1, 0)), table)
    with pytest.raises(ValueError):
        is_feasible(Path((1, 0)), table, 10**9)


def test_sum_oracle(table):
    for p in enumerate_paths(4):
        expected = table.fixed
        for i in range(4):
            expected += table.execute[i] if p.decisions[i] == 1 else table.bypass[i]
        assert path_cost(p, table) == expected


def test_single_flip_monotone(table):
    for p in enumerate_paths(4):
        for i in range(4):
            if p[i] == 0:
                flipped = Path(p.decisions[:i] + (1,) + p.decisions[i + 1 :])
                assert path_cost(flipped, table) > path_cost(p, table)


# --- feasibility --------------------------------------------------------------


def test_feasibility_boundaries(table):
    c_min, c_max = cost_bounds(table)
    assert is_feasible(Path.all_bypass(4), table, c_min)
    assert not is_feasible(Path.all_execute(4), table, c_max - 1)
    assert all(is_feasible(p, table, c_max) for p in enumerate_paths(4))
    with pytest.raises(ValueError):
        is_feasible(Path.all_bypass(4), table, -1)


@given(st.integers(0, 20_000_000), st.integers(0, 20_000_000))
def test_feasible_set_monotone(b1, b2):
    t = CostTable(8_246_272, (2_506_752,) * 4, (262_144,) * 4)
    lo, hi = sorted((b1, b2))
    small = {p for p in enumerate_paths(4) if is_feasible(p, t, lo)}
    large = {p for p in enumerate_paths(4) if is_feasible(p, t, hi)}
    assert small <= large


# --- budget buckets -----------------------------------------------------------


def test_bucket_endpoints(table):
    bounds = cost_bounds(table)
    assert budget_bucket(bounds[0], bounds, 64) == 0
    assert budget_bucket(bounds[1], bounds, 64) == 63
    with pytest.raises(ValueError):
        budget_bucket(bounds[0] - 1, bounds, 64)


@pytest.mark.parametrize("bounds,n", [((10, 14), 3), ((9_294_848, 18_273_280), 64), ((0, 7), 5), ((5, 1000), 2)])
def test_bucket_ranges_partition(bounds, n):
    # brute-force oracle on small spans, sampled boundaries on the big one
    c_min, c_max = bounds
    ranges = [bucket_range(b, bounds, n) for b in range(n)]
    assert ranges[0][0] == c_min and ranges[-1][1] == c_max
    for (lo1, hi1), (lo2, _) in itertools.pairwise(ranges):
        assert lo2 == hi1 + 1
    for b, (lo, hi) in enumerate(ranges):
        if lo <= hi:
            probes = range(lo, hi + 1) if hi - lo < 2000 else (lo, lo + 1, (lo + hi) // 2, hi - 1, hi)
            assert all(budget_bucket(x, bounds, n) == b for x in probes)
