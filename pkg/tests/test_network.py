import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twinchain.network import (
    DegenerateBoundsError,
    FailureSchedule,
    NetworkSchedule,
    Outage,
    round_half_away,
    transfer_time,
    true_bounds,
)


def test_transfer_time_megabyte_at_8mbps():
    assert transfer_time(1_000_000, 8) == 1005


def test_transfer_time_empty_payload():
    assert transfer_time(0, 3.3) == 5


def test_transfer_time_ceiling():
    assert transfer_time(256, 1) == 8


def test_transfer_time_rejects_bad_speed():
    with pytest.raises(ValueError):
        transfer_time(10, 0)
    with pytest.raises(ValueError):
        transfer_time(10, -2)


@given(st.integers(0, 10**7), st.floats(0.1, 1000), st.floats(0.1, 1000))
def test_transfer_time_monotone_in_speed(size, a, b):
    slow, fast = sorted((a, b))
    assert transfer_time(size, fast) <= transfer_time(size, slow)


@given(st.integers(0, 10**7), st.integers(0, 10**7), st.floats(0.1, 1000))
def test_transfer_time_monotone_in_size(a, b, speed):
    small, big = sorted((a, b))
    assert transfer_time(small, speed) <= transfer_time(big, speed)


@given(st.integers(0, 10**6), st.floats(0.5, 200))
def test_transfer_time_matches_formula(size, speed):
    exact = 8 * size / (speed * 1e6) * 1000
    got = transfer_time(size, speed) - 5
    # the 1e-9 guard may only absorb float noise, never a real millisecond
    assert math.ceil(exact) - 1 <= got <= math.ceil(exact)
    assert got >= exact - 1e-6


@pytest.mark.parametrize("x,expected", [(2.5, 3), (3.5, 4), (-2.5, -3), (2.4999, 2), (7.4, 7), (9.5, 10), (2.6, 3)])
def test_round_half_away(x, expected):
    assert round_half_away(x) == expected


def _two_interval_network():
    speeds = np.full((2, 3, 3), 4.0)
    speeds[1] = 9.0
    return NetworkSchedule(1000, speeds)


def test_speed_lookup_and_boundary():
    net = _two_interval_network()
    assert net.speed_at(0, 1, 500) == 4.0
    assert net.speed_at(0, 1, 999) == 4.0
    assert net.speed_at(0, 1, 1000) == 9.0


def test_speed_constant_within_interval():
    net = _two_interval_network()
    assert {net.speed_at(1, 2, t) for t in range(1000, 2000, 7)} == {9.0}


def test_speed_beyond_horizon_rejected():
    with pytest.raises(ValueError):
        _two_interval_network().speed_at(0, 1, 2000)


def test_nonpositive_speed_rejected():
    speeds = np.full((1, 3, 3), 1.0)
    speeds[0, 0, 1] = 0.0
    with pytest.raises(ValueError):
        NetworkSchedule(1000, speeds)


def test_delay_tables_match_scalar_delay():
    rng = np.random.default_rng(0)
    net = NetworkSchedule(1000, rng.uniform(0.5, 30, size=(3, 4, 4)))
    table = net.delay_table(256)
    for j in range(3):
        for s in range(4):
            for r in range(4):
                if s != r:
                    assert table[j][s][r] == net.delay(s, r, 256, j * 1000)


def test_outage_membership():
    fs = FailureSchedule([Outage(2, 10_000, 20_000)])
    assert not fs.is_online(2, 15_000)
    assert not fs.is_online(2, 10_000)
    assert fs.is_online(2, 20_000)
    assert fs.is_online(2, 9_999)


def test_node_without_outages_always_online():
    fs = FailureSchedule([Outage(2, 10_000, 20_000)])
    assert all(fs.is_online(1, t) for t in range(0, 40_000, 997))


def test_overlapping_outages_rejected():
    with pytest.raises(ValueError):
        FailureSchedule([Outage(1, 0, 100), Outage(1, 50, 200)])


def test_quiet_detects_overlap():
    fs = FailureSchedule([Outage(0, 100, 200)])
    assert fs.quiet(0, 99)
    assert not fs.quiet(0, 100)
    assert not fs.quiet(150, 160)
    assert fs.quiet(200, 300)


@settings(max_examples=50)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 5000), st.integers(1, 500)), max_size=10), st.integers(0, 6000))
def test_is_online_against_brute_force(raw, t):
    outages = []
    taken = {}
    for node, start, dur in raw:
        span = (start, start + dur)
        if any(not (span[1] <= a or span[0] >= b) for a, b in taken.get(node, [])):
            continue
        taken.setdefault(node, []).append(span)
        outages.append(Outage(node, *span))
    fs = FailureSchedule(outages)
    for node in range(4):
        expect = not any(o.node == node and o.start <= t < o.end for o in outages)
        assert fs.is_online(node, t) == expect


def test_true_bounds_constant_matrix():
    net = NetworkSchedule.constant(5, 7.4, 10_000, 10_000)
    assert true_bounds(net, FailureSchedule(), 0, range(5)) == (7, 7)


def test_true_bounds_rounding():
    speeds = np.full((1, 3, 3), 2.6)
    speeds[0, 1, 2] = 9.5
    assert true_bounds(NetworkSchedule(1000, speeds), FailureSchedule(), 0, range(3)) == (3, 10)


def test_true_bounds_needs_two_online():
    net = NetworkSchedule.constant(3, 5, 1000, 1000)
    fs = FailureSchedule([Outage(0, 0, 1000), Outage(1, 0, 1000)])
    with pytest.raises(DegenerateBoundsError):
        true_bounds(net, fs, 0, range(3))


@settings(max_examples=50)
@given(st.integers(0, 2**32), st.sets(st.integers(0, 4), max_size=3))
def test_true_bounds_excludes_offline_producers(seed, offline):
    rng = np.random.default_rng(seed)
    speeds = rng.uniform(1, 20, size=(1, 6, 6))
    net = NetworkSchedule(10_000, speeds)
    fs = FailureSchedule([Outage(n, 0, 10_000) for n in offline])
    online = [p for p in range(5) if p not in offline]
    vals = [speeds[0, i, j] for i in online for j in online if i != j]
    lo, hi = true_bounds(net, fs, 5_000, range(5))
    assert (lo, hi) == (round_half_away(min(vals)), round_half_away(max(vals)))
    assert lo <= hi
