"""Ground-truth link speeds and node outages, plus the size-to-delay model."""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .engine import SimTime

PROPAGATION_MS = 5


class DegenerateBoundsError(ValueError):
    pass


def round_half_away(x: float) -> int:
    """Round to the nearest integer, ties away from zero (2.5 -> 3, -2.5 -> -3)."""
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def transfer_time(size_bytes: int, speed_mbps: float, propagation_ms: int = PROPAGATION_MS) -> int:
    """Milliseconds to push ``size_bytes`` over a link of ``speed_mbps``."""
    if speed_mbps <= 0:
        raise ValueError(f"link speed must be positive, got {speed_mbps}")
    if size_bytes < 0:
        raise ValueError(f"negative message size {size_bytes}")
    serialise = 8 * size_bytes / (speed_mbps * 1e3)
    # guard against 1000.0000000001 -> 1001
    return math.ceil(serialise - 1e-9) + propagation_ms


def wire_time_us(size_bytes: int, speed_mbps: float) -> int:
    """Serialisation time in whole microseconds (bits / Mbps = microseconds)."""
    return math.ceil(8 * size_bytes / speed_mbps - 1e-9)


class NetworkSchedule:
    """Directed K x K link speeds, piecewise constant over intervals of ``interval_ms``.

    Interval ``j`` covers ``[j * interval_ms, (j + 1) * interval_ms)``.
    """

    def __init__(self, interval_ms: int, speeds: np.ndarray):
        speeds = np.asarray(speeds, dtype=float)
        if speeds.ndim != 3 or speeds.shape[1] != speeds.shape[2]:
            raise ValueError("speeds must have shape (intervals, K, K)")
        if interval_ms <= 0:
            raise ValueError("interval length must be positive")
        off_diag = ~np.eye(speeds.shape[1], dtype=bool)
        if speeds.shape[0] and not np.all(speeds[:, off_diag] > 0):
            raise ValueError("link speeds must be positive")
        self.interval_ms = int(interval_ms)
        self.speeds = speeds
        # nested lists: scalar indexing is much faster than on ndarrays
        self._rows = speeds.tolist()
        self._delay_tables: dict[tuple[int, int], tuple] = {}

    @classmethod
    def constant(cls, n_nodes: int, speed_mbps: float, horizon_ms: int, interval_ms: int) -> "NetworkSchedule":
        n = max(1, -(-horizon_ms // interval_ms))
        return cls(interval_ms, np.full((n, n_nodes, n_nodes), float(speed_mbps)))

    @property
    def n_nodes(self) -> int:
        return self.speeds.shape[1]

    @property
    def horizon(self) -> SimTime:
        return self.speeds.shape[0] * self.interval_ms

    def interval_index(self, t: SimTime) -> int:
        if t < 0 or t >= self.horizon:
            raise ValueError(f"t={t} outside network horizon [0, {self.horizon})")
        return t // self.interval_ms

    def speed_at(self, src: int, dst: int, t: SimTime) -> float:
        return self._rows[self.interval_index(t)][src][dst]

    def matrix_at(self, t: SimTime) -> list[list[float]]:
        return self._rows[self.interval_index(t)]

    def delay(self, src: int, dst: int, size_bytes: int, t: SimTime, propagation_ms: int = PROPAGATION_MS) -> int:
        """Delivery delay of a message sent at ``t``.

        Sends after the horizon use the last interval's speeds, so rounds
        started near the end of a run can finish.
        """
        j = t // self.interval_ms
        if j >= len(self._rows):
            j = len(self._rows) - 1
        return transfer_time(size_bytes, self._rows[j][src][dst], propagation_ms)

    def wire_us(self, src: int, dst: int, size_bytes: int, t: SimTime) -> int:
        j = min(t // self.interval_ms, len(self._rows) - 1)
        return wire_time_us(size_bytes, self._rows[j][src][dst])

    def delay_table(self, size_bytes: int, propagation_ms: int = PROPAGATION_MS) -> list[list[list[int]]]:
        """Per-interval K x K delivery delays (ms) for one message size, cached."""
        return self._tables(size_bytes, propagation_ms)[0]

    def wire_table(self, size_bytes: int) -> list[list[list[int]]]:
        """Per-interval K x K wire times (us) for one message size, cached."""
        return self._tables(size_bytes, PROPAGATION_MS)[1]

    def _tables(self, size_bytes: int, propagation_ms: int):
        key = (size_bytes, propagation_ms)
        tables = self._delay_tables.get(key)
        if tables is None:
            # the diagonal is unused and may hold anything; keep it finite
            speeds = np.where(self.speeds > 0, self.speeds, 1.0)
            ms = 8 * size_bytes / (speeds * 1e3)
            us = 8 * size_bytes / speeds
            tables = (
                (np.ceil(ms - 1e-9) + propagation_ms).astype(np.int64).tolist(),
                np.ceil(us - 1e-9).astype(np.int64).tolist(),
            )
            self._delay_tables[key] = tables
        return tables


@dataclass(frozen=True)
class Outage:
    node: int
    start: SimTime
    end: SimTime  # exclusive


class FailureSchedule:
    """Per-node crash outages, each half-open ``[start, end)``."""

    def __init__(self, outages: Iterable[Outage | tuple[int, int, int]] = ()):
        items = sorted(
            (o if isinstance(o, Outage) else Outage(*o) for o in outages),
            key=lambda o: (o.node, o.start),
        )
        self.outages: tuple[Outage, ...] = tuple(items)
        self._spans = sorted((o.start, o.end) for o in items)
        self._max_end: list[int] = []
        for _, end in self._spans:
            self._max_end.append(max(end, self._max_end[-1]) if self._max_end else end)
        self._starts: dict[int, list[int]] = {}
        self._ends: dict[int, list[int]] = {}
        for o in items:
            if o.end <= o.start:
                raise ValueError(f"empty outage {o}")
            ends = self._ends.setdefault(o.node, [])
            if ends and o.start < ends[-1]:
                raise ValueError(f"overlapping outages for node {o.node}")
            self._starts.setdefault(o.node, []).append(o.start)
            ends.append(o.end)

    def __len__(self) -> int:
        return len(self.outages)

    def is_online(self, node: int, t: SimTime) -> bool:
        starts = self._starts.get(node)
        if not starts:
            return True
        i = bisect.bisect_right(starts, t) - 1
        return i < 0 or t >= self._ends[node][i]

    def quiet(self, t0: SimTime, t1: SimTime) -> bool:
        """True when no outage overlaps ``[t0, t1]``."""
        i = bisect.bisect_right(self._spans, (t1, float("inf")))
        return i == 0 or self._max_end[i - 1] <= t0

    def offline_at(self, t: SimTime, nodes: Iterable[int]) -> list[int]:
        return [n for n in nodes if not self.is_online(n, t)]

    def outage_ends(self) -> list[SimTime]:
        return sorted({o.end for o in self.outages})

    def has_outages(self, node: int) -> bool:
        return node in self._starts


def true_bounds(
    network: NetworkSchedule,
    failures: FailureSchedule,
    t: SimTime,
    producers: Sequence[int],
) -> tuple[int, int]:
    """Rounded (min, max) link speed among producers online at ``t``."""
    online = [p for p in producers if failures.is_online(p, t)]
    if len(online) < 2:
        raise DegenerateBoundsError(f"need two online producers at t={t}, have {online}")
    matrix = network.matrix_at(t)
    values = [matrix[i][j] for i in online for j in online if i != j]
    return round_half_away(min(values)), round_half_away(max(values))
