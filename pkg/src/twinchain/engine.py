"""Discrete-event core: integer-millisecond clock, ordered event queue and
named random streams derived from one master seed."""

from __future__ import annotations

import hashlib
import heapq
import itertools
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

# Simulation time is a plain int of milliseconds since the start of a run.
SimTime = int


class CausalityError(ValueError):
    """Raised when an event is scheduled in the simulated past."""


@dataclass(order=True, frozen=True)
class Event:
    fire_at: SimTime
    seq: int
    payload: Any = field(compare=False)


class Simulator:
    """Single-threaded event loop.

    Events fire in ``(fire_at, seq)`` order, ``seq`` being the insertion
    counter, so two events at the same instant fire in the order they were
    scheduled. A payload that is callable is invoked when its event fires.
    """

    def __init__(self, start: SimTime = 0):
        self._now = start
        self._queue: list[Event] = []
        self._seq = itertools.count()

    @property
    def now(self) -> SimTime:
        return self._now

    def __len__(self) -> int:
        return len(self._queue)

    def schedule(self, fire_at: SimTime, payload: Any) -> Event:
        if fire_at < self._now:
            raise CausalityError(f"event at {fire_at} scheduled when now={self._now}")
        event = Event(int(fire_at), next(self._seq), payload)
        heapq.heappush(self._queue, event)
        return event

    def run_until(self, t: SimTime, on_event: Callable[[Event], None] | None = None) -> int:
        """Fire every event with ``fire_at <= t`` and leave the clock at ``t``."""
        if t < self._now:
            raise CausalityError(f"cannot run back to {t} from {self._now}")
        fired = 0
        queue = self._queue
        while queue and queue[0].fire_at <= t:
            event = heapq.heappop(queue)
            self._now = event.fire_at
            fired += 1
            if on_event is not None:
                on_event(event)
            elif callable(event.payload):
                event.payload()
        self._now = t
        return fired

    def run_before(self, t: SimTime) -> int:
        """Fire events strictly before ``t`` and move the clock to ``t``.

        Used for half-open windows: events at exactly ``t`` stay queued.
        """
        if t <= self._now:
            if t < self._now:
                raise CausalityError(f"cannot run back to {t} from {self._now}")
            return 0
        fired = self.run_until(t - 1)
        self._now = t
        return fired


def _stream_key(stream_id: str) -> list[int]:
    digest = hashlib.sha256(stream_id.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


class RngStream:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    PCG64 seeded through ``SeedSequence`` gives the same draws on every
    platform; distinct stream ids hash to unrelated seed material.
    """

    def __init__(self, seed: int, stream_id: str):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = stream_id
        entropy = [self.seed & 0xFFFFFFFF, self.seed >> 32, *_stream_key(stream_id)]
        self.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def child(self, label: str) -> "RngStream":
        return RngStream(self.seed, f"{self.stream_id}/{label}")

    def uniform(self, lo: float, hi: float) -> float:
        return draw_uniform(self, lo, hi)

    def random(self) -> float:
        return float(self.generator.random())

    def integers(self, lo: int, hi: int) -> int:
        """Integer in ``[lo, hi)``."""
        return int(self.generator.integers(lo, hi))

    def seed64(self) -> int:
        return int(self.generator.integers(0, 2**63 - 1, dtype=np.int64))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id!r})"


def draw_uniform(stream: RngStream, lo: float, hi: float) -> float:
    if lo > hi:
        raise ValueError(f"empty interval [{lo}, {hi}]")
    if lo == hi:
        return float(lo)
    return float(stream.generator.uniform(lo, hi))
