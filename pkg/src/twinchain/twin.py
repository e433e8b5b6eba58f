"""Digital twin: turns committed blocks into an estimate of the system state
(failure flag, link-speed bounds, workload) and calibrates a simulator model
for what-if runs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .engine import SimTime
from .ledger import Block, MissedCycle, SizeSpec
from .network import PROPAGATION_MS, FailureSchedule, NetworkSchedule, Outage, round_half_away
from .scenario import Scenario, ScenarioParams
from .system import ObservationBatch

# missed-cycle reasons that betray an unavailable producer; an empty-pool
# slot is announced by a live producer and says nothing about failures
FAILURE_REASONS = frozenset({"offline", "consensus-failed"})


@dataclass(frozen=True)
class TwinConfig:
    n_producers: int = 5
    smoothing: float = 0.5
    propagation_ms: int = PROPAGATION_MS
    block_interval_ms: int = 1000

    def __post_init__(self):
        if not 0.0 < self.smoothing <= 1.0:
            raise ValueError("smoothing factor must lie in (0, 1]")


@dataclass(frozen=True)
class TwinState:
    F: int
    N_L: int
    N_H: int
    tps_estimate: float = 0.0
    as_of: SimTime = 0
    # unrounded smoothed bounds, carried so smoothing does not compound rounding
    low_mbps: float = field(default=0.0, compare=False)
    high_mbps: float = field(default=0.0, compare=False)

    def __post_init__(self):
        if self.F not in (0, 1):
            raise ValueError("F is binary")
        if self.N_L > self.N_H:
            raise ValueError(f"N_L={self.N_L} above N_H={self.N_H}")

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.F, self.N_L, self.N_H)


# Nothing observed yet: treated like a silent window.
COLD_STATE = TwinState(F=1, N_L=0, N_H=0)


def detect_failures(batch: ObservationBatch, producers) -> int:
    if not batch.blocks:
        return 1
    if any(m.reason in FAILURE_REASONS for m in batch.missed):
        return 1
    expected = frozenset(producers)
    for b in batch.blocks:
        if not expected <= b.consensus_history.participants:
            return 1
    return 0


def message_speed_estimate(size_bytes: int, sent_at: SimTime, received_at: SimTime, propagation_ms: int) -> float | None:
    """Speed implied by one delivery: 8 * size / transfer-seconds, in Mbps."""
    transfer_ms = received_at - sent_at - propagation_ms
    if transfer_ms <= 0 or size_bytes <= 0:
        return None
    return 8 * size_bytes / (transfer_ms / 1000) / 1e6


def link_speed_intervals(
    blocks: list[Block], propagation_ms: int = PROPAGATION_MS
) -> dict[tuple[int, int], tuple[float, float]]:
    """Per directed link, the speed range (Mbps) consistent with every delivery on it.

    A wire time is rounded up to a whole tick (microseconds when the receiver
    timestamped it, else the millisecond delivery minus propagation), so a
    transfer of ``k`` ticks pins the speed to ``[bits/k, bits/(k-1))`` per
    tick. The lower end is the plain ``8 * size / transfer-time`` reading;
    intersecting over deliveries of different sizes narrows the range. The
    upper end is ``inf`` when every reading was a single tick.
    """
    lo: dict[tuple[int, int], float] = {}
    hi: dict[tuple[int, int], float] = {}
    for b in blocks:
        for r in b.consensus_history.records:
            if r.size_bytes <= 0:
                continue
            if r.transfer_us > 0:
                k, per_tick = r.transfer_us, 1.0
            else:
                k, per_tick = r.received_at - r.sent_at - propagation_ms, 1e3
                if k <= 0:
                    continue
            bits = 8 * r.size_bytes
            link = (r.sender, r.receiver)
            low = bits / (k * per_tick)
            high = bits / ((k - 1) * per_tick) if k > 1 else math.inf
            if low > lo.get(link, 0.0):
                lo[link] = low
            if high < hi.get(link, math.inf):
                hi[link] = high
    return {link: (low, hi.get(link, math.inf)) for link, low in lo.items()}


def _midpoint(low: float, high: float) -> float:
    return low if math.isinf(high) or high < low else (low + high) / 2


def raw_speed_bounds(blocks: list[Block], propagation_ms: int = PROPAGATION_MS) -> tuple[float, float] | None:
    """Unrounded (slowest, fastest) link speed implied by one window's deliveries.

    If one speed fits every link's range the network is read as uniform and
    both bounds come from the common intersection, which pools every delivery
    in the window. Otherwise the slowest and fastest links are bracketed
    separately: the minimum speed lies in ``[min lows, min highs)`` and the
    maximum in ``[max lows, max highs)``.
    """
    ranges = link_speed_intervals(blocks, propagation_ms)
    if not ranges:
        return None
    lows = [r[0] for r in ranges.values()]
    highs = [r[1] for r in ranges.values()]
    common_lo, common_hi = max(lows), min(highs)
    if common_lo <= common_hi:
        v = _midpoint(common_lo, common_hi)
        return v, v
    slowest = _midpoint(min(lows), min(highs))
    fastest = _midpoint(max(lows), max(highs))
    return min(slowest, fastest), max(slowest, fastest)


def infer_network_bounds(
    batch: ObservationBatch,
    previous: TwinState,
    smoothing: float = 0.5,
    propagation_ms: int = PROPAGATION_MS,
) -> tuple[int, int, float, float]:
    """Rounded (N_L, N_H) plus the smoothed unrounded bounds.

    Without any delivery in the window the previous bounds carry forward.
    """
    raw = raw_speed_bounds(batch.blocks, propagation_ms)
    if raw is None:
        return previous.N_L, previous.N_H, previous.low_mbps, previous.high_mbps
    raw_lo, raw_hi = raw
    if previous.high_mbps <= 0:
        low, high = raw_lo, raw_hi
    else:
        low = smoothing * raw_lo + (1 - smoothing) * previous.low_mbps
        high = smoothing * raw_hi + (1 - smoothing) * previous.high_mbps
    return round_half_away(low), round_half_away(high), low, high


def estimate_tps(batch: ObservationBatch, previous: float | None = None, smoothing: float = 0.5) -> float:
    seconds = batch.length_ms / 1000
    raw = sum(len(b.txs) for b in batch.blocks) / seconds if seconds > 0 else 0.0
    if previous is None:
        return raw
    return smoothing * raw + (1 - smoothing) * previous


def twin_state(batch: ObservationBatch, previous: TwinState, config: TwinConfig) -> TwinState:
    F = detect_failures(batch, range(config.n_producers))
    n_l, n_h, low, high = infer_network_bounds(batch, previous, config.smoothing, config.propagation_ms)
    tps = estimate_tps(batch, previous.tps_estimate if previous.as_of > 0 else None, config.smoothing)
    return TwinState(F, n_l, n_h, tps, batch.window[1], low, high)


@dataclass(frozen=True)
class WindowSummary:
    """The parts of one window the simulator calibration needs."""

    window: tuple[SimTime, SimTime]
    tx_count: int
    tx_size_min: int
    tx_size_max: int
    speed_low: float | None
    speed_high: float | None
    absences: tuple[tuple[int, SimTime], ...]  # (producer, time seen absent)


def summarize(batch: ObservationBatch, config: TwinConfig) -> WindowSummary:
    producers = range(config.n_producers)
    sizes = [tx.size_bytes for b in batch.blocks for tx in b.txs]
    raw = raw_speed_bounds(batch.blocks, config.propagation_ms)
    absences = []
    for b in batch.blocks:
        for p in producers:
            if p not in b.consensus_history.participants:
                absences.append((p, b.proposed_at))
    for m in batch.missed:
        if m.reason == "offline":
            absences.append((m.producer, m.at))
    return WindowSummary(
        window=batch.window,
        tx_count=len(sizes),
        tx_size_min=min(sizes, default=0),
        tx_size_max=max(sizes, default=0),
        speed_low=raw[0] if raw else None,
        speed_high=raw[1] if raw else None,
        absences=tuple(sorted(absences)),
    )


@dataclass(frozen=True)
class SimulatorModel:
    """A generative model of the live system, fitted from observations."""

    speed_low: float = 2.0
    speed_high: float = 20.0
    tps: float = 20.0
    tx_size: tuple[int, int] = (200, 2000)
    outage_rate_per_s: tuple[float, ...] = (0.0,) * 5
    mean_outage_ms: float = 6000.0
    suspect: int = 0
    n_nodes: int = 8
    n_producers: int = 5
    cold_start: bool = False

    def scenario_for(self, state: TwinState, horizon: SimTime, seed: int) -> Scenario:
        """A one-off scenario consistent with ``state`` for a what-if run."""
        g = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & 0xFFFFFFFF, seed >> 32, 0x77])))
        if state.N_H > 0:
            lo, hi = max(0.5, state.N_L - 0.5), state.N_H + 0.5
        else:
            lo, hi = self.speed_low, self.speed_high
        k = self.n_nodes
        speeds = lo + g.random(size=(1, k, k)) * (hi - lo)
        outages = []
        if state.F:
            # the outage that raised F is already under way; assume half of it remains
            remaining = int(min(horizon, max(1000.0, self.mean_outage_ms / 2)))
            outages.append(Outage(self.suspect, 0, remaining))
        else:
            for p in range(self.n_producers):
                rate = self.outage_rate_per_s[p] if p < len(self.outage_rate_per_s) else 0.0
                if g.random() < rate * horizon / 1000:
                    begin = int(g.integers(0, horizon))
                    outages.append(Outage(p, begin, begin + max(1, int(self.mean_outage_ms))))
        tps = state.tps_estimate if state.tps_estimate > 0 else self.tps
        params = ScenarioParams(
            tps_range=(tps, tps),
            tx_size_range=self.tx_size,
            outage_prob_per_interval=0.0,
            speed_range=(lo, hi),
            horizon=horizon,
            TI=horizon,
            TS=horizon,
            n_nodes=k,
            n_producers=self.n_producers,
        )
        return Scenario(
            params=params,
            network=NetworkSchedule(horizon, speeds),
            failures=FailureSchedule(outages),
            tps_trace=[tps],
            tx_size_trace=[SizeSpec(*self.tx_size)],
            seed=int(seed),
        )


def _outage_episodes(times: list[SimTime], gap_ms: int) -> list[tuple[SimTime, SimTime]]:
    episodes = []
    for t in times:
        if episodes and t - episodes[-1][1] <= gap_ms:
            episodes[-1] = (episodes[-1][0], t)
        else:
            episodes.append((t, t))
    return episodes


def calibrate_simulator(
    history: list[WindowSummary],
    config: TwinConfig,
    defaults: SimulatorModel | None = None,
    n_nodes: int = 8,
) -> SimulatorModel:
    """Fit link-speed bounds, workload and per-producer outage behaviour.

    With no observations the defaults come back flagged ``cold_start``.
    """
    defaults = defaults or SimulatorModel(n_nodes=n_nodes, n_producers=config.n_producers)
    if not history:
        return replace(defaults, cold_start=True)
    lows = [h.speed_low for h in history if h.speed_low is not None]
    highs = [h.speed_high for h in history if h.speed_high is not None]
    observed_ms = history[-1].window[1] - history[0].window[0]
    seconds = observed_ms / 1000
    txs = sum(h.tx_count for h in history)
    sizes_lo = [h.tx_size_min for h in history if h.tx_count]
    sizes_hi = [h.tx_size_max for h in history if h.tx_count]

    bi = config.block_interval_ms
    per_producer: dict[int, list[SimTime]] = {}
    for h in history:
        for p, t in h.absences:
            per_producer.setdefault(p, []).append(t)
    rates = []
    durations = []
    for p in range(config.n_producers):
        episodes = _outage_episodes(sorted(per_producer.get(p, [])), 2 * bi)
        rates.append(len(episodes) / seconds if seconds > 0 else 0.0)
        durations.extend(end - start + bi for start, end in episodes)
    suspect = defaults.suspect
    last_seen = -1
    for p, times in per_producer.items():
        if max(times) > last_seen:
            last_seen, suspect = max(times), p

    return SimulatorModel(
        speed_low=float(np.mean(lows)) if lows else defaults.speed_low,
        speed_high=float(np.mean(highs)) if highs else defaults.speed_high,
        tps=txs / seconds if seconds > 0 and txs else defaults.tps,
        tx_size=(min(sizes_lo), max(sizes_hi)) if sizes_lo else defaults.tx_size,
        outage_rate_per_s=tuple(rates),
        mean_outage_ms=float(np.mean(durations)) if durations else defaults.mean_outage_ms,
        suspect=suspect,
        n_nodes=defaults.n_nodes,
        n_producers=config.n_producers,
        cold_start=False,
    )


class DigitalTwin:
    """Consumes one observation batch per control window."""

    def __init__(self, config: TwinConfig | None = None, keep_history: bool = True):
        self.config = config or TwinConfig()
        self.state = COLD_STATE
        self.history: list[WindowSummary] = []
        self.states: list[TwinState] = []
        self.keep_history = keep_history

    def update(self, batch: ObservationBatch) -> TwinState:
        self.state = twin_state(batch, self.state, self.config)
        self.states.append(self.state)
        if self.keep_history:
            self.history.append(summarize(batch, self.config))
        return self.state

    def calibrate(
        self, defaults: SimulatorModel | None = None, n_nodes: int = 8, last: int | None = None
    ) -> SimulatorModel:
        history = self.history if last is None else self.history[-last:]
        return calibrate_simulator(history, self.config, defaults, n_nodes)


TWIN_STATE_HEADER = ("window_end_ms", "F", "N_L", "N_H", "tps_estimate")


def twin_state_row(s: TwinState) -> list:
    return [s.as_of, s.F, s.N_L, s.N_H, f"{s.tps_estimate:.6f}"]
