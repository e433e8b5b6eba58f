"""The physical system: producers taking round-robin slots, consensus rounds
and commits, driven by the event engine one control window at a time."""

from __future__ import annotations

from dataclasses import dataclass, field

from .consensus import ConsensusConfig, run_consensus
from .engine import Simulator, SimTime
from .ledger import (
    DEFAULT_BLOCK_INTERVAL_MS,
    DEFAULT_MAX_TXS,
    Block,
    Ledger,
    MissedCycle,
    ProtocolId,
    Proposal,
    TransactionPool,
    attempt_block,
    commit_block,
    next_producer,
    window_latency,
)
from .scenario import Scenario


@dataclass(frozen=True)
class SystemConfig:
    block_interval_ms: int = DEFAULT_BLOCK_INTERVAL_MS
    max_txs: int = DEFAULT_MAX_TXS
    consensus: ConsensusConfig = field(default_factory=ConsensusConfig)

    def __post_init__(self):
        if self.block_interval_ms <= 0 or self.max_txs <= 0:
            raise ValueError("block interval and max_txs must be positive")


@dataclass
class ObservationBatch:
    """What the producers report for one control window."""

    blocks: list[Block]
    window: tuple[SimTime, SimTime]
    missed: list[MissedCycle] = field(default_factory=list)

    @property
    def length_ms(self) -> int:
        return self.window[1] - self.window[0]


class BlockchainSystem:
    """Runs one scenario; the protocol can be switched between windows.

    Slot ``k`` fires at ``k * block_interval_ms`` and belongs to producer
    ``k mod M``. A block is attributed to the window in which it commits.
    """

    def __init__(self, scenario: Scenario, config: SystemConfig | None = None):
        config = config or SystemConfig()
        m = scenario.params.n_producers
        if config.consensus.n != m:
            config = SystemConfig(
                config.block_interval_ms,
                config.max_txs,
                ConsensusConfig(
                    n=m,
                    control_msg_bytes=config.consensus.control_msg_bytes,
                    fast_path_timeout_ms=config.consensus.fast_path_timeout_ms,
                    view_timeout_ms=config.consensus.view_timeout_ms,
                    propagation_ms=config.consensus.propagation_ms,
                ),
            )
        self.scenario = scenario
        self.config = config
        self.sim = Simulator()
        self.pool = TransactionPool()
        self.ledger = Ledger(scenario.params.n_nodes)
        self.protocol = ProtocolId.PBFT
        self.blocks: list[Block] = []
        self.missed: list[MissedCycle] = []
        self.trace: list[Block | MissedCycle] = []
        self._window_blocks: list[Block] = []
        self._window_missed: list[MissedCycle] = []
        self._txs = scenario.transactions()
        self._arrivals = scenario.arrivals(config.consensus.propagation_ms)
        self._next_tx = 0
        self._slot = 0
        self.sim.schedule(0, self._on_slot)
        for end in scenario.failures.outage_ends():
            self.sim.schedule(end, self._on_recovery)

    @property
    def now(self) -> SimTime:
        return self.sim.now

    def _admit(self, t: SimTime) -> None:
        txs = self._txs
        arrivals = self._arrivals
        add = self.pool.add
        i = self._next_tx
        while i < len(txs) and txs[i].created_at <= t:
            add(txs[i], arrivals[i])
            i += 1
        self._next_tx = i

    def _on_slot(self) -> None:
        t = self.sim.now
        slot = self._slot
        self._slot += 1
        self.sim.schedule(t + self.config.block_interval_ms, self._on_slot)
        self._admit(t)
        m = self.scenario.params.n_producers
        producer = next_producer(slot, m)
        failures = self.scenario.failures
        result = attempt_block(
            self.pool, producer, slot, t, self.config.max_txs, online=failures.is_online(producer, t)
        )
        if isinstance(result, MissedCycle):
            self._record_missed(result)
            return
        protocol = self.protocol
        outcome = run_consensus(
            protocol, result, t, self.config.consensus, self.scenario.network, failures
        )
        self.sim.schedule(outcome.commit_time, lambda: self._on_decided(result, outcome, protocol))

    def _on_decided(self, proposal: Proposal, outcome, protocol: ProtocolId) -> None:
        t = self.sim.now
        failures = self.scenario.failures
        online = [n for n in range(self.scenario.params.n_nodes) if failures.is_online(n, t)]
        block = commit_block(self.ledger, self.pool, proposal, outcome, protocol, online)
        if block is None:
            self._record_missed(MissedCycle(proposal.slot, proposal.producer, t, "consensus-failed"))
            return
        self.blocks.append(block)
        self.trace.append(block)
        self._window_blocks.append(block)

    def _on_recovery(self) -> None:
        t = self.sim.now
        for node in range(self.scenario.params.n_nodes):
            if self.scenario.failures.is_online(node, t):
                self.ledger.resync(node)

    def _record_missed(self, missed: MissedCycle) -> None:
        self.missed.append(missed)
        self.trace.append(missed)
        self._window_missed.append(missed)

    def run_window(self, protocol: ProtocolId, until: SimTime) -> ObservationBatch:
        """Run ``[now, until)`` under ``protocol``; report what committed in it."""
        start = self.sim.now
        self.protocol = protocol
        self.sim.run_before(until)
        # transactions created late in the window are in flight, not lost
        self._admit(until - 1)
        batch = ObservationBatch(self._window_blocks, (start, until), self._window_missed)
        self._window_blocks = []
        self._window_missed = []
        return batch

    def run(self, protocol: ProtocolId, until: SimTime | None = None) -> list[Block]:
        until = self.scenario.params.horizon if until is None else until
        self.run_window(protocol, until)
        return self.blocks

    def latency(self, window: tuple[SimTime, SimTime] | None = None) -> float | None:
        return window_latency(self.blocks, window)
