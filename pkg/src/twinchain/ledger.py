"""Ledger objects, transaction pools, round-robin block production and the
transaction-latency metric."""

from __future__ import annotations

import bisect
import csv
import enum
from dataclasses import dataclass, field
from typing import IO, Iterable, NamedTuple, Sequence

import numpy as np

from .engine import RngStream, SimTime

HEADER_BYTES = 512
DEFAULT_MAX_TXS = 256
DEFAULT_BLOCK_INTERVAL_MS = 1000


class ProtocolId(str, enum.Enum):
    PBFT = "PBFT"
    BIGFOOT = "BIGFOOT"

    def __str__(self) -> str:
        return self.value


# Fixed order; argmax ties resolve to the first entry.
ACTIONS: tuple[ProtocolId, ProtocolId] = (ProtocolId.PBFT, ProtocolId.BIGFOOT)


@dataclass(frozen=True, slots=True)
class Transaction:
    id: int
    size_bytes: int
    created_at: SimTime
    origin: int

    def __post_init__(self):
        if self.size_bytes <= 0:
            raise ValueError(f"transaction {self.id} has size {self.size_bytes}")


class MessageRecord(NamedTuple):
    sender: int
    receiver: int
    phase: str
    sent_at: SimTime
    received_at: SimTime
    size_bytes: int
    # wire time as timestamped by the receiving NIC, whole microseconds
    # (0 = not measured); the event clock itself only resolves milliseconds
    transfer_us: int = 0


@dataclass(frozen=True)
class ConsensusHistory:
    records: tuple[MessageRecord, ...] = ()
    participants: frozenset[int] = frozenset()


@dataclass(frozen=True)
class Proposal:
    slot: int
    producer: int
    txs: tuple[Transaction, ...]
    proposed_at: SimTime

    @property
    def size_bytes(self) -> int:
        return HEADER_BYTES + sum(tx.size_bytes for tx in self.txs)


@dataclass(frozen=True)
class MissedCycle:
    slot: int
    producer: int
    at: SimTime
    reason: str  # "offline", "empty-pool" or "consensus-failed"


@dataclass(frozen=True)
class Block:
    height: int
    producer: int
    txs: tuple[Transaction, ...]
    proposed_at: SimTime
    committed_at: SimTime
    consensus_history: ConsensusHistory
    protocol_used: ProtocolId
    slot: int = -1

    def __post_init__(self):
        if not self.txs:
            raise ValueError("a block must carry at least one transaction")
        if self.proposed_at > self.committed_at:
            raise ValueError("block committed before it was proposed")

    @property
    def size_bytes(self) -> int:
        return HEADER_BYTES + sum(tx.size_bytes for tx in self.txs)

    @property
    def latency_sum_ms(self) -> int:
        return self.committed_at * len(self.txs) - sum(tx.created_at for tx in self.txs)


@dataclass(frozen=True)
class SizeSpec:
    """Uniform integer transaction size in ``[lo, hi]`` bytes."""

    lo: int
    hi: int

    def __post_init__(self):
        if not 0 < self.lo <= self.hi:
            raise ValueError(f"bad size range [{self.lo}, {self.hi}]")

    @classmethod
    def fixed(cls, size: int) -> "SizeSpec":
        return cls(size, size)


def generate_transactions(
    rate_tps: float,
    size_spec: SizeSpec,
    horizon: SimTime,
    stream: RngStream,
    *,
    start: SimTime = 0,
    n_nodes: int = 1,
    first_id: int = 0,
) -> list[Transaction]:
    """Poisson arrivals at ``rate_tps`` over ``[start, start + horizon)``.

    Conditional on the count, Poisson arrival instants are i.i.d. uniform on
    the interval, so the count is drawn first and the instants sorted.
    """
    if rate_tps <= 0:
        raise ValueError(f"arrival rate must be positive, got {rate_tps}")
    if horizon <= 0:
        return []
    g = stream.generator
    count = int(g.poisson(rate_tps * horizon / 1000.0))
    times = np.sort(g.integers(start, start + horizon, size=count))
    sizes = g.integers(size_spec.lo, size_spec.hi + 1, size=count)
    origins = g.integers(0, n_nodes, size=count)
    return [
        Transaction(first_id + i, s, t, o)
        for i, (t, s, o) in enumerate(zip(times.tolist(), sizes.tolist(), origins.tolist()))
    ]


class TransactionPool:
    """Pending transactions in FIFO (creation) order.

    One pool object can stand in for every producer's pool: all producers
    receive every broadcast, so their pools differ only by when each
    transaction arrived, which is kept per producer in ``arrivals``.
    Transactions packed into an in-flight proposal stay pooled but are
    reserved until their round commits or fails.
    """

    def __init__(self):
        self._pending: list[Transaction] = []
        self._keys: list[tuple[int, int]] = []
        self._arrivals: dict[int, Sequence[int]] = {}
        self._reserved: set[int] = set()

    def __len__(self) -> int:
        return len(self._pending)

    def __contains__(self, tx_id: int) -> bool:
        return tx_id in self._arrivals

    @property
    def pending(self) -> list[Transaction]:
        return list(self._pending)

    @property
    def reserved(self) -> frozenset[int]:
        return frozenset(self._reserved)

    def add(self, tx: Transaction, arrivals: Sequence[int] | None = None) -> None:
        key = (tx.created_at, tx.id)
        if not self._keys or key > self._keys[-1]:
            self._pending.append(tx)
            self._keys.append(key)
        else:
            i = bisect.bisect_left(self._keys, key)
            self._pending.insert(i, tx)
            self._keys.insert(i, key)
        self._arrivals[tx.id] = arrivals if arrivals is not None else ()

    def visible(self, tx: Transaction, producer: int, at: SimTime) -> bool:
        arrivals = self._arrivals[tx.id]
        if producer < len(arrivals):
            return arrivals[producer] <= at
        return tx.created_at <= at

    def oldest(self, n: int, producer: int = 0, at: SimTime | None = None) -> list[Transaction]:
        """Up to ``n`` oldest unreserved transactions already seen by ``producer``."""
        picked: list[Transaction] = []
        reserved = self._reserved
        for tx in self._pending:
            if len(picked) >= n:
                break
            if at is not None and tx.created_at > at:
                break
            if tx.id in reserved:
                continue
            if at is None or self.visible(tx, producer, at):
                picked.append(tx)
        return picked

    def reserve(self, txs: Iterable[Transaction]) -> None:
        self._reserved.update(tx.id for tx in txs)

    def release(self, txs: Iterable[Transaction]) -> None:
        self._reserved.difference_update(tx.id for tx in txs)

    def remove(self, txs: Iterable[Transaction]) -> None:
        gone = {tx.id for tx in txs}
        if not gone:
            return
        keep = [i for i, tx in enumerate(self._pending) if tx.id not in gone]
        self._pending = [self._pending[i] for i in keep]
        self._keys = [self._keys[i] for i in keep]
        for tx_id in gone:
            self._arrivals.pop(tx_id, None)
        self._reserved.difference_update(gone)


def next_producer(height: int, n_producers: int) -> int:
    """Round-robin proposer for a slot (offline slots are not skipped)."""
    if n_producers < 1:
        raise ValueError("need at least one producer")
    return height % n_producers


def attempt_block(
    pool: TransactionPool,
    producer: int,
    slot: int,
    at: SimTime,
    max_txs: int = DEFAULT_MAX_TXS,
    online: bool = True,
) -> Proposal | MissedCycle:
    if not online:
        return MissedCycle(slot, producer, at, "offline")
    txs = pool.oldest(max_txs, producer, at)
    if not txs:
        return MissedCycle(slot, producer, at, "empty-pool")
    pool.reserve(txs)
    return Proposal(slot, producer, tuple(txs), at)


class Ledger:
    """The canonical chain plus how much of it each node holds.

    Consensus yields a single chain, so every node's local ledger is a prefix
    of ``chain``; offline nodes fall behind and resync on return.
    """

    def __init__(self, n_nodes: int):
        self.chain: list[Block] = []
        self.node_heights = [0] * n_nodes

    @property
    def height(self) -> int:
        return len(self.chain)

    def local_ledger(self, node: int) -> list[Block]:
        return self.chain[: self.node_heights[node]]

    def resync(self, node: int) -> None:
        self.node_heights[node] = len(self.chain)


def commit_block(
    ledger: Ledger,
    pool: TransactionPool,
    proposal: Proposal,
    outcome,
    protocol: ProtocolId,
    online_nodes: Iterable[int],
) -> Block | None:
    """Append the proposal to the chain if its round committed.

    A failed round leaves the ledger alone and returns the transactions to
    the pool.
    """
    if not outcome.committed:
        pool.release(proposal.txs)
        return None
    block = Block(
        height=ledger.height,
        producer=proposal.producer,
        txs=proposal.txs,
        proposed_at=proposal.proposed_at,
        committed_at=outcome.commit_time,
        consensus_history=outcome.history,
        protocol_used=protocol,
        slot=proposal.slot,
    )
    ledger.chain.append(block)
    for node in online_nodes:
        ledger.node_heights[node] = ledger.height
    pool.remove(proposal.txs)
    return block


def avg_transaction_latency(block: Block) -> float:
    """Mean of ``committed_at - created_at`` over the block's transactions, in seconds."""
    if not block.txs:
        raise ValueError("latency of an empty block is undefined")
    return block.latency_sum_ms / (len(block.txs) * 1000)


NO_BLOCKS = None


def window_latency(blocks: Iterable[Block], window: tuple[SimTime, SimTime] | None = None) -> float | None:
    """Transaction-weighted mean latency of the blocks committed in ``window``.

    Returns ``NO_BLOCKS`` (None) when no block qualifies.
    """
    total_ms = 0
    count = 0
    for b in blocks:
        if window is not None and not window[0] <= b.committed_at < window[1]:
            continue
        total_ms += b.latency_sum_ms
        count += len(b.txs)
    if count == 0:
        return NO_BLOCKS
    return total_ms / (count * 1000)


BLOCK_TRACE_HEADER = (
    "height",
    "slot",
    "producer",
    "protocol_used",
    "proposed_at_ms",
    "committed_at_ms",
    "tx_count",
    "avg_latency_s",
    "missed_cycle_flag",
    "missed_reason",
)

HISTORY_TRACE_HEADER = (
    "height",
    "phase",
    "sender",
    "receiver",
    "sent_at_ms",
    "received_at_ms",
    "size_bytes",
    "transfer_us",
)


def write_block_trace(out: IO[str], events: Iterable[Block | MissedCycle]) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(BLOCK_TRACE_HEADER)
    for ev in events:
        if isinstance(ev, Block):
            writer.writerow(
                [
                    ev.height,
                    ev.slot,
                    ev.producer,
                    ev.protocol_used.value,
                    ev.proposed_at,
                    ev.committed_at,
                    len(ev.txs),
                    f"{avg_transaction_latency(ev):.6f}",
                    0,
                    "",
                ]
            )
        else:
            writer.writerow(["", ev.slot, ev.producer, "", ev.at, "", 0, "", 1, ev.reason])


def write_history_trace(out: IO[str], blocks: Iterable[Block]) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(HISTORY_TRACE_HEADER)
    for b in blocks:
        for r in b.consensus_history.records:
            writer.writerow(
                [b.height, r.phase, r.sender, r.receiver, r.sent_at, r.received_at, r.size_bytes, r.transfer_us]
            )
