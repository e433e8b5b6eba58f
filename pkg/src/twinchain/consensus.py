"""Message-level PBFT and BigFoot rounds over the simulated network.

A round is evaluated eagerly: given the proposal time, the link-speed
schedule and the outage schedule, every message's send and delivery time is
computed in causal order. The result is the same trace an event-by-event
execution would produce, at a fraction of the cost.

Crash faults only: an offline node sends nothing, and a message that reaches
an offline node is dropped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .engine import SimTime
from .ledger import ConsensusHistory, MessageRecord, ProtocolId, Proposal
from .network import PROPAGATION_MS, FailureSchedule, NetworkSchedule


@dataclass(frozen=True)
class ConsensusConfig:
    n: int = 5
    control_msg_bytes: int = 256
    fast_path_timeout_ms: int = 500
    view_timeout_ms: int | None = None
    propagation_ms: int = PROPAGATION_MS

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("need at least one producer")
        if self.n < 3 * self.f + 1:
            raise ValueError(f"n={self.n} cannot tolerate f={self.f}")
        if self.fast_path_timeout_ms <= 0:
            raise ValueError("fast-path timeout must be positive")

    @property
    def f(self) -> int:
        return (self.n - 1) // 3

    @property
    def quorum(self) -> int:
        return 2 * self.f + 1

    @property
    def view_timeout(self) -> int:
        if self.view_timeout_ms is not None:
            return self.view_timeout_ms
        return 4 * self.fast_path_timeout_ms


@dataclass(frozen=True)
class ConsensusOutcome:
    committed: bool
    commit_time: SimTime
    used_fallback: bool
    history: ConsensusHistory = field(default_factory=ConsensusHistory)


class _Round:
    """Scratch state for one round: the message log and who has spoken."""

    # slack on top of both timeouts; no round outlives it, so a quiet span
    # needs no outage lookups
    SLACK_MS = 10_000

    def __init__(self, cfg: ConsensusConfig, network: NetworkSchedule, failures: FailureSchedule, at: SimTime):
        self.cfg = cfg
        self.network = network
        self.failures = failures
        self.records: list[MessageRecord] = []
        self.speakers: set[int] = set()
        span = cfg.fast_path_timeout_ms + cfg.view_timeout + self.SLACK_MS
        self.quiet = failures.quiet(at, at + span)
        self._control = network.delay_table(cfg.control_msg_bytes, cfg.propagation_ms)
        self._control_us = network.wire_table(cfg.control_msg_bytes)
        self._interval = network.interval_ms

    def online(self, node: int, t: SimTime) -> bool:
        return self.quiet or self.failures.is_online(node, t)

    def multicast(self, sender: int, sent_at: SimTime, receivers, phase: str, size: int) -> dict[int, SimTime]:
        """Send one message to each receiver; return delivery times of those that arrived."""
        if not self.online(sender, sent_at):
            return {}
        self.speakers.add(sender)
        if size == self.cfg.control_msg_bytes:
            j = min(sent_at // self._interval, len(self._control) - 1)
            row = self._control[j][sender]
            row_us = self._control_us[j][sender]
            delays = [row[r] for r in receivers]
            wire = [row_us[r] for r in receivers]
        else:
            net = self.network
            prop = self.cfg.propagation_ms
            delays = [net.delay(sender, r, size, sent_at, prop) for r in receivers]
            wire = [net.wire_us(sender, r, size, sent_at) for r in receivers]
        delivered = {}
        append = self.records.append
        quiet = self.quiet
        is_online = self.failures.is_online
        new = tuple.__new__
        for r, d, w in zip(receivers, delays, wire):
            arrive = sent_at + d
            if quiet or is_online(r, arrive):
                delivered[r] = arrive
                append(new(MessageRecord, (sender, r, phase, sent_at, arrive, size, w)))
        return delivered

    def pre_prepare(self, proposal: Proposal, at: SimTime) -> dict[int, SimTime]:
        """Leader ships the full block; returns when each node holds it."""
        leader = proposal.producer
        replicas = [i for i in range(self.cfg.n) if i != leader]
        got = self.multicast(leader, at, replicas, "pre-prepare", proposal.size_bytes)
        if leader in self.speakers:
            got[leader] = at
        return got

    def all_to_all(self, start: dict[int, SimTime], senders, phase: str) -> tuple[dict[int, list[SimTime]], set[int]]:
        """Each sender broadcasts a control message at its start time.

        Returns each receiver's delivery times and the set of nodes that
        were up to send.
        """
        n = self.cfg.n
        size = self.cfg.control_msg_bytes
        inbox: dict[int, list[SimTime]] = {}
        sent: set[int] = set()
        for s in senders:
            if not self.online(s, start[s]):
                continue
            sent.add(s)
            delivered = self.multicast(s, start[s], [r for r in range(n) if r != s], phase, size)
            for r, t in delivered.items():
                inbox.setdefault(r, []).append(t)
        return inbox, sent

    def prepare_and_commit(self, start: dict[int, SimTime], leader: int) -> list[SimTime]:
        """PBFT prepare + commit phases; ``start[j]`` is when node j can begin.

        Node j is prepared once it holds the block and 2f prepares (its own
        counts); it commits locally on 2f+1 commits (its own counts).
        Returns the sorted local-commit times.
        """
        f = self.cfg.f
        backups = [i for i in start if i != leader]
        inbox, sent = self.all_to_all(start, backups, "prepare")
        prepared: dict[int, SimTime] = {}
        for j, t0 in start.items():
            own = 1 if j in sent else 0
            need = 2 * f - own
            if need <= 0:
                t = t0
            else:
                got = sorted(inbox.get(j, ()))
                if len(got) < need:
                    continue
                t = max(t0, got[need - 1])
            if self.online(j, t):
                prepared[j] = t
        inbox, _ = self.all_to_all(prepared, list(prepared), "commit")
        commits = []
        for k, t0 in prepared.items():
            need = 2 * f  # plus its own commit
            if need == 0:
                commits.append(t0)
                continue
            got = sorted(inbox.get(k, ()))
            if len(got) >= need:
                commits.append(max(t0, got[need - 1]))
        commits.sort()
        return commits

    def history(self) -> ConsensusHistory:
        return ConsensusHistory(tuple(self.records), frozenset(self.speakers))


def run_pbft(
    proposal: Proposal,
    at: SimTime,
    cfg: ConsensusConfig,
    network: NetworkSchedule,
    failures: FailureSchedule,
) -> ConsensusOutcome:
    rnd = _Round(cfg, network, failures, at)
    holders = rnd.pre_prepare(proposal, at)
    commits = rnd.prepare_and_commit(holders, proposal.producer) if holders else []
    if len(commits) >= cfg.quorum:
        return ConsensusOutcome(True, commits[cfg.quorum - 1], False, rnd.history())
    return ConsensusOutcome(False, at + cfg.view_timeout, False, rnd.history())


def run_bigfoot(
    proposal: Proposal,
    at: SimTime,
    cfg: ConsensusConfig,
    network: NetworkSchedule,
    failures: FailureSchedule,
) -> ConsensusOutcome:
    """Optimistic fast path with PBFT fallback.

    Fast path: every backup that receives the block broadcasts one vote. A
    node decides once it holds the block and votes from all n-1 backups, so
    the fast path needs every producer to be up. If fewer than a quorum of
    nodes decide before ``at + fast_path_timeout_ms``, all nodes abandon the
    fast path at the deadline and run PBFT prepare + commit on the block
    they already hold.
    """
    rnd = _Round(cfg, network, failures, at)
    leader = proposal.producer
    holders = rnd.pre_prepare(proposal, at)
    if not holders:
        return ConsensusOutcome(False, at + cfg.view_timeout, False, rnd.history())

    n = cfg.n
    voters = [i for i in holders if i != leader]
    deadline = at + cfg.fast_path_timeout_ms
    decided: list[SimTime] = []
    if len(voters) == n - 1:
        inbox, _ = rnd.all_to_all(holders, voters, "vote")
        for k, t0 in holders.items():
            got = inbox.get(k, ())
            expected = n - 1 if k == leader else n - 2
            if len(got) == expected:
                t = max(t0, max(got, default=t0))
                if t < deadline:
                    decided.append(t)
    if len(decided) >= cfg.quorum:
        decided.sort()
        return ConsensusOutcome(True, decided[cfg.quorum - 1], False, rnd.history())

    start = {j: max(deadline, t) for j, t in holders.items() if rnd.online(j, max(deadline, t))}
    commits = rnd.prepare_and_commit(start, leader) if start else []
    if len(commits) >= cfg.quorum:
        return ConsensusOutcome(True, commits[cfg.quorum - 1], True, rnd.history())
    return ConsensusOutcome(False, deadline + cfg.view_timeout, True, rnd.history())


def run_consensus(
    protocol: ProtocolId,
    proposal: Proposal,
    at: SimTime,
    cfg: ConsensusConfig,
    network: NetworkSchedule,
    failures: FailureSchedule,
) -> ConsensusOutcome:
    if protocol is ProtocolId.PBFT:
        return run_pbft(proposal, at, cfg, network, failures)
    if protocol is ProtocolId.BIGFOOT:
        return run_bigfoot(proposal, at, cfg, network, failures)
    raise ValueError(f"unknown protocol {protocol!r}")
