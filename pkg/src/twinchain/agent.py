"""Protocol selection: tabular Q-learning, what-if simulation, the hybrid
agent+ controller, the simulation-only optimiser and offline training."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

from .engine import RngStream, SimTime
from .ledger import ACTIONS, ProtocolId, window_latency
from .network import DegenerateBoundsError, true_bounds
from .scenario import Scenario, Workload, generate_scenario
from .system import BlockchainSystem, SystemConfig
from .twin import COLD_STATE, DigitalTwin, SimulatorModel, TwinConfig, TwinState

StateKey = tuple[int, int, int]

Q_GREEDY = "q-greedy"
Q_EXPLORE = "q-explore"
WHAT_IF = "what-if-fallback"
SIM_ONLY = "sim-only"
STATIC = "static"


@dataclass(frozen=True)
class AgentConfig:
    alpha: float = 0.1
    # protocol choice barely moves the next state, so by default the values
    # are one-step latency estimates
    gamma: float = 0.0
    epsilon: float = 0.1
    epsilon_decay: float = 0.995
    epsilon_floor: float = 0.01
    unseen_threshold: int = 1
    whatif_replicates: int = 3
    synthetic_per_episode: int = 5
    # latency charged to a window in which nothing committed, in multiples of TS
    penalty_factor: float = 10.0
    eval_epsilon: float = 0.0
    freeze_qtable: bool = False
    # windows of history the what-if model is fitted on
    calibration_windows: int = 60
    # "visits": step size max(alpha, 1/(n+1)) so the first sample replaces
    # the zero a missing entry reads as; "constant": always alpha
    alpha_schedule: str = "visits"

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.whatif_replicates < 1:
            raise ValueError("need at least one what-if replicate")
        if self.alpha_schedule not in ("visits", "constant"):
            raise ValueError(f"unknown alpha schedule {self.alpha_schedule!r}")

    def alpha_for(self, visits: int) -> float:
        if self.alpha_schedule == "constant":
            return self.alpha
        return max(self.alpha, 1.0 / (visits + 1))

    def epsilon_for(self, episode: int) -> float:
        return max(self.epsilon_floor, self.epsilon * self.epsilon_decay**episode)


class QTable:
    """Action values keyed by ``(F, N_L, N_H)`` and protocol.

    A missing entry reads as ``q = 0`` with zero visits.
    """

    def __init__(self):
        self.entries: dict[tuple[StateKey, ProtocolId], list] = {}

    def q(self, s: StateKey, a: ProtocolId) -> float:
        e = self.entries.get((s, a))
        return e[0] if e else 0.0

    def visits(self, s: StateKey, a: ProtocolId) -> int:
        e = self.entries.get((s, a))
        return e[1] if e else 0

    def state_visits(self, s: StateKey) -> int:
        return sum(self.visits(s, a) for a in ACTIONS)

    def max_q(self, s: StateKey) -> float:
        return max(self.q(s, a) for a in ACTIONS)

    def greedy(self, s: StateKey) -> ProtocolId:
        best = ACTIONS[0]
        for a in ACTIONS[1:]:
            if self.q(s, a) > self.q(s, best):
                best = a
        return best

    def states(self) -> set[StateKey]:
        return {s for s, _ in self.entries}

    def copy(self) -> "QTable":
        t = QTable()
        t.entries = {k: list(v) for k, v in self.entries.items()}
        return t

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other) -> bool:
        return isinstance(other, QTable) and self.entries == other.entries

    def dump(self, out: IO[str]) -> None:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(QTABLE_HEADER)
        for (s, a), (q, n) in sorted(self.entries.items(), key=lambda kv: (kv[0][0], kv[0][1].value)):
            writer.writerow([*s, a.value, repr(q), n])

    @classmethod
    def load(cls, rows: Iterable[str]) -> "QTable":
        table = cls()
        reader = csv.DictReader(rows)
        for row in reader:
            s = (int(row["F"]), int(row["N_L"]), int(row["N_H"]))
            table.entries[(s, ProtocolId(row["action"]))] = [float(row["q"]), int(row["visits"])]
        return table


QTABLE_HEADER = ("F", "N_L", "N_H", "action", "q", "visits")


def _key(s) -> StateKey:
    return s.key if isinstance(s, TwinState) else tuple(s)


def learn(table: QTable, s, a: ProtocolId, r: float, s_next, config: AgentConfig) -> QTable:
    """``q_update`` with the step size the config's schedule gives this entry."""
    alpha = config.alpha_for(table.visits(_key(s), a))
    return q_update(table, s, a, r, s_next, alpha, config.gamma)


def q_update(
    table: QTable,
    s,
    a: ProtocolId,
    r: float,
    s_next,
    alpha: float = 0.1,
    gamma: float = 0.9,
) -> QTable:
    """One Bellman step: ``Q(s,a) += alpha * (r + gamma * max Q(s', .) - Q(s,a))``."""
    if not math.isfinite(r):
        raise ValueError(f"reward must be finite, got {r}")
    s, s_next = _key(s), _key(s_next)
    entry = table.entries.setdefault((s, a), [0.0, 0])
    target = r + gamma * table.max_q(s_next)
    entry[0] += alpha * (target - entry[0])
    entry[1] += 1
    return table


def select_action(table: QTable, s, epsilon: float, stream: RngStream | None) -> tuple[ProtocolId, str]:
    """Epsilon-greedy; greedy ties go to PBFT."""
    if epsilon > 0 and stream is not None and stream.random() < epsilon:
        return ACTIONS[stream.integers(0, len(ACTIONS))], Q_EXPLORE
    return table.greedy(_key(s)), Q_GREEDY


@dataclass
class DecisionRecord:
    window: tuple[SimTime, SimTime]
    state: TwinState
    action: ProtocolId
    reward: float = 0.0
    source: str = Q_GREEDY
    simulator_calls: int = 0
    decision_wall_ns: int = 0


DECISION_HEADER = (
    "window_end_ms",
    "F",
    "N_L",
    "N_H",
    "action",
    "source",
    "reward",
    "simulator_calls",
    "decision_wall_ns",
)


def decision_row(d: DecisionRecord) -> list:
    return [
        d.window[1],
        d.state.F,
        d.state.N_L,
        d.state.N_H,
        d.action.value,
        d.source,
        f"{d.reward:.6f}",
        d.simulator_calls,
        d.decision_wall_ns,
    ]


@dataclass
class WhatIfResult:
    latency: dict[ProtocolId, float]
    simulator_calls: int

    def best(self) -> ProtocolId:
        # ties resolve to the first action, as in select_action
        best = ACTIONS[0]
        for a in ACTIONS[1:]:
            if self.latency[a] < self.latency[best]:
                best = a
        return best


def what_if_evaluate(
    model: SimulatorModel,
    s: TwinState,
    horizon: SimTime,
    seeds: Sequence[int],
    system_config: SystemConfig | None = None,
    penalty_factor: float = 10.0,
) -> WhatIfResult:
    """Mean simulated latency of each protocol over one control step.

    Every seed yields one scenario consistent with ``s`` and both protocols
    run on it, so the comparison is paired. A run in which nothing commits
    scores ``penalty_factor * horizon`` seconds.
    """
    if not seeds:
        raise ValueError("what-if evaluation needs at least one seed")
    penalty = penalty_factor * horizon / 1000
    totals = {a: 0.0 for a in ACTIONS}
    calls = 0
    for seed in sorted(seeds):
        scenario = model.scenario_for(s, horizon, seed)
        for a in ACTIONS:
            batch = BlockchainSystem(scenario, system_config).run_window(a, horizon)
            lat = window_latency(batch.blocks)
            totals[a] += penalty if lat is None else lat
            calls += 1
    return WhatIfResult({a: totals[a] / len(seeds) for a in ACTIONS}, calls)


@dataclass
class LoopContext:
    """What a controller can see when deciding for the next window."""

    twin: DigitalTwin
    window: tuple[SimTime, SimTime]
    index: int
    system_config: SystemConfig
    defaults: SimulatorModel
    calibration_windows: int

    def model(self) -> SimulatorModel:
        return self.twin.calibrate(self.defaults, self.defaults.n_nodes, self.calibration_windows)


class Controller:
    name = "controller"
    learns = False

    def decide(self, state: TwinState, ctx: LoopContext) -> DecisionRecord:
        raise NotImplementedError

    def learn(self, record: DecisionRecord, next_state: TwinState) -> None:
        pass


class StaticController(Controller):
    def __init__(self, protocol: ProtocolId):
        self.protocol = protocol
        self.name = f"{protocol.value.lower()}-static"

    def decide(self, state, ctx):
        return DecisionRecord(ctx.window, state, self.protocol, source=STATIC)


class QAgentController(Controller):
    """Epsilon-greedy Q-learning with online updates."""

    name = "agent"

    def __init__(self, table: QTable, config: AgentConfig, stream: RngStream, epsilon: float | None = None):
        self.table = table
        self.config = config
        self.stream = stream
        self.epsilon = config.eval_epsilon if epsilon is None else epsilon
        self.learns = not config.freeze_qtable

    def decide(self, state, ctx):
        t0 = time.perf_counter_ns()
        action, source = select_action(self.table, state, self.epsilon, self.stream)
        wall = time.perf_counter_ns() - t0
        return DecisionRecord(ctx.window, state, action, source=source, decision_wall_ns=wall)

    def learn(self, record, next_state):
        if self.learns:
            learn(self.table, record.state, record.action, record.reward, next_state, self.config)


def whatif_seeds(stream: RngStream, n: int) -> list[int]:
    return [stream.seed64() for _ in range(n)]


def agent_plus_decide(
    table: QTable,
    s: TwinState,
    model: SimulatorModel | None,
    config: AgentConfig,
    horizon: SimTime,
    seeds: Sequence[int],
    epsilon: float = 0.0,
    stream: RngStream | None = None,
    system_config: SystemConfig | None = None,
    window: tuple[SimTime, SimTime] = (0, 0),
) -> tuple[ProtocolId, DecisionRecord]:
    """Q-table lookup for familiar states, what-if simulation otherwise.

    On the simulation branch both simulated rewards are written into the
    table straight away, so the next visit to ``s`` is a plain lookup.
    """
    t0 = time.perf_counter_ns()
    if table.state_visits(s.key) >= config.unseen_threshold:
        action, source = select_action(table, s, epsilon, stream)
        calls = 0
    else:
        if model is None:
            raise ValueError(f"state {s.key} is unseen and no simulator model was given")
        result = what_if_evaluate(model, s, horizon, seeds, system_config, config.penalty_factor)
        augment(table, s, result, config)
        action, source, calls = result.best(), WHAT_IF, result.simulator_calls
    wall = time.perf_counter_ns() - t0
    return action, DecisionRecord(window, s, action, source=source, simulator_calls=calls, decision_wall_ns=wall)


def augment(table: QTable, s: TwinState, result: WhatIfResult, config: AgentConfig, s_next=None) -> None:
    """Write both simulated rewards for ``s`` into the table."""
    s_next = s if s_next is None else s_next
    for a in ACTIONS:
        learn(table, s, a, -result.latency[a], s_next, config)


class AgentPlusController(QAgentController):
    """Q-learning that falls back to what-if simulation on unseen states."""

    name = "agent+"

    def decide(self, state, ctx):
        seeds = whatif_seeds(self.stream, self.config.whatif_replicates)
        t0 = time.perf_counter_ns()
        unseen = self.table.state_visits(state.key) < self.config.unseen_threshold
        model = ctx.model() if unseen else None
        _, record = agent_plus_decide(
            self.table,
            state,
            model,
            self.config,
            ctx.window[1] - ctx.window[0],
            seeds,
            self.epsilon,
            self.stream,
            ctx.system_config,
            ctx.window,
        )
        # model fitting is part of the decision cost
        record.decision_wall_ns = time.perf_counter_ns() - t0
        return record


def simulation_only_decide(
    model: SimulatorModel,
    s: TwinState,
    horizon: SimTime,
    seeds: Sequence[int],
    config: AgentConfig,
    system_config: SystemConfig | None = None,
    window: tuple[SimTime, SimTime] = (0, 0),
) -> tuple[ProtocolId, DecisionRecord]:
    t0 = time.perf_counter_ns()
    result = what_if_evaluate(model, s, horizon, seeds, system_config, config.penalty_factor)
    action = result.best()
    wall = time.perf_counter_ns() - t0
    return action, DecisionRecord(
        window, s, action, source=SIM_ONLY, simulator_calls=result.simulator_calls, decision_wall_ns=wall
    )


class SimulationOnlyController(Controller):
    name = "sim-only"

    def __init__(self, config: AgentConfig, stream: RngStream):
        self.config = config
        self.stream = stream

    def decide(self, state, ctx):
        seeds = whatif_seeds(self.stream, self.config.whatif_replicates)
        t0 = time.perf_counter_ns()
        model = ctx.model()
        action, record = simulation_only_decide(
            model, state, ctx.window[1] - ctx.window[0], seeds, self.config, ctx.system_config, ctx.window
        )
        record.decision_wall_ns = time.perf_counter_ns() - t0
        return record


@dataclass
class EpisodeResult:
    decisions: list[DecisionRecord]
    twin: DigitalTwin
    system: BlockchainSystem

    @property
    def mean_latency(self) -> float:
        lat = window_latency(self.system.blocks)
        return math.inf if lat is None else lat

    @property
    def simulator_calls(self) -> int:
        return sum(d.simulator_calls for d in self.decisions)

    @property
    def decision_wall_ns(self) -> int:
        return sum(d.decision_wall_ns for d in self.decisions)


def run_episode(
    scenario: Scenario,
    controller: Controller,
    config: AgentConfig | None = None,
    system_config: SystemConfig | None = None,
    twin_config: TwinConfig | None = None,
) -> EpisodeResult:
    """Close the loop over a whole scenario, one decision per TS window.

    The state seen before window k comes from what committed in window k-1;
    the reward for window k is minus its transaction-weighted latency.
    """
    config = config or AgentConfig()
    system_config = system_config or SystemConfig()
    p = scenario.params
    twin_config = twin_config or TwinConfig(
        n_producers=p.n_producers,
        propagation_ms=system_config.consensus.propagation_ms,
        block_interval_ms=system_config.block_interval_ms,
    )
    system = BlockchainSystem(scenario, system_config)
    twin = DigitalTwin(twin_config)
    defaults = SimulatorModel(
        speed_low=p.speed_range[0],
        speed_high=p.speed_range[1],
        tps=sum(p.tps_range) / 2,
        tx_size=p.tx_size_range,
        outage_rate_per_s=(0.0,) * p.n_producers,
        n_nodes=p.n_nodes,
        n_producers=p.n_producers,
    )
    penalty = config.penalty_factor * p.TS / 1000
    state = COLD_STATE
    decisions = []
    n_windows = -(-p.horizon // p.TS)
    for k in range(n_windows):
        window = (k * p.TS, min((k + 1) * p.TS, p.horizon))
        ctx = LoopContext(twin, window, k, system_config, defaults, config.calibration_windows)
        record = controller.decide(state, ctx)
        batch = system.run_window(record.action, window[1])
        lat = window_latency(batch.blocks)
        record.reward = -(penalty if lat is None else lat)
        next_state = twin.update(batch)
        controller.learn(record, next_state)
        decisions.append(record)
        state = next_state
    return EpisodeResult(decisions, twin, system)


def synthetic_state(scenario: Scenario) -> TwinState | None:
    """Ground-truth state at the start of a generated scenario."""
    p = scenario.params
    try:
        n_l, n_h = true_bounds(scenario.network, scenario.failures, 0, scenario.producers)
    except DegenerateBoundsError:
        return None
    window = min(p.TS, p.horizon)
    down = any(o.node < p.n_producers and o.start < window and o.end > 0 for o in scenario.failures.outages)
    return TwinState(int(down), n_l, n_h, scenario.tps_trace[0], 0)


@dataclass
class TrainResult:
    table: QTable
    curve: list[float]
    synthetic_updates: int = 0
    simulator_calls: int = 0


def train_offline(
    table: QTable,
    workload: Workload,
    episodes: int,
    config: AgentConfig | None = None,
    seed: int = 0,
    system_config: SystemConfig | None = None,
    progress=None,
) -> TrainResult:
    """Train on ``workload``: closed-loop episodes plus generator-driven what-if updates.

    Episode ``e`` replays scenario ``e mod len(workload)`` with exploration
    rate ``epsilon_for(e)``. After each episode the generator draws
    ``synthetic_per_episode`` fresh scenarios; each is scored for both
    protocols by what-if simulation under the model fitted in that episode,
    and both scores go into the table.
    """
    if episodes < 1:
        raise ValueError("need at least one training episode")
    config = config or AgentConfig()
    root = RngStream(seed, "training")
    curve = []
    synthetic = 0
    calls = 0
    for e in range(episodes):
        scenario = workload.scenarios[e % len(workload.scenarios)]
        stream = root.child(f"episode-{e}")
        controller = QAgentController(table, config, stream.child("explore"), epsilon=config.epsilon_for(e))
        controller.learns = True
        result = run_episode(scenario, controller, config, system_config)
        curve.append(result.mean_latency)

        gen = stream.child("generator")
        p = scenario.params
        model = None
        for _ in range(config.synthetic_per_episode):
            synth = generate_scenario(p, gen.seed64())
            s = synthetic_state(synth)
            if s is None:
                continue
            if model is None:
                model = _episode_model(result)
            res = what_if_evaluate(
                model, s, p.TS, whatif_seeds(gen, config.whatif_replicates), system_config, config.penalty_factor
            )
            augment(table, s, res, config)
            synthetic += 1
            calls += res.simulator_calls
        if progress is not None:
            progress(e, result)
    return TrainResult(table, curve, synthetic, calls)


def _episode_model(result: EpisodeResult) -> SimulatorModel:
    p = result.system.scenario.params
    return result.twin.calibrate(SimulatorModel(n_nodes=p.n_nodes, n_producers=p.n_producers), p.n_nodes)
