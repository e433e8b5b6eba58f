"""Randomised system instances: arrival rate, transaction size, outages and
link speeds, all redrawn every TI interval."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .engine import RngStream, SimTime
from .ledger import SizeSpec, Transaction, generate_transactions
from .network import FailureSchedule, NetworkSchedule, Outage

SCENARIO_FORMAT = "twinchain-scenario/1"


@dataclass(frozen=True)
class ScenarioParams:
    tps_range: tuple[float, float] = (5.0, 50.0)
    tx_size_range: tuple[int, int] = (200, 2000)
    outage_prob_per_interval: float = 0.05
    outage_duration_range: tuple[int, int] = (2_000, 10_000)
    speed_range: tuple[float, float] = (2.0, 20.0)
    horizon: SimTime = 3_600_000
    TI: int = 30_000
    TS: int = 10_000
    n_nodes: int = 8
    n_producers: int = 5

    def __post_init__(self):
        for name in ("tps_range", "tx_size_range", "outage_duration_range", "speed_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lo {lo} > hi {hi}")
            object.__setattr__(self, name, (lo, hi))
        if self.tps_range[0] <= 0 or self.speed_range[0] <= 0 or self.tx_size_range[0] <= 0:
            raise ValueError("rates, speeds and sizes must be positive")
        if self.outage_duration_range[0] <= 0:
            raise ValueError("outages must have positive duration")
        if not 0.0 <= self.outage_prob_per_interval <= 1.0:
            raise ValueError("outage probability must lie in [0, 1]")
        if self.TI <= 0 or self.TS <= 0 or self.horizon <= 0:
            raise ValueError("TI, TS and horizon must be positive")
        if not 1 <= self.n_producers <= self.n_nodes:
            raise ValueError("need 1 <= M <= K")

    @property
    def n_intervals(self) -> int:
        return -(-self.horizon // self.TI)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ScenarioParams":
        d = dict(d)
        for k in ("tps_range", "tx_size_range", "outage_duration_range", "speed_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def default_wl1_params() -> ScenarioParams:
    return ScenarioParams()


def default_wl2_params() -> ScenarioParams:
    # evolved system: busier, slower and less reliable than WL1
    return replace(
        default_wl1_params(),
        tps_range=(20.0, 80.0),
        speed_range=(1.0, 12.0),
        outage_prob_per_interval=0.12,
    )


@dataclass
class Scenario:
    params: ScenarioParams
    network: NetworkSchedule
    failures: FailureSchedule
    tps_trace: list[float]
    tx_size_trace: list[SizeSpec]
    seed: int
    _txs: list[Transaction] | None = field(default=None, repr=False, compare=False)
    _arrivals: dict[int, list[list[int]]] = field(default_factory=dict, repr=False, compare=False)

    @property
    def producers(self) -> range:
        return range(self.params.n_producers)

    def transactions(self) -> list[Transaction]:
        """The full arrival trace; a pure function of the traces and seed."""
        if self._txs is None:
            p = self.params
            stream = RngStream(self.seed, "workload")
            txs: list[Transaction] = []
            for j, (rate, spec) in enumerate(zip(self.tps_trace, self.tx_size_trace)):
                start = j * p.TI
                length = min(p.TI, p.horizon - start)
                txs.extend(
                    generate_transactions(
                        rate, spec, length, stream, start=start, n_nodes=p.n_nodes, first_id=len(txs)
                    )
                )
            self._txs = txs
        return self._txs

    def arrivals(self, propagation_ms: int) -> list[list[int]]:
        """Per transaction, the instant each producer's pool receives it."""
        table = self._arrivals.get(propagation_ms)
        if table is None:
            txs = self.transactions()
            m = self.params.n_producers
            if not txs:
                return []
            created = np.array([tx.created_at for tx in txs], dtype=np.int64)
            size = np.array([tx.size_bytes for tx in txs], dtype=float)
            origin = np.array([tx.origin for tx in txs], dtype=np.int64)
            j = np.minimum(created // self.params.TI, self.network.speeds.shape[0] - 1)
            speed = self.network.speeds[j[:, None], origin[:, None], np.arange(m)[None, :]]
            ms = np.ceil(8 * size[:, None] / (speed * 1e3) - 1e-9).astype(np.int64) + propagation_ms
            at = created[:, None] + ms
            local = origin[:, None] == np.arange(m)[None, :]
            at[local] = np.broadcast_to(created[:, None], at.shape)[local]
            table = at.tolist()
            self._arrivals[propagation_ms] = table
        return table

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": SCENARIO_FORMAT,
            "seed": self.seed,
            "params": self.params.to_dict(),
            "tps_trace": list(self.tps_trace),
            "tx_size_trace": [[s.lo, s.hi] for s in self.tx_size_trace],
            "speeds_mbps": self.network.speeds.tolist(),
            "outages": [[o.node, o.start, o.end] for o in self.failures.outages],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Scenario":
        if d.get("format") != SCENARIO_FORMAT:
            raise ValueError(f"not a scenario file (format={d.get('format')!r})")
        params = ScenarioParams.from_dict(d["params"])
        return cls(
            params=params,
            network=NetworkSchedule(params.TI, np.array(d["speeds_mbps"], dtype=float)),
            failures=FailureSchedule(tuple(o) for o in d["outages"]),
            tps_trace=[float(x) for x in d["tps_trace"]],
            tx_size_trace=[SizeSpec(int(a), int(b)) for a, b in d["tx_size_trace"]],
            seed=int(d["seed"]),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _sorted_pairs(g: np.random.Generator, lo: float, hi: float, n: int) -> np.ndarray:
    return np.sort(g.uniform(lo, hi, size=(n, 2)), axis=1)


def generate_scenario(params: ScenarioParams, seed: int) -> Scenario:
    """Draw one system instance.

    Every TI interval gets its own link-speed band (two sorted draws from
    ``speed_range``) with each directed link uniform inside that band, its own
    arrival rate and its own transaction-size band. Each producer starts an
    outage in an interval with ``outage_prob_per_interval``, at a uniform
    offset inside the interval.
    """
    n = params.n_intervals
    k = params.n_nodes

    g = RngStream(seed, "network").generator
    bands = _sorted_pairs(g, *params.speed_range, n)
    unit = g.random(size=(n, k, k))
    speeds = bands[:, :1, None] + unit * (bands[:, 1:, None] - bands[:, :1, None])
    idx = np.arange(k)
    speeds[:, idx, idx] = bands[:, 1:2]

    g = RngStream(seed, "rates").generator
    tps = g.uniform(*params.tps_range, size=n).tolist()
    sizes = np.rint(_sorted_pairs(g, *params.tx_size_range, n)).astype(int).tolist()

    g = RngStream(seed, "failures").generator
    starts = g.random(size=(n, params.n_producers)) < params.outage_prob_per_interval
    offsets = g.integers(0, params.TI, size=(n, params.n_producers))
    lo_d, hi_d = params.outage_duration_range
    durations = g.integers(lo_d, hi_d + 1, size=(n, params.n_producers))
    outages = []
    busy_until = [0] * params.n_producers
    for j in range(n):
        for p in range(params.n_producers):
            if not starts[j, p]:
                continue
            begin = j * params.TI + int(offsets[j, p])
            end = min(begin + int(durations[j, p]), params.horizon)
            if begin < busy_until[p] or begin >= params.horizon:
                continue
            outages.append(Outage(p, begin, end))
            busy_until[p] = end

    return Scenario(
        params=params,
        network=NetworkSchedule(params.TI, speeds),
        failures=FailureSchedule(outages),
        tps_trace=tps,
        tx_size_trace=[SizeSpec(a, b) for a, b in sizes],
        seed=int(seed),
    )


@dataclass
class Workload:
    label: str
    scenarios: list[Scenario]

    @property
    def params(self) -> ScenarioParams:
        return self.scenarios[0].params


def make_workload(label: str, params: ScenarioParams, seeds: list[int]) -> Workload:
    if not seeds:
        raise ValueError("a workload needs at least one scenario")
    return Workload(label, [generate_scenario(params, s) for s in seeds])
