"""Experiment orchestration: scenario files, training, paired evaluation of
the five controllers and the optimiser runtime comparison.

Every CSV written here except the ones under ``timing/`` is a pure
function of the experiment config. Wall-clock measurements live in
``timing/`` because no two runs produce the same nanosecond counts.
"""

from __future__ import annotations

import csv
import hashlib
import json
import statistics
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Sequence

from .agent import (
    DECISION_HEADER,
    AgentConfig,
    AgentPlusController,
    Controller,
    EpisodeResult,
    QAgentController,
    QTable,
    SimulationOnlyController,
    StaticController,
    decision_row,
    run_episode,
    train_offline,
)
from .consensus import ConsensusConfig
from .engine import RngStream
from .ledger import ProtocolId
from .scenario import (
    Scenario,
    ScenarioParams,
    Workload,
    default_wl1_params,
    default_wl2_params,
    generate_scenario,
)
from .system import SystemConfig

CONTROLLERS = ("pbft-static", "bigfoot-static", "agent", "agent+", "sim-only")
# agent+ trains with what-if augmentation; the plain agent only from real episodes
QTABLE_FILE = "qtable.csv"
AGENT_QTABLE_FILE = "qtable_agent.csv"
TABLE_FILES = {"agent": AGENT_QTABLE_FILE, "agent+": QTABLE_FILE}
CURVE_FILE = "learning_curve.csv"
RESULTS_FILE = "results.csv"
RUNTIME_FILE = "runtime.csv"
TIMING_DIR = "timing"

CURVE_HEADER = ("episode", "epsilon", "scenario_seed", "agent_latency_s", "agent_plus_latency_s")
RESULT_HEADER = ("experiment", "controller", "seed", "mean_latency_s", "simulator_calls", "decisions", "scenario_sha256")
TIMING_HEADER = ("experiment", "controller", "seed", "decision_wall_ns")
RUNTIME_HEADER = (
    "controller",
    "seed",
    "decisions",
    "simulator_calls",
    "total_decision_wall_ns",
    "mean_decision_wall_ns",
    "mean_latency_s",
)


class ConfigError(ValueError):
    pass


class MissingArtifactError(FileNotFoundError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    master_seed: int = 7
    wl1: ScenarioParams = field(default_factory=default_wl1_params)
    wl2: ScenarioParams = field(default_factory=default_wl2_params)
    # optional scenario files; when given they replace generated scenarios
    wl1_files: tuple[str, ...] = ()
    wl2_files: tuple[str, ...] = ()
    agent: AgentConfig = field(default_factory=AgentConfig)
    consensus: ConsensusConfig = field(default_factory=ConsensusConfig)
    block_interval_ms: int = 1000
    max_txs: int = 256
    episodes: int = 200
    train_scenarios: int = 10
    eval_seeds: int = 10
    runtime_seeds: int = 3
    output_dir: str = "out"

    def __post_init__(self):
        if self.episodes < 1:
            raise ConfigError("episodes must be >= 1")
        if self.train_scenarios < 1 or self.eval_seeds < 1 or self.runtime_seeds < 1:
            raise ConfigError("scenario and seed counts must be >= 1")

    @property
    def system(self) -> SystemConfig:
        return SystemConfig(self.block_interval_ms, self.max_txs, self.consensus)

    def to_dict(self) -> dict[str, Any]:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["wl1"] = self.wl1.to_dict()
        d["wl2"] = self.wl2.to_dict()
        d["agent"] = asdict(self.agent)
        d["consensus"] = asdict(self.consensus)
        d["wl1_files"] = list(self.wl1_files)
        d["wl2_files"] = list(self.wl2_files)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        try:
            base = cls()
            if "wl1" in d:
                d["wl1"] = ScenarioParams.from_dict({**base.wl1.to_dict(), **d["wl1"]})
            if "wl2" in d:
                d["wl2"] = ScenarioParams.from_dict({**base.wl2.to_dict(), **d["wl2"]})
            if "agent" in d:
                d["agent"] = AgentConfig(**d["agent"])
            if "consensus" in d:
                d["consensus"] = ConsensusConfig(**d["consensus"])
            for k in ("wl1_files", "wl2_files"):
                if k in d:
                    d[k] = tuple(d[k])
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return ExperimentConfig.from_dict(data)


def derived_seeds(master_seed: int, label: str, n: int) -> list[int]:
    stream = RngStream(master_seed, f"seeds/{label}")
    return [stream.seed64() for _ in range(n)]


def _workload(label: str, params: ScenarioParams, files: Sequence[str], seeds: list[int]) -> Workload:
    if files:
        try:
            return Workload(label, [Scenario.load(p) for p in files])
        except OSError as exc:
            raise MissingArtifactError(str(exc)) from exc
    return Workload(label, [generate_scenario(params, s) for s in seeds])


def training_workload(cfg: ExperimentConfig) -> Workload:
    return _workload("WL1", cfg.wl1, cfg.wl1_files, derived_seeds(cfg.master_seed, "WL1", cfg.train_scenarios))


def evaluation_workload(cfg: ExperimentConfig, n: int | None = None) -> Workload:
    n = cfg.eval_seeds if n is None else n
    wl = _workload("WL2", cfg.wl2, cfg.wl2_files, derived_seeds(cfg.master_seed, "WL2", n))
    return Workload(wl.label, wl.scenarios[:n])


def scenario_digest(scenario: Scenario) -> str:
    return hashlib.sha256(scenario.dumps().encode()).hexdigest()


def _writer(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    f = open(path, "w", newline="")
    return f, csv.writer(f, lineterminator="\n")


def cmd_gen_scenario(cfg: ExperimentConfig, workload: str = "WL1", index: int = 0, out: str | Path | None = None) -> Path:
    """Write scenario ``index`` of the named workload as JSON."""
    workload = workload.upper()
    if workload not in ("WL1", "WL2"):
        raise ConfigError(f"unknown workload {workload!r}")
    params = cfg.wl1 if workload == "WL1" else cfg.wl2
    seed = derived_seeds(cfg.master_seed, workload, index + 1)[index]
    scenario = generate_scenario(params, seed)
    path = Path(out) if out else Path(cfg.output_dir) / f"scenario_{workload.lower()}_{index}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    scenario.save(path)
    return path


@dataclass
class TrainArtifacts:
    tables: dict[str, QTable]
    curves: dict[str, list[float]]
    paths: dict[str, Path]
    curve_path: Path


def cmd_train(cfg: ExperimentConfig, progress: Callable | None = None) -> TrainArtifacts:
    """Train both Q-tables from scratch on WL1; write them and the learning curves.

    The plain agent learns from the closed-loop episodes alone. The agent+
    table additionally takes the generator's what-if updates every episode.
    Both see the same scenarios and exploration seed.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    workload = training_workload(cfg)
    variants = {
        "agent": replace(cfg.agent, synthetic_per_episode=0),
        "agent+": cfg.agent,
    }
    tables, curves, paths = {}, {}, {}
    for name, agent_cfg in variants.items():
        cb = None if progress is None else (lambda e, r, name=name: progress(name, e, r))
        result = train_offline(QTable(), workload, cfg.episodes, agent_cfg, cfg.master_seed, cfg.system, cb)
        tables[name], curves[name] = result.table, result.curve
        paths[name] = out / TABLE_FILES[name]
        with open(paths[name], "w", newline="") as f:
            result.table.dump(f)

    cpath = out / CURVE_FILE
    f, w = _writer(cpath)
    with f:
        w.writerow(CURVE_HEADER)
        for e in range(cfg.episodes):
            seed = workload.scenarios[e % len(workload.scenarios)].seed
            w.writerow(
                [e, f"{cfg.agent.epsilon_for(e):.6f}", seed, f"{curves['agent'][e]:.9f}", f"{curves['agent+'][e]:.9f}"]
            )
    return TrainArtifacts(tables, curves, paths, cpath)


def load_qtable(path: str | Path) -> QTable:
    try:
        with open(path, newline="") as f:
            return QTable.load(f)
    except FileNotFoundError as exc:
        raise MissingArtifactError(f"no trained Q-table at {path}; run train first") from exc


def load_tables(names: Sequence[str], table_dir: str | Path) -> dict[str, QTable]:
    return {n: load_qtable(Path(table_dir) / TABLE_FILES[n]) for n in names if n in TABLE_FILES}


def make_controller(name: str, tables: dict[str, QTable], agent: AgentConfig, seed: int) -> Controller:
    stream = RngStream(seed, "optimiser")
    if name == "pbft-static":
        return StaticController(ProtocolId.PBFT)
    if name == "bigfoot-static":
        return StaticController(ProtocolId.BIGFOOT)
    if name == "sim-only":
        return SimulationOnlyController(agent, stream)
    if name in TABLE_FILES and name not in tables:
        raise MissingArtifactError(f"controller {name} needs a trained Q-table")
    if name == "agent":
        return QAgentController(tables[name].copy(), agent, stream)
    if name == "agent+":
        return AgentPlusController(tables[name].copy(), agent, stream)
    raise ConfigError(f"unknown controller {name!r}; choose from {', '.join(CONTROLLERS)}")


@dataclass
class ResultRow:
    experiment: str
    controller: str
    seed: int
    mean_latency_s: float
    simulator_calls: int
    decision_wall_ns: int
    decisions: int
    scenario_sha256: str

    def csv_row(self) -> list:
        return [
            self.experiment,
            self.controller,
            self.seed,
            f"{self.mean_latency_s:.9f}",
            self.simulator_calls,
            self.decisions,
            self.scenario_sha256,
        ]


def parse_controllers(spec: str | Sequence[str] | None) -> list[str]:
    if spec is None:
        return list(CONTROLLERS)
    names = [s.strip() for s in spec.split(",")] if isinstance(spec, str) else list(spec)
    names = [n for n in names if n]
    for n in names:
        if n not in CONTROLLERS:
            raise ConfigError(f"unknown controller {n!r}; choose from {', '.join(CONTROLLERS)}")
    if not names:
        raise ConfigError("no controllers requested")
    return names


def evaluate(
    cfg: ExperimentConfig,
    controllers: Sequence[str],
    tables: dict[str, QTable],
    workload: Workload,
    experiment: str = "WL2",
) -> tuple[list[ResultRow], dict[tuple[str, int], EpisodeResult]]:
    rows = []
    episodes = {}
    for scenario in workload.scenarios:
        digest = scenario_digest(scenario)
        for name in controllers:
            controller = make_controller(name, tables, cfg.agent, scenario.seed)
            ep = run_episode(scenario, controller, cfg.agent, cfg.system)
            episodes[(name, scenario.seed)] = ep
            rows.append(
                ResultRow(
                    experiment,
                    name,
                    scenario.seed,
                    ep.mean_latency,
                    ep.simulator_calls,
                    ep.decision_wall_ns,
                    len(ep.decisions),
                    digest,
                )
            )
    rows.sort(key=lambda r: (r.experiment, CONTROLLERS.index(r.controller), r.seed))
    return rows, episodes


def cmd_evaluate(
    cfg: ExperimentConfig,
    controllers: Sequence[str] | str | None = None,
    table_dir: str | Path | None = None,
    workload: str = "WL2",
) -> list[ResultRow]:
    """Run each controller on the same evaluation seeds; write results CSVs."""
    names = parse_controllers(controllers)
    out = Path(cfg.output_dir)
    tables = load_tables(names, table_dir or out)
    if workload.upper() == "WL1":
        wl = _workload("WL1", cfg.wl1, cfg.wl1_files, derived_seeds(cfg.master_seed, "WL1-eval", cfg.eval_seeds))
    else:
        wl = evaluation_workload(cfg)
    rows, episodes = evaluate(cfg, names, tables, wl, wl.label)

    f, w = _writer(out / RESULTS_FILE)
    with f:
        w.writerow(RESULT_HEADER)
        for r in rows:
            w.writerow(r.csv_row())
    f, w = _writer(out / TIMING_DIR / RESULTS_FILE)
    with f:
        w.writerow(TIMING_HEADER)
        for r in rows:
            w.writerow([r.experiment, r.controller, r.seed, r.decision_wall_ns])
    f, w = _writer(out / TIMING_DIR / "decisions.csv")
    with f:
        w.writerow(("controller", "seed", *DECISION_HEADER))
        for (name, seed), ep in sorted(episodes.items(), key=lambda kv: (CONTROLLERS.index(kv[0][0]), kv[0][1])):
            for d in ep.decisions:
                w.writerow([name, seed, *decision_row(d)])
    return rows


@dataclass
class RuntimeRow:
    controller: str
    seed: int
    decisions: int
    simulator_calls: int
    total_decision_wall_ns: int
    mean_latency_s: float

    @property
    def mean_decision_wall_ns(self) -> float:
        return self.total_decision_wall_ns / self.decisions if self.decisions else 0.0


def cmd_compare_runtime(cfg: ExperimentConfig, table_dir: str | Path | None = None) -> list[RuntimeRow]:
    """agent+ against the simulation-only optimiser on identical WL2 runs."""
    out = Path(cfg.output_dir)
    names = ["agent+", "sim-only"]
    wl = evaluation_workload(cfg, cfg.runtime_seeds)
    rows, _ = evaluate(cfg, names, load_tables(names, table_dir or out), wl)
    runtime = [
        RuntimeRow(r.controller, r.seed, r.decisions, r.simulator_calls, r.decision_wall_ns, r.mean_latency_s)
        for r in rows
    ]
    f, w = _writer(out / RUNTIME_FILE)
    with f:
        w.writerow(RUNTIME_HEADER)
        for r in runtime:
            w.writerow(
                [
                    r.controller,
                    r.seed,
                    r.decisions,
                    r.simulator_calls,
                    r.total_decision_wall_ns,
                    f"{r.mean_decision_wall_ns:.1f}",
                    f"{r.mean_latency_s:.9f}",
                ]
            )
    return runtime


def summarize_results(rows: Sequence[ResultRow]) -> dict[str, float]:
    by = {}
    for r in rows:
        by.setdefault(r.controller, []).append(r.mean_latency_s)
    return {k: statistics.fmean(v) for k, v in by.items()}


def sign_test_p(wins: int, losses: int) -> float:
    """One-sided exact sign test; ties are dropped before calling."""
    from math import comb

    n = wins + losses
    if n == 0:
        return 1.0
    return sum(comb(n, k) for k in range(wins, n + 1)) / 2**n


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    kw = {k: v for k, v in kw.items() if v is not None}
    if "freeze_qtable" in kw:
        kw["agent"] = replace(cfg.agent, freeze_qtable=kw.pop("freeze_qtable"))
    try:
        return replace(cfg, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
