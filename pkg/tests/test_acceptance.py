"""Acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line; the lines are repeated in the
terminal summary. Criteria 5 to 8 share one full-size training and
evaluation run, which dominates the wall time of this file.
"""

import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import make_proposal
from twinchain import harness
from twinchain.agent import QTable, q_update
from twinchain.consensus import ConsensusConfig, run_bigfoot, run_pbft
from twinchain.ledger import Block, ConsensusHistory, ProtocolId, Transaction, avg_transaction_latency
from twinchain.network import FailureSchedule, NetworkSchedule, Outage, true_bounds
from twinchain.scenario import default_wl1_params, generate_scenario
from twinchain.system import BlockchainSystem
from twinchain.twin import DigitalTwin, TwinConfig

from dataclasses import replace

CFG = ConsensusConfig()


@pytest.fixture
def report(acceptance_lines):
    def _report(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
        print(line)
        acceptance_lines.append(line)
        return ok

    return _report


def test_criterion_1_latency_oracle(report):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 200))
        created = rng.integers(0, 10**7, size=n)
        committed = int(created.max() + rng.integers(0, 10**6))
        txs = tuple(Transaction(i, 100, int(c), 0) for i, c in enumerate(created))
        b = Block(0, 0, txs, int(created.max()), committed, ConsensusHistory(), ProtocolId.PBFT)
        total = 0
        for c in created:
            total += committed - int(c)
        mismatches += avg_transaction_latency(b) != total / (n * 1000)
    dt = time.perf_counter() - t0
    assert report(1, mismatches == 0 and dt < 1.0, f"mismatches={mismatches} runtime={dt:.3f}s")


def _random_round(rng):
    net = NetworkSchedule(30_000, rng.uniform(1, 20, size=(2, 5, 5)))
    outages = []
    for node in range(5):
        if rng.random() < 0.3:
            start = int(rng.integers(0, 2000))
            outages.append(Outage(node, start, start + int(rng.integers(1, 3000))))
    prop = make_proposal(n_txs=int(rng.integers(1, 30)), producer=int(rng.integers(0, 5)), at=100)
    return prop, net, FailureSchedule(outages)


def test_criterion_2_consensus_safety(report):
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    violations = committed = 0
    for i in range(10_000):
        prop, net, fs = _random_round(rng)
        proto = run_pbft if i % 2 == 0 else run_bigfoot
        out = proto(prop, prop.proposed_at, CFG, net, fs)
        if not out.committed:
            continue
        committed += 1
        online = {r.sender for r in out.history.records if fs.is_online(r.sender, r.sent_at)}
        online |= {r.receiver for r in out.history.records if fs.is_online(r.receiver, r.received_at)}
        if len(out.history.participants & online) < CFG.quorum:
            violations += 1
    dt = time.perf_counter() - t0
    ok = violations == 0 and dt < 60
    assert report(2, ok, f"violations={violations} committed={committed}/10000 runtime={dt:.1f}s")


def test_criterion_3_fast_path_and_fallback(report):
    lo, hi = default_wl1_params().speed_range
    t0 = time.perf_counter()
    fast_wins = fallback_losses = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        speed = float(rng.uniform(lo, hi))
        net = NetworkSchedule.constant(5, speed, 60_000, 30_000)
        leader = int(rng.integers(0, 5))
        prop = make_proposal(n_txs=int(rng.integers(1, 41)), size=int(rng.integers(200, 2001)), producer=leader, at=1000)
        clean = FailureSchedule()
        fast_wins += run_bigfoot(prop, 1000, CFG, net, clean).commit_time < run_pbft(prop, 1000, CFG, net, clean).commit_time
        down = int(rng.choice([n for n in range(5) if n != leader]))
        fs = FailureSchedule([Outage(down, 0, 60_000)])
        fallback_losses += run_bigfoot(prop, 1000, CFG, net, fs).commit_time > run_pbft(prop, 1000, CFG, net, fs).commit_time
    dt = time.perf_counter() - t0
    ok = fast_wins == 100 and fallback_losses == 100 and dt < 60
    assert report(3, ok, f"fast-path wins={fast_wins}/100 fallback slower={fallback_losses}/100 runtime={dt:.1f}s")


def test_criterion_4_q_learning_matches_value_iteration(report):
    # two states, two actions, deterministic rewards and transitions
    states = [(0, 1, 1), (1, 1, 1)]
    actions = [ProtocolId.PBFT, ProtocolId.BIGFOOT]
    reward = {(0, 0): -1.0, (0, 1): -2.0, (1, 0): -0.5, (1, 1): -3.0}
    nxt = {(0, 0): 1, (0, 1): 0, (1, 0): 0, (1, 1): 1}
    gamma = 0.9

    v = np.zeros((2, 2))
    for _ in range(5000):
        v = np.array([[reward[s, a] + gamma * v[nxt[s, a]].max() for a in range(2)] for s in range(2)])

    t0 = time.perf_counter()
    table = QTable()
    counts = {}
    for k in range(100_000):
        s, a = divmod(k % 4, 2)
        n = counts[s, a] = counts.get((s, a), 0) + 1
        q_update(table, states[s], actions[a], reward[s, a], states[nxt[s, a]], alpha=n**-0.5, gamma=gamma)
    dt = time.perf_counter() - t0
    err = max(abs(table.q(states[s], actions[a]) - v[s, a]) for s in range(2) for a in range(2))
    assert report(4, err < 1e-6 and dt < 10, f"max |Q - Q*|={err:.2e} runtime={dt:.2f}s")


@pytest.fixture(scope="session")
def full_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("full")
    cfg = harness.ExperimentConfig(output_dir=str(root / "out"))
    t0 = time.perf_counter()
    train = harness.cmd_train(cfg)
    t_train = time.perf_counter() - t0
    t0 = time.perf_counter()
    wl2 = harness.cmd_evaluate(cfg, None, None, "WL2")
    t_wl2 = time.perf_counter() - t0
    cfg1 = replace(cfg, output_dir=str(root / "wl1"))
    t0 = time.perf_counter()
    wl1 = harness.cmd_evaluate(cfg1, "pbft-static,bigfoot-static,agent", cfg.output_dir, "WL1")
    t_wl1 = time.perf_counter() - t0
    return {
        "root": root,
        "cfg": cfg,
        "train": train,
        "wl1": wl1,
        "wl2": wl2,
        "times": {"train": t_train, "wl1": t_wl1, "wl2": t_wl2},
    }


def _mean(rows, name):
    xs = [r.mean_latency_s for r in rows if r.controller == name]
    return sum(xs) / len(xs)


def test_criterion_5_agent_matches_best_static_on_wl1(full_run, report):
    rows = full_run["wl1"]
    agent = _mean(rows, "agent")
    best = min(_mean(rows, "pbft-static"), _mean(rows, "bigfoot-static"))
    dt = full_run["times"]["train"] + full_run["times"]["wl1"]
    seeds = len({r.seed for r in rows})
    ok = agent <= best * 1.02 and seeds == 10
    assert report(5, ok, f"agent={agent:.4f}s best static={best:.4f}s ratio={agent / best:.4f} seeds={seeds} runtime={dt:.0f}s")


def test_criterion_6_agent_plus_beats_agent_on_wl2(full_run, report):
    rows = full_run["wl2"]
    agent = {r.seed: r.mean_latency_s for r in rows if r.controller == "agent"}
    plus = {r.seed: r.mean_latency_s for r in rows if r.controller == "agent+"}
    margins = [agent[s] - plus[s] for s in agent]
    wins = sum(m > 0 for m in margins)
    losses = sum(m < 0 for m in margins)
    p = harness.sign_test_p(wins, losses)
    mean_margin = sum(margins) / len(margins)
    ok = len(margins) == 10 and mean_margin > 0 and p < 0.05
    assert report(6, ok, f"mean margin={mean_margin * 1e3:.2f}ms wins={wins} losses={losses} p={p:.4f}")


def test_criterion_7_agent_plus_efficiency(full_run, report):
    rows = full_run["wl2"]

    def totals(name):
        sel = [r for r in rows if r.controller == name]
        calls = sum(r.simulator_calls for r in sel)
        wall = sum(r.decision_wall_ns for r in sel) / sum(r.decisions for r in sel)
        return calls, wall

    c_plus, w_plus = totals("agent+")
    c_sim, w_sim = totals("sim-only")
    lat = _mean(rows, "agent+") / _mean(rows, "sim-only")
    ok = c_plus <= 0.2 * c_sim and w_plus <= 0.2 * w_sim and lat <= 1.10
    detail = (
        f"calls={c_plus}/{c_sim} ({c_plus / c_sim:.1%}) wall per decision={w_plus / 1e6:.3f}/{w_sim / 1e6:.3f}ms "
        f"({w_plus / w_sim:.1%}) latency ratio={lat:.4f}"
    )
    assert report(7, ok, detail)


def test_criterion_8_rerun_is_bit_identical(full_run, report):
    first = Path(full_run["cfg"].output_dir)
    again = full_run["root"] / "rerun"
    for cmd in (["train"], ["evaluate"]):
        r = subprocess.run(
            [sys.executable, "-m", "twinchain", *cmd, "--out-dir", str(again)], capture_output=True, text=True
        )
        assert r.returncode == 0, r.stderr
    names = [*harness.TABLE_FILES.values(), harness.CURVE_FILE, harness.RESULTS_FILE]
    differ = [n for n in names if (first / n).read_bytes() != (again / n).read_bytes()]
    assert report(8, not differ, f"compared {', '.join(names)}; differing={differ or 'none'}")


def test_criterion_9_twin_fidelity(report):
    lo, hi = default_wl1_params().speed_range
    rng = np.random.default_rng(909)
    t0 = time.perf_counter()
    checked = wrong = 0
    for i in range(40):
        speed = float(rng.uniform(lo, hi))
        p = replace(
            default_wl1_params(),
            speed_range=(speed, speed),
            tps_range=(20.0, 20.0),
            outage_prob_per_interval=0.0,
            horizon=120_000,
        )
        sc = generate_scenario(p, i)
        protocol = (ProtocolId.PBFT, ProtocolId.BIGFOOT)[i % 2]
        system = BlockchainSystem(sc)
        twin = DigitalTwin(TwinConfig(smoothing=1.0))
        for k, end in enumerate(range(p.TS, p.horizon + 1, p.TS)):
            s = twin.update(system.run_window(protocol, end))
            if k == 0:
                continue
            lo_b, hi_b = true_bounds(sc.network, sc.failures, end - 1, sc.producers)
            checked += 1
            wrong += (s.F, s.N_L, s.N_H) != (0, lo_b, hi_b)
    dt = time.perf_counter() - t0
    assert report(9, wrong == 0 and dt < 60, f"windows checked={checked} mismatches={wrong} runtime={dt:.1f}s")
