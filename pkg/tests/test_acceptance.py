"""Acceptance gate. Each test records one PASS/FAIL line, printed in the
terminal summary under "acceptance criteria".

The scenario sweep behind criteria 1-6 runs once per session and keeps only
compact per-run summaries.
"""

import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import pytest

from tetris_bft.consensus import ProtocolParams, StageState, collect_committable_txs
from tetris_bft.events import DeterministicCrypto, Transaction
from tetris_bft.sim import load_scenario, run_scenario
from tetris_bft.sim.suite import SCENARIOS

from conftest import ACCEPTANCE, lockstep

pytestmark = pytest.mark.slow

ROOT = Path(__file__).resolve().parents[1]
SCENARIO_DIR = ROOT / "scenarios"
GOLDEN = ROOT / "tests" / "golden" / "fault_free_n4_seed0.json"

SIZES = (4, 7)
SUITE_SEEDS = range(50)
SPLITTER_SEEDS = range(100)
ROUND_LIMIT = 50


@dataclass
class RunSummary:
    name: str
    n: int
    seed: int
    finished: bool
    checks: dict[str, int]
    honest: dict[str, dict[str, Any]]
    rounds_to_decision: dict[str, int]
    fork_pairs: int = 0
    silent_verdicts: list[tuple[int, int, bool, bool]] = field(default_factory=list)

    @property
    def t(self) -> int:
        return (self.n - 1) // 3

    def label(self) -> str:
        return f"{self.name} n={self.n} seed={self.seed}"


def summarize(name: str, n: int, seed: int) -> RunSummary:
    cfg = load_scenario(SCENARIO_DIR / f"{name}_n{n}.json")
    cfg.seed = seed
    report = run_scenario(cfg)
    data, sim = report.data, report.sim
    s = RunSummary(
        name=name,
        n=n,
        seed=seed,
        finished=data["finished"],
        checks={k: len(c["violations"]) for k, c in data["lemma_checks"].items()},
        honest={v: d for v, d in data["validators"].items() if d["strategy"] == "honest"},
        rounds_to_decision=data["rounds_to_decision"],
    )
    honest = sim.honest_nodes()
    s.fork_pairs = len(set().union(*(node.tetris.fork_records for node in honest)))
    if name == "silent":
        bad = n - 1
        for node in honest:
            for rec in node.engine.records:
                present = bool(node.tetris.by_creator_seq.get((bad, rec.stage)))
                s.silent_verdicts.append((node.vid, rec.stage, present, rec.committable[bad]))
    return s


@pytest.fixture(scope="session")
def suite() -> list[RunSummary]:
    return [summarize(name, n, seed) for name in SCENARIOS for n in SIZES for seed in SUITE_SEEDS]


def record(n: int, ok: bool, line: str, failures: list[str]) -> None:
    shown = "; ".join(failures[:3])
    ACCEPTANCE[n] = (ok, line if ok else f"{line} -- {shown}")
    assert ok, "\n".join(failures)


def _stage_views(run: RunSummary) -> dict[int, set]:
    views: dict[int, set] = {}
    for d in run.honest.values():
        for st in d["stages"]:
            key = (tuple(sorted(st["committable"].items())), tuple(st["committed_txids"]))
            views.setdefault(st["stage"], set()).add(key)
    return views


def test_agreement(suite):
    failures = []
    stages = 0
    for run in suite:
        views = _stage_views(run)
        stages += len(views)
        split = [s for s, v in views.items() if len(v) > 1]
        if split or run.checks["agreement"]:
            failures.append(f"{run.label()} diverges at stages {split}")
        if not views:
            failures.append(f"{run.label()} completed no stage")
    unfinished = sum(not r.finished for r in suite)
    record(1, not failures,
           f"agreement over {len(suite)} runs, {stages} completed stages, {unfinished} run(s) stopped at the step horizon",
           failures)


def test_liveness_floor(suite):
    failures = []
    for run in suite:
        for vid, d in run.honest.items():
            for st in d["stages"]:
                trues = sum(st["committable"].values())
                if trues < run.t + 1:
                    failures.append(f"{run.label()} validator {vid} stage {st['stage']}: {trues} true")
        if run.checks["liveness_floor"]:
            failures.append(f"{run.label()}: engine logged {run.checks['liveness_floor']} floor breach(es)")
    record(2, not failures, f"every completed stage has >= t+1 true verdicts ({len(suite)} runs)", failures)


def test_absent_silent_bases_decide_false(suite):
    failures = []
    absent = 0
    runs = [r for r in suite if r.name == "silent"]
    for run in runs:
        missing = [(v, s, verdict) for v, s, present, verdict in run.silent_verdicts if not present]
        absent += len(missing)
        if not missing:
            failures.append(f"{run.label()}: silent validator never went missing (vacuous)")
        failures += [f"{run.label()} validator {v} stage {s} decided true" for v, s, verdict in missing if verdict]
    record(3, not failures, f"{absent} absent silent base events decided false across {len(runs)} runs", failures)


def test_fork_exclusivity(suite):
    runs = [r for r in suite if r.name == "forker"]
    failures = [f"{r.label()}: {r.checks['fork_exclusivity']} pair(s)" for r in runs if r.checks["fork_exclusivity"]]
    failures += [f"{r.label()}: no fork observed (vacuous)" for r in runs if not r.fork_pairs]
    pairs = sum(r.fork_pairs for r in runs)
    record(4, not failures, f"no fork pair known well twice ({pairs} fork pairs over {len(runs)} runs)", failures)


def test_decision_stability(suite):
    failures = [f"{r.label()}: {r.checks['decision_stability']} flip(s)" for r in suite if r.checks["decision_stability"]]
    record(5, not failures, f"no verdict flipped under re-decision after every insertion ({len(suite)} runs)", failures)


def test_consistency(suite):
    failures = [f"{r.label()}: {r.checks['consistency']} pair(s)" for r in suite if r.checks["consistency"]]
    record(6, not failures, f"all honest tetris pairs consistent at run end ({len(suite)} runs)", failures)


def test_vote_splitter_terminates(suite):
    known = {(r.n, r.seed): r for r in suite if r.name == "vote_splitter"}
    failures = []
    worst = 0
    for n in SIZES:
        cfg = load_scenario(SCENARIO_DIR / f"vote_splitter_n{n}.json")
        assert cfg.coin_interval == 2
        for seed in SPLITTER_SEEDS:
            run = known.get((n, seed)) or summarize("vote_splitter", n, seed)
            stage0 = [d["stages"][0] for d in run.honest.values() if d["stages"]]
            if len(stage0) != len(run.honest):
                failures.append(f"{run.label()}: stage 0 left undecided")
                continue
            r = max(max(st["rounds_to_decision"].values()) for st in stage0)
            worst = max(worst, r)
            if r > ROUND_LIMIT:
                failures.append(f"{run.label()}: decided at round {r}")
    total = len(SIZES) * len(SPLITTER_SEEDS)
    record(7, not failures,
           f"{total - len(failures)}/{total} seeds decide all stage-0 bases within {ROUND_LIMIT} rounds (worst round {worst})",
           failures)


def test_fault_free_latency_and_golden():
    cfg = load_scenario(SCENARIO_DIR / "fault_free_n4.json")
    assert (cfg.n, cfg.seed, cfg.delay_min, cfg.delay_max, cfg.adversaries) == (4, 0, 1, 3, {})
    first, second = run_scenario(cfg), run_scenario(load_scenario(SCENARIO_DIR / "fault_free_n4.json"))
    failures = []
    for vid, d in first.data["validators"].items():
        rounds = d["stages"][0]["rounds_to_decision"]
        if sorted(rounds) != ["0", "1", "2", "3"] or set(rounds.values()) != {3}:
            failures.append(f"validator {vid} stage-0 rounds {rounds}")
    if first.to_json() != second.to_json():
        failures.append("report differs between two runs")
    if first.to_json() != GOLDEN.read_text():
        failures.append("report differs from the golden file")
    record(8, not failures, "fault-free n=4 seed 0 decides every stage-0 base at round 3; golden report matches", failures)


def _txid(name):
    return Transaction(name.encode()).txid


def _commit(n, depth, txs):
    crypto = DeterministicCrypto(1)
    tetris, _ = lockstep(n, 4, crypto, txs)
    state = StageState(3, frozenset(range(n)), (n - 1) // 3)
    state.committable.update({v: True for v in range(n)})
    return collect_committable_txs(tetris, state, ProtocolParams.for_size(n, ancestor_depth=depth))


def test_commit_rule_fixtures():
    a, b, edge, past = _txid("a"), _txid("b"), _txid("edge"), _txid("past")
    cases = {
        # base events sit at seq 3; a tx in one validator's seq-3 event is under that base only
        "n=4 t+1=2 holders commit": (_commit(4, 2, {(0, 3): [a], (1, 3): [a]}), [a]),
        "n=4 one holder does not": (_commit(4, 2, {(0, 3): [b]}), []),
        "n=7 two holders do not": (_commit(7, 2, {(0, 3): [a], (1, 3): [a]}), []),
        "n=7 t+1=3 holders commit": (_commit(7, 2, {(v, 3): [a] for v in range(3)}), [a]),
        "seq stage-D is in the window": (_commit(4, 2, {(2, 1): [edge]}), [edge]),
        "seq stage-D-1 is outside": (_commit(4, 2, {(2, 0): [past]}), []),
        "D=3 reaches seq 0": (_commit(4, 3, {(2, 0): [past]}), [past]),
    }
    failures = [f"{name}: got {len(got)} txid(s)" for name, (got, want) in cases.items() if got != want]
    record(9, not failures, f"{len(cases)} commit-rule fixtures (t+1 holders, depth window boundary)", failures)


def test_determinism():
    failures = []
    pairs = 0
    for name in SCENARIOS:
        for n in SIZES:
            cfg = load_scenario(SCENARIO_DIR / f"{name}_n{n}.json")
            cfg.seed = 17
            pairs += 1
            if run_scenario(cfg).to_json() != run_scenario(cfg).to_json():
                failures.append(f"{name} n={n}")
    record(10, not failures, f"{pairs} (config, seed) pairs rerun to byte-identical reports", failures)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
