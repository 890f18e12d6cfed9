"""Run reports and the cross-validator property checks."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Any, Optional

from ..consensus import StageRecord
from ..dag import Tetris, consistent_with
from .network import Node, Simulation
from .scenario import ScenarioConfig, StrategyKind

CHECKS = (
    "agreement",
    "consistency",
    "fork_exclusivity",
    "decision_stability",
    "liveness_floor",
    "absent_base_false",
    "witness_structure",
    "acceptance_closure",
)


def _stage_json(rec: StageRecord, confirmed: bool) -> dict[str, Any]:
    return {
        "stage": rec.stage,
        "members": list(rec.members),
        "committable": {str(v): c for v, c in rec.committable.items()},
        "committed_txids": [t.hex() for t in rec.committed_txids],
        "rounds_to_decision": {str(v): r for v, r in rec.rounds_to_decision.items()},
        "witness_counts": {str(r): c for r, c in rec.witness_counts.items()},
        "tx_root": rec.tx_root.hex(),
        "confirmed": confirmed,
    }


def check_agreement(nodes: list[Node]) -> list[dict]:
    """Honest validators that completed a stage must hold identical verdict
    vectors and committed sequences for it."""
    by_stage: dict[int, dict[int, StageRecord]] = {}
    for node in nodes:
        for rec in node.engine.records:
            by_stage.setdefault(rec.stage, {})[node.vid] = rec
    out = []
    for stage, recs in sorted(by_stage.items()):
        views = {(tuple(sorted(r.committable.items())), r.committed_txids) for r in recs.values()}
        if len(views) > 1:
            out.append({"stage": stage, "validators": sorted(recs), "distinct_views": len(views)})
    return out


def check_consistency(nodes: list[Node]) -> list[dict]:
    out = []
    for a, b in itertools.combinations(nodes, 2):
        if not consistent_with(a.tetris, b.tetris):
            out.append({"pair": [a.vid, b.vid]})
    return out


def known_well_anywhere(tetris: Tetris, d: bytes) -> bool:
    if d not in tetris.accepted:
        return False
    y = tetris.index(d)
    seq = tetris.event_at(y).seq
    for x in tetris.indices_from_seq(seq):
        if x != y and tetris.know_well_idx(x, y):
            return True
    return False


def check_fork_exclusivity(nodes: list[Node]) -> list[dict]:
    """No fork pair may have both branches known well, across all honest stores."""
    branches: dict[tuple[int, int], set[bytes]] = {}
    for node in nodes:
        for key in node.tetris.fork_records:
            branches.setdefault(key, set()).update(node.tetris.by_creator_seq[key])
        # a branch seen alone here may pair with one seen alone elsewhere
        for (vid, seq), ds in node.tetris.by_creator_seq.items():
            branches.setdefault((vid, seq), set()).update(ds)
    out = []
    for key, ds in sorted(branches.items()):
        if len(ds) < 2:
            continue
        welled = sorted(d.hex() for d in ds if any(known_well_anywhere(n.tetris, d) for n in nodes))
        if len(welled) > 1:
            out.append({"creator": key[0], "seq": key[1], "known_well_branches": welled})
    return out


def check_absent_base(nodes: list[Node]) -> list[dict]:
    """A base event missing from a validator's store can only be decided false."""
    out = []
    for node in nodes:
        for rec in node.engine.records:
            for b, verdict in rec.committable.items():
                present = bool(node.tetris.by_creator_seq.get((b, rec.stage)))
                if verdict and not present:
                    out.append({"validator": node.vid, "stage": rec.stage, "base": b})
    return out


def engine_violations(nodes: list[Node], check: str) -> list[dict]:
    return [dict(v, validator=n.vid) for n in nodes for v in n.engine.violations if v["check"] == check]


@dataclass
class RunReport:
    data: dict[str, Any]
    sim: Optional[Simulation] = field(default=None, repr=False, compare=False)

    @property
    def agreement(self) -> bool:
        return self.data["agreement"] == "pass"

    @property
    def all_pass(self) -> bool:
        return all(c["status"] == "pass" for c in self.data["lemma_checks"].values())

    def to_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=2) + "\n"


def build_report(sim: Simulation) -> RunReport:
    cfg = sim.cfg
    honest = sim.honest_nodes()
    results = {
        "agreement": check_agreement(honest),
        "consistency": check_consistency(honest),
        "fork_exclusivity": check_fork_exclusivity(honest),
        "decision_stability": engine_violations(honest, "decision_stability"),
        "liveness_floor": engine_violations(honest, "liveness_floor"),
        "absent_base_false": check_absent_base(honest),
        "witness_structure": engine_violations(honest, "witness_structure"),
        "acceptance_closure": [
            {"validator": n.vid, "events": [d.hex() for d in n.tetris.closure_violations()]}
            for n in honest if n.tetris.closure_violations()
        ],
    }
    checks = {
        name: {"status": "pass" if not v else "fail", "violations": v} for name, v in results.items()
    }
    validators = {}
    rounds: dict[int, int] = {}
    true_counts: dict[int, int] = {}
    for vid, node in sorted(sim.nodes.items()):
        eng = node.engine
        stages = [_stage_json(r, eng.confirmed(r.stage)) for r in eng.records]
        validators[str(vid)] = {
            "strategy": node.strategy.kind.value,
            "completed_stages": eng.completed_stages,
            "events_created": node.created,
            "tetris_size": len(node.tetris),
            "pending": len(node.tetris.pending),
            "stages": stages,
        }
        if node.strategy.honest:
            for r in eng.records:
                if r.rounds_to_decision:
                    rounds[r.stage] = max(rounds.get(r.stage, 0), max(r.rounds_to_decision.values()))
                true_counts[r.stage] = sum(r.committable.values())
    data = {
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "steps_run": sim.steps_run,
        "finished": sim.done(),
        "message_count": sim.message_count,
        "byte_count": sim.byte_count,
        "agreement": checks["agreement"]["status"],
        "findings": {"witness_floor": engine_violations(honest, "witness_floor")},
        "lemma_checks": checks,
        "rounds_to_decision": {str(s): r for s, r in sorted(rounds.items())},
        "committable_true_counts": {str(s): c for s, c in sorted(true_counts.items())},
        "validators": validators,
    }
    return RunReport(data, sim)


def run_scenario(cfg: ScenarioConfig, engine_factory=None) -> RunReport:
    sim = Simulation(cfg, engine_factory)
    sim.run()
    return build_report(sim)


def silent_validators(cfg: ScenarioConfig) -> list[int]:
    return sorted(v for v, s in cfg.adversaries.items() if s.kind is StrategyKind.SILENT)
