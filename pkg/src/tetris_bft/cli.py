"""Command-line front door: ``tetris-sim run | sweep | explain``.

Exit codes: 0 when every run finishes with all checks passing, 2 when a
property check fails or a run stalls at its horizon (the report is still
written), 1 on configuration errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Optional, Sequence

from .consensus import vote_table
from .sim import InvalidConfig, RunReport, ScenarioConfig, load_scenario, run_scenario

OUT_ENV = "TETRIS_SIM_OUT"

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_VIOLATION = 2

log = logging.getLogger("tetris_bft.cli")


class UnknownStage(LookupError):
    pass


def parse_seeds(text: str) -> list[int]:
    """``"0..99"`` (inclusive), ``"7"`` or ``"1,4,9"``."""
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",") if s.strip()]


def _default_out(name: str) -> Optional[Path]:
    base = os.environ.get(OUT_ENV)
    return Path(base) / name if base else None


def _write(text: str, out: Optional[Path]) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)


def dag_json(sim, vid: int) -> dict[str, Any]:
    tetris = sim.nodes[vid].tetris
    forked = {d for key in tetris.fork_records for d in tetris.by_creator_seq[key]}
    return {
        "validator": vid,
        "events": [
            {
                "digest": d.hex(),
                "vid": e.vid,
                "seq": e.seq,
                "parents": [p.hex() for p in tetris.parents_of(d)],
                "tx_count": len(e.tx_hashes),
                "placeholder": e.placeholder,
                "fork": d in forked,
            }
            for d, e in ((d, tetris.accepted[d]) for d in tetris.order)
        ],
    }


def dump_dags(report: RunReport, directory: Path, fmt: str) -> None:
    sim = report.sim
    directory.mkdir(parents=True, exist_ok=True)
    for node in sim.honest_nodes():
        if fmt == "dot":
            eng = node.engine
            witnesses = set()
            for st in eng.history + [eng.state]:
                witnesses |= {node.tetris.order[i] for i in st.is_witness}
            (directory / f"validator-{node.vid}.dot").write_text(node.tetris.to_dot(witnesses))
        else:
            text = json.dumps(dag_json(sim, node.vid), sort_keys=True, indent=1) + "\n"
            (directory / f"validator-{node.vid}.json").write_text(text)


def verdict_code(report: RunReport) -> int:
    if report.all_pass and report.data["finished"]:
        return EXIT_OK
    return EXIT_VIOLATION


def failure_summary(report: RunReport) -> list[str]:
    lines = [f"{name}: {len(c['violations'])} violation(s)" for name, c in report.data["lemma_checks"].items() if c["status"] != "pass"]
    if not report.data["finished"]:
        lines.append(f"horizon reached after {report.data['steps_run']} steps before all stages completed")
    return lines


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_scenario(args.path)
    if args.seed is not None:
        cfg.seed = args.seed
    report = run_scenario(cfg)
    out = Path(args.out) if args.out else _default_out(f"report-{cfg.seed}.json")
    _write(report.to_json(), out)
    if args.dump_dag:
        dump_dags(report, Path(args.dump_dag), args.format)
    code = verdict_code(report)
    for line in failure_summary(report):
        print(f"runtime violation: {line}", file=sys.stderr)
    return code


def _sweep_one(doc: dict[str, Any]) -> dict[str, Any]:
    cfg = ScenarioConfig.from_dict(doc)
    d = run_scenario(cfg).data
    failed = sorted(k for k, c in d["lemma_checks"].items() if c["status"] != "pass")
    return {
        "seed": cfg.seed,
        "pass": not failed and d["finished"],
        "finished": d["finished"],
        "failed_checks": failed,
        "rounds_to_decision": d["rounds_to_decision"],
        "committable_true_counts": d["committable_true_counts"],
        "steps_run": d["steps_run"],
        "message_count": d["message_count"],
    }


def sweep(cfg: ScenarioConfig, seeds: Sequence[int], jobs: int = 1) -> dict[str, Any]:
    docs = []
    for s in seeds:
        doc = cfg.to_dict()
        doc["seed"] = s
        docs.append(doc)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_sweep_one, docs))
    else:
        runs = [_sweep_one(d) for d in docs]
    check_fail: dict[str, int] = {}
    dist: dict[str, dict[str, int]] = {}
    max_round = 0
    for r in runs:
        for name in r["failed_checks"]:
            check_fail[name] = check_fail.get(name, 0) + 1
        for stage, count in r["committable_true_counts"].items():
            bucket = dist.setdefault(stage, {})
            bucket[str(count)] = bucket.get(str(count), 0) + 1
        max_round = max([max_round, *r["rounds_to_decision"].values()])
    passed = sum(r["pass"] for r in runs)
    return {
        "config": cfg.to_dict(),
        "seeds": list(seeds),
        "runs": len(runs),
        "passed": passed,
        "pass_rate": passed / len(runs) if runs else 0.0,
        "check_failures": check_fail,
        "max_rounds_to_decision": max_round,
        "committable_true_distribution": dist,
        "per_seed": runs,
    }


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = load_scenario(args.path)
    result = sweep(cfg, parse_seeds(args.seeds), args.jobs)
    out = Path(args.out) if args.out else _default_out("sweep.json")
    _write(json.dumps(result, sort_keys=True, indent=2) + "\n", out)
    return EXIT_OK if result["passed"] == result["runs"] else EXIT_VIOLATION


def explain(report_data: dict[str, Any], stage: int, base: int, validator: Optional[int] = None) -> str:
    """Re-run the reported configuration and render one base event's vote table."""
    cfg = ScenarioConfig.from_dict(report_data["config"])
    report = run_scenario(cfg)
    sim = report.sim
    if validator is None:
        validator = sim.honest_nodes()[0].vid
    eng = sim.nodes[validator].engine
    try:
        state = eng.stage_state(stage)
    except KeyError:
        raise UnknownStage(f"validator {validator} never reached stage {stage}") from None
    if base not in state.members:
        raise UnknownStage(f"validator {base} is not a member at stage {stage}")
    tetris = eng.tetris
    branches = tetris.events_at(base, stage)
    head = ", ".join(f"{e.label} {e.self_digest.hex()[:12]}" for e in branches) or "absent"
    lines = [f"stage {stage}, base of validator {base} ({head}), as seen by validator {validator}"]
    rows, decision = vote_table(tetris, state, base, eng.params, eng.use_coin, eng.crypto)
    current = None
    for row in rows:
        if row.round != current:
            current = row.round
            lines.append(f"round {row.round}" + (" (coin round)" if row.coin_round else ""))
        if row.round == 1:
            why = "knows the base well" if row.vote else "does not know the base well"
        elif row.round == 2:
            why = f"{row.trues}/{row.seen} known-well round-1 witnesses vote true (threshold {eng.params.round2_threshold})"
        else:
            why = f"{row.trues}/{row.seen} known-well round-{row.round - 1} witnesses vote true"
        mark = "  -> decides" if row.decides else ""
        lines.append(f"  witness {row.witness:<8} vote {str(row.vote).lower():<5} {why}{mark}")
    if decision is None:
        lines.append("undecided")
    else:
        lines.append(f"decided {str(decision.value).lower()} @ round {decision.round}")
    return "\n".join(lines) + "\n"


def cmd_explain(args: argparse.Namespace) -> int:
    try:
        data = json.loads(Path(args.path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidConfig(f"{args.path}: unreadable run report ({exc})") from None
    try:
        sys.stdout.write(explain(data, args.stage, args.base, args.validator))
    except UnknownStage as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tetris-sim", description="Simulate Tetris consensus scenarios.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one scenario and write its report")
    r.add_argument("path")
    r.add_argument("--seed", type=int)
    r.add_argument("--out", help=f"report path (default: ${OUT_ENV}/report-<seed>.json, else stdout)")
    r.add_argument("--dump-dag", metavar="DIR", help="write each honest validator's DAG here")
    r.add_argument("--format", choices=("json", "dot"), default="dot", help="DAG dump format")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run a scenario over a range of seeds")
    s.add_argument("path")
    s.add_argument("--seeds", default="0..9", help="inclusive range 'A..B' or comma list")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    e = sub.add_parser("explain", help="print the vote table behind one verdict")
    e.add_argument("path", help="a run report written by 'run'")
    e.add_argument("--stage", type=int, required=True)
    e.add_argument("--base", type=int, required=True)
    e.add_argument("--validator", type=int)
    e.set_defaults(func=cmd_explain)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InvalidConfig as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
