"""Scenario configuration and its on-disk JSON form."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import jsonschema

from ..consensus import ProtocolParams
from ..dag import fault_bound


class InvalidConfig(ValueError):
    pass


class StrategyKind(enum.Enum):
    HONEST = "honest"
    FORKER = "forker"
    SILENT = "silent"
    SELECTIVE = "selective"
    DHT_WITHHOLDER = "dht_withholder"
    VOTE_SPLITTER = "vote_splitter"


@dataclass(frozen=True)
class Strategy:
    """Behaviour of one validator.

    ``after_step``: Silent goes quiet from this step on.
    ``fork_seqs``/``branch_a``/``branch_b``: Forker equivocates when its next
    event would carry one of these sequence numbers, sending one branch to
    each recipient set. ``omit``: Selective never sends to these validators.
    ``period``: VoteSplitter regroups validators every ``period`` steps.
    """

    kind: StrategyKind = StrategyKind.HONEST
    after_step: int = 0
    fork_seqs: tuple[int, ...] = (1,)
    branch_a: tuple[int, ...] = ()
    branch_b: tuple[int, ...] = ()
    omit: tuple[int, ...] = ()
    period: int = 4

    @property
    def honest(self) -> bool:
        return self.kind is StrategyKind.HONEST

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind.value}
        if self.kind is StrategyKind.SILENT:
            d["after_step"] = self.after_step
        elif self.kind is StrategyKind.FORKER:
            d.update(fork_seqs=list(self.fork_seqs), branch_a=list(self.branch_a), branch_b=list(self.branch_b))
        elif self.kind is StrategyKind.SELECTIVE:
            d["omit"] = list(self.omit)
        elif self.kind is StrategyKind.VOTE_SPLITTER:
            d["period"] = self.period
        return d


HONEST = Strategy()


@dataclass(frozen=True)
class Partition:
    start: int
    end: int
    group: frozenset[int]

    def separates(self, a: int, b: int, step: int) -> bool:
        return self.start <= step < self.end and ((a in self.group) != (b in self.group))


@dataclass(frozen=True)
class Rotation:
    at_stage: int
    remove: tuple[int, ...] = ()
    add: tuple[int, ...] = ()


@dataclass
class ScenarioConfig:
    n: int = 4
    seed: int = 0
    max_steps: int = 200
    target_stages: int = 3
    delay_min: int = 1
    delay_max: int = 3
    drop_rate: float = 0.0
    partitions: list[Partition] = field(default_factory=list)
    tx_rate: int = 1
    tx_total: int = 20
    adversaries: dict[int, Strategy] = field(default_factory=dict)
    coin_interval: int = 10
    ancestor_depth: int = 10
    round2_threshold: Optional[int] = None
    use_coin: bool = True
    rotations: list[Rotation] = field(default_factory=list)
    dht_ttl: int = 500
    retransmit_interval: int = 5
    audit: bool = True

    @property
    def t(self) -> int:
        return fault_bound(self.n)

    @property
    def params(self) -> ProtocolParams:
        return ProtocolParams(
            n=self.n,
            t=self.t,
            coin_interval=self.coin_interval,
            ancestor_depth=self.ancestor_depth,
            round2_threshold=self.round2_threshold,
        )

    def strategy(self, vid: int) -> Strategy:
        return self.adversaries.get(vid, HONEST)

    @property
    def universe(self) -> list[int]:
        ids = set(range(self.n))
        for r in self.rotations:
            ids |= set(r.add)
        return sorted(ids)

    def validate(self) -> "ScenarioConfig":
        try:
            t = self.t
            self.params
        except ValueError as exc:
            raise InvalidConfig(str(exc)) from None
        if self.delay_min < 1 or self.delay_max < self.delay_min:
            raise InvalidConfig("delays must satisfy 1 <= delay_min <= delay_max")
        if not 0.0 <= self.drop_rate < 1.0:
            raise InvalidConfig("drop_rate must be in [0, 1)")
        if self.max_steps < 1 or self.target_stages < 1:
            raise InvalidConfig("max_steps and target_stages must be positive")
        if self.retransmit_interval < 1 or self.dht_ttl < 1:
            raise InvalidConfig("retransmit_interval and dht_ttl must be positive")
        universe = set(self.universe)
        bad = [v for v, s in self.adversaries.items() if not s.honest]
        if len(bad) > t:
            raise InvalidConfig(f"{len(bad)} non-honest validators exceed the fault bound t={t}")
        for vid, s in self.adversaries.items():
            if vid not in universe:
                raise InvalidConfig(f"adversary {vid} is not a validator")
            others = universe - {vid}
            for group in (s.branch_a, s.branch_b, s.omit):
                if not set(group) <= others:
                    raise InvalidConfig(f"strategy of {vid} names unknown or self recipients")
            if s.kind is StrategyKind.FORKER and set(s.branch_a) & set(s.branch_b):
                raise InvalidConfig("forker branches must go to disjoint recipient sets")
            if s.after_step < 0 or s.period < 1 or any(q < 0 for q in s.fork_seqs):
                raise InvalidConfig(f"bad strategy parameters for {vid}")
        members = set(range(self.n))
        for r in sorted(self.rotations, key=lambda r: r.at_stage):
            members = (members - set(r.remove)) | set(r.add)
            try:
                fault_bound(len(members))
            except ValueError as exc:
                raise InvalidConfig(f"rotation at stage {r.at_stage}: {exc}") from None
        for p in self.partitions:
            if p.end <= p.start:
                raise InvalidConfig("partition interval must be non-empty")
        return self

    # -- serialisation ---------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return {
            "n": self.n,
            "seed": self.seed,
            "max_steps": self.max_steps,
            "target_stages": self.target_stages,
            "delay": {"min_steps": self.delay_min, "max_steps": self.delay_max},
            "drop_rate": self.drop_rate,
            "partitions": [{"start": p.start, "end": p.end, "group": sorted(p.group)} for p in self.partitions],
            "tx_injection": {"rate": self.tx_rate, "total": self.tx_total},
            "adversaries": {str(v): s.to_dict() for v, s in sorted(self.adversaries.items())},
            "params": {
                "coin_interval": self.coin_interval,
                "ancestor_depth": self.ancestor_depth,
                "round2_threshold": self.params.round2_threshold,
                "use_coin": self.use_coin,
            },
            "rotations": [{"at_stage": r.at_stage, "remove": list(r.remove), "add": list(r.add)} for r in self.rotations],
            "dht_ttl": self.dht_ttl,
            "retransmit_interval": self.retransmit_interval,
            "audit": self.audit,
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "ScenarioConfig":
        try:
            jsonschema.validate(doc, SCENARIO_SCHEMA)
        except jsonschema.ValidationError as exc:
            path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise InvalidConfig(f"schema violation at {path}: {exc.message}") from None
        delay = doc.get("delay", {})
        txi = doc.get("tx_injection", {})
        params = doc.get("params", {})
        adversaries = {}
        for key, s in doc.get("adversaries", {}).items():
            adversaries[int(key)] = Strategy(
                kind=StrategyKind(s["kind"]),
                after_step=s.get("after_step", 0),
                fork_seqs=tuple(s.get("fork_seqs", (1,))),
                branch_a=tuple(s.get("branch_a", ())),
                branch_b=tuple(s.get("branch_b", ())),
                omit=tuple(s.get("omit", ())),
                period=s.get("period", 4),
            )
        cfg = cls(
            n=doc["n"],
            seed=doc.get("seed", 0),
            max_steps=doc.get("max_steps", 200),
            target_stages=doc.get("target_stages", 3),
            delay_min=delay.get("min_steps", 1),
            delay_max=delay.get("max_steps", 3),
            drop_rate=doc.get("drop_rate", 0.0),
            partitions=[Partition(p["start"], p["end"], frozenset(p["group"])) for p in doc.get("partitions", [])],
            tx_rate=txi.get("rate", 1),
            tx_total=txi.get("total", 20),
            adversaries=adversaries,
            coin_interval=params.get("coin_interval", 10),
            ancestor_depth=params.get("ancestor_depth", 10),
            round2_threshold=params.get("round2_threshold"),
            use_coin=params.get("use_coin", True),
            rotations=[Rotation(r["at_stage"], tuple(r.get("remove", ())), tuple(r.get("add", ()))) for r in doc.get("rotations", [])],
            dht_ttl=doc.get("dht_ttl", 500),
            retransmit_interval=doc.get("retransmit_interval", 5),
            audit=doc.get("audit", True),
        )
        return cfg.validate()


def load_scenario(path: Union[str, Path]) -> ScenarioConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"{path}: not valid JSON ({exc})") from None
    return ScenarioConfig.from_dict(doc)


_ids = {"type": "array", "items": {"type": "integer", "minimum": 0}}

SCENARIO_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["n"],
    "additionalProperties": False,
    "properties": {
        "n": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "max_steps": {"type": "integer", "minimum": 1},
        "target_stages": {"type": "integer", "minimum": 1},
        "delay": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"min_steps": {"type": "integer", "minimum": 1}, "max_steps": {"type": "integer", "minimum": 1}},
        },
        "drop_rate": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "partitions": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["start", "end", "group"],
                "additionalProperties": False,
                "properties": {"start": {"type": "integer", "minimum": 0}, "end": {"type": "integer", "minimum": 1}, "group": _ids},
            },
        },
        "tx_injection": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"rate": {"type": "integer", "minimum": 0}, "total": {"type": "integer", "minimum": 0}},
        },
        "adversaries": {
            "type": "object",
            "patternProperties": {
                "^[0-9]+$": {
                    "type": "object",
                    "required": ["kind"],
                    "additionalProperties": False,
                    "properties": {
                        "kind": {"enum": [k.value for k in StrategyKind]},
                        "after_step": {"type": "integer", "minimum": 0},
                        "fork_seqs": _ids,
                        "branch_a": _ids,
                        "branch_b": _ids,
                        "omit": _ids,
                        "period": {"type": "integer", "minimum": 1},
                    },
                }
            },
            "additionalProperties": False,
        },
        "params": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "coin_interval": {"type": "integer", "minimum": 2},
                "ancestor_depth": {"type": "integer", "minimum": 1},
                "round2_threshold": {"type": ["integer", "null"], "minimum": 1},
                "use_coin": {"type": "boolean"},
            },
        },
        "rotations": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["at_stage"],
                "additionalProperties": False,
                "properties": {"at_stage": {"type": "integer", "minimum": 0}, "remove": _ids, "add": _ids},
            },
        },
        "dht_ttl": {"type": "integer", "minimum": 1},
        "retransmit_interval": {"type": "integer", "minimum": 1},
        "audit": {"type": "boolean"},
    },
}
