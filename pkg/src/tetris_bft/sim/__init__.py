from .dht import KeyMismatch, TempDht, dht_get, dht_put
from .network import MsgKind, NetMessage, Simulation, schedule_broadcast
from .report import CHECKS, RunReport, build_report, run_scenario
from .scenario import (
    InvalidConfig,
    Partition,
    Rotation,
    ScenarioConfig,
    Strategy,
    StrategyKind,
    load_scenario,
)

__all__ = [
    "CHECKS",
    "InvalidConfig",
    "KeyMismatch",
    "MsgKind",
    "NetMessage",
    "Partition",
    "Rotation",
    "RunReport",
    "ScenarioConfig",
    "Simulation",
    "Strategy",
    "StrategyKind",
    "TempDht",
    "build_report",
    "dht_get",
    "dht_put",
    "load_scenario",
    "run_scenario",
    "schedule_broadcast",
]
