"""The standard scenario families used by sweeps and the acceptance suite."""

from __future__ import annotations

from .scenario import Partition, ScenarioConfig, Strategy, StrategyKind

SCENARIOS = (
    "fault_free",
    "forker",
    "silent",
    "selective",
    "dht_withholder",
    "vote_splitter",
    "partition_heal",
)


def standard_scenario(name: str, n: int = 4, seed: int = 0, **overrides) -> ScenarioConfig:
    """Build one suite scenario; the adversary, when any, is the last validator."""
    bad = n - 1
    others = list(range(n - 1))
    adversaries: dict[int, Strategy] = {}
    partitions: list[Partition] = []
    if name == "forker":
        half = len(others) // 2
        adversaries[bad] = Strategy(
            StrategyKind.FORKER, fork_seqs=(0, 1, 2, 3, 5, 8), branch_a=tuple(others[:half]), branch_b=tuple(others[half:])
        )
    elif name == "silent":
        adversaries[bad] = Strategy(StrategyKind.SILENT, after_step=1)
    elif name == "selective":
        adversaries[bad] = Strategy(StrategyKind.SELECTIVE, omit=tuple(others[: max(1, (n - 1) // 3)]))
    elif name == "dht_withholder":
        adversaries[bad] = Strategy(StrategyKind.DHT_WITHHOLDER)
    elif name == "vote_splitter":
        adversaries[bad] = Strategy(StrategyKind.VOTE_SPLITTER, period=3)
    elif name == "partition_heal":
        partitions.append(Partition(start=4, end=20, group=frozenset(range(n // 2))))
    elif name != "fault_free":
        raise KeyError(name)
    cfg = ScenarioConfig(n=n, seed=seed, adversaries=adversaries, partitions=partitions)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg.validate()
