"""Tetris asynchronous BFT consensus: event DAG, virtual voting, and a
deterministic network simulator for exercising it."""

from .consensus import (
    Block,
    BlockHeader,
    ConsensusEngine,
    ProtocolParams,
    StageState,
    StageVerdict,
    advance_stage,
    assign_round,
    build_block,
    collect_committable_txs,
    decide,
    decide_with_coin,
    find_witnesses,
    stage_verdict,
)
from .dag import Accepted, Pending, Rejected, SubTetris, Tetris, consistent_with
from .events import (
    ZERO_DIGEST,
    DeterministicCrypto,
    Event,
    Transaction,
    Violation,
    canonical_encode,
    create_event,
    hash_event,
    materialize_placeholders,
    verify_event,
)

__version__ = "0.1.0"
