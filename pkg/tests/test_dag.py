import random

import pytest

from tetris_bft.dag import Accepted, Pending, Rejected, RejectReason, Tetris, consistent_with, fault_bound
from tetris_bft.events import ZERO_DIGEST, Event, create_event

from conftest import OracleDag, bfs_ancestors, lockstep, random_gossip


def test_fault_bound():
    assert [fault_bound(n) for n in (1, 4, 7, 10)] == [0, 1, 2, 3]


def test_membership_size_enforced():
    with pytest.raises(ValueError):
        Tetris(range(5))


def test_insert_with_known_parents(crypto):
    tetris = Tetris(range(4))
    a = create_event(0, None, [], [], crypto)
    assert tetris.insert(a) == Accepted((a.self_digest,))
    assert a.self_digest in tetris


def test_pending_then_cascade(crypto):
    tetris = Tetris(range(4))
    a = create_event(1, None, [], [], crypto)
    b = create_event(0, None, [a], [], crypto)
    c = create_event(0, b, [], [], crypto)
    assert tetris.insert(c) == Pending(frozenset({b.self_digest}))
    assert tetris.insert(b) == Pending(frozenset({a.self_digest}))
    assert tetris.missing_parents() == {a.self_digest, b.self_digest}
    res = tetris.insert(a)
    assert isinstance(res, Accepted)
    assert set(res.digests) == {a.self_digest, b.self_digest, c.self_digest}
    assert not tetris.pending
    assert tetris.closure_violations() == []


def test_duplicate_insert_is_idempotent(crypto):
    tetris = Tetris(range(4))
    a = create_event(0, None, [], [], crypto)
    tetris.insert(a)
    assert tetris.insert(a) == Accepted(())
    assert len(tetris) == 1


def test_unknown_member_rejected(crypto):
    tetris = Tetris(range(4))
    assert tetris.insert(create_event(9, None, [], [], crypto)) == Rejected(RejectReason.UNKNOWN_MEMBER)


def test_bad_sequence_rejected(crypto):
    tetris = Tetris(range(4))
    a = create_event(1, None, [], [], crypto)
    tetris.insert(a)
    lying = Event(0, 5, (ZERO_DIGEST, a.self_digest))
    assert tetris.insert(lying) == Rejected(RejectReason.BAD_SEQUENCE)


def test_foreign_self_parent_rejected(crypto):
    tetris = Tetris(range(4))
    a = create_event(1, None, [], [], crypto)
    tetris.insert(a)
    e = Event(0, 1, (a.self_digest,))
    assert tetris.insert(e) == Rejected(RejectReason.SELF_PARENT_MISMATCH)


def test_forks_are_stored_and_recorded(crypto):
    tetris = Tetris(range(4))
    g = create_event(0, None, [], [], crypto)
    a = create_event(0, g, [], [b"\x01" * 32], crypto)
    b = create_event(0, g, [], [b"\x02" * 32], crypto)
    for e in (g, a, b):
        assert isinstance(tetris.insert(e), Accepted)
    assert tetris.fork_records == {(0, 1)}
    assert tetris.by_creator_seq[(0, 1)] == {a.self_digest, b.self_digest}


def test_placeholders_are_inserted(crypto):
    tetris = Tetris(range(4))
    far = create_event(1, None, [], [], crypto)
    for _ in range(3):
        far = create_event(1, far, [], [], crypto)
    g = create_event(0, None, [], [], crypto)
    e = create_event(0, g, [far], [], crypto)
    assert e.seq == 4
    chain = [create_event(1, None, [], [], crypto)]
    for _ in range(3):
        chain.append(create_event(1, chain[-1], [], [], crypto))
    for x in chain + [g]:
        tetris.insert(x)
    res = tetris.insert(e)
    assert len(res.digests) == 4
    phs = [tetris.event_at(tetris.self_parent_index(tetris.index(e.self_digest)))]
    assert phs[0].placeholder and phs[0].seq == 3
    assert [x.seq for x in tetris.events_at(0, 2)] == [2]
    assert tetris.parents_of(e.self_digest)[1:] == (far.self_digest,)


def test_ancestors_match_bfs(crypto):
    rng = random.Random(5)
    events = random_gossip(rng, 4, 60, crypto)
    tetris = Tetris(range(4))
    for e in events:
        tetris.insert(e)
    raw = {e.self_digest: e for e in events}
    for e in events:
        impl = {d for d in tetris.ancestors(e.self_digest) if not tetris.event(d).placeholder}
        assert impl == bfs_ancestors(raw, e.self_digest)


def test_know_and_know_well_match_oracle(crypto):
    rng = random.Random(11)
    events = random_gossip(rng, 4, 50, crypto, forker=3)
    tetris = Tetris(range(4))
    for e in events:
        tetris.insert(e)
    assert tetris.fork_records, "fixture should contain a fork"
    oracle = OracleDag(events, set(range(4)), 1)
    for x in tetris.order:
        for y in tetris.order:
            assert tetris.know(x, y) == oracle.know(x, y)
            assert tetris.know_well(x, y) == oracle.know_well(x, y)


def test_fork_in_ancestry_blocks_knowledge(crypto):
    tetris = Tetris(range(4))
    g = create_event(0, None, [], [], crypto)
    a = create_event(0, g, [], [b"\x01" * 32], crypto)
    b = create_event(0, g, [], [b"\x02" * 32], crypto)
    x1 = create_event(1, None, [a], [], crypto)
    x2 = create_event(1, x1, [b], [], crypto)
    for e in (g, a, b, x1, x2):
        tetris.insert(e)
    assert tetris.know(x1.self_digest, a.self_digest)
    assert not tetris.know(x2.self_digest, a.self_digest)
    assert not tetris.know(x2.self_digest, g.self_digest)


def test_know_well_threshold(crypto):
    # n=4 so 2t+1 = 3 distinct creators must reach y
    tetris, grid = lockstep(4, 3, crypto)
    y = grid[0][0].self_digest
    assert tetris.know_well(grid[2][1].self_digest, y)
    # layer 1 event of validator 1 reaches y only through itself and 0's chain
    assert not tetris.know_well(grid[1][1].self_digest, y)

    partial = Tetris(range(4))
    g = [create_event(v, None, [], [], crypto) for v in range(4)]
    m1 = create_event(1, g[1], [g[0]], [], crypto)
    m2 = create_event(2, g[2], [m1], [], crypto)
    x = create_event(3, g[3], [m2], [], crypto)
    for e in g + [m1, m2, x]:
        partial.insert(e)
    # creators 0, 1, 2 reach g0 inside anc(x), and 3 does via x itself
    assert partial.know_well(x.self_digest, g[0].self_digest)
    # only creators 0, 1, 2 reach g0 from m2: still three
    assert partial.know_well(m2.self_digest, g[0].self_digest)
    # from m1 only creators 0 and 1
    assert not partial.know_well(m1.self_digest, g[0].self_digest)


def test_sub_tetris(crypto):
    tetris, grid = lockstep(4, 2, crypto)
    sub = tetris.sub_tetris(grid[1][0].self_digest)
    assert len(sub) == 5
    assert grid[0][3].self_digest in sub
    assert grid[1][1].self_digest not in sub
    assert set(sub) == set(tetris.ancestors(grid[1][0].self_digest))


def test_consistency_between_stores(crypto):
    events = random_gossip(random.Random(2), 4, 40, crypto)
    a, b = Tetris(range(4)), Tetris(range(4))
    for e in events:
        a.insert(e)
    for e in reversed(events):
        b.insert(e)
    assert a.accepted.keys() == b.accepted.keys()
    assert consistent_with(a, b)


def test_consistency_check_catches_divergence(crypto):
    tetris_a, grid = lockstep(4, 2, crypto)
    tetris_b, _ = lockstep(4, 2, crypto)
    assert consistent_with(tetris_a, tetris_b)
    d = grid[1][0].self_digest
    tetris_b.ancestors(d)
    idx = tetris_b.index(d)
    tetris_b._anc_sets[idx] = tetris_b._anc_sets[idx] - {grid[0][3].self_digest}
    assert not consistent_with(tetris_a, tetris_b)


def test_pending_cap_evicts_oldest(crypto):
    tetris = Tetris(range(4), pending_cap=2)
    orphans = [Event(1, 1, (bytes([i]) * 32,)) for i in range(1, 4)]
    for e in orphans:
        tetris.insert(e)
    assert list(tetris.pending) == [orphans[1].self_digest, orphans[2].self_digest]
    assert bytes([1]) * 32 not in tetris.missing_parents()


def test_dot_export(crypto):
    tetris = Tetris(range(4))
    g = create_event(0, None, [], [], crypto)
    a = create_event(0, g, [], [b"\x01" * 32], crypto)
    b = create_event(0, g, [], [b"\x02" * 32], crypto)
    for e in (g, a, b):
        tetris.insert(e)
    dot = tetris.to_dot([g.self_digest])
    assert dot.startswith("digraph tetris {")
    assert dot.count("peripheries=2") == 2
    assert dot.count("style=filled") == 1
    assert 'label="0:1"' in dot
    assert f'"{a.self_digest.hex()[:16]}" -> "{g.self_digest.hex()[:16]}"' in dot


def test_rotate_keeps_retired_creators_known(crypto):
    tetris = Tetris(range(4))
    tetris.rotate(removed=[3], added=[4])
    assert tetris.membership == {0, 1, 2, 4}
    assert isinstance(tetris.insert(create_event(3, None, [], [], crypto)), Accepted)
    assert isinstance(tetris.insert(create_event(4, None, [], [], crypto)), Accepted)
