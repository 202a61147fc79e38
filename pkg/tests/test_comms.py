import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maplets.comms import (
    CLOSURE_BATCH,
    DELTA_BATCH,
    DELTA_RECORD_BYTES,
    DIGEST,
    MAPLET_PAYLOAD,
    AgentStore,
    BandwidthLedger,
    Digest,
    LinkModel,
    decode_batch,
    decode_digest,
    decode_maplet_message,
    detect_inter_agent_closures,
    encode_batch,
    encode_digest,
    encode_maplet,
    encounter,
    pack_delta,
    range_measurement,
    unpack_delta,
)
from maplets.errors import OutOfRange
from maplets.geometry import Pose2
from maplets.skeleton import LOOP_CLOSURE, ODOMETRY, DeltaPoseFactor, NodeKey

from synth import corridor_corner, make_maplet, move_patches, yaw_pose

COV = np.diag([0.01, 0.02, 0.003]) + 0.001


def delta(a, b, x=1.0, kind=ODOMETRY):
    return DeltaPoseFactor(NodeKey(*a), NodeKey(*b), Pose2(x, 0.1, 0.2), COV, kind)


def digest_bytes(n_edges, n_maplets):
    # u8 kind + three u32 counts, then 8 bytes per edge key and 4 per maplet key
    return 1 + 3 * 4 + 8 * n_edges + 4 * n_maplets


def chain_store(agent, count):
    s = AgentStore(agent, anchors={(0, 0): Pose2.identity(), (1, 0): Pose2(0, 5, 0)})
    for k in range(count):
        s.add_factor(delta((agent, k), (agent, k + 1)))
    return s


# -- wire format -----------------------------------------------------------------


def test_delta_record_is_81_bytes():
    f = delta((1, 2), (3, 4))
    blob = pack_delta(f)
    # 4 u16 keys + 3 f64 delta + 6 f64 covariance + u8 kind
    assert len(blob) == DELTA_RECORD_BYTES == 4 * 2 + 3 * 8 + 6 * 8 + 1 == 81
    assert len(blob) <= 100


def test_delta_record_layout():
    f = delta((1, 2), (3, 4), kind=LOOP_CLOSURE)
    blob = pack_delta(f)
    assert struct.unpack_from("<HHHH", blob) == (1, 2, 3, 4)
    assert struct.unpack_from("<3d", blob, 8) == (1.0, 0.1, 0.2)
    upper = struct.unpack_from("<6d", blob, 32)
    assert upper == tuple(COV[i, j] for i, j in [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)])
    assert blob[-1] == 1


@given(st.integers(0, 65535), st.integers(0, 65535), st.floats(-1e3, 1e3), st.floats(-3, 3), st.booleans())
def test_delta_round_trip(a, m, x, th, closure):
    f = DeltaPoseFactor(NodeKey(a, m), NodeKey(a, (m + 1) % 65536), Pose2(x, -x, th), COV, LOOP_CLOSURE if closure else ODOMETRY)
    assert unpack_delta(pack_delta(f)) == f


def test_digest_and_batch_round_trip():
    fs = [delta((0, k), (0, k + 1)) for k in range(3)]
    d = Digest(tuple(f.key for f in fs), (fs[0].key,), (NodeKey(0, 0), NodeKey(1, 7)))
    msg = encode_digest(d)
    assert msg.kind == DIGEST and msg.size == digest_bytes(4, 2)
    assert decode_digest(msg.payload) == d
    batch = encode_batch(DELTA_BATCH, fs)
    assert batch.size == 5 + 3 * 81
    assert decode_batch(batch.payload) == fs
    with pytest.raises(ValueError):
        decode_batch(batch.payload[:-1])
    with pytest.raises(ValueError):
        decode_digest(msg.payload + b"\0")


def test_maplet_message_round_trip():
    m = make_maplet(2, 5, corridor_corner())
    msg = encode_maplet(m)
    assert msg.kind == MAPLET_PAYLOAD and msg.size == 1 + m.serialized_size()
    back = decode_maplet_message(msg.payload)
    assert back.key == (2, 5) and len(back.planes) == len(m.planes)


# -- link and ledger ---------------------------------------------------------------


def test_link_validation():
    with pytest.raises(ValueError):
        LinkModel(drop_probability=1.5)
    assert all(LinkModel().delivered() for _ in range(10))
    assert not any(LinkModel(drop_probability=1.0).delivered() for _ in range(10))


def test_ledger_csv_round_trip(tmp_path):
    s = chain_store(0, 3)
    ledger = BandwidthLedger()
    encounter(s, AgentStore(1), LinkModel(), ledger, sim_time=1.25)
    ledger.write_csv(tmp_path / "ledger.csv")
    rows = BandwidthLedger.read_csv(tmp_path / "ledger.csv")
    assert rows == [(e.sender, e.receiver, e.kind, e.bytes, e.sim_time) for e in ledger.entries]
    assert sum(r[3] for r in rows) == ledger.total()
    assert sum(ledger.by_link().values()) == ledger.total() == sum(ledger.by_encounter().values())
    (tmp_path / "bad.csv").write_text("a,b\n")
    with pytest.raises(ValueError):
        BandwidthLedger.read_csv(tmp_path / "bad.csv")


# -- encounter -------------------------------------------------------------------


def test_identical_stores_exchange_only_digests():
    a, b = chain_store(0, 2), chain_store(0, 2)
    b.agent = 1
    ledger = BandwidthLedger()
    r = encounter(a, b, LinkModel(), ledger)
    assert r.fixpoint and r.rounds == 1
    assert [e.kind for e in ledger.entries] == [DIGEST, DIGEST]
    assert ledger.total() == 2 * digest_bytes(2, 0)


def test_exact_byte_accounting_for_five_deltas():
    a, b = chain_store(0, 5), AgentStore(1)
    ledger = BandwidthLedger()
    r = encounter(a, b, LinkModel(), ledger, share_maplets=False)
    assert set(b.known_deltas) == set(a.known_deltas)
    # round 1: both digests then one batch; round 2: both digests, nothing missing
    expected = digest_bytes(5, 0) + digest_bytes(0, 0) + (5 + 5 * DELTA_RECORD_BYTES)
    expected += 2 * digest_bytes(5, 0)
    assert ledger.total() == r.bytes == expected
    assert ledger.total(DELTA_BATCH) == 5 + 5 * 81
    assert ledger.total(CLOSURE_BATCH) == 0


def test_second_encounter_is_digest_only():
    a, b = chain_store(0, 4), chain_store(1, 3)
    a.add_own_maplet(make_maplet(0, 0, corridor_corner()))
    ledger = BandwidthLedger()
    encounter(a, b, LinkModel(), ledger, encounter_id=0)
    n = len(ledger.entries)
    r = encounter(a, b, LinkModel(), ledger, encounter_id=1)
    assert r.fixpoint
    assert {e.kind for e in ledger.entries[n:]} == {DIGEST}
    assert a.digest() == b.digest()


def test_budget_limits_phases():
    a, b = chain_store(0, 5), AgentStore(1)
    ledger = BandwidthLedger()
    r = encounter(a, b, LinkModel(budget=2 * digest_bytes(5, 0)), ledger)
    assert r.bytes <= 2 * digest_bytes(5, 0)
    assert not b.known_deltas


def test_maplets_shared_salient_first():
    a = AgentStore(0, anchors={(0, 0): Pose2.identity(), (1, 0): Pose2(50, 0, 0)})
    for k, sal in enumerate([0.0, 3.0, 1.0]):
        a.add_own_maplet(make_maplet(0, k, corridor_corner(), salience=sal))
    for k in range(2):
        a.add_factor(DeltaPoseFactor(NodeKey(0, k), NodeKey(0, k + 1), Pose2(1, 0, 0), COV))
    b = AgentStore(1)
    ledger = BandwidthLedger()
    r = encounter(a, b, LinkModel(), ledger)
    assert r.received_maplets[1] == [NodeKey(0, 1), NodeKey(0, 0), NodeKey(0, 2)]
    assert ledger.total(MAPLET_PAYLOAD) == 3 * (1 + a.own_maplets[NodeKey(0, 0)].serialized_size())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_lossy_link_repairs(seed):
    a, b = chain_store(0, 6), chain_store(1, 4)
    a.add_factor(delta((0, 2), (1, 1), kind=LOOP_CLOSURE))
    link = LinkModel(drop_probability=0.5, seed=seed)
    ledger = BandwidthLedger()
    for k in range(10):
        encounter(a, b, link, ledger, encounter_id=k, share_maplets=False)
        if a.digest() == b.digest():
            break
    assert a.digest() == b.digest()
    assert a.factors() == b.factors()


def test_determinism_of_ledger():
    def run():
        a, b = chain_store(0, 6), chain_store(1, 4)
        link = LinkModel(drop_probability=0.3, seed=7)
        ledger = BandwidthLedger()
        for k in range(4):
            encounter(a, b, link, ledger, encounter_id=k)
        return ledger.entries

    assert run() == run()


# -- closure detection ---------------------------------------------------------------


def centred_corner():
    # corridor corner expressed around its middle so a 2.5 m ROI sees every wall
    return move_patches(yaw_pose(3.5, 0.5, 0), corridor_corner())


def two_agent_stores(origin_b, foreign_patches):
    store = AgentStore(0, anchors={(0, 0): Pose2.identity(), (1, 0): origin_b})
    store.add_own_maplet(make_maplet(0, 0, centred_corner()))
    store.foreign_maplets[NodeKey(1, 0)] = make_maplet(1, 0, foreign_patches)
    return store


def test_duplicate_maplet_gives_identity_closure():
    store = two_agent_stores(Pose2.identity(), centred_corner())
    out = detect_inter_agent_closures(store)
    assert len(out) == 1
    f = out[0]
    assert f.kind == LOOP_CLOSURE and f.key == (NodeKey(0, 0), NodeKey(1, 0))
    assert max(abs(f.delta.x), abs(f.delta.y), abs(f.delta.theta)) <= 1e-6
    # tried pairs are not re-run
    assert detect_inter_agent_closures(store) == []


def test_closure_recovers_offset():
    truth = yaw_pose(0.3, -0.2, 6)
    store = two_agent_stores(Pose2(0.1, -0.1, math.radians(4)), move_patches(truth, centred_corner()))
    (f,) = detect_inter_agent_closures(store)
    assert (f.delta.x, f.delta.y) == pytest.approx((0.3, -0.2), abs=1e-6)
    assert f.delta.theta == pytest.approx(math.radians(6), abs=1e-6)


def test_no_overlap_gives_nothing():
    store = two_agent_stores(Pose2(30, 0, 0), centred_corner())
    assert detect_inter_agent_closures(store) == []


def test_higher_agent_leaves_pair_to_peer():
    store = AgentStore(1, anchors={(0, 0): Pose2.identity(), (1, 0): Pose2.identity()})
    store.add_own_maplet(make_maplet(1, 0, centred_corner()))
    store.foreign_maplets[NodeKey(0, 0)] = make_maplet(0, 0, centred_corner())
    assert detect_inter_agent_closures(store) == []


def test_max_per_peer_keeps_best():
    store = two_agent_stores(Pose2.identity(), centred_corner())
    store.own_maplets[NodeKey(0, 1)] = make_maplet(0, 1, centred_corner())
    store.add_factor(DeltaPoseFactor(NodeKey(0, 0), NodeKey(0, 1), Pose2(0, 0, 0), COV))
    assert len(detect_inter_agent_closures(store, max_per_peer=1)) == 1


# -- ranging -----------------------------------------------------------------------


def test_range_exact():
    assert range_measurement((0, 0), (1, 0), [1, 1], [1, 1], 0.0).range == 0.0
    f = range_measurement((0, 0), (1, 0), [0, 0], [3, 4], 0.0)
    assert f.range == 5.0 and f.variance > 0


def test_range_statistics():
    rng = np.random.default_rng(42)
    draws = np.array([range_measurement((0, 0), (1, 0), [0, 0], [3, 4], 0.1, rng).range for _ in range(1000)])
    assert abs(draws.mean() - 5.0) <= 0.01
    assert abs(draws.std(ddof=1) - 0.1) <= 0.015
    assert range_measurement((0, 0), (1, 0), [0, 0], [3, 4], 0.1, 3).variance == pytest.approx(0.01)


def test_range_out_of_range():
    with pytest.raises(OutOfRange):
        range_measurement((0, 0), (1, 0), [0, 0], [30, 0], 0.1, 0, max_range=10)
