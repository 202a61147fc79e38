"""Pairwise reconciliation between agents under a lossy, metered link.

Agents exchange digests (sorted key lists) of the delta-poses, loop closures
and maplets they hold, then ship whatever the peer is missing.  Every message
is serialised to its exact wire format so byte counts are auditable.  Lost
messages simply do not arrive; repeating the exchange repairs the gap.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .builder import Maplet, decode_maplet
from .errors import OutOfRange
from .geometry import Pose2, lift_se2, project_se2
from .icap import (
    DEFAULT_EPS_ACCEPT,
    AlignmentResult,
    RoiPolygon,
    maplet_pair_alignment,
)
from .skeleton import (
    LOOP_CLOSURE,
    ODOMETRY,
    DeltaPoseFactor,
    NodeKey,
    RangeFactor,
    Skeleton,
    build_skeleton,
    optimize,
)

log = logging.getLogger(__name__)

DIGEST = "Digest"
DELTA_BATCH = "DeltaPoseBatch"
CLOSURE_BATCH = "ClosureBatch"
MAPLET_PAYLOAD = "MapletPayload"
MESSAGE_KINDS = (DIGEST, DELTA_BATCH, CLOSURE_BATCH, MAPLET_PAYLOAD)
_KIND_CODE = {k: i for i, k in enumerate(MESSAGE_KINDS)}

DEFAULT_SALIENCE_MIN = 2.0
DEFAULT_PROXIMITY_RADIUS = 3.0
DEFAULT_OVERLAP_RADIUS = 4.0
DEFAULT_ROI_RADIUS = 2.5
DEFAULT_MAX_ROUNDS = 5

# -- wire formats ------------------------------------------------------------

_DELTA_RECORD = struct.Struct("<HHHHddd6dB")
DELTA_RECORD_BYTES = _DELTA_RECORD.size
_EDGE_KEY = struct.Struct("<HHHH")
_NODE_KEY = struct.Struct("<HH")
_DIGEST_HEADER = struct.Struct("<BIII")
_BATCH_HEADER = struct.Struct("<BI")
_FACTOR_KIND_CODE = {ODOMETRY: 0, LOOP_CLOSURE: 1}
_FACTOR_KIND_NAME = {v: k for k, v in _FACTOR_KIND_CODE.items()}
_UPPER = (0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)


def pack_delta(f: DeltaPoseFactor) -> bytes:
    d = f.delta
    return _DELTA_RECORD.pack(
        f.source.agent,
        f.source.maplet,
        f.target.agent,
        f.target.maplet,
        d.x,
        d.y,
        d.theta,
        *(f.cov[i, j] for i, j in _UPPER),
        _FACTOR_KIND_CODE[f.kind],
    )


def unpack_delta(data: bytes, offset: int = 0) -> DeltaPoseFactor:
    v = _DELTA_RECORD.unpack_from(data, offset)
    c = v[7:13]
    cov = np.array([[c[0], c[1], c[2]], [c[1], c[3], c[4]], [c[2], c[4], c[5]]])
    return DeltaPoseFactor(
        NodeKey(v[0], v[1]), NodeKey(v[2], v[3]), Pose2(v[4], v[5], v[6]), cov, _FACTOR_KIND_NAME[v[13]]
    )


@dataclass(frozen=True)
class Digest:
    deltas: tuple
    closures: tuple
    maplets: tuple


@dataclass(frozen=True)
class WireMessage:
    kind: str
    payload: bytes

    @property
    def size(self) -> int:
        return len(self.payload)


def encode_digest(d: Digest) -> WireMessage:
    parts = [_DIGEST_HEADER.pack(_KIND_CODE[DIGEST], len(d.deltas), len(d.closures), len(d.maplets))]
    for a, b in list(d.deltas) + list(d.closures):
        parts.append(_EDGE_KEY.pack(a.agent, a.maplet, b.agent, b.maplet))
    parts += [_NODE_KEY.pack(*k) for k in d.maplets]
    return WireMessage(DIGEST, b"".join(parts))


def decode_digest(data: bytes) -> Digest:
    _, nd, nc, nm = _DIGEST_HEADER.unpack_from(data, 0)
    off = _DIGEST_HEADER.size
    edges = []
    for _ in range(nd + nc):
        a0, a1, b0, b1 = _EDGE_KEY.unpack_from(data, off)
        edges.append((NodeKey(a0, a1), NodeKey(b0, b1)))
        off += _EDGE_KEY.size
    maplets = []
    for _ in range(nm):
        maplets.append(NodeKey(*_NODE_KEY.unpack_from(data, off)))
        off += _NODE_KEY.size
    if off != len(data):
        raise ValueError("digest length does not match its counts")
    return Digest(tuple(edges[:nd]), tuple(edges[nd:]), tuple(maplets))


def encode_batch(kind: str, factors) -> WireMessage:
    body = b"".join(pack_delta(f) for f in factors)
    return WireMessage(kind, _BATCH_HEADER.pack(_KIND_CODE[kind], len(factors)) + body)


def decode_batch(data: bytes) -> list[DeltaPoseFactor]:
    _, n = _BATCH_HEADER.unpack_from(data, 0)
    if len(data) != _BATCH_HEADER.size + n * DELTA_RECORD_BYTES:
        raise ValueError("batch length does not match its count")
    return [unpack_delta(data, _BATCH_HEADER.size + k * DELTA_RECORD_BYTES) for k in range(n)]


def encode_maplet(m: Maplet) -> WireMessage:
    return WireMessage(MAPLET_PAYLOAD, bytes([_KIND_CODE[MAPLET_PAYLOAD]]) + m.to_bytes())


def decode_maplet_message(data: bytes) -> Maplet:
    agent, index, planes = decode_maplet(data[1:])
    return Maplet(agent, index, [], planes, "received", 0.0, 0.0)


# -- link and ledger ---------------------------------------------------------


@dataclass
class LinkModel:
    range: float = 10.0
    drop_probability: float = 0.0
    seed: int = 0
    budget: int | None = None  # bytes per encounter

    def __post_init__(self):
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ValueError("drop_probability must lie in [0, 1]")
        self._rng = np.random.default_rng(self.seed)

    def delivered(self) -> bool:
        if self.drop_probability == 0.0:
            return True
        return bool(self._rng.random() >= self.drop_probability)


@dataclass(frozen=True)
class LedgerEntry:
    sender: int
    receiver: int
    kind: str
    bytes: int
    sim_time: float
    encounter: int
    delivered: bool


class BandwidthLedger:
    """Append-only record of every message put on the air."""

    def __init__(self):
        self.entries: list[LedgerEntry] = []

    def record(self, entry: LedgerEntry) -> None:
        self.entries.append(entry)

    def total(self, kind: str | None = None) -> int:
        return sum(e.bytes for e in self.entries if kind is None or e.kind == kind)

    def by_link(self) -> dict:
        out: dict = {}
        for e in self.entries:
            k = (e.sender, e.receiver, e.kind)
            out[k] = out.get(k, 0) + e.bytes
        return out

    def by_encounter(self) -> dict:
        out: dict = {}
        for e in self.entries:
            out[e.encounter] = out.get(e.encounter, 0) + e.bytes
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sender", "receiver", "kind", "bytes", "sim_time"])
            for e in self.entries:
                w.writerow([e.sender, e.receiver, e.kind, e.bytes, repr(float(e.sim_time))])

    @staticmethod
    def read_csv(path) -> list[tuple]:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != ["sender", "receiver", "kind", "bytes", "sim_time"]:
            raise ValueError(f"{path}: not a ledger file")
        return [(int(s), int(r), k, int(b), float(t)) for s, r, k, b, t in rows[1:]]


# -- agent state -------------------------------------------------------------


class AgentStore:
    """What one agent knows.

    ``anchors`` holds the agreed start pose of every agent's first maplet;
    it only seeds initialisation of otherwise unconnected sub-graphs.
    """

    def __init__(self, agent: int, anchors: dict | None = None):
        self.agent = agent
        self.anchors = {NodeKey(*k): v for k, v in (anchors or {}).items()}
        self.known_deltas: dict = {}
        self.known_closures: dict = {}
        self.ranges: dict = {}
        self.own_maplets: dict = {}
        self.foreign_maplets: dict = {}
        self.tried_pairs: set = set()
        self._cache = None

    # data entry
    def add_own_maplet(self, m: Maplet) -> None:
        self.own_maplets[NodeKey(*m.key)] = m

    def add_factor(self, f: DeltaPoseFactor) -> bool:
        table = self.known_closures if f.kind == LOOP_CLOSURE else self.known_deltas
        if f.key in table:
            return False
        table[f.key] = f
        self._cache = None
        return True

    def add_range(self, f: RangeFactor) -> None:
        self.ranges[f.key] = f
        self._cache = None

    def maplets(self) -> dict:
        out = dict(self.foreign_maplets)
        out.update(self.own_maplets)
        return out

    def digest(self) -> Digest:
        return Digest(
            tuple(sorted(self.known_deltas)),
            tuple(sorted(self.known_closures)),
            tuple(sorted(self.maplets())),
        )

    def factors(self) -> list:
        keyed = sorted(self.known_deltas.items()) + sorted(self.known_closures.items())
        return [f for _, f in keyed] + [self.ranges[k] for k in sorted(self.ranges)]

    def nodes(self) -> set:
        out = {NodeKey(*k) for k in self.maplets()}
        for a, b in list(self.known_deltas) + list(self.known_closures):
            out.update((a, b))
        return out

    @property
    def skeleton(self) -> Skeleton:
        """Optimised skeleton over everything known (cached)."""
        if self._cache is None:
            self._cache = optimize(self.initial_skeleton())
        return self._cache

    def initial_skeleton(self) -> Skeleton:
        factors = self.factors()
        nodes = self.nodes()
        if not nodes:
            return Skeleton()
        anchors = {k: v for k, v in self.anchors.items() if k in nodes}
        root = min(nodes)
        sk = build_skeleton(factors, root, anchors) if factors else None
        poses = dict(sk.poses) if sk else {}
        # isolated nodes (maplets without factors yet) fall back to their anchor
        for k in sorted(nodes - set(poses)):
            if k in self.anchors:
                poses[k] = self.anchors[k]
        return Skeleton(poses, factors, sk.chi2 if sk else 0.0)

    def estimated_origin(self, key) -> Pose2 | None:
        return self.skeleton.poses.get(NodeKey(*key))


# -- protocol ----------------------------------------------------------------


@dataclass
class EncounterResult:
    encounter: int
    sim_time: float
    rounds: int = 0
    bytes: int = 0
    messages: int = 0
    fixpoint: bool = False
    received_maplets: dict = field(default_factory=dict)  # agent -> [keys]


class _Channel:
    """One encounter's byte accounting and loss model."""

    def __init__(self, link: LinkModel, ledger: BandwidthLedger, encounter: int, sim_time: float):
        self.link, self.ledger = link, ledger
        self.encounter, self.sim_time = encounter, sim_time
        self.used = 0
        self.messages = 0

    def fits(self, size: int) -> bool:
        return self.link.budget is None or self.used + size <= self.link.budget

    def send(self, sender: int, receiver: int, msg: WireMessage) -> bytes | None:
        """Meter ``msg``; returns its payload if it arrives, else None."""
        ok = self.link.delivered()
        self.used += msg.size
        self.messages += 1
        self.ledger.record(
            LedgerEntry(sender, receiver, msg.kind, msg.size, self.sim_time, self.encounter, ok)
        )
        return msg.payload if ok else None


def _missing(store: AgentStore, peer: Digest):
    deltas = sorted(set(store.known_deltas) - set(peer.deltas))
    closures = sorted(set(store.known_closures) - set(peer.closures))
    return [store.known_deltas[k] for k in deltas], [store.known_closures[k] for k in closures]


def _maplet_order(store: AgentStore, peer: AgentStore, peer_digest: Digest, salience_min, proximity_radius):
    held = store.maplets()
    wanted = sorted(set(held) - set(peer_digest.maplets))
    if not wanted:
        return []
    sk = store.skeleton
    peer_track = np.array(
        [sk.poses[k].translation for k in sorted(sk.poses) if k.agent == peer.agent]
    ).reshape(-1, 2)

    def priority(key):
        m = held[key]
        if m.salience >= salience_min:
            return True
        if key in sk.poses and len(peer_track):
            return float(np.min(np.linalg.norm(peer_track - sk.poses[key].translation, axis=1))) <= proximity_radius
        return False

    first = [k for k in wanted if priority(k)]
    return first + [k for k in wanted if k not in first]


def encounter(
    a: AgentStore,
    b: AgentStore,
    link: LinkModel,
    ledger: BandwidthLedger,
    sim_time: float = 0.0,
    encounter_id: int = 0,
    max_rounds: int = DEFAULT_MAX_ROUNDS,
    share_maplets: bool = True,
    salience_min: float = DEFAULT_SALIENCE_MIN,
    proximity_radius: float = DEFAULT_PROXIMITY_RADIUS,
) -> EncounterResult:
    """Reconcile two stores in place.

    Each round both sides send a digest; a side that receives its peer's
    digest answers with the delta-poses and closures the peer lacks.  Rounds
    stop once both digests arrive and show nothing missing.  Maplets the peer
    lacks follow, likely loop-closure candidates first.  Phases that no longer
    fit in the link budget are skipped.
    """
    ch = _Channel(link, ledger, encounter_id, sim_time)
    result = EncounterResult(encounter_id, sim_time, received_maplets={a.agent: [], b.agent: []})
    pair = ((a, b), (b, a))
    last_digest: dict = {}
    for rnd in range(1, max_rounds + 1):
        result.rounds = rnd
        heard = {}
        for src, dst in pair:
            msg = encode_digest(src.digest())
            if not ch.fits(msg.size):
                continue
            data = ch.send(src.agent, dst.agent, msg)
            if data is not None:
                heard[dst.agent] = decode_digest(data)
                last_digest[dst.agent] = heard[dst.agent]
        quiet = len(heard) == 2
        for src, dst in pair:
            peer = heard.get(src.agent)
            if peer is None:
                continue
            deltas, closures = _missing(src, peer)
            if deltas or closures:
                quiet = False
            for kind, items in ((DELTA_BATCH, deltas), (CLOSURE_BATCH, closures)):
                if not items:
                    continue
                msg = encode_batch(kind, items)
                if not ch.fits(msg.size):
                    continue
                data = ch.send(src.agent, dst.agent, msg)
                if data is not None:
                    for f in decode_batch(data):
                        dst.add_factor(f)
        if quiet:
            result.fixpoint = rnd == 1
            break

    if share_maplets:
        for src, dst in pair:
            peer = last_digest.get(src.agent)
            if peer is None:
                continue
            for key in _maplet_order(src, dst, peer, salience_min, proximity_radius):
                msg = encode_maplet(src.maplets()[key])
                if not ch.fits(msg.size):
                    break
                data = ch.send(src.agent, dst.agent, msg)
                if data is not None:
                    m = decode_maplet_message(data)
                    if NodeKey(*m.key) not in dst.maplets():
                        dst.foreign_maplets[NodeKey(*m.key)] = m
                        result.received_maplets[dst.agent].append(NodeKey(*m.key))
    result.bytes = ch.used
    result.messages = ch.messages
    return result


def detect_inter_agent_closures(
    store: AgentStore,
    overlap_radius: float = DEFAULT_OVERLAP_RADIUS,
    roi_radius: float = DEFAULT_ROI_RADIUS,
    eps_accept: float = DEFAULT_EPS_ACCEPT,
    max_per_peer: int | None = None,
) -> list[DeltaPoseFactor]:
    """Align own maplets against received ones whose origins look close.

    Candidate pairs come from the store's current skeleton estimate; each
    pair is tried once.  A pair is only evaluated by the lower-numbered agent
    so that two agents holding each other's maplets do not both produce the
    same closure.  With ``max_per_peer`` set, at most that many closures (the
    lowest alignment error first) are kept per peer agent, counting closures
    already known.  New closures are added to the store and returned.
    """
    sk = store.skeleton
    found: dict = {}
    for fkey in sorted(store.foreign_maplets):
        if fkey.agent <= store.agent or fkey not in sk.poses:
            continue
        foreign = store.foreign_maplets[fkey]
        for okey in sorted(store.own_maplets):
            if (okey, fkey) in store.tried_pairs or okey not in sk.poses:
                continue
            xo, xf = sk.poses[okey], sk.poses[fkey]
            if float(np.linalg.norm(xo.translation - xf.translation)) > overlap_radius:
                continue
            store.tried_pairs.add((okey, fkey))
            mid = 0.5 * (xo.translation + xf.translation)
            roi = RoiPolygon.disk(mid, roi_radius)
            res = maplet_pair_alignment(
                store.own_maplets[okey], foreign, roi, lift_se2(xo), lift_se2(xf), eps_accept
            )
            if not isinstance(res, AlignmentResult):
                log.debug("pair %s/%s rejected: %s", okey, fkey, res.reason)
                continue
            delta = project_se2(res.transform.inverse())
            guess = xo.inverse() @ xf
            # a fit that slides the maplets out of the region it was drawn from
            # matched the wrong stretch of a self-similar corridor
            if float(np.hypot(*(guess.inverse() @ delta).translation)) > roi_radius:
                log.debug("pair %s/%s rejected: correction leaves the ROI", okey, fkey)
                continue
            f = DeltaPoseFactor(okey, fkey, delta, res.covariance, LOOP_CLOSURE)
            found.setdefault(fkey.agent, []).append((res.mean_error, f.key, f))
    out = []
    for peer in sorted(found):
        cands = sorted(found[peer], key=lambda c: (c[0], c[1]))
        if max_per_peer is not None:
            have = sum(
                1
                for a, b in store.known_closures
                if {a.agent, b.agent} == {store.agent, peer}
            )
            cands = cands[: max(0, max_per_peer - have)]
        for _, _, f in cands:
            if store.add_factor(f):
                out.append(f)
    return out


def range_measurement(
    a_key, b_key, a_pos, b_pos, sigma: float, rng=None, max_range: float = math.inf
) -> RangeFactor:
    """Noisy range between two agents, attached to their current maplet origins.

    Positions are true agent positions; the factor treats them as the
    origins of the active maplets.
    """
    true = float(np.linalg.norm(np.asarray(a_pos, dtype=float) - np.asarray(b_pos, dtype=float)))
    if true > max_range:
        raise OutOfRange(f"agents are {true:.2f} m apart, sensor reaches {max_range} m")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    noise = float(rng.normal(0.0, sigma)) if sigma > 0 else 0.0
    variance = sigma**2 if sigma > 0 else 1e-6
    return RangeFactor(a_key, b_key, max(0.0, true + noise), variance)
