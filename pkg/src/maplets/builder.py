"""Keyframes, maplets and the trajectory-curvature decomposition.

An agent's tracker feeds frames (patches in sensor coordinates plus the body
motion since the current keyframe).  Frames are aggregated into keyframes;
keyframes form a chain whose edges are odometry estimates.  The chain is cut
into overlapping maplets by accumulated yaw, each maplet re-rooted at its
first keyframe.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import EmptyGraph
from .extraction import (
    MERGE_ANGLE,
    MERGE_OFFSET,
    PATCH_RECORD_BYTES,
    PlanarPatch,
    pack_patch,
    rectangle_corners,
    unpack_patch,
)
from .geometry import (
    Pose2,
    Pose3,
    compose_with_covariance,
    lift_se2,
    plane_from_vector,
    project_se2,
    rotation_angle,
    transform_plane,
    yaw_pitch_roll,
)

KEYFRAME_TRANSLATION = 0.5
KEYFRAME_ROTATION = math.radians(15.0)
DEFAULT_KAPPA_MAX = math.radians(90.0)
DEFAULT_SIZE_CAP = 40 * 1024
# coplanar patches further apart than this stay separate
MERGE_GAP = 0.1
# grid pitch and smallest kept piece when tiling maplet patches
MAPLET_TILE = 1.0
MIN_PIECE = 0.05
SALIENCE_RADIUS = 1.0
SALIENCE_CLUSTER = math.radians(15.0)

_MAPLET_HEADER = struct.Struct("<HHI")
MAPLET_HEADER_BYTES = _MAPLET_HEADER.size


@dataclass(eq=False)
class Keyframe:
    id: int
    pose_in_maplet: Pose3
    patches: list
    timestamp: float
    raw_bytes: int = 0  # size of the keyframe's dense point cloud


@dataclass(eq=False)
class MapletGraph:
    """Keyframe chain of one agent.

    ``edges[k]`` is the odometry estimate of keyframe ``k + 1`` expressed in
    keyframe ``k`` together with its (x, y, theta) covariance.
    """

    agent: int
    keyframes: list = field(default_factory=list)
    edges: list = field(default_factory=list)  # (Pose3, 3x3 covariance)

    def poses(self) -> list[Pose3]:
        """Keyframe poses in the frame of the first keyframe."""
        out = [Pose3.identity()]
        for delta, _ in self.edges:
            out.append(out[-1] @ delta)
        return out


@dataclass(eq=False)
class Maplet:
    agent: int
    index: int
    keyframes: list
    planes: list
    origin_hint: str
    salience: float
    yaw_span: float
    origin_keyframe: int = 0
    origin_pose: Pose3 = field(default_factory=Pose3.identity)  # in the agent's odometry frame

    @property
    def key(self) -> tuple[int, int]:
        return (self.agent, self.index)

    @property
    def raw_bytes(self) -> int:
        return sum(kf.raw_bytes for kf in self.keyframes)

    def serialized_size(self) -> int:
        return maplet_size(len(self.planes))

    def to_bytes(self) -> bytes:
        head = _MAPLET_HEADER.pack(self.agent, self.index, len(self.planes))
        return head + b"".join(pack_patch(p) for p in self.planes)

    def trajectory(self) -> np.ndarray:
        return np.array([kf.pose_in_maplet.p for kf in self.keyframes])


def maplet_size(n_patches: int) -> int:
    return MAPLET_HEADER_BYTES + PATCH_RECORD_BYTES * n_patches


def decode_maplet(data: bytes) -> tuple[int, int, list[PlanarPatch]]:
    """Inverse of :meth:`Maplet.to_bytes`: ``(agent, index, planes)``."""
    agent, index, count = _MAPLET_HEADER.unpack_from(data, 0)
    expected = maplet_size(count)
    if len(data) != expected:
        raise ValueError(f"maplet blob is {len(data)} bytes, expected {expected}")
    patches = [
        unpack_patch(data, MAPLET_HEADER_BYTES + k * PATCH_RECORD_BYTES) for k in range(count)
    ]
    return agent, index, patches


def should_create_keyframe(motion_since_last: Pose3) -> bool:
    """Large view change: 0.5 m of travel or 15 degrees of rotation."""
    # tolerance absorbs float drift from summing equal frame steps
    trans = float(np.linalg.norm(motion_since_last.p))
    rot = rotation_angle(motion_since_last.R)
    return trans >= KEYFRAME_TRANSLATION - 1e-9 or rot >= KEYFRAME_ROTATION - 1e-9


def transform_patch(T: Pose3, patch: PlanarPatch) -> PlanarPatch:
    return PlanarPatch(
        transform_plane(T, patch.plane), T.apply(patch.corners), patch.rms, patch.support
    )


def face_observer(patch: PlanarPatch, observer) -> PlanarPatch:
    """Orient the patch normal toward the side its observer was on."""
    if patch.plane.signed_distance(observer) < 0:
        return PlanarPatch(patch.plane.flipped(), patch.corners[::-1].copy(), patch.rms, patch.support)
    return patch


class PatchSet:
    """Incrementally deduplicated patch collection in a single frame.

    A patch is merged into an existing one when their planes agree within
    2 degrees and 2 cm and their bounding boxes overlap or nearly touch.
    With ``tile`` set, patches are first cut along a square grid of that
    pitch laid out in each plane, and only pieces in the same cell merge, so
    large surfaces stay split into spatially local patches.
    """

    def __init__(self, patches=(), tile: float | None = None):
        self.tile = tile
        self.patches: list[PlanarPatch] = []
        self._vec = np.zeros((0, 4))
        self._lo = np.zeros((0, 3))
        self._hi = np.zeros((0, 3))
        self._cells: list = []
        for p in patches:
            self.add(p)

    def __len__(self):
        return len(self.patches)

    def copy(self) -> "PatchSet":
        out = PatchSet(tile=self.tile)
        out.patches = list(self.patches)
        out._cells = list(self._cells)
        out._vec, out._lo, out._hi = self._vec.copy(), self._lo.copy(), self._hi.copy()
        return out

    def _match(self, patch: PlanarPatch, cell) -> int:
        if not self.patches:
            return -1
        v = patch.plane.vector
        dots = self._vec[:, :3] @ v[:3]
        ok = dots >= math.cos(MERGE_ANGLE)
        ok &= np.abs(self._vec[:, 3] - v[3]) <= MERGE_OFFSET
        if cell is None:
            lo, hi = patch.corners.min(axis=0), patch.corners.max(axis=0)
            gap = np.maximum(self._lo - hi, lo - self._hi).max(axis=1)
            ok &= gap <= MERGE_GAP
        else:
            ok &= np.array([c == cell for c in self._cells])
        hits = np.nonzero(ok)[0]
        return int(hits[0]) if len(hits) else -1

    def add(self, patch: PlanarPatch) -> None:
        if self.tile is None:
            self._add(patch, None)
            return
        for cell, piece in tile_patch(patch, self.tile):
            self._add(piece, cell)

    def _add(self, patch: PlanarPatch, cell) -> None:
        k = self._match(patch, cell)
        if k < 0:
            self.patches.append(patch)
            self._cells.append(cell)
            self._vec = np.vstack([self._vec, patch.plane.vector])
            self._lo = np.vstack([self._lo, patch.corners.min(axis=0)])
            self._hi = np.vstack([self._hi, patch.corners.max(axis=0)])
            return
        merged = merge_patches(self.patches[k], patch)
        self.patches[k] = merged
        self._vec[k] = merged.plane.vector
        self._lo[k] = merged.corners.min(axis=0)
        self._hi[k] = merged.corners.max(axis=0)


def _tile_axes(n: np.ndarray) -> tuple[bool, np.ndarray, np.ndarray]:
    # gravity-aligned grid: stable under small yaw or tilt perturbations
    level = abs(n[2]) > 0.7
    ref = np.array([1.0, 0.0, 0.0]) if level else np.cross([0.0, 0.0, 1.0], n)
    e1 = ref - (ref @ n) * n
    e1 /= np.linalg.norm(e1)
    return level, e1, np.cross(n, e1)


def tile_patch(patch: PlanarPatch, size: float) -> list[tuple[tuple, PlanarPatch]]:
    """Cut a patch along a ``size``-pitch grid laid out in its plane.

    The grid runs along gravity-aligned in-plane axes.  Pieces narrower
    than :data:`MIN_PIECE` are dropped and support is shared out in
    proportion to area.  Returns ``(cell, piece)`` pairs.
    """
    plane = patch.plane
    level, e1, e2 = _tile_axes(plane.n)
    origin = -plane.d * plane.n
    rel = patch.corners - origin
    s, t = rel @ e1, rel @ e2
    s0, s1, t0, t1 = s.min(), s.max(), t.min(), t.max()
    total = max((s1 - s0) * (t1 - t0), 1e-12)
    out = []
    for i in range(math.floor(s0 / size), math.floor(s1 / size) + 1):
        a0, a1 = max(s0, i * size), min(s1, (i + 1) * size)
        if a1 - a0 < MIN_PIECE:
            continue
        for j in range(math.floor(t0 / size), math.floor(t1 / size) + 1):
            b0, b1 = max(t0, j * size), min(t1, (j + 1) * size)
            if b1 - b0 < MIN_PIECE:
                continue
            uv = ((a0, b0), (a1, b0), (a1, b1), (a0, b1))
            corners = np.array([origin + a * e1 + b * e2 for a, b in uv])
            support = max(4, int(round(patch.support * (a1 - a0) * (b1 - b0) / total)))
            out.append(((level, i, j), PlanarPatch(plane, corners, patch.rms, support)))
    return out


def merge_patches(a: PlanarPatch, b: PlanarPatch) -> PlanarPatch:
    wa, wb = float(a.support), float(b.support)
    vec = (wa * a.plane.vector + wb * b.plane.vector) / (wa + wb)
    plane = plane_from_vector(vec)
    corners = rectangle_corners(plane, np.vstack([a.corners, b.corners]))
    rms = math.sqrt((wa * a.rms**2 + wb * b.rms**2) / (wa + wb))
    return PlanarPatch(plane, corners, rms, a.support + b.support)


def aggregate_keyframe(
    frames, keyframe_id: int = 0, timestamp: float = 0.0, raw_bytes: int = 0
) -> Keyframe:
    """Fuse per-frame patch sets into one keyframe.

    ``frames`` is a sequence of ``(patches, sensor_pose)`` where
    ``sensor_pose`` maps that frame's sensor coordinates into the keyframe
    frame.  Patches are oriented toward the sensor that saw them and
    near-duplicates are merged with their support summed.
    """
    if not frames:
        raise ValueError("aggregate_keyframe needs at least one frame")
    merged = PatchSet()
    for patches, pose in frames:
        for p in patches:
            merged.add(face_observer(transform_patch(pose, p), pose.p))
    return Keyframe(keyframe_id, Pose3.identity(), merged.patches, timestamp, raw_bytes)


class KeyframeTracker:
    """Per-agent accumulator turning tracked frames into a keyframe chain.

    ``odometry`` converts the tracked body motion between keyframes into the
    edge measurement stored in the graph; the simulator injects noise there.
    """

    def __init__(
        self,
        agent: int,
        extrinsic: Pose3,
        odometry: Callable[[Pose2], Pose2] | None = None,
        covariance: Callable[[Pose2], np.ndarray] | None = None,
    ):
        self.agent = agent
        self.extrinsic = extrinsic
        self.odometry = odometry or (lambda m: m)
        self.covariance = covariance or (lambda m: np.diag([0.02**2, 0.02**2, math.radians(0.5) ** 2]))
        self.graph = MapletGraph(agent)
        self._pending: list = []
        self._kf_time = 0.0
        self._kf_raw = 0

    def add_frame(self, timestamp: float, patches, motion_since_keyframe: Pose3, raw_bytes: int = 0) -> bool:
        """Feed one frame; returns True when it started a new keyframe."""
        started = False
        if not self._pending and not self.graph.keyframes:
            started = True
        elif should_create_keyframe(motion_since_keyframe):
            self._close_keyframe()
            true_motion = project_se2(motion_since_keyframe)
            measured = self.odometry(true_motion)
            self.graph.edges.append((lift_se2(measured), self.covariance(measured)))
            started = True
            motion_since_keyframe = Pose3.identity()
        if started:
            self._kf_time = timestamp
            self._kf_raw = raw_bytes
        self._pending.append((patches, motion_since_keyframe @ self.extrinsic))
        return started

    def _close_keyframe(self):
        if self._pending:
            kf = aggregate_keyframe(
                self._pending, len(self.graph.keyframes), self._kf_time, self._kf_raw
            )
            self.graph.keyframes.append(kf)
        self._pending = []

    def finish(self) -> MapletGraph:
        self._close_keyframe()
        return self.graph


def _edge_yaw(delta: Pose3) -> float:
    return abs(yaw_pitch_roll(delta.R)[0])


def decompose_to_maplets(
    g: MapletGraph,
    kappa_max: float = DEFAULT_KAPPA_MAX,
    size_cap: int = DEFAULT_SIZE_CAP,
    tile: float | None = MAPLET_TILE,
) -> list[Maplet]:
    """Cut a keyframe chain into overlapping maplets by accumulated yaw.

    Keyframes are appended to the current maplet while the accumulated
    absolute yaw change stays strictly below ``kappa_max`` (and the maplet
    stays under ``size_cap`` bytes).  The last accepted keyframe opens the next
    maplet, so neighbours share exactly one keyframe.  A maplet always takes
    at least one edge so the traversal makes progress.
    """
    if not g.keyframes:
        raise EmptyGraph("keyframe graph has no nodes")
    if not kappa_max > 0:
        raise ValueError("kappa_max must be positive")
    poses = g.poses()
    n = len(g.keyframes)
    maplets: list[Maplet] = []
    start = 0
    while True:
        root_inv = poses[start].inverse()
        members = [start]
        planes = PatchSet(g.keyframes[start].patches, tile=tile)
        span = 0.0
        end = start + 1
        while end < n:
            step = _edge_yaw(g.edges[end - 1][0])
            candidate = planes.copy()
            rel = root_inv @ poses[end]
            for p in g.keyframes[end].patches:
                candidate.add(transform_patch(rel, p))
            grew = len(members) >= 2
            if grew and (span + step >= kappa_max or maplet_size(len(candidate)) > size_cap):
                break
            members.append(end)
            planes = candidate
            span += step
            end += 1
        maplets.append(_make_maplet(g, len(maplets), members, poses, planes.patches, span))
        if end >= n:
            break
        start = members[-1]
    return maplets


def _make_maplet(g, index, members, poses, planes, span) -> Maplet:
    root = poses[members[0]]
    root_inv = root.inverse()
    kfs = [replace(g.keyframes[k], pose_in_maplet=root_inv @ poses[k]) for k in members]
    m = Maplet(
        agent=g.agent,
        index=index,
        keyframes=kfs,
        planes=list(planes),
        origin_hint=f"keyframe {g.keyframes[members[0]].id}",
        salience=0.0,
        yaw_span=span,
        origin_keyframe=g.keyframes[members[0]].id,
        origin_pose=root,
    )
    m.salience = salience_score(m)
    return m


def odometry_delta(g: MapletGraph, a: Maplet, b: Maplet) -> tuple[Pose2, np.ndarray]:
    """Chained odometry from maplet ``a``'s origin to ``b``'s, with covariance."""
    i0, i1 = a.origin_keyframe, b.origin_keyframe
    pose, cov = Pose2.identity(), np.zeros((3, 3))
    for k in range(i0, i1):
        delta, c = g.edges[k]
        pose, cov = compose_with_covariance(pose, cov, project_se2(delta), c)
    return pose, cov


def salience_score(m: Maplet) -> float:
    """Count distinct normal directions among patches near the trajectory ends.

    Patches count when their centroid is within 1 m (ground-plane distance)
    of the first or last keyframe; normals are greedily clustered at 15
    degrees, largest support first.
    """
    if not m.keyframes or not m.planes:
        return 0.0
    traj = m.trajectory()
    ends = np.array([traj[0, :2], traj[-1, :2]])
    near = []
    for p in m.planes:
        c = p.centroid[:2]
        if np.min(np.linalg.norm(ends - c, axis=1)) <= SALIENCE_RADIUS:
            near.append(p)
    near.sort(key=lambda p: -p.support)
    reps: list[np.ndarray] = []
    cos_lim = math.cos(SALIENCE_CLUSTER)
    for p in near:
        if not any(float(r @ p.plane.n) >= cos_lim for r in reps):
            reps.append(p.plane.n)
    return float(len(reps))
