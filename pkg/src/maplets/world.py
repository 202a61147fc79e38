"""Synthetic indoor worlds: floorplans, trajectories, depth rendering, odometry.

Everything here is ground truth.  Estimation code only ever sees the rendered
frames and the noisy odometry produced by :func:`noisy_odometry`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .extraction import DepthFrame
from .geometry import Pose2, Pose3, rot_z, wrap_angle

DEFAULT_MAX_RANGE = 8.0
MIN_CLEARANCE = 0.2

# camera axes (x right, y down, z forward) expressed in the body frame
# (x forward, y left, z up)
CAMERA_IN_BODY = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


@dataclass(frozen=True)
class Rect3:
    """Planar rectangle ``origin + s*u + t*v`` for s, t in [0, 1]."""

    origin: tuple
    u: tuple
    v: tuple

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.u, self.v)
        return n / np.linalg.norm(n)


@dataclass(frozen=True)
class Wall:
    x0: float
    y0: float
    x1: float
    y1: float
    z0: float = 0.0
    z1: float = 2.5

    def rect(self) -> Rect3:
        return Rect3(
            (self.x0, self.y0, self.z0),
            (self.x1 - self.x0, self.y1 - self.y0, 0.0),
            (0.0, 0.0, self.z1 - self.z0),
        )


@dataclass(frozen=True)
class Box:
    """Axis-aligned cuboid standing on the floor (cabinets, pillars, crates)."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float
    height: float

    def rects(self) -> list[Rect3]:
        x0, y0, x1, y1, h = self.xmin, self.ymin, self.xmax, self.ymax, self.height
        sides = [
            Wall(x0, y0, x1, y0, 0.0, h),
            Wall(x1, y0, x1, y1, 0.0, h),
            Wall(x1, y1, x0, y1, 0.0, h),
            Wall(x0, y1, x0, y0, 0.0, h),
        ]
        top = Rect3((x0, y0, h), (x1 - x0, 0.0, 0.0), (0.0, y1 - y0, 0.0))
        return [w.rect() for w in sides] + [top]


@dataclass
class FloorPlan:
    walls: list[Wall]
    bounds: tuple  # (xmin, ymin, xmax, ymax)
    ceiling_height: float = 2.5
    boxes: list[Box] = field(default_factory=list)

    def rectangles(self) -> list[Rect3]:
        xmin, ymin, xmax, ymax = self.bounds
        span = (xmax - xmin, 0.0, 0.0), (0.0, ymax - ymin, 0.0)
        rects = [
            Rect3((xmin, ymin, 0.0), *span),
            Rect3((xmin, ymin, self.ceiling_height), *span),
        ]
        rects += [w.rect() for w in self.walls]
        for b in self.boxes:
            rects += b.rects()
        return rects

    def obstacle_segments(self) -> np.ndarray:
        """2D footprint segments of walls and boxes, shape (n, 4)."""
        segs = [(w.x0, w.y0, w.x1, w.y1) for w in self.walls]
        for b in self.boxes:
            segs += [
                (b.xmin, b.ymin, b.xmax, b.ymin),
                (b.xmax, b.ymin, b.xmax, b.ymax),
                (b.xmax, b.ymax, b.xmin, b.ymax),
                (b.xmin, b.ymax, b.xmin, b.ymin),
            ]
        return np.array(segs, dtype=float).reshape(-1, 4)

    def clearance(self, xy) -> float:
        segs = self.obstacle_segments()
        p = np.asarray(xy, dtype=float)
        a, b = segs[:, :2], segs[:, 2:]
        ab = b - a
        t = np.clip(np.einsum("ij,ij->i", p - a, ab) / np.einsum("ij,ij->i", ab, ab), 0, 1)
        closest = a + t[:, None] * ab
        inside = [
            bx.xmin < p[0] < bx.xmax and bx.ymin < p[1] < bx.ymax for bx in self.boxes
        ]
        if any(inside):
            return 0.0
        return float(np.min(np.linalg.norm(closest - p, axis=1)))


def corridor_floorplan(
    segments,
    width: float = 2.0,
    cell: float = 0.5,
    ceiling_height: float = 2.5,
    boxes=(),
) -> FloorPlan:
    """Walls bounding the union of axis-aligned corridor strips.

    ``segments`` are centerline segments ``((x0, y0), (x1, y1))``.  The free
    space is rasterised on a ``cell`` grid and its boundary edges are merged
    into maximal wall segments, which keeps every junction watertight.
    """
    half = width / 2.0
    rects = []
    for (x0, y0), (x1, y1) in segments:
        if x0 != x1 and y0 != y1:
            raise ValueError("corridor segments must be axis-aligned")
        rects.append(
            (min(x0, x1) - half, min(y0, y1) - half, max(x0, x1) + half, max(y0, y1) + half)
        )
    xmin = min(r[0] for r in rects) - cell
    ymin = min(r[1] for r in rects) - cell
    xmax = max(r[2] for r in rects) + cell
    ymax = max(r[3] for r in rects) + cell
    nx = int(round((xmax - xmin) / cell))
    ny = int(round((ymax - ymin) / cell))
    free = np.zeros((nx, ny), dtype=bool)
    for rx0, ry0, rx1, ry1 in rects:
        i0, i1 = int(round((rx0 - xmin) / cell)), int(round((rx1 - xmin) / cell))
        j0, j1 = int(round((ry0 - ymin) / cell)), int(round((ry1 - ymin) / cell))
        free[i0:i1, j0:j1] = True

    walls = []
    # vertical walls: boundaries between columns i-1 and i
    for i in range(1, nx):
        edge = free[i - 1] != free[i]
        walls += _runs(edge, lambda j0, j1, i=i: Wall(
            xmin + i * cell, ymin + j0 * cell, xmin + i * cell, ymin + j1 * cell, 0.0, ceiling_height
        ))
    for j in range(1, ny):
        edge = free[:, j - 1] != free[:, j]
        walls += _runs(edge, lambda i0, i1, j=j: Wall(
            xmin + i0 * cell, ymin + j * cell, xmin + i1 * cell, ymin + j * cell, 0.0, ceiling_height
        ))
    return FloorPlan(walls, (xmin, ymin, xmax, ymax), ceiling_height, list(boxes))


def _runs(mask, make):
    out, start = [], None
    for k, on in enumerate(list(mask) + [False]):
        if on and start is None:
            start = k
        elif not on and start is not None:
            out.append(make(start, k))
            start = None
    return out


@dataclass(frozen=True)
class Intrinsics:
    width: int = 160
    height: int = 120
    fx: float = 100.0
    fy: float = 100.0
    cx: float | None = None
    cy: float | None = None

    @property
    def principal(self) -> tuple[float, float]:
        cx = self.width / 2.0 if self.cx is None else self.cx
        cy = self.height / 2.0 if self.cy is None else self.cy
        return cx, cy


def camera_pose(body: Pose2, sensor_height: float) -> Pose3:
    """World pose of the camera mounted level at ``sensor_height`` on the body."""
    R = rot_z(body.theta) @ CAMERA_IN_BODY
    return Pose3(R, [body.x, body.y, sensor_height])


def camera_extrinsic(sensor_height: float) -> Pose3:
    """Camera-to-body transform."""
    return Pose3(CAMERA_IN_BODY, [0.0, 0.0, sensor_height])


def render_depth(
    plan: FloorPlan,
    pose: Pose3,
    intrinsics: Intrinsics = Intrinsics(),
    max_range: float = DEFAULT_MAX_RANGE,
) -> DepthFrame:
    """Ray-cast a range image of ``plan`` from camera pose ``pose`` (camera-to-world)."""
    cx, cy = intrinsics.principal
    frame = DepthFrame(
        intrinsics.width,
        intrinsics.height,
        np.full((intrinsics.height, intrinsics.width), np.nan),
        intrinsics.fx,
        intrinsics.fy,
        cx,
        cy,
    )
    rays = frame.ray_directions().reshape(-1, 3) @ pose.R.T
    origin = pose.p
    best = np.full(len(rays), np.inf)
    for rect in plan.rectangles():
        o, u, v = (np.asarray(a, dtype=float) for a in (rect.origin, rect.u, rect.v))
        n = np.cross(u, v)
        denom = rays @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((o - origin) @ n) / denom
        ok = np.abs(denom) > 1e-12
        ok &= t > 1e-9
        ok &= t < best
        if not ok.any():
            continue
        idx = np.nonzero(ok)[0]
        hit = origin + rays[idx] * t[idx, None] - o
        s = hit @ u / (u @ u)
        w = hit @ v / (v @ v)
        inside = (s >= 0) & (s <= 1) & (w >= 0) & (w <= 1)
        best[idx[inside]] = t[idx[inside]]
    best[best > max_range] = np.nan
    best[~np.isfinite(best)] = np.nan
    frame.depth = best.reshape(intrinsics.height, intrinsics.width)
    return frame


@dataclass
class TrajectorySpec:
    waypoints: list  # 2D points
    speed: float = 0.5
    turn_rate: float = math.radians(37.5)
    sensor_height: float = 1.0
    frame_rate: float = 5.0
    speeds: list | None = None  # optional per-segment override

    def sample(self) -> list[tuple[float, Pose2]]:
        """Frame timestamps and body poses: straight runs, in-place turns at waypoints."""
        pts = [np.asarray(w, dtype=float) for w in self.waypoints]
        if len(pts) < 2:
            heading = 0.0
            return [(0.0, Pose2(pts[0][0], pts[0][1], heading))]
        dt = 1.0 / self.frame_rate
        d0 = pts[1] - pts[0]
        heading = math.atan2(d0[1], d0[0])
        pos = pts[0].copy()
        t = 0.0
        out = [(t, Pose2(pos[0], pos[1], heading))]
        for k in range(1, len(pts)):
            delta = pts[k] - pts[k - 1]
            target = math.atan2(delta[1], delta[0])
            turn = wrap_angle(target - heading)
            step = self.turn_rate * dt
            n_turn = int(math.ceil(abs(turn) / step - 1e-9))
            for i in range(1, n_turn + 1):
                t += dt
                h = heading + turn * i / n_turn
                out.append((t, Pose2(pos[0], pos[1], h)))
            heading = target
            speed = self.speeds[k - 1] if self.speeds else self.speed
            length = float(np.linalg.norm(delta))
            n_move = int(math.ceil(length / (speed * dt) - 1e-9))
            for i in range(1, n_move + 1):
                t += dt
                p = pts[k - 1] + delta * (i / n_move)
                out.append((t, Pose2(p[0], p[1], heading)))
            pos = pts[k].copy()
        return out


def check_free_space(plan: FloorPlan, poses, margin: float = MIN_CLEARANCE) -> None:
    for pose in poses:
        c = plan.clearance([pose.x, pose.y])
        if c < margin:
            raise ValueError(
                f"trajectory sample ({pose.x:.2f}, {pose.y:.2f}) is {c:.3f} m from an obstacle"
            )


def odometry_sigmas(delta: Pose2) -> np.ndarray:
    """Per-edge 1-sigma odometry noise (x, y, theta)."""
    dist = math.hypot(delta.x, delta.y)
    s_xy = 0.02 + 0.01 * dist
    s_th = math.radians(0.5) + 0.02 * abs(delta.theta)
    return np.array([s_xy, s_xy, s_th])


def odometry_covariance(delta: Pose2) -> np.ndarray:
    return np.diag(odometry_sigmas(delta) ** 2)


def noisy_odometry(true_motion: Pose2, rng, scale: float = 1.0) -> Pose2:
    """Perturb a relative motion with the odometry noise model.

    ``rng`` may be a ``numpy.random.Generator`` or an integer seed.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    noise = rng.standard_normal(3) * odometry_sigmas(true_motion) * scale
    return Pose2(true_motion.x + noise[0], true_motion.y + noise[1], true_motion.theta + noise[2])


@dataclass
class AgentTruth:
    """Ground-truth record of one agent's run."""

    spawn: Pose2
    keyframe_poses: dict = field(default_factory=dict)  # keyframe id -> Pose2
    maplet_origins: list = field(default_factory=list)  # keyframe id per maplet index


@dataclass
class WorldRun:
    agents: dict = field(default_factory=dict)  # agent id -> AgentTruth


def ground_truth_maplet_origins(run: WorldRun) -> dict:
    """World pose of every maplet origin keyed by ``(agent, maplet index)``.

    For evaluation only.
    """
    out = {}
    for agent, truth in sorted(run.agents.items()):
        if not truth.maplet_origins:
            out[(agent, 0)] = truth.spawn
        for j, kf in enumerate(truth.maplet_origins):
            out[(agent, j)] = truth.keyframe_poses[kf]
    return out
