"""Synthetic scenes for tests: patches, plane sets and hand-built maplets."""

import math

import numpy as np

from maplets.builder import Keyframe, Maplet
from maplets.extraction import PlanarPatch, rectangle_corners
from maplets.geometry import PlaneHNF, Pose3, rot_z, transform_plane

from oracles import hom


def patch(n, d, center, half=0.4, support=100) -> PlanarPatch:
    """Square patch of side ``2*half`` on plane (n, d) around the projection of ``center``."""
    plane = PlaneHNF(np.asarray(n, dtype=float) / np.linalg.norm(n), d)
    c = plane.project(np.asarray(center, dtype=float)[None])[0]
    e = np.cross(plane.n, [0, 0, 1.0])
    if np.linalg.norm(e) < 0.1:
        e = np.cross(plane.n, [1.0, 0, 0])
    e /= np.linalg.norm(e)
    f = np.cross(plane.n, e)
    pts = [c + half * (a * e + b * f) for a in (-1, 1) for b in (-1, 1)]
    return PlanarPatch(plane, rectangle_corners(plane, pts), 0.005, support)


def corridor_corner():
    """Patches of a corridor running along x that turns into +y at x in [3, 5]."""
    return [
        patch((0, 0, 1), 0.0, (2, 0, 0)),  # floor
        patch((0, 0, -1), 2.5, (2, 0, 2.5)),  # ceiling
        patch((0, 1, 0), 1.0, (2, -1, 1)),  # right wall y = -1
        patch((0, -1, 0), 1.0, (1.5, 1, 1)),  # left wall y = 1
        patch((-1, 0, 0), 5.0, (5, 0, 1)),  # end wall x = 5
        patch((1, 0, 0), -3.0, (3, 2, 1)),  # side-corridor wall x = 3
    ]


def box_room(half=2.0, height=2.5):
    """Square room centred on the origin: symmetric under a half turn."""
    return [
        patch((0, 0, 1), 0.0, (0, 0, 0)),
        patch((0, 0, -1), height, (0, 0, height)),
        patch((1, 0, 0), half, (-half, 0, 1)),
        patch((-1, 0, 0), half, (half, 0, 1)),
        patch((0, 1, 0), half, (0, -half, 1)),
        patch((0, -1, 0), half, (0, half, 1)),
    ]


def move_patches(T: Pose3, patches):
    """Express patches given in frame W in a frame whose pose in W is ``T``."""
    inv = T.inverse()
    return [PlanarPatch(transform_plane(inv, p.plane), inv.apply(p.corners), p.rms, p.support) for p in patches]


def make_maplet(agent, index, patches, salience=3.0) -> Maplet:
    kf = Keyframe(0, Pose3.identity(), list(patches), 0.0)
    return Maplet(agent, index, [kf], list(patches), "test", salience, 0.0)


def yaw_pose(x, y, yaw_deg) -> Pose3:
    return Pose3(rot_z(math.radians(yaw_deg)), [x, y, 0.0])


def overlap_scene(rng, shared=8, private=2, noise=2e-4):
    """Two plane sets seeing a common structure plus a few surfaces only one side saw.

    Returns ``(planes_a, planes_b_world)`` in the world frame; same-normal
    planes are kept at least 1.5 m apart so the correct match is unambiguous
    for offsets up to 0.5 m.
    """
    axes = [(0, 0, 1), (0, 0, -1), (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0)]
    yaw = rng.uniform(-math.pi, math.pi)
    R = rot_z(yaw)
    offsets: dict = {}

    def plane(axis):
        used = offsets.setdefault(axis, [])
        while True:
            d = rng.uniform(-6, 6)
            if all(abs(d - u) >= 1.5 for u in used):
                used.append(d)
                break
        n = R @ np.asarray(axis, dtype=float)
        return np.array([*n, d])

    order = [axes[k % 6] for k in range(shared + 2 * private)]
    rng.shuffle(order)
    vecs = [plane(a) for a in order]
    common, only_a, only_b = vecs[:shared], vecs[shared : shared + private], vecs[shared + private :]

    def noisy(v):
        w = v + rng.normal(0, noise, 4)
        w[:3] /= np.linalg.norm(w[:3])
        return PlaneHNF(w[:3], w[3])

    a = [noisy(v) for v in common + only_a]
    b = [noisy(v) for v in common + only_b]
    return a, b


def planes_in_frame(T: Pose3, planes):
    inv = T.inverse()
    return [transform_plane(inv, p) for p in planes]


def transform_error(A: Pose3, B: Pose3) -> tuple[float, float]:
    """Translation (m) and rotation (rad) distance between two poses."""
    E = np.linalg.inv(hom(A.R, A.p)) @ hom(B.R, B.p)
    cos = np.clip((np.trace(E[:3, :3]) - 1) / 2, -1, 1)
    return float(np.linalg.norm(E[:3, 3])), float(math.acos(cos))
