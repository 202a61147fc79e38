"""Depth frames and quadtree extraction of planar patches.

A depth frame is split recursively into image quads.  A quad whose points fit
a plane within ``eps_fit`` (rms orthogonal distance) becomes a patch; quads
that fail are split until they reach 8x8 pixels.  Adjacent coplanar patches
are merged and the result is clamped to a patch budget.

Plane fits for every quad come from summed-area tables of the point moments,
so each fit costs one 3x3 eigen-decomposition regardless of quad size.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateGeometry, EmptyFrame
from .geometry import PlaneHNF, canonicalize_plane, plane_basis

DEFAULT_EPS_FIT = 0.02
DEFAULT_MAX_PATCHES = 64
LEAF_SIZE = 8
MIN_VALID_FRACTION = 0.75
MERGE_ANGLE = math.radians(2.0)
MERGE_OFFSET = 0.02
EXPLAINED_FRACTION = 0.9
# worst point may sit this many eps_fit off the fitted plane
MAX_RESIDUAL_RATIO = 1.0
# relative range change between neighbouring pixels treated as an occlusion edge
DEPTH_JUMP = 0.15
# a patch must spread at least this many eps_fit along its narrow in-plane axis
MIN_WIDTH_RATIO = 3.0
# regions seen closer than this to edge-on give poorly conditioned fits
MAX_INCIDENCE = math.radians(75.0)

POINT_BYTES = 12  # x, y, z as little-endian f32
_FRAME_HEADER = struct.Struct("<IIffff")
# plane (4 f32), corners (12 f32), rms (f32), support (u32)
_PATCH_RECORD = struct.Struct("<17fI")
PATCH_RECORD_BYTES = _PATCH_RECORD.size


@dataclass(eq=False)
class DepthFrame:
    """Pinhole depth image; ``depth[r, c]`` is the range along the pixel ray in meters."""

    width: int
    height: int
    depth: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        depth = np.asarray(self.depth, dtype=float)
        if depth.size != self.width * self.height:
            raise ValueError(
                f"depth has {depth.size} values, expected {self.width}x{self.height}"
            )
        self.depth = depth.reshape(self.height, self.width)
        bad = np.isfinite(self.depth) & (self.depth <= 0)
        if bad.any():
            raise ValueError("depth values must be positive or NaN")

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.depth)

    def ray_directions(self) -> np.ndarray:
        """Unit ray direction for every pixel, shape (height, width, 3)."""
        cols = (np.arange(self.width) - self.cx) / self.fx
        rows = (np.arange(self.height) - self.cy) / self.fy
        u, v = np.meshgrid(cols, rows)
        rays = np.stack([u, v, np.ones_like(u)], axis=-1)
        return rays / np.linalg.norm(rays, axis=-1, keepdims=True)

    def points(self) -> np.ndarray:
        """Back-projected points (height, width, 3); NaN where there is no return."""
        return self.ray_directions() * self.depth[..., None]

    def valid_points(self) -> np.ndarray:
        pts = self.points()
        return pts[self.valid]

    def point_cloud_bytes(self) -> int:
        return int(self.valid.sum()) * POINT_BYTES

    def to_bytes(self) -> bytes:
        header = _FRAME_HEADER.pack(
            self.width, self.height, self.fx, self.fy, self.cx, self.cy
        )
        return header + self.depth.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "DepthFrame":
        width, height, fx, fy, cx, cy = _FRAME_HEADER.unpack_from(data, 0)
        expected = _FRAME_HEADER.size + 4 * width * height
        if len(data) != expected:
            raise ValueError(f"depth frame blob is {len(data)} bytes, expected {expected}")
        depth = np.frombuffer(data, dtype="<f4", offset=_FRAME_HEADER.size)
        return cls(width, height, depth.astype(float), fx, fy, cx, cy)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "DepthFrame":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass(eq=False)
class PlanarPatch:
    plane: PlaneHNF
    corners: np.ndarray
    rms: float
    support: int

    def __post_init__(self):
        self.corners = np.asarray(self.corners, dtype=float).reshape(4, 3)

    @property
    def centroid(self) -> np.ndarray:
        return self.corners.mean(axis=0)

    @property
    def area(self) -> float:
        a = self.corners[1] - self.corners[0]
        b = self.corners[3] - self.corners[0]
        return float(np.linalg.norm(np.cross(a, b)))


def rectangle_corners(plane: PlaneHNF, points) -> np.ndarray:
    """Bounding rectangle of ``points`` projected onto ``plane``.

    Corners are counter-clockwise when viewed against the normal.
    """
    e1, e2 = plane_basis(plane.n)
    pts = plane.project(np.asarray(points, dtype=float).reshape(-1, 3))
    origin = -plane.d * plane.n
    rel = pts - origin
    s, t = rel @ e1, rel @ e2
    s0, s1, t0, t1 = s.min(), s.max(), t.min(), t.max()
    uv = [(s0, t0), (s1, t0), (s1, t1), (s0, t1)]
    return np.array([origin + a * e1 + b * e2 for a, b in uv])


def _fit_from_scatter(count: int, mean: np.ndarray, scatter: np.ndarray):
    if count < 4:
        raise DegenerateGeometry(f"plane fit needs at least 4 points, got {count}")
    evals, evecs = np.linalg.eigh(scatter)
    scale = max(float(evals[2]), np.finfo(float).tiny)
    if evals[1] <= 1e-10 * scale:
        raise DegenerateGeometry("points are collinear; plane is undetermined")
    n = evecs[:, 0]
    plane = canonicalize_plane([n[0], n[1], n[2], -float(n @ mean)])
    rms = math.sqrt(max(float(evals[0]), 0.0) / count)
    return plane, rms


def fit_plane_lsq(points) -> tuple[PlaneHNF, float]:
    """Total least-squares plane through ``points``.

    Returns the canonical (negative-z) plane and the rms orthogonal distance.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    mean = pts.mean(axis=0) if len(pts) else np.zeros(3)
    centered = pts - mean
    return _fit_from_scatter(len(pts), mean, centered.T @ centered)


class _Jumps:
    """Summed-area tables of occlusion edges between neighbouring pixels."""

    def __init__(self, depth: np.ndarray):
        with np.errstate(invalid="ignore"):
            h = np.abs(np.diff(depth, axis=1)) > DEPTH_JUMP * np.fmin(depth[:, 1:], depth[:, :-1])
            v = np.abs(np.diff(depth, axis=0)) > DEPTH_JUMP * np.fmin(depth[1:], depth[:-1])
        self.h = _sat(h)
        self.v = _sat(v)

    def any(self, r0, r1, c0, c1) -> bool:
        # horizontal edges live between columns c and c+1, vertical between rows
        return _box(self.h, r0, r1, c0, c1 - 1) > 0 or _box(self.v, r0, r1 - 1, c0, c1) > 0


def _sat(a: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0] + 1, a.shape[1] + 1) + a.shape[2:])
    out[1:, 1:] = a.cumsum(axis=0).cumsum(axis=1)
    return out


def _box(s: np.ndarray, r0, r1, c0, c1):
    if r1 <= r0 or c1 <= c0:
        return 0.0
    return s[r1, c1] - s[r0, c1] - s[r1, c0] + s[r0, c0]


class _Moments:
    """Summed-area tables of count, first and second point moments."""

    def __init__(self, points: np.ndarray, valid: np.ndarray):
        p = np.where(valid[..., None], points, 0.0)
        x, y, z = p[..., 0], p[..., 1], p[..., 2]
        chans = np.stack(
            [valid.astype(float), x, y, z, x * x, x * y, x * z, y * y, y * z, z * z],
            axis=-1,
        )
        self.sat = _sat(chans)

    def region(self, r0, r1, c0, c1) -> np.ndarray:
        return _box(self.sat, r0, r1, c0, c1)


def _scatter_of(m: np.ndarray):
    count = m[0]
    mean = m[1:4] / count
    xx, xy, xz, yy, yz, zz = m[4:10]
    second = np.array([[xx, xy, xz], [xy, yy, yz], [xz, yz, zz]])
    return int(round(count)), mean, second - count * np.outer(mean, mean)


def _fit_moments(m: np.ndarray):
    count, mean, scatter = _scatter_of(m)
    return _fit_from_scatter(count, mean, scatter)


@dataclass
class _Region:
    r0: int
    r1: int
    c0: int
    c1: int
    moments: np.ndarray
    plane: PlaneHNF
    rms: float


def _touch(a: _Region, b: _Region) -> bool:
    rows = min(a.r1, b.r1) > max(a.r0, b.r0)
    cols = min(a.c1, b.c1) > max(a.c0, b.c0)
    if rows and (a.c1 == b.c0 or b.c1 == a.c0):
        return True
    return cols and (a.r1 == b.r0 or b.r1 == a.r0)


def planes_similar(a: PlaneHNF, b: PlaneHNF, angle=MERGE_ANGLE, offset=MERGE_OFFSET) -> bool:
    """Coplanarity test that ignores orientation."""
    dot = float(a.n @ b.n)
    sign = 1.0 if dot >= 0 else -1.0
    ang = math.acos(min(1.0, abs(dot)))
    return ang <= angle and abs(a.d - sign * b.d) <= offset


def _split_ranges(lo: int, hi: int) -> list[tuple[int, int]]:
    if hi - lo <= LEAF_SIZE:
        return [(lo, hi)]
    mid = (lo + hi) // 2
    return [(lo, mid), (mid, hi)]


@dataclass
class _Group:
    members: list = field(default_factory=list)
    moments: np.ndarray = None
    plane: PlaneHNF = None
    rms: float = 0.0


def quadtree_extract(
    frame: DepthFrame,
    eps_fit: float = DEFAULT_EPS_FIT,
    max_patches: int = DEFAULT_MAX_PATCHES,
) -> list[PlanarPatch]:
    """Extract at most ``max_patches`` planar patches from ``frame``.

    Patches are returned in sensor coordinates, largest support first, with
    canonical (negative-z) plane signs.
    """
    if not eps_fit > 0:
        raise ValueError("eps_fit must be positive")
    if max_patches < 1:
        raise ValueError("max_patches must be at least 1")
    valid = frame.valid
    if int(valid.sum()) < 16:
        raise EmptyFrame(f"frame has {int(valid.sum())} valid depths, need 16")

    points = frame.points()
    moments = _Moments(points, valid)
    jumps = _Jumps(frame.depth)
    regions: list[_Region] = []

    stack = [(0, frame.height, 0, frame.width)]
    while stack:
        r0, r1, c0, c1 = stack.pop()
        m = moments.region(r0, r1, c0, c1)
        rows, cols = _split_ranges(r0, r1), _split_ranges(c0, c1)
        leaf = len(rows) == 1 and len(cols) == 1
        area = (r1 - r0) * (c1 - c0)
        fitted = None
        if m[0] >= MIN_VALID_FRACTION * area and m[0] >= 4 and not jumps.any(r0, r1, c0, c1):
            try:
                fitted = _fit_moments(m)
            except DegenerateGeometry:
                fitted = None
        if fitted is not None and fitted[1] > eps_fit:
            fitted = None
        if fitted is not None:
            block = points[r0:r1, c0:c1][valid[r0:r1, c0:c1]]
            if np.max(np.abs(fitted[0].signed_distance(block))) > MAX_RESIDUAL_RATIO * eps_fit:
                fitted = None
        if fitted is not None and _grazing(fitted[0], m):
            fitted = None
        if fitted is not None:
            regions.append(_Region(r0, r1, c0, c1, m, fitted[0], fitted[1]))
        elif not leaf:
            # reversed so that children pop in row-major order
            for a, b in reversed(rows):
                for c, d in reversed(cols):
                    stack.append((a, b, c, d))

    groups = _merge_regions(regions, eps_fit)
    group_points = []
    for g in groups:
        pix = np.zeros_like(valid)
        for reg in g.members:
            pix[reg.r0 : reg.r1, reg.c0 : reg.c1] = True
        group_points.append(points[pix & valid])
    keep = _unexplained(groups, group_points, eps_fit)
    keep = [k and _wide_enough(g, eps_fit) for g, k in zip(groups, keep)]

    patches = []
    for g, pts, k in zip(groups, group_points, keep):
        if not k:
            continue
        patches.append(
            (
                (-int(round(g.moments[0])), min((r.r0, r.c0) for r in g.members)),
                PlanarPatch(g.plane, rectangle_corners(g.plane, pts), g.rms, int(round(g.moments[0]))),
            )
        )
    patches.sort(key=lambda kv: kv[0])
    return [p for _, p in patches[:max_patches]]


def _grazing(plane: PlaneHNF, m: np.ndarray) -> bool:
    centroid = m[1:4] / m[0]
    return abs(float(plane.n @ centroid)) < math.cos(MAX_INCIDENCE) * float(np.linalg.norm(centroid))


def _unexplained(groups: list[_Group], group_points, eps_fit: float) -> list[bool]:
    """Flag groups whose points are mostly explained by other planes.

    Leaves straddling a crease between two surfaces can pass the rms test with
    a plane that exists nowhere in the scene.  Their points sit on the planes
    of other patches in the frame, which is how they are recognised here.
    Fragments of another patch's own plane are kept.
    """
    keep = [True] * len(groups)
    for i, g in enumerate(groups):
        planes = [
            h.plane
            for j, h in enumerate(groups)
            if j != i and not planes_similar(g.plane, h.plane)
        ]
        if not planes:
            continue
        pts = group_points[i]
        dist = np.min(np.abs(np.stack([p.signed_distance(pts) for p in planes])), axis=0)
        if np.mean(dist <= eps_fit) >= EXPLAINED_FRACTION:
            keep[i] = False
    return keep


def _wide_enough(g: _Group, eps_fit: float) -> bool:
    """Reject thin strips whose tilt about the long axis is poorly determined."""
    count, _, scatter = _scatter_of(g.moments)
    evals = np.linalg.eigvalsh(scatter)
    return math.sqrt(max(float(evals[1]), 0.0) / count) >= MIN_WIDTH_RATIO * eps_fit


def _merge_regions(regions: list[_Region], eps_fit: float) -> list[_Group]:
    parent = list(range(len(regions)))
    groups = {
        i: _Group([r], r.moments.copy(), r.plane, r.rms) for i, r in enumerate(regions)
    }

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    edges = [
        (i, j)
        for i in range(len(regions))
        for j in range(i + 1, len(regions))
        if _touch(regions[i], regions[j])
    ]
    changed = True
    while changed:
        changed = False
        for i, j in edges:
            gi, gj = find(i), find(j)
            if gi == gj:
                continue
            a, b = groups[gi], groups[gj]
            if not planes_similar(a.plane, b.plane):
                continue
            m = a.moments + b.moments
            plane, rms = _fit_moments(m)
            if rms > eps_fit:
                continue
            lo, hi = min(gi, gj), max(gi, gj)
            parent[hi] = lo
            groups[lo] = _Group(a.members + b.members if lo == gi else b.members + a.members, m, plane, rms)
            del groups[hi]
            changed = True
    return [groups[k] for k in sorted(groups)]


def pack_patch(patch: PlanarPatch) -> bytes:
    return _PATCH_RECORD.pack(
        *patch.plane.vector, *patch.corners.reshape(12), patch.rms, patch.support
    )


def unpack_patch(data: bytes, offset: int = 0) -> PlanarPatch:
    vals = _PATCH_RECORD.unpack_from(data, offset)
    v = np.array(vals[:4], dtype=float)
    plane = PlaneHNF(v[:3], v[3])
    return PlanarPatch(plane, np.array(vals[4:16]), vals[16], vals[17])


def patch_set_bytes(patches) -> int:
    """Serialized size of a patch list in the maplet wire format."""
    return PATCH_RECORD_BYTES * len(patches)
