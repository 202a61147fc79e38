"""Iterative closest algebraic plane (ICaP) alignment of maplet pairs.

Planes are compared directly as 4-vectors ``(n, d)``.  Given a set of plane
correspondences the rigid transform has a closed form: the rotation comes from
an SVD of the paired-normal covariance (with a reflection guard), the
translation from a linear least-squares fit of the offset differences.  ICaP
alternates nearest-plane matching with that closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import shapely
from shapely.geometry import Polygon

from .errors import InsufficientPairs, NoConvergence, RankDeficientNormals
from .geometry import Pose3, transform_plane

DEFAULT_TAU_T = 1e-10
DEFAULT_MAX_ITERS = 50
DEFAULT_EPS_ACCEPT = 0.05
SIGMA_XY = 0.05
SIGMA_THETA = math.radians(1.0)
RANK_TOL = 1e-6
# squared 4-vector distance; normals 60 degrees apart already reach it
DEFAULT_GATE = 1.0


@dataclass(frozen=True)
class PlaneCorrespondence:
    index_l: int
    index_j: int
    residual: float


@dataclass(eq=False)
class AlignmentResult:
    transform: Pose3
    covariance: np.ndarray
    final_error: float
    iterations: int
    correspondences: list
    error_trace: list = field(default_factory=list)
    pair_trace: list = field(default_factory=list)

    @property
    def mean_error(self) -> float:
        return self.final_error / max(1, len(self.correspondences))


@dataclass(frozen=True)
class NoMatch:
    """A refuted maplet-pair hypothesis."""

    reason: str

    def __bool__(self):
        return False


class RoiPolygon:
    """Simple polygon on the ground plane used to pick candidate planes."""

    def __init__(self, vertices):
        verts = np.asarray(vertices, dtype=float).reshape(-1, 2)
        if len(verts) < 3:
            raise ValueError("ROI polygon needs at least 3 vertices")
        poly = Polygon(verts)
        if not poly.exterior.is_simple or poly.area <= 0:
            raise ValueError("ROI polygon must be simple with positive area")
        self.vertices = verts
        self._poly = poly

    @classmethod
    def disk(cls, center, radius: float, sides: int = 32) -> "RoiPolygon":
        a = np.linspace(0.0, 2.0 * math.pi, sides, endpoint=False)
        c = np.asarray(center, dtype=float)
        return cls(c + radius * np.column_stack([np.cos(a), np.sin(a)]))

    def contains(self, xy) -> np.ndarray:
        pts = np.asarray(xy, dtype=float).reshape(-1, 2)
        return shapely.contains_xy(self._poly, pts[:, 0], pts[:, 1])


def _vectors(planes) -> np.ndarray:
    return np.array([p.vector for p in planes], dtype=float).reshape(-1, 4)


def _unique_targets(pairs):
    seen, out = set(), []
    for pr in pairs:
        if pr.index_j in seen:
            continue
        seen.add(pr.index_j)
        out.append(pr)
    return out


def align_plane_pairs(pairs, planes_j, planes_l) -> Pose3:
    """Closed-form transform taking the ``planes_l`` frame into the ``planes_j`` frame.

    Only the first pair that names each target plane is used.  Raises
    :class:`InsufficientPairs` below three pairs and
    :class:`RankDeficientNormals` when the moving normals do not span 3D.
    """
    used = _unique_targets(pairs)
    if len(used) < 3:
        raise InsufficientPairs(f"need at least 3 plane pairs, got {len(used)}")
    vj = _vectors(planes_j)[[p.index_j for p in used]]
    vl = _vectors(planes_l)[[p.index_l for p in used]]
    nj, nl = vj[:, :3], vl[:, :3]
    sv = np.linalg.svd(nl, compute_uv=False)
    if sv[-1] <= RANK_TOL:
        raise RankDeficientNormals(
            f"paired normals span fewer than 3 dimensions (smallest singular value {sv[-1]:.3g})"
        )
    # covariance of target normals against moving normals
    C = nj.T @ nl
    U, _, Vt = np.linalg.svd(C)
    D = np.diag([1.0, 1.0, np.linalg.det(U @ Vt)])
    R = U @ D @ Vt
    rotated = nl @ R.T
    p, *_ = np.linalg.lstsq(rotated, vl[:, 3] - vj[:, 3], rcond=None)
    return Pose3(R, p)


def pair_residuals(T: Pose3, pairs, planes_j, planes_l) -> np.ndarray:
    """Per-pair 4-vector residuals ``pi_j - transform_plane(T, pi_l)``."""
    out = [planes_j[p.index_j].vector - transform_plane(T, planes_l[p.index_l]).vector for p in pairs]
    return np.array(out).reshape(-1, 4)


def match_planes(T: Pose3, planes_j, planes_l) -> list[PlaneCorrespondence]:
    """Nearest target plane (algebraic distance) for every moving plane.

    Ties go to the lowest target index.  Pairs are returned sorted by
    residual so that, per target, the closest moving plane comes first.
    """
    vj = _vectors(planes_j)
    moved = np.array([transform_plane(T, p).vector for p in planes_l])
    dist = ((moved[:, None, :] - vj[None, :, :]) ** 2).sum(axis=-1)
    best = np.argmin(dist, axis=1)
    pairs = [
        PlaneCorrespondence(l, int(best[l]), float(dist[l, best[l]])) for l in range(len(planes_l))
    ]
    pairs.sort(key=lambda p: (p.residual, p.index_l))
    return pairs


def _sq_error(T, pairs, planes_j, planes_l) -> float:
    r = pair_residuals(T, pairs, planes_j, planes_l)
    return float((r**2).sum())


def icap(
    planes_j,
    planes_l,
    T0: Pose3 | None = None,
    tau_T: float = DEFAULT_TAU_T,
    max_iters: int = DEFAULT_MAX_ITERS,
    gate: float = DEFAULT_GATE,
) -> AlignmentResult:
    """Align moving planes ``planes_l`` onto target planes ``planes_j``.

    Iterates nearest-plane matching and :func:`align_plane_pairs` until the
    squared Frobenius change of the homogeneous transform drops below
    ``tau_T``.  The returned transform maps the moving frame into the target
    frame.  Pairs whose squared residual exceeds ``gate`` are treated as
    surfaces seen by only one side and carry no weight.
    """
    if len(planes_l) < 3:
        raise InsufficientPairs(f"moving set has {len(planes_l)} planes, need 3")
    if len(planes_j) < len(planes_l):
        raise ValueError("target set must be at least as large as the moving set")
    T = T0 if T0 is not None else Pose3.identity()
    error_trace, pair_trace = [], []
    used = []
    for it in range(1, max_iters + 1):
        pairs = match_planes(T, planes_j, planes_l)
        used = [p for p in _unique_targets(pairs) if p.residual <= gate]
        T_next = align_plane_pairs(used, planes_j, planes_l)
        delta = float(((T_next.matrix() - T.matrix()) ** 2).sum())
        T = T_next
        error_trace.append(_sq_error(T, used, planes_j, planes_l))
        pair_trace.append(tuple(sorted((p.index_l, p.index_j) for p in used)))
        if delta < tau_T:
            break
    else:
        raise NoConvergence(
            f"ICaP did not converge in {max_iters} iterations (last change {delta:.3g})",
            transform=T,
            iterations=max_iters,
        )
    final_pairs = [
        PlaneCorrespondence(p.index_l, p.index_j, float(np.linalg.norm(r)))
        for p, r in zip(used, pair_residuals(T, used, planes_j, planes_l))
    ]
    result = AlignmentResult(
        transform=T,
        covariance=np.zeros((3, 3)),
        final_error=error_trace[-1],
        iterations=it,
        correspondences=final_pairs,
        error_trace=error_trace,
        pair_trace=pair_trace,
    )
    result.covariance = transform_covariance(result)
    return result


def transform_covariance(r: AlignmentResult, eps_accept: float = DEFAULT_EPS_ACCEPT) -> np.ndarray:
    """Generic (x, y, theta) covariance, inflated by the alignment error."""
    base = np.diag([SIGMA_XY**2, SIGMA_XY**2, SIGMA_THETA**2])
    return base * max(1.0, r.final_error / eps_accept)


def roi_candidates(maplet, roi: RoiPolygon, pose: Pose3 | None = None) -> list:
    """Planes of ``maplet`` whose centroid falls inside ``roi``.

    ``pose`` places the maplet frame in the frame the ROI is drawn in.
    """
    if not maplet.planes:
        return []
    cents = np.array([p.centroid for p in maplet.planes])
    if pose is not None:
        cents = pose.apply(cents)
    inside = roi.contains(cents[:, :2])
    return [p.plane for p, ok in zip(maplet.planes, inside) if ok]


def maplet_pair_alignment(
    m_ij,
    m_kl,
    roi: RoiPolygon,
    pose_ij: Pose3 | None = None,
    pose_kl: Pose3 | None = None,
    eps_accept: float = DEFAULT_EPS_ACCEPT,
    tau_T: float = DEFAULT_TAU_T,
    max_iters: int = DEFAULT_MAX_ITERS,
    gate: float = DEFAULT_GATE,
):
    """Transform taking maplet ``m_ij``'s frame into ``m_kl``'s, or :class:`NoMatch`.

    ``pose_ij`` and ``pose_kl`` are optional estimates of both maplet origins
    in a shared frame.  They place the ROI and seed the iteration; without
    them both maplets are assumed to share one frame.
    """
    pi_j = roi_candidates(m_ij, roi, pose_ij)
    pi_l = roi_candidates(m_kl, roi, pose_kl)
    if len(pi_j) < 3 or len(pi_l) < 3:
        return NoMatch(f"solution not unique ({len(pi_j)} and {len(pi_l)} candidate planes)")
    a = pose_ij if pose_ij is not None else Pose3.identity()
    b = pose_kl if pose_kl is not None else Pose3.identity()
    guess = b.inverse() @ a  # m_ij frame -> m_kl frame
    try:
        if len(pi_j) < len(pi_l):
            # m_ij planes move onto m_kl planes
            res = icap(pi_l, pi_j, guess, tau_T, max_iters, gate)
        else:
            res = icap(pi_j, pi_l, guess.inverse(), tau_T, max_iters, gate)
            res.transform = res.transform.inverse()
    except (RankDeficientNormals, InsufficientPairs, NoConvergence) as exc:
        return NoMatch(str(exc))
    if res.mean_error > eps_accept:
        return NoMatch(f"alignment error {res.mean_error:.4g} per pair exceeds {eps_accept}")
    res.covariance = transform_covariance(res, eps_accept)
    return res
