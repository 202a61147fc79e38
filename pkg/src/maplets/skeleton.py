"""Tier-II pose graph over maplet origins.

Nodes are maplet origins keyed by ``(agent, maplet)``; factors are SE(2)
delta-poses (odometry or loop closure) and scalar ranges.  Poses are
initialised by chaining odometry and refined by Levenberg-damped
Gauss-Newton on dense normal equations.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .errors import DisconnectedGraph, SingularNormalEquations
from .geometry import Pose2, wrap_angle

ODOMETRY = "odometry"
LOOP_CLOSURE = "loop_closure"
FACTOR_KINDS = (ODOMETRY, LOOP_CLOSURE)

DEFAULT_MAX_ITERS = 100
DEFAULT_TOL_DX = 1e-8
DEFAULT_LAMBDA = 1e-4
MAX_LAMBDA = 1e12
_SMALL_ANGLE = 1e-4


class NodeKey(NamedTuple):
    agent: int
    maplet: int

    def __str__(self):
        return f"{self.agent}:{self.maplet}"


@dataclass(frozen=True, eq=False)
class DeltaPoseFactor:
    """Relative pose ``X_from^-1 X_to`` with its (x, y, theta) covariance."""

    source: NodeKey
    target: NodeKey
    delta: Pose2
    cov: np.ndarray
    kind: str = ODOMETRY

    def __post_init__(self):
        object.__setattr__(self, "source", NodeKey(*self.source))
        object.__setattr__(self, "target", NodeKey(*self.target))
        if self.source == self.target:
            raise ValueError(f"factor endpoints coincide ({self.source})")
        if self.kind not in FACTOR_KINDS:
            raise ValueError(f"unknown factor kind {self.kind!r}")
        cov = np.array(self.cov, dtype=float).reshape(3, 3)
        cov = 0.5 * (cov + cov.T)
        try:
            L = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValueError("factor covariance must be symmetric positive definite") from None
        cov.setflags(write=False)
        object.__setattr__(self, "cov", cov)
        # whitening: r_w = W r with W^T W = cov^-1
        W = np.linalg.inv(L)
        W.setflags(write=False)
        object.__setattr__(self, "_whiten", W)

    @property
    def key(self) -> tuple[NodeKey, NodeKey]:
        return (self.source, self.target)

    @property
    def information(self) -> np.ndarray:
        return self._whiten.T @ self._whiten

    def __eq__(self, other):
        if not isinstance(other, DeltaPoseFactor):
            return NotImplemented
        return (
            self.key == other.key
            and self.kind == other.kind
            and self.delta == other.delta
            and bool(np.array_equal(self.cov, other.cov))
        )

    def __hash__(self):
        return hash((self.key, self.kind))

    def __repr__(self):
        d = self.delta
        return (
            f"DeltaPoseFactor({self.source} -> {self.target}, "
            f"({d.x:.4g}, {d.y:.4g}, {d.theta:.4g}), {self.kind})"
        )


@dataclass(frozen=True)
class RangeFactor:
    a: NodeKey
    b: NodeKey
    range: float
    variance: float

    def __post_init__(self):
        object.__setattr__(self, "a", NodeKey(*self.a))
        object.__setattr__(self, "b", NodeKey(*self.b))
        if self.range < 0:
            raise ValueError("range must be non-negative")
        if not self.variance > 0:
            raise ValueError("range variance must be positive")

    @property
    def key(self) -> tuple[NodeKey, NodeKey]:
        return (self.a, self.b)


def _endpoints(f) -> tuple[NodeKey, NodeKey]:
    return (f.source, f.target) if isinstance(f, DeltaPoseFactor) else (f.a, f.b)


@dataclass(eq=False)
class Skeleton:
    poses: dict = field(default_factory=dict)  # NodeKey -> Pose2
    factors: list = field(default_factory=list)
    chi2: float = 0.0
    pending: list = field(default_factory=list)  # closures awaiting endpoints

    def with_factor(self, factor) -> "Skeleton":
        """Copy with ``factor`` appended.

        An odometry factor from a known node to an unknown one places the new
        node by composition.  Factors touching unknown nodes are queued and
        flushed as soon as both endpoints exist.
        """
        poses = dict(self.poses)
        factors = list(self.factors)
        pending = list(self.pending) + [factor]
        progress = True
        while progress:
            progress = False
            for f in list(pending):
                a, b = _endpoints(f)
                if isinstance(f, DeltaPoseFactor) and f.kind == ODOMETRY:
                    if a in poses and b not in poses:
                        poses[b] = poses[a] @ f.delta
                    elif b in poses and a not in poses:
                        poses[a] = poses[b] @ f.delta.inverse()
                if a in poses and b in poses:
                    factors.append(f)
                    pending.remove(f)
                    progress = True
        out = Skeleton(poses, factors, 0.0, pending)
        out.chi2 = chi2(out.poses, out.factors)
        return out

    def nodes(self) -> list[NodeKey]:
        return sorted(self.poses)


def add_loop_closure(skeleton: Skeleton, factor: DeltaPoseFactor) -> Skeleton:
    """Append ``factor`` as a loop closure without re-optimising."""
    if factor.kind != LOOP_CLOSURE:
        factor = replace(factor, kind=LOOP_CLOSURE)
    return skeleton.with_factor(factor)


def chain_initialize(factors, root, anchors: dict | None = None) -> dict:
    """Place every node by chaining odometry deltas outward from ``root``.

    ``anchors`` optionally seeds additional components (e.g. another agent's
    first maplet) with known poses; the root sits at identity unless it is
    itself anchored.  Loop closures and ranges are ignored.
    """
    root = NodeKey(*root)
    seeds = {root: Pose2.identity()}
    for k, v in (anchors or {}).items():
        seeds[NodeKey(*k)] = v
    adj: dict = {}
    nodes = set(seeds)
    for f in factors:
        a, b = _endpoints(f)
        nodes.update((a, b))
        if isinstance(f, DeltaPoseFactor) and f.kind == ODOMETRY:
            adj.setdefault(a, []).append((b, f.delta))
            adj.setdefault(b, []).append((a, f.delta.inverse()))
    poses = dict(seeds)
    queue = deque(sorted(seeds))
    while queue:
        n = queue.popleft()
        for m, delta in sorted(adj.get(n, []), key=lambda e: e[0]):
            if m not in poses:
                poses[m] = poses[n] @ delta
                queue.append(m)
    missing = nodes - set(poses)
    if missing:
        raise DisconnectedGraph(missing)
    return poses


# -- SE(2) residuals ---------------------------------------------------------


def _vinv(phi: float) -> tuple[float, float, float, float]:
    """Entries ``(A, B)`` of the inverse left-Jacobian and their derivatives."""
    h = 0.5 * phi
    B, dB = h, 0.5
    if abs(phi) < _SMALL_ANGLE:
        A = 1.0 - phi**2 / 12.0 - phi**4 / 720.0
        dA = -phi / 6.0 - phi**3 / 180.0
    else:
        A = h / math.tan(h)
        dA = 0.5 / math.tan(h) - h / (2.0 * math.sin(h) ** 2)
    return A, B, dA, dB


def se2_log(p: Pose2) -> np.ndarray:
    """Minimal coordinates ``(rho_x, rho_y, theta)`` of an SE(2) element."""
    A, B, _, _ = _vinv(p.theta)
    return np.array([A * p.x + B * p.y, -B * p.x + A * p.y, p.theta])


def se2_exp(v) -> Pose2:
    rx, ry, th = (float(a) for a in v)
    if abs(th) < _SMALL_ANGLE:
        s = 1.0 - th**2 / 6.0
        c = th / 2.0 - th**3 / 24.0
    else:
        s = math.sin(th) / th
        c = (1.0 - math.cos(th)) / th
    return Pose2(s * rx - c * ry, c * rx + s * ry, th)


def delta_residual(f: DeltaPoseFactor, xa: Pose2, xb: Pose2):
    """Unwhitened residual ``log(delta^-1 Xa^-1 Xb)`` and its Jacobians.

    Jacobians are with respect to the additive parameters ``(x, y, theta)``
    of each endpoint.
    """
    ca, sa = math.cos(xa.theta), math.sin(xa.theta)
    cd, sd = math.cos(f.delta.theta), math.sin(f.delta.theta)
    Ra_t = np.array([[ca, sa], [-sa, ca]])
    dRa_t = np.array([[-sa, ca], [-ca, -sa]])  # d(Ra^T)/d theta_a
    Rd_t = np.array([[cd, sd], [-sd, cd]])
    dt = np.array([xb.x - xa.x, xb.y - xa.y])
    t_ab = Ra_t @ dt
    te = Rd_t @ (t_ab - f.delta.translation)
    phi = wrap_angle(xb.theta - xa.theta - f.delta.theta)

    # d(te, phi) / d(a), d(b)
    Ja = np.zeros((3, 3))
    Jb = np.zeros((3, 3))
    Ja[:2, :2] = -Rd_t @ Ra_t
    Ja[:2, 2] = Rd_t @ (dRa_t @ dt)
    Ja[2, 2] = -1.0
    Jb[:2, :2] = Rd_t @ Ra_t
    Jb[2, 2] = 1.0

    A, B, dA, dB = _vinv(phi)
    V = np.array([[A, B], [-B, A]])
    dV = np.array([[dA, dB], [-dB, dA]])
    r = np.array([*(V @ te), phi])
    # chain through the log map
    L = np.zeros((3, 3))
    L[:2, :2] = V
    L[:2, 2] = dV @ te
    L[2, 2] = 1.0
    return r, L @ Ja, L @ Jb


def range_residual(f: RangeFactor, xa: Pose2, xb: Pose2):
    """Whitened range residual and its Jacobians (1x3 each)."""
    sigma = math.sqrt(f.variance)
    diff = xa.translation - xb.translation
    dist = float(np.linalg.norm(diff))
    r = (dist - f.range) / sigma
    Ja = np.zeros((1, 3))
    Jb = np.zeros((1, 3))
    if dist > 0:
        u = diff / dist
        Ja[0, :2] = u / sigma
        Jb[0, :2] = -u / sigma
    return np.array([r]), Ja, Jb


def _whitened(f, poses):
    a, b = _endpoints(f)
    if isinstance(f, DeltaPoseFactor):
        r, Ja, Jb = delta_residual(f, poses[a], poses[b])
        W = f._whiten
        return W @ r, W @ Ja, W @ Jb
    return range_residual(f, poses[a], poses[b])


def chi2(poses: dict, factors) -> float:
    """Sum of whitened squared residuals over all factors."""
    total = 0.0
    for f in factors:
        r, _, _ = _whitened(f, poses)
        total += float(r @ r)
    return total


def _components(nodes, factors) -> list[list[NodeKey]]:
    parent = {n: n for n in nodes}

    def find(n):
        while parent[n] != n:
            parent[n] = parent[parent[n]]
            n = parent[n]
        return n

    for f in factors:
        a, b = _endpoints(f)
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    groups: dict = {}
    for n in sorted(nodes):
        groups.setdefault(find(n), []).append(n)
    return [groups[k] for k in sorted(groups)]


def gauge_nodes(skeleton: Skeleton) -> set:
    """The smallest node of every connected component."""
    return {c[0] for c in _components(skeleton.poses, skeleton.factors)}


def _normal_equations(poses, factors, index):
    n = 3 * len(index)
    H = np.zeros((n, n))
    g = np.zeros(n)
    for f in factors:
        a, b = _endpoints(f)
        r, Ja, Jb = _whitened(f, poses)
        blocks = [(index.get(a), Ja), (index.get(b), Jb)]
        for i, Ji in blocks:
            if i is None:
                continue
            g[3 * i : 3 * i + 3] += Ji.T @ r
            for j, Jj in blocks:
                if j is None:
                    continue
                H[3 * i : 3 * i + 3, 3 * j : 3 * j + 3] += Ji.T @ Jj
    return H, g


def _step(poses, order, dx):
    out = dict(poses)
    for k, key in enumerate(order):
        p = poses[key]
        d = dx[3 * k : 3 * k + 3]
        out[key] = Pose2(p.x + d[0], p.y + d[1], p.theta + d[2])
    return out


@dataclass
class OptimizationReport:
    iterations: int = 0
    accepted: int = 0
    chi2_trace: list = field(default_factory=list)
    converged: bool = False


def optimize(
    skeleton: Skeleton,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol_dx: float = DEFAULT_TOL_DX,
    fixed=None,
    report: OptimizationReport | None = None,
) -> Skeleton:
    """Levenberg-damped Gauss-Newton over all free node poses.

    ``fixed`` names the nodes held constant; by default the smallest node of
    each connected component is fixed.  Pass an empty set to leave the gauge
    free, which makes the normal equations singular.
    """
    report = report if report is not None else OptimizationReport()
    fixed = gauge_nodes(skeleton) if fixed is None else {NodeKey(*k) for k in fixed}
    order = [k for k in sorted(skeleton.poses) if k not in fixed]
    poses = dict(skeleton.poses)
    cost = chi2(poses, skeleton.factors)
    report.chi2_trace.append(cost)
    if not order or not skeleton.factors:
        report.converged = True
        return Skeleton(poses, list(skeleton.factors), cost, list(skeleton.pending))
    index = {k: i for i, k in enumerate(order)}

    H, g = _normal_equations(poses, skeleton.factors, index)
    evals = np.linalg.eigvalsh(H)
    if evals[0] <= 1e-12 * max(evals[-1], 1.0):
        raise SingularNormalEquations(
            f"normal equations are rank deficient (smallest eigenvalue {evals[0]:.3g}); "
            "is the gauge fixed?"
        )
    lam = DEFAULT_LAMBDA
    for it in range(1, max_iters + 1):
        report.iterations = it
        dx = np.linalg.solve(H + lam * np.eye(len(H)), -g)
        trial = _step(poses, order, dx)
        trial_cost = chi2(trial, skeleton.factors)
        if trial_cost <= cost:
            poses, cost = trial, trial_cost
            report.accepted += 1
            report.chi2_trace.append(cost)
            lam = max(lam / 10.0, 1e-12)
            if np.linalg.norm(dx) < tol_dx:
                report.converged = True
                break
            H, g = _normal_equations(poses, skeleton.factors, index)
        else:
            lam *= 10.0
            if np.linalg.norm(dx) < tol_dx or lam > MAX_LAMBDA:
                report.converged = True
                break
    return Skeleton(poses, list(skeleton.factors), cost, list(skeleton.pending))


def build_skeleton(factors, root, anchors: dict | None = None) -> Skeleton:
    """Chain-initialised skeleton holding ``factors``."""
    factors = list(factors)
    poses = chain_initialize(factors, root, anchors)
    return Skeleton(poses, factors, chi2(poses, factors))


# -- text format -------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def write_graph(skeleton: Skeleton, path) -> None:
    """Write ``NODE``/``EDGE``/``RANGE`` records, one per line."""
    lines = []
    for k in sorted(skeleton.poses):
        p = skeleton.poses[k]
        lines.append(f"NODE {k.agent} {k.maplet} {_fmt(p.x)} {_fmt(p.y)} {_fmt(p.theta)}")
    for f in skeleton.factors:
        if isinstance(f, DeltaPoseFactor):
            info = np.linalg.inv(f.cov)
            upper = [info[0, 0], info[0, 1], info[0, 2], info[1, 1], info[1, 2], info[2, 2]]
            d = f.delta
            lines.append(
                "EDGE {} {} {} {} {} {} {} {} {}".format(
                    f.source.agent,
                    f.source.maplet,
                    f.target.agent,
                    f.target.maplet,
                    _fmt(d.x),
                    _fmt(d.y),
                    _fmt(d.theta),
                    " ".join(_fmt(v) for v in upper),
                    f.kind,
                )
            )
        else:
            lines.append(
                f"RANGE {f.a.agent} {f.a.maplet} {f.b.agent} {f.b.maplet} "
                f"{_fmt(f.range)} {_fmt(f.variance)}"
            )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def read_graph(path) -> Skeleton:
    """Inverse of :func:`write_graph`.  Covariances are rebuilt from information."""
    poses, factors = {}, []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            tag = tok[0]
            if tag == "NODE" and len(tok) == 6:
                poses[NodeKey(int(tok[1]), int(tok[2]))] = Pose2(*map(float, tok[3:6]))
            elif tag == "EDGE" and len(tok) == 15:
                a = NodeKey(int(tok[1]), int(tok[2]))
                b = NodeKey(int(tok[3]), int(tok[4]))
                delta = Pose2(*map(float, tok[5:8]))
                u = list(map(float, tok[8:14]))
                info = np.array([[u[0], u[1], u[2]], [u[1], u[3], u[4]], [u[2], u[4], u[5]]])
                factors.append(DeltaPoseFactor(a, b, delta, np.linalg.inv(info), tok[14]))
            elif tag == "RANGE" and len(tok) == 7:
                a = NodeKey(int(tok[1]), int(tok[2]))
                b = NodeKey(int(tok[3]), int(tok[4]))
                factors.append(RangeFactor(a, b, float(tok[5]), float(tok[6])))
            else:
                raise ValueError(f"{path}:{lineno}: malformed record {line.strip()!r}")
    return Skeleton(poses, factors, chi2(poses, factors))
