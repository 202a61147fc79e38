"""Scenario configuration and the end-to-end simulation pipeline.

world -> depth frames -> planar patches -> keyframes -> maplets -> delta-poses
-> encounters between agents -> inter-agent closures -> optimised skeleton.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .builder import (
    KeyframeTracker,
    Maplet,
    MapletGraph,
    decompose_to_maplets,
    odometry_delta,
)
from .comms import (
    AgentStore,
    BandwidthLedger,
    LinkModel,
    detect_inter_agent_closures,
    encounter,
    range_measurement,
)
from .errors import ConfigError, OutOfRange
from .extraction import quadtree_extract
from .geometry import Pose2, Pose3, lift_se2
from .skeleton import ODOMETRY, DeltaPoseFactor, NodeKey, Skeleton, write_graph
from .world import (
    AgentTruth,
    Box,
    FloorPlan,
    Intrinsics,
    TrajectorySpec,
    WorldRun,
    camera_extrinsic,
    camera_pose,
    check_free_space,
    corridor_floorplan,
    ground_truth_maplet_origins,
    noisy_odometry,
    odometry_covariance,
    render_depth,
)

log = logging.getLogger(__name__)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class WorldConfig(_Strict):
    corridors: list[tuple[tuple[float, float], tuple[float, float]]] = Field(min_length=1)
    width: float = Field(2.0, gt=0)
    cell: float = Field(0.5, gt=0)
    ceiling_height: float = Field(2.5, gt=0)
    boxes: list[tuple[float, float, float, float, float]] = []


class SensorConfig(_Strict):
    width: int = Field(160, ge=16)
    height: int = Field(120, ge=16)
    fx: float = Field(100.0, gt=0)
    fy: float = Field(100.0, gt=0)
    max_range: float = Field(8.0, gt=0)


class AgentConfig(_Strict):
    id: int = Field(ge=0, lt=65536)
    waypoints: list[tuple[float, float]] = Field(min_length=1)
    speed: float = Field(0.5, gt=0)
    turn_rate_deg: float = Field(37.5, gt=0)
    sensor_height: float = Field(1.0, gt=0)
    frame_rate: float = Field(5.0, gt=0)
    anchor_error: tuple[float, float, float] = (0.0, 0.0, 0.0)  # x, y, yaw degrees


class ExtractionConfig(_Strict):
    eps_fit: float = Field(0.02, gt=0)
    max_patches: int = Field(64, ge=1)


class BuilderConfig(_Strict):
    kappa_max_deg: float = Field(90.0, gt=0, le=360)
    size_cap: int = Field(40 * 1024, ge=64)
    tile: float | None = Field(1.0, gt=0)


class IcapConfig(_Strict):
    tau_T: float = Field(1e-10, gt=0)
    max_iters: int = Field(50, ge=1)
    eps_accept: float = Field(0.05, gt=0)


class OdometryConfig(_Strict):
    noise_scale: float = Field(1.0, ge=0)


class LinkConfig(_Strict):
    range: float = Field(6.0, gt=0)
    drop_probability: float = Field(0.0, ge=0, le=1)
    budget: int | None = Field(None, ge=1)
    max_rounds: int = Field(5, ge=1)
    encounter_interval: float = Field(5.0, gt=0)
    tail_encounters: int = Field(6, ge=0)


class ClosureConfig(_Strict):
    overlap_radius: float = Field(4.0, gt=0)
    roi_radius: float = Field(2.5, gt=0)
    max_per_peer: int | None = Field(1, ge=0)
    salience_min: float = Field(2.0, ge=0)
    proximity_radius: float = Field(3.0, gt=0)


class RangingConfig(_Strict):
    enabled: bool = False
    sigma: float = Field(0.1, ge=0)
    max_range: float = Field(10.0, gt=0)


class ScenarioConfig(_Strict):
    name: str
    seed: int = Field(0, ge=0)
    output: str | None = None
    world: WorldConfig
    sensor: SensorConfig = SensorConfig()
    agents: list[AgentConfig] = Field(min_length=1)
    extraction: ExtractionConfig = ExtractionConfig()
    builder: BuilderConfig = BuilderConfig()
    icap: IcapConfig = IcapConfig()
    odometry: OdometryConfig = OdometryConfig()
    link: LinkConfig = LinkConfig()
    closures: ClosureConfig = ClosureConfig()
    ranging: RangingConfig = RangingConfig()

    @field_validator("agents")
    @classmethod
    def _unique_ids(cls, agents):
        ids = [a.id for a in agents]
        if len(set(ids)) != len(ids):
            raise ValueError(f"agent ids must be unique, got {ids}")
        return agents

    @model_validator(mode="after")
    def _sorted_agents(self):
        object.__setattr__(self, "agents", sorted(self.agents, key=lambda a: a.id))
        return self


BUNDLED = ("two-agent-loop", "l-corridor", "straight-hallway")


def load_config(source) -> ScenarioConfig:
    """Parse a YAML scenario file or the name of a bundled scenario."""
    text = None
    src = str(source)
    if src in BUNDLED:
        text = resources.files("maplets.scenarios").joinpath(f"{src}.yaml").read_text()
    else:
        try:
            text = Path(src).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {src}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{src}: invalid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{src}: top level must be a mapping")
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"{src}: {exc}") from exc


# -- per-agent simulation ----------------------------------------------------


def build_floorplan(cfg: WorldConfig) -> FloorPlan:
    return corridor_floorplan(
        cfg.corridors,
        width=cfg.width,
        cell=cfg.cell,
        ceiling_height=cfg.ceiling_height,
        boxes=[Box(*b) for b in cfg.boxes],
    )


@dataclass
class AgentRun:
    agent: int
    graph: MapletGraph
    maplets: list
    truth: AgentTruth
    samples: list  # (t, Pose2)
    keyframe_times: list
    frames: list = field(default_factory=list)  # keyframe depth frames when requested
    deltas: list = field(default_factory=list)  # (available_at, DeltaPoseFactor)

    def position(self, t: float) -> Pose2:
        idx = np.searchsorted([s[0] for s in self.samples], t, side="right") - 1
        return self.samples[max(0, int(idx))][1]

    @property
    def end_time(self) -> float:
        return self.samples[-1][0]

    def maplet_ready_time(self, m: Maplet) -> float:
        if m.index == len(self.maplets) - 1:
            return self.end_time
        return self.keyframe_times[m.keyframes[-1].id]


def simulate_agent(
    cfg: ScenarioConfig, plan: FloorPlan, acfg: AgentConfig, keep_frames: bool = False
) -> AgentRun:
    spec = TrajectorySpec(
        list(acfg.waypoints),
        speed=acfg.speed,
        turn_rate=math.radians(acfg.turn_rate_deg),
        sensor_height=acfg.sensor_height,
        frame_rate=acfg.frame_rate,
    )
    samples = spec.sample()
    check_free_space(plan, [p for _, p in samples])
    intr = Intrinsics(cfg.sensor.width, cfg.sensor.height, cfg.sensor.fx, cfg.sensor.fy)
    rng = np.random.default_rng([cfg.seed, acfg.id])
    scale = cfg.odometry.noise_scale

    def odometry(m: Pose2) -> Pose2:
        return noisy_odometry(m, rng, scale) if scale > 0 else m

    tracker = KeyframeTracker(acfg.id, camera_extrinsic(acfg.sensor_height), odometry, odometry_covariance)
    truth = AgentTruth(spawn=samples[0][1])
    kf_times, frames = [], []
    kf_body = None
    for t, body in samples:
        frame = render_depth(plan, camera_pose(body, acfg.sensor_height), intr, cfg.sensor.max_range)
        try:
            patches = quadtree_extract(frame, cfg.extraction.eps_fit, cfg.extraction.max_patches)
        except Exception as exc:  # EmptyFrame: nothing in range
            log.debug("agent %d frame at %.1fs: %s", acfg.id, t, exc)
            patches = []
        motion = Pose3.identity() if kf_body is None else lift_se2(kf_body.inverse() @ body)
        if tracker.add_frame(t, patches, motion, frame.point_cloud_bytes()):
            kf_body = body
            truth.keyframe_poses[len(kf_times)] = body
            kf_times.append(t)
            if keep_frames:
                frames.append(frame)
    graph = tracker.finish()
    maplets = decompose_to_maplets(
        graph, math.radians(cfg.builder.kappa_max_deg), cfg.builder.size_cap, cfg.builder.tile
    )
    truth.maplet_origins = [m.origin_keyframe for m in maplets]
    run = AgentRun(acfg.id, graph, maplets, truth, samples, kf_times, frames)
    run.deltas = consecutive_deltas(run, cfg)
    return run


def consecutive_deltas(run: AgentRun, cfg: ScenarioConfig) -> list:
    """Delta-poses between neighbouring maplets of one agent, marginalised from odometry."""
    out = []
    for a, b in zip(run.maplets, run.maplets[1:]):
        delta, cov = odometry_delta(run.graph, a, b)
        f = DeltaPoseFactor(NodeKey(run.agent, a.index), NodeKey(run.agent, b.index), delta, cov, ODOMETRY)
        out.append((run.maplet_ready_time(b), f))
    return out


# -- multi-agent simulation --------------------------------------------------


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    plan: FloorPlan
    runs: dict
    stores: dict
    ledger: BandwidthLedger
    truth: dict
    encounters: list = field(default_factory=list)
    closures: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def _anchor(run: AgentRun, acfg: AgentConfig) -> Pose2:
    dx, dy, dth = acfg.anchor_error
    s = run.truth.spawn
    return Pose2(s.x + dx, s.y + dy, s.theta + math.radians(dth))


def simulate(cfg: ScenarioConfig, no_comms: bool = False, keep_frames: bool = False) -> ScenarioResult:
    plan = build_floorplan(cfg.world)
    runs = {a.id: simulate_agent(cfg, plan, a, keep_frames) for a in cfg.agents}
    anchors = {NodeKey(a.id, 0): _anchor(runs[a.id], a) for a in cfg.agents}
    stores = {aid: AgentStore(aid, anchors) for aid in runs}
    ledger = BandwidthLedger()
    link = LinkModel(cfg.link.range, cfg.link.drop_probability, cfg.seed, cfg.link.budget)
    result = ScenarioResult(cfg, plan, runs, stores, ledger, ground_truth_maplet_origins(
        WorldRun({aid: r.truth for aid, r in runs.items()})
    ))
    range_rng = np.random.default_rng([cfg.seed, 7919])

    def release(t):
        for aid, run in runs.items():
            st = stores[aid]
            for m in run.maplets:
                if run.maplet_ready_time(m) <= t and NodeKey(*m.key) not in st.own_maplets:
                    st.add_own_maplet(m)
            for ready, f in run.deltas:
                if ready <= t:
                    st.add_factor(f)

    def active_maplet(run: AgentRun, t: float) -> NodeKey:
        done = [m.index for m in run.maplets if run.maplet_ready_time(m) <= t]
        idx = min(len(run.maplets) - 1, (max(done) + 1) if done else 0)
        return NodeKey(run.agent, idx)

    def meet(t):
        ids = sorted(runs)
        for i, a in enumerate(ids):
            for b in ids[i + 1 :]:
                pa, pb = runs[a].position(t), runs[b].position(t)
                dist = math.hypot(pa.x - pb.x, pa.y - pb.y)
                if dist > cfg.link.range:
                    continue
                key = (a, b)
                if t - last.get(key, -math.inf) < cfg.link.encounter_interval - 1e-9:
                    continue
                last[key] = t
                if cfg.ranging.enabled:
                    try:
                        rf = range_measurement(
                            active_maplet(runs[a], t), active_maplet(runs[b], t),
                            pa.translation, pb.translation, cfg.ranging.sigma, range_rng,
                            cfg.ranging.max_range,
                        )
                        stores[a].add_range(rf)
                        stores[b].add_range(rf)
                    except OutOfRange:
                        pass
                res = encounter(
                    stores[a], stores[b], link, ledger, t, len(result.encounters),
                    cfg.link.max_rounds, True, cfg.closures.salience_min, cfg.closures.proximity_radius,
                )
                result.encounters.append(res)
                for aid in (a, b):
                    if res.received_maplets.get(aid):
                        found = detect_inter_agent_closures(
                            stores[aid], cfg.closures.overlap_radius, cfg.closures.roi_radius,
                            cfg.icap.eps_accept, cfg.closures.max_per_peer,
                        )
                        result.closures += [(t, aid, f) for f in found]

    last: dict = {}
    dt = min(1.0 / a.frame_rate for a in cfg.agents)
    t_end = max(r.end_time for r in runs.values())
    n_steps = int(math.floor(t_end / dt + 1e-9))
    for k in range(n_steps + 1):
        t = k * dt
        release(t)
        if not no_comms:
            meet(t)
    release(t_end)
    if not no_comms:
        t = t_end
        for _ in range(cfg.link.tail_encounters):
            t += cfg.link.encounter_interval
            meet(t)
    result.summary = summarize(result, no_comms)
    return result


# -- evaluation and reports --------------------------------------------------


def skeleton_errors(skeleton: Skeleton, truth: dict) -> dict:
    """Per-node translation and heading error against ground truth."""
    out = {}
    for k in sorted(skeleton.poses):
        if k not in truth:
            continue
        e = truth[k].inverse() @ skeleton.poses[k]
        p, g = skeleton.poses[k], truth[k]
        out[k] = (math.hypot(p.x - g.x, p.y - g.y), abs(e.theta))
    return out


def relative_errors(skeleton: Skeleton, truth: dict, pairs) -> list[tuple[float, float]]:
    """Errors of relative poses ``X_a^-1 X_b`` against truth."""
    out = []
    for a, b in pairs:
        est = skeleton.poses[a].inverse() @ skeleton.poses[b]
        ref = truth[a].inverse() @ truth[b]
        e = ref.inverse() @ est
        out.append((math.hypot(est.x - ref.x, est.y - ref.y), abs(e.theta)))
    return out


def cross_agent_pairs(skeleton: Skeleton) -> list:
    keys = sorted(skeleton.poses)
    return [(a, b) for i, a in enumerate(keys) for b in keys[i + 1 :] if a.agent != b.agent]


def _stats(values) -> dict:
    if not values:
        return {"count": 0, "min": None, "max": None, "mean": None, "total": 0}
    return {
        "count": len(values),
        "min": int(min(values)),
        "max": int(max(values)),
        "mean": float(np.mean(values)),
        "total": int(sum(values)),
    }


def report_bandwidth(point_clouds: dict, maplets: dict, ledger: BandwidthLedger | None = None) -> tuple[list, dict]:
    """Table rows per agent and representation plus a totals summary.

    ``point_clouds`` and ``maplets`` map agent id to lists of serialised
    sizes in bytes.
    """
    rows = []
    for agent in sorted(set(point_clouds) | set(maplets)):
        for rep, table in (("point_cloud", point_clouds), ("maplet", maplets)):
            sizes = table.get(agent, [])
            if sizes:
                rows.append({"agent": agent, "representation": rep, **_stats(sizes)})
    raw = sum(sum(v) for v in point_clouds.values())
    mp = sum(sum(v) for v in maplets.values())
    proto = ledger.total() if ledger is not None else None
    summary = {
        "raw_point_cloud_bytes": raw,
        "maplet_bytes": mp,
        "compression_ratio": (raw / mp) if mp else "n/a",
        "protocol_bytes": proto,
        "pipeline_ratio": (raw / proto) if proto else "n/a",
    }
    return rows, summary


def write_bandwidth_csv(rows: list, path) -> None:
    cols = ["agent", "representation", "count", "min", "max", "mean", "total"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(_csv_value(r[c]) for c in cols) + "\n")


def read_bandwidth_csv(path) -> list:
    with open(path) as fh:
        lines = fh.read().splitlines()
    cols = lines[0].split(",")
    out = []
    for line in lines[1:]:
        vals = line.split(",")
        row = dict(zip(cols, vals))
        row["agent"] = int(row["agent"])
        for c in ("count", "min", "max", "total"):
            row[c] = int(row[c])
        row["mean"] = float(row["mean"])
        out.append(row)
    return out


def _csv_value(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def summarize(res: ScenarioResult, no_comms: bool = False) -> dict:
    clouds, mps = {}, {}
    for aid, run in res.runs.items():
        clouds[aid] = [kf.raw_bytes for kf in run.graph.keyframes]
        mps[aid] = [m.serialized_size() for m in run.maplets]
    rows, bw = report_bandwidth(clouds, mps, None if no_comms else res.ledger)
    all_mp = [s for v in mps.values() for s in v]
    agents = {}
    for aid, st in sorted(res.stores.items()):
        sk = st.skeleton
        errs = skeleton_errors(sk, res.truth)
        own = [v for k, v in errs.items() if k.agent == aid]
        cross = relative_errors(sk, res.truth, cross_agent_pairs(sk))
        agents[str(aid)] = {
            "keyframes": len(res.runs[aid].graph.keyframes),
            "maplets": len(res.runs[aid].maplets),
            "known_deltas": len(st.known_deltas),
            "known_closures": len(st.known_closures),
            "foreign_maplets": len(st.foreign_maplets),
            "nodes": len(sk.poses),
            "chi2": sk.chi2,
            "max_own_error_m": max((e[0] for e in own), default=0.0),
            "max_error_m": max((e[0] for e in errs.values()), default=0.0),
            "max_error_deg": math.degrees(max((e[1] for e in errs.values()), default=0.0)),
            "cross_agent_error_m": max((e[0] for e in cross), default=None),
            "cross_agent_error_deg": math.degrees(max(e[1] for e in cross)) if cross else None,
        }
    stores = [res.stores[k] for k in sorted(res.stores)]
    consistent = all(
        s.digest() == stores[0].digest() and _same_poses(s.skeleton, stores[0].skeleton)
        for s in stores[1:]
    )
    return {
        "scenario": res.config.name,
        "seed": res.config.seed,
        "comms": not no_comms,
        "agents": agents,
        "bandwidth": rows,
        **bw,
        "mean_maplet_bytes": float(np.mean(all_mp)) if all_mp else None,
        "encounters": len(res.encounters),
        "inter_agent_closures": len(res.closures),
        "consistent": consistent,
    }


def _same_poses(a: Skeleton, b: Skeleton, tol: float = 1e-9) -> bool:
    if set(a.poses) != set(b.poses):
        return False
    return all(np.allclose(a.poses[k].vector, b.poses[k].vector, atol=tol, rtol=0) for k in a.poses)


# -- file outputs ------------------------------------------------------------


def write_ply(maplet: Maplet, path) -> None:
    """ASCII PLY polygon soup of a maplet's patch quads (maplet frame)."""
    lines = [
        "ply",
        "format ascii 1.0",
        f"comment maplet {maplet.agent} {maplet.index}",
        f"element vertex {4 * len(maplet.planes)}",
        "property double x",
        "property double y",
        "property double z",
        f"element face {len(maplet.planes)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    for p in maplet.planes:
        for c in p.corners:
            lines.append(" ".join(repr(float(v)) for v in c))
    for k in range(len(maplet.planes)):
        lines.append(f"4 {4 * k} {4 * k + 1} {4 * k + 2} {4 * k + 3}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> tuple[np.ndarray, list]:
    """Vertices and faces of an ASCII PLY written by :func:`write_ply`."""
    lines = Path(path).read_text().splitlines()
    if lines[:2] != ["ply", "format ascii 1.0"]:
        raise ValueError(f"{path}: not an ASCII PLY file")
    nv = nf = 0
    k = 2
    while lines[k] != "end_header":
        tok = lines[k].split()
        if tok[:2] == ["element", "vertex"]:
            nv = int(tok[2])
        elif tok[:2] == ["element", "face"]:
            nf = int(tok[2])
        k += 1
    body = lines[k + 1 :]
    verts = np.array([[float(v) for v in line.split()] for line in body[:nv]]).reshape(-1, 3)
    faces = [[int(v) for v in line.split()[1:]] for line in body[nv : nv + nf]]
    return verts, faces


def write_outputs(res: ScenarioResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    skdir = out / "skeleton"
    skdir.mkdir(exist_ok=True)
    for aid, st in sorted(res.stores.items()):
        write_graph(st.initial_skeleton(), skdir / f"agent{aid}_pre.txt")
        write_graph(st.skeleton, skdir / f"agent{aid}_post.txt")
    mdir = out / "maplets"
    mdir.mkdir(exist_ok=True)
    for aid, run in sorted(res.runs.items()):
        for m in run.maplets:
            write_ply(m, mdir / f"agent{aid}_maplet{m.index:03d}.ply")
    write_bandwidth_csv(res.summary["bandwidth"], out / "bandwidth.csv")
    res.ledger.write_csv(out / "ledger.csv")
    summary = {k: v for k, v in res.summary.items() if k != "bandwidth"}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if any(run.frames for run in res.runs.values()):
        fdir = out / "frames"
        fdir.mkdir(exist_ok=True)
        for aid, run in sorted(res.runs.items()):
            for k, fr in enumerate(run.frames):
                fr.save(fdir / f"agent{aid}_kf{k:04d}.depth")


def run_scenario(
    cfg: ScenarioConfig, out: Path | None = None, no_comms: bool = False, emit_frames: bool = False
) -> ScenarioResult:
    res = simulate(cfg, no_comms=no_comms, keep_frames=emit_frames)
    target = out if out is not None else (Path(cfg.output) if cfg.output else None)
    if target is not None:
        write_outputs(res, Path(target))
    return res
