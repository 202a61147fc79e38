import math

import numpy as np
import pytest

from maplets.geometry import Pose2, Pose3
from maplets.world import (
    AgentTruth,
    FloorPlan,
    Intrinsics,
    TrajectorySpec,
    Wall,
    WorldRun,
    camera_pose,
    check_free_space,
    corridor_floorplan,
    ground_truth_maplet_origins,
    noisy_odometry,
    odometry_covariance,
    odometry_sigmas,
    render_depth,
)

from oracles import pinhole_range


def facing_wall(distance=2.0):
    # wall at x = distance spanning far beyond the view; floor/ceiling out of range
    plan = FloorPlan([Wall(distance, -50, distance, 50, -50, 50)], bounds=(-100, -100, -99, -99), ceiling_height=100)
    return plan, camera_pose(Pose2(0, 0, 0), 0.0)


def test_wall_depth_range():
    plan, pose = facing_wall(2.0)
    intr = Intrinsics()
    frame = render_depth(plan, pose, intr)
    assert np.isfinite(frame.depth).all()
    # widest ray sits at the image corner
    far = pinhole_range(2.0, intr.width / 2, intr.height / 2, intr.fx, intr.fy)
    assert frame.depth.min() >= 2.0 - 1e-12
    assert frame.depth.max() <= far + 1e-12


def test_principal_pixel_depth():
    plan, pose = facing_wall(2.0)
    frame = render_depth(plan, pose)
    cx, cy = Intrinsics().principal
    assert frame.depth[int(cy), int(cx)] == pytest.approx(2.0, abs=1e-3)


def test_depth_matches_pinhole_oracle():
    plan, pose = facing_wall(3.0)
    intr = Intrinsics()
    frame = render_depth(plan, pose, intr)
    cx, cy = intr.principal
    for r, c in [(0, 0), (10, 150), (119, 3), (60, 80)]:
        assert frame.depth[r, c] == pytest.approx(pinhole_range(3.0, c - cx, r - cy, intr.fx, intr.fy), rel=1e-12)


def test_open_space_all_nan():
    plan = FloorPlan([], bounds=(-100, -100, -99, -99), ceiling_height=100)
    frame = render_depth(plan, camera_pose(Pose2(0, 0, 0.3), 1.0))
    assert np.isnan(frame.depth).all()


def test_max_range_cuts_off():
    plan, pose = facing_wall(9.0)
    assert np.isnan(render_depth(plan, pose, max_range=8.0).depth).all()


def test_corridor_is_watertight():
    plan = corridor_floorplan([((0, 0), (0, 6)), ((0, 6), (-6, 6))])
    # every ray from inside hits something within a generous range
    for body in (Pose2(0, 1, 0.3), Pose2(-3, 6, 2.0), Pose2(0, 6, -2.4)):
        frame = render_depth(plan, camera_pose(body, 1.0), max_range=50)
        assert np.isfinite(frame.depth).all()


def test_corridor_rejects_diagonal():
    with pytest.raises(ValueError):
        corridor_floorplan([((0, 0), (1, 1))])


def test_free_space_check():
    plan = corridor_floorplan([((0, 0), (0, 6))])
    check_free_space(plan, [Pose2(0, y, 0) for y in np.linspace(0, 6, 13)])
    with pytest.raises(ValueError):
        check_free_space(plan, [Pose2(0.95, 3, 0)])


def test_trajectory_visits_waypoints():
    spec = TrajectorySpec([[0, 0], [0, 4], [-3, 4]])
    samples = spec.sample()
    times = [t for t, _ in samples]
    assert times == sorted(times)
    end = samples[-1][1]
    assert (end.x, end.y) == pytest.approx((-3, 4), abs=1e-9)
    assert any(abs(p.x) < 1e-9 and abs(p.y - 4) < 1e-9 for _, p in samples)


def test_odometry_sigmas():
    s = odometry_sigmas(Pose2(3.0, 4.0, math.radians(50)))
    assert s[0] == s[1] == pytest.approx(0.02 + 0.05)
    assert s[2] == pytest.approx(math.radians(0.5) + 0.02 * math.radians(50))


def test_noisy_odometry_deterministic():
    m = Pose2(0.5, 0.0, 0.1)
    assert noisy_odometry(m, 7) == noisy_odometry(m, np.random.default_rng(7))
    assert noisy_odometry(m, 7, scale=0.0) == m


def test_noisy_odometry_covariance():
    m = Pose2(0.4, 0.1, 0.2)
    rng = np.random.default_rng(123)
    samples = np.array([noisy_odometry(m, rng).vector - m.vector for _ in range(4000)])
    emp = np.cov(samples.T)
    ref = odometry_covariance(m)
    assert np.allclose(np.diag(emp), np.diag(ref), rtol=0.2)
    # zero mean to within four standard errors
    assert (np.abs(samples.mean(axis=0)) < 4 * np.sqrt(np.diag(ref) / len(samples))).all()


def test_static_agent_origin_is_spawn():
    spawn = Pose2(1.0, 2.0, 0.5)
    run = WorldRun({3: AgentTruth(spawn)})
    assert ground_truth_maplet_origins(run) == {(3, 0): spawn}


def test_origins_follow_keyframes():
    truth = AgentTruth(Pose2(0, 0, 0), {0: Pose2(0, 0, 0), 5: Pose2(2, 0, 1)}, [0, 5])
    got = ground_truth_maplet_origins(WorldRun({0: truth}))
    assert got == {(0, 0): Pose2(0, 0, 0), (0, 1): Pose2(2, 0, 1)}


def test_camera_looks_along_heading():
    pose = camera_pose(Pose2(1, 2, math.pi / 2), 1.2)
    assert isinstance(pose, Pose3)
    assert np.allclose(pose.R[:, 2], [0, 1, 0], atol=1e-12)  # optical axis
    assert np.allclose(pose.R[:, 1], [0, 0, -1], atol=1e-12)  # image down
    assert np.allclose(pose.p, [1, 2, 1.2])
