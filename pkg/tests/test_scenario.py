import json
import math

import numpy as np
import pytest

from maplets.cli import main
from maplets.comms import BandwidthLedger
from maplets.errors import ConfigError
from maplets.scenario import (
    BUNDLED,
    load_config,
    read_bandwidth_csv,
    read_ply,
    report_bandwidth,
    simulate,
)
from maplets.skeleton import read_graph


def test_bundled_configs_load():
    for name in BUNDLED:
        cfg = load_config(name)
        assert cfg.name == name
        assert [a.id for a in cfg.agents] == sorted(a.id for a in cfg.agents)


def test_unknown_key_is_rejected(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("name: x\nworld: {corridors: [[[0, 0], [0, 5]]]}\nagents: [{id: 0, waypoints: [[0, 0]]}]\nspeeed: 2\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_duplicate_agent_ids_are_rejected(tmp_path):
    p = tmp_path / "dup.yaml"
    p.write_text(
        "name: x\nworld: {corridors: [[[0, 0], [0, 5]]]}\n"
        "agents: [{id: 0, waypoints: [[0, 0]]}, {id: 0, waypoints: [[0, 1]]}]\n"
    )
    with pytest.raises(ConfigError):
        load_config(p)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")
    p = tmp_path / "list.yaml"
    p.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_cli_config_errors_exit_2(tmp_path, capsys):
    p = tmp_path / "k.yaml"
    p.write_text(
        "name: k\nworld: {corridors: [[[0, 0], [0, 5]]]}\nagents: [{id: 0, waypoints: [[0, 0], [0, 4]]}]\n"
        "builder: {kappa_max_deg: 0}\n"
    )
    assert main(["run", str(p), "--out", str(tmp_path / "o")]) == 2
    assert main(["run", "l-corridor", "--seed", "-1", "--out", str(tmp_path / "o")]) == 2
    assert "config error" in capsys.readouterr().err


def test_report_bandwidth_empty():
    rows, summary = report_bandwidth({}, {})
    assert rows == []
    assert summary["compression_ratio"] == "n/a"
    assert summary["protocol_bytes"] is None
    assert summary["pipeline_ratio"] == "n/a"


def test_report_bandwidth_stats():
    rows, summary = report_bandwidth({0: [100, 300]}, {0: [10]}, None)
    pc = next(r for r in rows if r["representation"] == "point_cloud")
    assert (pc["count"], pc["min"], pc["max"], pc["mean"], pc["total"]) == (2, 100, 300, 200.0, 400)
    assert summary["compression_ratio"] == 40.0


def test_straight_hallway_needs_no_correction():
    res = simulate(load_config("straight-hallway"), no_comms=True)
    st = res.stores[0]
    assert st.skeleton.chi2 == pytest.approx(0.0, abs=1e-12)
    chained = st.initial_skeleton()
    for k, p in chained.poses.items():
        assert np.allclose(p.vector, st.skeleton.poses[k].vector, atol=1e-9)


def test_l_corridor_origins_near_junction(l_corridor_run):
    res, _ = l_corridor_run
    assert len(res.runs[0].maplets) == 2
    second = res.truth[(0, 1)]
    assert math.hypot(second.x - 0.0, second.y - 6.0) <= 0.5


def test_outputs_round_trip(l_corridor_run):
    res, out = l_corridor_run
    post = read_graph(out / "skeleton" / "agent0_post.txt")
    assert set(post.poses) == set(res.stores[0].skeleton.poses)
    for m in res.runs[0].maplets:
        verts, faces = read_ply(out / "maplets" / f"agent0_maplet{m.index:03d}.ply")
        assert len(faces) == len(m.planes)
        assert np.allclose(verts, np.concatenate([p.corners for p in m.planes]))
    rows = read_bandwidth_csv(out / "bandwidth.csv")
    assert rows == res.summary["bandwidth"]
    assert len(BandwidthLedger.read_csv(out / "ledger.csv")) == len(res.ledger.entries)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["maplet_bytes"] == res.summary["maplet_bytes"]


def test_cli_run_writes_tree(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "l-corridor", "--no-comms", "--emit-frames", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "compression" in text and "pipeline ratio n/a" in text
    assert (out / "summary.json").exists()
    assert any((out / "frames").iterdir())
