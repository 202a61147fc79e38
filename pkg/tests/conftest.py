"""Shared scenario runs: the bundled simulations are too slow to repeat per test."""

import time

import pytest

from maplets.scenario import load_config, run_scenario


def noise_free_two_agent():
    # single-closure fusion is judged without odometry noise so that the
    # closure, not drift, sets the cross-agent error
    cfg = load_config("two-agent-loop")
    agents = [cfg.agents[0], cfg.agents[1].model_copy(update={"anchor_error": (0.15, -0.1, 1.0)})]
    return cfg.model_copy(update={
        "odometry": cfg.odometry.model_copy(update={"noise_scale": 0.0}),
        "agents": agents,
    })


@pytest.fixture(scope="session")
def two_agent_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("two-agent-loop")
    t0 = time.perf_counter()
    res = run_scenario(load_config("two-agent-loop"), out)
    return res, out, time.perf_counter() - t0


@pytest.fixture(scope="session")
def noise_free_run():
    return run_scenario(noise_free_two_agent())


@pytest.fixture(scope="session")
def l_corridor_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("l-corridor")
    return run_scenario(load_config("l-corridor"), out), out
