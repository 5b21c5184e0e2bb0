import pytest

from eidsim import World, default_config, run_initialization


@pytest.fixture
def cfg():
    return default_config()


@pytest.fixture
def world(cfg):
    return World(cfg, 7)


@pytest.fixture
def initialized(world):
    run_initialization(world, world.user_script())
    return world


def initialized_world(seed=7, cfg=None, **changes):
    cfg = cfg or default_config()
    if changes:
        cfg = cfg.with_(**changes)
    w = World(cfg, seed)
    run_initialization(w, w.user_script())
    return w


def pytest_terminal_summary(terminalreporter):
    from tests.test_acceptance import RESULTS, _line
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(_line(n, *RESULTS[n]))
