import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

from ebrsim.ann import AttributeStore, build_ivf, kmeans_fit  # noqa: E402
from ebrsim.evalharness import training_sets, temporal_split, variant_config  # noqa: E402
from ebrsim.flexdate import CalendarStore  # noqa: E402
from ebrsim.twotower import TwoTowerModel, batch_embed_listings, train  # noqa: E402
from ebrsim.worldgen import WorldConfig, generate_world, simulate_journeys  # noqa: E402

SMALL = WorldConfig(num_listings=2_000, num_users=800, num_places=6, seed=11)


@pytest.fixture(scope="session")
def world():
    return generate_world(SMALL)


@pytest.fixture(scope="session")
def journeys(world):
    return simulate_journeys(world)


@pytest.fixture(scope="session")
def split(world, journeys):
    return temporal_split(world, journeys)


@pytest.fixture(scope="session")
def model(world, split):
    trip, _ = training_sets(split, seed=11)
    cfg = variant_config("v3", len(world.places), 11, epochs=3)
    return train(TwoTowerModel.init(cfg), trip, world).model


@pytest.fixture(scope="session")
def table(model, world):
    return batch_embed_listings(model, world)


@pytest.fixture(scope="session")
def kmeans(table):
    return kmeans_fit(table, 16, seed=1)


@pytest.fixture()
def index(world, table, kmeans):
    """Fresh index per test: updates mutate its calendar."""
    attrs = AttributeStore.from_world(world, CalendarStore.from_world(world))
    return build_ivf(table, kmeans, attrs)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_world():
    return generate_world(WorldConfig())


@pytest.fixture(scope="session")
def default_journeys(default_world):
    return simulate_journeys(default_world)


# -- acceptance verdicts -----------------------------------------------------------------

CRITERIA = {
    "AC1": "full-probe IVF equals exact search",
    "AC2": "nprobes sweep",
    "AC3": "cluster skew",
    "AC4": "replay ordering",
    "AC5": "sampler comparison",
    "AC6": "gradient check",
    "AC7": "flexible dates",
    "AC8": "update throughput",
    "AC9": "sharding transparency",
    "AC10": "cascade soundness",
}
_verdicts: dict[str, str] = {}
_acceptance_ran: list[str] = []  # criterion keys, from test names like test_ac4_...


@pytest.fixture()
def verdict(request):
    """``verdict(key, ok, detail)`` records one PASS/FAIL line and asserts ``ok``."""
    def record(key: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} {key} {CRITERIA[key]}: {detail}"
        _verdicts[key] = line
        print(line)
        assert ok, line

    _acceptance_ran.append(request.node.name.split("_")[1].upper())
    return record


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_ran:
        return
    terminalreporter.section("acceptance criteria")
    for key, name in CRITERIA.items():
        if key not in _acceptance_ran:
            continue
        terminalreporter.write_line(_verdicts.get(key, f"FAIL {key} {name}: no verdict (error)"))
