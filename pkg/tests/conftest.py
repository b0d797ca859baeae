import os

# allow in-process multi-thread checks even on single-core hosts
os.environ.setdefault("NUMBA_NUM_THREADS", "4")

import ctatlas  # noqa: E402,F401  (sets the threading layer order)
import numba  # noqa: E402
import numpy as np  # noqa: E402
import pytest  # noqa: E402
from hypothesis import HealthCheck, settings  # noqa: E402

numba.set_num_threads(1)

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def atlas_target():
    from ctatlas.phantom import make_atlas_target
    return make_atlas_target(seed=0)


@pytest.fixture(scope="session")
def phantom():
    from ctatlas.phantom import PhantomParams, generate_phantom
    return generate_phantom(PhantomParams(seed=5))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
