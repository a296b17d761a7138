import re

import numpy as np
import pytest

from hekf_kit import datagen, harness
from hekf_kit.vehicle import VehicleParams

SMALL = dict(train_count=2, train_duration=20.0, eval_duration=20.0, grid_layers=(1,), grid_neurons=(5,),
             max_epochs=5, tune=False)


@pytest.fixture(scope="session")
def nominal():
    return VehicleParams()


@pytest.fixture(scope="session")
def small_cfg():
    return harness.ProtocolConfig(**SMALL)


@pytest.fixture(scope="session")
def small_splits(small_cfg, nominal):
    return harness.generate_all(small_cfg, nominal)


@pytest.fixture(scope="session")
def small_trained(small_splits, small_cfg):
    return harness.train_bank(small_splits["train"], small_cfg, workers=1)


@pytest.fixture(scope="session")
def short_maneuver(nominal):
    """A 20 s in-distribution chirp generated with the perturbed truth parameters."""
    spec = datagen.evaluation_spec("full_load", 4242, 20.0, nominal)
    return datagen.generate_maneuver(spec, datagen.perturbed_params(nominal, 0.1, 7))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config._criteria = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion outcome: ``criterion(n, ok, detail)``."""
    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        request.config._criteria.setdefault(number, []).append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_criteria", {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(lines, key=lambda n: (int(re.match(r"\d+", str(n)).group()), str(n))):
        for line in lines[number]:
            terminalreporter.write_line(line)
