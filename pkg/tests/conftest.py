import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from jointseg import synth
from jointseg.atlas import DeformationField, control_grid_for

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion id")


def pytest_runtest_logreport(report):
    # one line per criterion; a criterion passes only if all its tests pass
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        key = props["criterion"]
        title, ok = _CRITERIA.get(key, (props.get("title", ""), True))
        _CRITERIA[key] = (title, ok and report.passed)


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            item.user_properties.append(("criterion", mark.args[0]))
            item.user_properties.append(("title", mark.args[1]))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA):
        title, ok = _CRITERIA[key]
        terminalreporter.write_line(f"criterion {key:2d} {'PASS' if ok else 'FAIL'}: {title}")


@pytest.fixture(scope="session")
def default_atlas():
    return synth.default_atlas()


@pytest.fixture(scope="session")
def small_dataset(default_atlas):
    truth = synth.default_truth()
    fld = DeformationField.zeros(control_grid_for(default_atlas.grid))
    return synth.sample_dataset(default_atlas, truth, fld, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
