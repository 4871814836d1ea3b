import numpy as np
import pytest

from lungquant.phantom import generate_phantom


@pytest.fixture(scope="session")
def phantom():
    return generate_phantom(seed=7, lesion_fraction_target=0.0)


@pytest.fixture(scope="session")
def lesion_phantom():
    return generate_phantom(seed=11, lesion_fraction_target=0.3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

from hypothesis import settings  # noqa: E402

settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")


# acceptance reporting: one PASS/FAIL line per criterion-marked test
_CRITERIA: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or (rep.when == "setup" and not rep.passed)):
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if rep.passed else "FAIL"
    _CRITERIA.append(f"{status}  {marker.args[0]}" + (f"  ({detail})" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
