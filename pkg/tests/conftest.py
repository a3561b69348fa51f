import pytest

from mace_toy.pipeline import ErasureConfig, pretrain


@pytest.fixture(scope="session")
def default_cfg():
    return ErasureConfig().validate()


@pytest.fixture(scope="session")
def pretrained(default_cfg):
    return pretrain(default_cfg)


@pytest.fixture(scope="session")
def two_concept_cfg():
    return ErasureConfig(concepts={"cat": ("animal", ("kitten",)), "car": ("vehicle", ("auto",))},
                         erase=["cat"], retain=["car"], pretrain_steps=1500).validate()


@pytest.fixture(scope="session")
def two_concept_model(two_concept_cfg):
    return pretrain(two_concept_cfg)


_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    n = int(name.rsplit("_", 1)[-1])
    detail = dict(report.user_properties).get("detail", "")
    if report.when == "call" or report.failed or report.skipped:
        status = "PASS" if report.passed and report.when == "call" else "FAIL"
        if n not in _CRITERIA or status == "FAIL":
            _CRITERIA[n] = (status, detail or _CRITERIA.get(n, ("", ""))[1])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}")
