import pytest

from splatcodec import data

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "ran": False})
    if report.when == "call":
        entry["ran"] = True
    if report.failed or (report.skipped and report.when != "teardown"):
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d} {status}  {e['title']}")


@pytest.fixture(scope="session")
def toy():
    """The reference toy scene: 64 Gaussians, 8 views, 64x64, seed 7."""
    return data.make_toy_scene(data.ToySceneSpec())


@pytest.fixture(scope="session")
def small_toy():
    spec = data.ToySceneSpec(gaussian_count=12, camera_count=4, image_size=24, seed=3)
    return data.make_toy_scene(spec)
