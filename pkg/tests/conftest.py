import pytest
from hypothesis import settings

from cake_kv.model import BandwidthTrace, CostModel, ModelProfile, RequestSpec

settings.register_profile("default", deadline=None)
settings.load_profile("default")

_acceptance: dict[int, tuple[str, bool, str]] = {}


class Toy:
    """Four chunks; compute 10/20/30/40 ms, fetch 25 ms each."""

    request = RequestSpec(4 * 512, 512)
    profile = ModelProfile("toy", 1, 1, per_token_bytes_override=25_000)
    cost = CostModel(10.0, 10.0 / 512)
    trace = BandwidthTrace.constant(4096)


@pytest.fixture
def toy():
    return Toy


@pytest.fixture
def detail(request):
    """Free-form measurements an acceptance test wants shown in its report line."""
    request.node.acceptance_detail = []
    return request.node.acceptance_detail


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or rep.when != "call":
        return
    number, title = marker.args
    notes = "; ".join(getattr(item, "acceptance_detail", []))
    if rep.failed and call.excinfo is not None:
        notes = (notes + "; " if notes else "") + call.excinfo.exconly().splitlines()[0][:200]
    _acceptance[number] = (title, rep.passed, notes)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        title, ok, notes = _acceptance[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:2d}. {title}: {notes}")
