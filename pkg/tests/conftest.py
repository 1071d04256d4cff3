from __future__ import annotations

import pytest

from anchorsim.platform import build_platform, load_config

WRITER = "owner-secret"


def platform_for(tenants=("alpha", "beta", "gamma"), *, preset="desk", start=False, **sections):
    """Small platform; keyword sections (``anchor=...``) override the preset."""
    cfg = load_config({"tenants": list(tenants), **sections}, preset=preset)
    return build_platform(cfg, start_anchoring=start)


def write_batches(platform, tenant, count=1, tag="b", size=20):
    gw = platform.gateway
    return [
        gw.create_unique_ids(WRITER, tenant, [f"{tenant}-{tag}-{n}-{i}".encode() for i in range(size)])
        for n in range(count)
    ]


# -- acceptance summary -------------------------------------------------------

_RESULTS: dict[int, tuple[str, str]] = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    n, title = marker.args
    status = "PASS" if call.excinfo is None else "FAIL"
    prev = _RESULTS.get(n)
    if prev is None or prev[0] == "PASS":
        _RESULTS[n] = (status, title)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        status, title = _RESULTS[n]
        terminalreporter.write_line(f"[{status}] criterion {n:2d}: {title}")


@pytest.fixture
def platform3():
    return platform_for()
