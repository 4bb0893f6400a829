from __future__ import annotations

import os

import pytest


def pytest_addoption(parser: pytest.Parser) -> None:
    parser.addoption(
        "--live-url",
        action="store",
        default=os.environ.get("TRIG_LIVE_URL"),
        help="base URL of a local OpenAI-compatible endpoint for the live smoke test",
    )
    parser.addoption(
        "--live-model",
        action="store",
        default=os.environ.get("TRIG_LIVE_MODEL", "default"),
        help="model name to request from the live endpoint",
    )


@pytest.fixture()
def live_url(request: pytest.FixtureRequest) -> str:
    url = request.config.getoption("--live-url")
    if not url:
        pytest.skip("live smoke disabled: pass --live-url or set TRIG_LIVE_URL")
    return url


@pytest.fixture()
def live_model(request: pytest.FixtureRequest) -> str:
    return request.config.getoption("--live-model")
