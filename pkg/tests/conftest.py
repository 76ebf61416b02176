from __future__ import annotations

import pytest
from hypothesis import settings

from fedpgp.encoders import FrozenEncoders

settings.register_profile("default", max_examples=200, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def enc() -> FrozenEncoders:
    return FrozenEncoders.generate(0, K=10)


@pytest.fixture(scope="session")
def small_enc() -> FrozenEncoders:
    return FrozenEncoders.generate(3, K=3, M=4, d_token=8, d_feat=6, d_img=5, hidden=7)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
