from __future__ import annotations

import pytest

from latent.corpus import load_manifest
from latent.netlist import parse

DIVIDER = """divider
V1 in 0 1
R1 in mid 1k
R2 mid 0 1k
.end
"""

INVERTER = """nmos inverter
VDD vdd 0 2
VIN in 0 0
RL vdd out 10k
M1 out in 0 nmod W=1u L=1u
.model nmod nmos vto=0.5 kp=200u
.end
"""


@pytest.fixture
def divider():
    return parse(DIVIDER)


@pytest.fixture
def inverter():
    return parse(INVERTER)


@pytest.fixture(scope="session")
def manifest():
    return load_manifest()


@pytest.fixture(scope="session")
def corpus(manifest):
    return {e.name: manifest.load(e) for e in manifest}


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import VERDICTS

    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in VERDICTS:
        terminalreporter.write_line(line)
