from __future__ import annotations

from dataclasses import dataclass

import pytest

from talus import flows
from talus.enclave import Exit, Nop
from talus.flows import Platform


@dataclass
class Launched:
    platform: Platform
    eid: int
    pages: list
    sigstruct: object

    @property
    def identity(self):
        return self.platform.cpu.secs(self.eid).identity


def build_enclave(platform: Platform, seed: int, label: str = "app", n_pages: int = 3,
                  isvprodid: int = 1, launch: bool = True) -> Launched:
    pages = flows.scenario_pages(seed, label, n_pages)
    sig = flows.scenario_sigstruct(seed, pages, isvprodid)
    eid = flows.create_enclave(platform, pages, sig)
    if launch:
        flows.launch_enclave(platform, eid)
    return Launched(platform, eid, pages, sig)


@pytest.fixture
def platform() -> Platform:
    return Platform.build(1234)


@pytest.fixture
def app(platform) -> Launched:
    return build_enclave(platform, 1234)


@pytest.fixture
def qe(platform) -> Launched:
    return build_enclave(platform, 1234, "qe", isvprodid=2)


@pytest.fixture
def ctx(platform, app):
    return platform.cpu.eenter(app.eid, [Nop(), Exit()])
