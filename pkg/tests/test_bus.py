from __future__ import annotations

import pytest

from talus.bus import DMA, IO, REQUEST, BusFrame, SecureBus, TpmClient
from talus.errors import BusError, TpmError
from talus.tpm import TpmDevice


@pytest.fixture
def wired():
    tpm = TpmDevice(b"\x01" * 32, b"\x02" * 32)
    psk = tpm.take_ownership(b"owner")
    bus = SecureBus(tpm)
    cap = bus.issue_capability()
    bus.establish(psk)
    return tpm, bus, cap


def code_of(fn) -> str:
    with pytest.raises((BusError, TpmError)) as err:
        fn()
    return err.value.code


def test_command_round_trip(wired):
    tpm, bus, _ = wired
    client = TpmClient(bus, 1)
    assert client.call("read_clock") == tpm.ticks


def test_frames_are_encrypted_and_sequenced(wired):
    _, bus, _ = wired
    TpmClient(bus, 1).call("pcr_read", index=0)
    frames = bus.tap()
    assert [f.direction for f in frames] == [REQUEST, "response"]
    assert b"pcr_read" not in frames[0].wire()
    assert BusFrame.parse(frames[0].wire()) == frames[0]


def test_replay_rejected(wired):
    _, bus, _ = wired
    TpmClient(bus, 1).call("read_clock")
    assert code_of(lambda: bus.inject(bus.tap()[0].wire())) == "REPLAY"


def test_tamper_rejected(wired):
    _, bus, _ = wired
    TpmClient(bus, 1).call("read_clock")
    wire = bytearray(bus.tap()[0].wire())
    wire[-1] ^= 1
    assert code_of(lambda: bus.inject(bytes(wire))) == "TAMPER"
    wire = bytearray(bus.tap()[0].wire())
    wire[1] = 4  # claim locality 4: header is authenticated
    assert code_of(lambda: bus.inject(bytes(wire))) == "TAMPER"


def test_wrong_psk_fails_closed(wired):
    tpm, _, _ = wired
    rogue = SecureBus(tpm)
    rogue.establish(b"\x00" * 16)
    assert code_of(lambda: TpmClient(rogue, 1).call("read_clock")) == "TAMPER"


def test_new_epoch_kills_old_frames(wired):
    tpm, bus, _ = wired
    TpmClient(bus, 1).call("read_clock")
    old = bus.tap()[0]
    bus.establish(tpm.channel_psk)
    assert code_of(lambda: bus.inject(old.wire())) == "TAMPER"


def test_locality4_needs_capability(wired):
    _, bus, cap = wired
    assert code_of(lambda: TpmClient(bus, 4).call("read_clock")) == "LOCALITY_FAIL"
    assert TpmClient(bus, 4, IO, cap).call("read_clock") >= 0
    assert code_of(bus.issue_capability) == "LOCALITY_FAIL"


def test_invalid_locality(wired):
    _, bus, _ = wired
    assert code_of(lambda: TpmClient(bus, 5).call("read_clock")) == "INVALID_LOCALITY"
    assert code_of(lambda: bus.io_session_open(1)) == "INVALID_LOCALITY"


def test_io_session_arbitration(wired):
    _, bus, cap = wired
    bus.io_session_open(4, cap)
    assert code_of(lambda: TpmClient(bus, 1, DMA).call("read_clock")) == "BUS_BUSY"
    assert code_of(lambda: bus.io_session_open(2)) == "SESSION_BUSY"
    TpmClient(bus, 4, IO, cap).call("read_clock")
    bus.io_session_close()
    TpmClient(bus, 1, DMA).call("read_clock")


def test_unestablished(wired):
    tpm, _, _ = wired
    assert code_of(lambda: SecureBus(tpm).send(b"", locality=0, cycle=DMA)) == "NOT_ESTABLISHED"


def test_tpm_errors_cross_the_bus(wired):
    _, bus, _ = wired
    assert code_of(lambda: TpmClient(bus, 1).call("pcr_reset", index=21)) == "LOCALITY_FAIL"
    # a TPM-level failure still consumes its sequence number on both sides
    assert TpmClient(bus, 1).call("read_clock") > 0
