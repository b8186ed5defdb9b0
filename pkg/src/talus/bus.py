"""Locality-gated, encrypted command channel between the CPU and the TPM.

Every command and response crosses the wire as an encrypt-then-MAC frame::

    cycle (1) || locality (1) || seq (8, BE) || len (4, BE) || ciphertext || tag (32)

The tag covers everything before it. Each direction has its own sequence
counter and derived key pair; the receiver accepts only the exact next
sequence number. All frames are appended verbatim to the tap, which the
adversary reads in full.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Any, Callable

from . import codec
from .crypto import DIGEST_SIZE, SYMKEY_SIZE, ctr_crypt, kdf, mac, mac_equal, require_len
from .errors import BusError, TalusError, TpmError

IO = 0x00
DMA = 0x02
CYCLES = {IO: "IO", DMA: "DMA"}

REQUEST = "request"
RESPONSE = "response"

_HEADER = struct.Struct(">BBQI")

ERROR_CODES = frozenset({
    "NOT_ESTABLISHED", "SESSION_BUSY", "BUS_BUSY", "REPLAY", "TAMPER",
    "LOCALITY_FAIL", "INVALID_LOCALITY",
})


@dataclass(frozen=True)
class BusFrame:
    cycle: int
    locality: int
    seq: int
    ciphertext: bytes
    tag: bytes
    # Harness-only audit fields; never part of the wire encoding.
    direction: str = field(default=REQUEST, compare=False)
    origin: str = field(default="", compare=False)

    def header(self) -> bytes:
        return _HEADER.pack(self.cycle, self.locality, self.seq, len(self.ciphertext))

    def wire(self) -> bytes:
        return self.header() + self.ciphertext + self.tag

    @classmethod
    def parse(cls, wire: bytes, direction: str = REQUEST) -> "BusFrame":
        if len(wire) < _HEADER.size + DIGEST_SIZE:
            raise BusError("TAMPER", "short frame")
        cycle, locality, seq, length = _HEADER.unpack_from(wire)
        if len(wire) != _HEADER.size + length + DIGEST_SIZE:
            raise BusError("TAMPER", "length field mismatch")
        if cycle not in CYCLES or locality > 4:
            raise BusError("TAMPER", "bad header")
        body = wire[_HEADER.size:_HEADER.size + length]
        return cls(cycle, locality, seq, body, wire[-DIGEST_SIZE:], direction)


class Locality4Capability:
    """Unforgeable token; whoever holds it may emit locality-4 frames."""

    __slots__ = ()

    def __repr__(self) -> str:
        return "<Locality4Capability>"


@dataclass
class _DirectionKeys:
    enc: bytes = field(repr=False)
    mac: bytes = field(repr=False)

    @classmethod
    def derive(cls, psk: bytes, direction: str, epoch: int) -> "_DirectionKeys":
        ctx = direction.encode() + struct.pack(">Q", epoch)
        return cls(kdf(psk, "BUS-ENC", ctx, SYMKEY_SIZE), kdf(psk, "BUS-MAC", ctx, DIGEST_SIZE))

    def seal(self, cycle: int, locality: int, seq: int, payload: bytes, origin: str, direction: str) -> BusFrame:
        ct = ctr_crypt(self.enc, seq, payload)
        unsigned = BusFrame(cycle, locality, seq, ct, b"")
        tag = mac(self.mac, unsigned.header() + ct)
        return BusFrame(cycle, locality, seq, ct, tag, direction, origin)

    def open(self, frame: BusFrame, expected_seq: int) -> bytes:
        if not mac_equal(mac(self.mac, frame.header() + frame.ciphertext), frame.tag):
            raise BusError("TAMPER", "frame tag mismatch")
        if frame.seq != expected_seq:
            raise BusError("REPLAY", f"seq {frame.seq}, expected {expected_seq}")
        return ctr_crypt(self.enc, frame.seq, frame.ciphertext)


def _derive_pair(psk: bytes, epoch: int) -> tuple[_DirectionKeys, _DirectionKeys]:
    return _DirectionKeys.derive(psk, REQUEST, epoch), _DirectionKeys.derive(psk, RESPONSE, epoch)


@dataclass
class ChannelState:
    psk: bytes = field(repr=False)
    epoch: int = 0
    send_seq: int = 0
    recv_seq: int = 0
    io_session: int | None = None


class SecureBus:
    """The chipset-side bus with its two endpoints and a wiretap."""

    def __init__(self, tpm):
        self.tpm = tpm
        self.channel: ChannelState | None = None
        self._capability: Locality4Capability | None = None
        self._frames: list[BusFrame] = []
        self._tpm_recv_seq = 0
        self._tpm_send_seq = 0
        self._cpu_keys: tuple[_DirectionKeys, _DirectionKeys] | None = None
        self._tpm_keys: dict[tuple[bytes, int], tuple[_DirectionKeys, _DirectionKeys]] = {}

    def issue_capability(self) -> Locality4Capability:
        """Hand the locality-4 token to the CPU. Works exactly once (power-on wiring)."""
        if self._capability is not None:
            raise BusError("LOCALITY_FAIL", "locality-4 capability already issued")
        self._capability = Locality4Capability()
        return self._capability

    def establish(self, psk: bytes) -> ChannelState:
        """Start a fresh channel epoch; counters restart at zero and the tap is emptied.

        The epoch comes from the TPM's persistent epoch counter, so frames
        recorded under an earlier channel (or an earlier boot) never verify.
        """
        require_len(psk, SYMKEY_SIZE, "channel key")
        epoch = self.tpm.begin_channel_epoch()
        self.channel = ChannelState(bytes(psk), epoch)
        self._frames = []
        self._tpm_recv_seq = 0
        self._tpm_send_seq = 0
        self._cpu_keys = _derive_pair(psk, epoch)
        return self.channel

    def _tpm_side_keys(self) -> tuple[_DirectionKeys, _DirectionKeys]:
        psk = self.tpm.channel_psk
        if psk is None:
            raise BusError("NOT_ESTABLISHED", "TPM has no channel key")
        key = (psk, self.tpm.channel_epoch)
        if key not in self._tpm_keys:
            self._tpm_keys[key] = _derive_pair(*key)
        return self._tpm_keys[key]

    def _require_channel(self) -> ChannelState:
        if self.channel is None:
            raise BusError("NOT_ESTABLISHED")
        return self.channel

    def _check_locality(self, locality: int, capability) -> None:
        if not isinstance(locality, int) or not 0 <= locality <= 4:
            raise BusError("INVALID_LOCALITY", f"locality {locality!r}")
        if locality == 4 and (capability is None or capability is not self._capability):
            raise BusError("LOCALITY_FAIL", "locality 4 requires the microcode capability")

    def io_session_open(self, locality: int, capability: Locality4Capability | None = None) -> None:
        ch = self._require_channel()
        if not isinstance(locality, int) or not 2 <= locality <= 4:
            raise BusError("INVALID_LOCALITY", "programmed-I/O sessions need locality 2..4")
        self._check_locality(locality, capability)
        if ch.io_session is not None:
            raise BusError("SESSION_BUSY", f"session open at locality {ch.io_session}")
        ch.io_session = locality

    def io_session_close(self) -> None:
        self._require_channel().io_session = None

    def send(
        self,
        payload: bytes,
        *,
        locality: int,
        cycle: int,
        capability: Locality4Capability | None = None,
        origin: str = "software",
    ) -> bytes:
        """Frame ``payload``, deliver it to the TPM endpoint and return the decrypted response."""
        ch = self._require_channel()
        self._check_locality(locality, capability)
        if cycle not in CYCLES:
            raise BusError("TAMPER", f"unknown cycle {cycle!r}")
        if ch.io_session is not None and (cycle == DMA or locality != ch.io_session):
            raise BusError("BUS_BUSY", "programmed-I/O session in progress")
        frame = self._cpu_keys[0].seal(cycle, locality, ch.send_seq, bytes(payload), origin, REQUEST)
        ch.send_seq += 1
        response_wire = self.inject(frame.wire(), origin=origin)
        return self.deliver_to_cpu(response_wire)

    def inject(self, wire: bytes, origin: str = "injected") -> bytes:
        """TPM endpoint: accept one request frame from the wire, return the response wire bytes."""
        self._require_channel()
        req_keys, resp_keys = self._tpm_side_keys()
        frame = BusFrame.parse(wire, REQUEST)
        self._frames.append(BusFrame(frame.cycle, frame.locality, frame.seq, frame.ciphertext,
                                     frame.tag, REQUEST, origin))
        payload = req_keys.open(frame, self._tpm_recv_seq)
        self._tpm_recv_seq += 1
        response = self._dispatch(payload, frame.locality)
        out = resp_keys.seal(frame.cycle, frame.locality, self._tpm_send_seq, response, "tpm", RESPONSE)
        self._tpm_send_seq += 1
        self._frames.append(out)
        return out.wire()

    def deliver_to_cpu(self, wire: bytes) -> bytes:
        """CPU endpoint: verify and decrypt one response frame."""
        ch = self._require_channel()
        frame = BusFrame.parse(wire, RESPONSE)
        payload = self._cpu_keys[1].open(frame, ch.recv_seq)
        ch.recv_seq += 1
        return payload

    def _dispatch(self, payload: bytes, locality: int) -> bytes:
        try:
            request = codec.unpack(payload)
            result = self.tpm.execute(request["cmd"], request["args"], locality)
        except TalusError as exc:
            return codec.pack({"err": exc.code, "msg": str(exc)})
        except (KeyError, ValueError, TypeError) as exc:
            return codec.pack({"err": "UNKNOWN_COMMAND", "msg": str(exc)})
        return codec.pack({"ok": result})

    def tap(self) -> list[BusFrame]:
        """Snapshot of every frame seen on the wire, in order."""
        return list(self._frames)

    @property
    def frame_count(self) -> int:
        return len(self._frames)


class TpmClient:
    """Issues TPM commands over the bus from one execution context."""

    def __init__(
        self,
        bus: SecureBus,
        locality: int,
        cycle: int = DMA,
        capability: Locality4Capability | None = None,
        origin: str = "software",
        recorder: Callable[[str, str, bytes, str], Any] | None = None,
    ):
        self.bus = bus
        self.locality = locality
        self.cycle = cycle
        self.capability = capability
        self.origin = origin
        self.recorder = recorder

    def call(self, cmd: str, **args: Any) -> Any:
        payload = codec.pack({"cmd": cmd, "args": args})
        try:
            response = codec.unpack(self.bus.send(
                payload, locality=self.locality, cycle=self.cycle,
                capability=self.capability, origin=self.origin,
            ))
        except TalusError as exc:
            self._record(cmd, payload, exc.code)
            raise
        if "err" in response:
            self._record(cmd, payload, response["err"])
            raise TpmError(response["err"], response.get("msg", ""))
        self._record(cmd, payload, "ok")
        return response["ok"]

    def _record(self, cmd: str, payload: bytes, result: str) -> None:
        if self.recorder is not None:
            self.recorder(self.origin, cmd, payload, result)
