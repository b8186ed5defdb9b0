"""Simulated TPM 2.0 subset.

Covers what the enclave integration needs: a seed-derived key hierarchy,
policy sessions, a locality-gated PCR bank, NV counters and data indices,
hash sequences, a tick clock, HMAC / sign / counter-mode encryption, quotes
and a persistable state file.

Commands are plain methods decorated with :func:`command`; the decorator
advances the clock and tallies the call. :meth:`TpmDevice.execute` is the
entry point used by the bus endpoint and passes the frame locality to
commands that take a ``locality`` argument.
"""

from __future__ import annotations

import functools
import hashlib
import inspect
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Mapping

from . import codec, policy
from .crypto import (
    DIGEST_SIZE,
    SYMKEY_SIZE,
    ZERO32,
    CryptoError,
    ctr_crypt,
    hash_extend,
    kdf,
    mac,
    mac_equal,
    sha256,
    sig_keygen,
)
from . import crypto
from .errors import TpmError

NUM_PCRS = policy.NUM_PCRS
LOCALITIES = range(5)
ALL_LOCALITIES = frozenset(LOCALITIES)
LOCALITY4 = frozenset({4})

HMAC_KEY = "hmac-key"
SIGNING_KEY = "signing-key"
SYMMETRIC_KEY = "symmetric-key"
ATTESTATION_KEY = "attestation-key"
KEY_SIZES = {HMAC_KEY: 32, SIGNING_KEY: 32, SYMMETRIC_KEY: SYMKEY_SIZE, ATTESTATION_KEY: 32}
ASYMMETRIC = (SIGNING_KEY, ATTESTATION_KEY)

NV_COUNTER = "counter"
NV_DATA = "data"
NV_MAX_DATA = 2048

STATE_MAGIC = "TALUS-TPM-STATE"
STATE_VERSION = "v1"

ERROR_CODES = frozenset({
    "ALREADY_OWNED", "NOT_OWNED", "INVALID_LOCALITY", "UNKNOWN_SESSION",
    "IDENTITY_LOCALITY", "LOCALITY_FAIL", "BAD_POLICY", "BAD_WRAP",
    "UNKNOWN_PARENT", "UNKNOWN_HANDLE", "POLICY_FAIL", "KIND_MISMATCH",
    "MALFORMED_KEY", "UNKNOWN_SEQUENCE", "BAD_INDEX", "BAD_SIZE", "NV_RANGE",
    "EMPTY_SELECTION", "UNKNOWN_COMMAND", "CORRUPT_STATE", "VERSION_MISMATCH",
})


def _default_masks() -> tuple[list[frozenset], list[frozenset]]:
    extend: list[frozenset] = []
    reset: list[frozenset] = []
    for i in range(NUM_PCRS):
        if i <= 15:
            extend.append(ALL_LOCALITIES)
            reset.append(LOCALITY4 if 11 <= i <= 13 else frozenset())
        elif i == 16 or i == 23:
            extend.append(ALL_LOCALITIES)
            reset.append(ALL_LOCALITIES)
        else:
            extend.append(LOCALITY4)
            reset.append(LOCALITY4)
    return extend, reset


@dataclass
class TpmObject:
    handle: int
    kind: str
    secret_material: bytes = field(repr=False)
    public_part: bytes | None
    auth_policy: bytes
    creation_context: bytes


@dataclass
class NvIndex:
    handle: int
    kind: str
    size: int
    auth_policy: bytes
    counter_value: int = 0
    data_payload: bytes = b""


@dataclass
class PolicySession:
    handle: int
    creation_locality: int
    digest: bytes = ZERO32
    min_locality: int = 0


@codec.register
@dataclass(frozen=True)
class Quote:
    selection: tuple
    composite: bytes
    ticks: int
    qualifying: bytes
    signature: bytes

    def signed_bytes(self) -> bytes:
        return (
            b"TALUS-QUOTE"
            + policy.pcr_bitmap(self.selection)
            + self.composite
            + struct.pack(">QI", self.ticks, len(self.qualifying))
            + self.qualifying
        )


@codec.register
@dataclass(frozen=True)
class TimeRecord:
    ticks: int
    qualifying: bytes
    signature: bytes

    def signed_bytes(self) -> bytes:
        return b"TALUS-TIME" + struct.pack(">QI", self.ticks, len(self.qualifying)) + self.qualifying


def verify_quote(public_part: bytes, quote: Quote) -> bool:
    return crypto.verify(public_part, sha256(quote.signed_bytes()), quote.signature)


def verify_time(public_part: bytes, record: TimeRecord) -> bool:
    return crypto.verify(public_part, sha256(record.signed_bytes()), record.signature)


_COMMANDS: dict[str, bool] = {}


def command(fn):
    """Register ``fn`` as a TPM command; every invocation advances the clock."""
    name = fn.__name__
    _COMMANDS[name] = "locality" in inspect.signature(fn).parameters

    @functools.wraps(fn)
    def wrapper(self, *args, **kwargs):
        self._tick(name)
        return fn(self, *args, **kwargs)

    return wrapper


def _check_locality(locality: int) -> None:
    if not isinstance(locality, int) or locality not in LOCALITIES:
        raise TpmError("INVALID_LOCALITY", f"locality {locality!r} out of range")


class TpmDevice:
    """Single-owner TPM state machine. Commands run strictly in call order."""

    def __init__(
        self,
        primary_seed: bytes,
        endorsement_seed: bytes,
        cost_table: Mapping[str, int] | None = None,
    ):
        self._primary_seed = crypto.require_len(primary_seed, DIGEST_SIZE, "primary seed")
        self._endorsement_seed = crypto.require_len(endorsement_seed, DIGEST_SIZE, "endorsement seed")
        self.cost_table = dict(cost_table or {})
        self.owner_secret: bytes | None = None
        self._channel_psk: bytes | None = None

        self.extend_masks, self.reset_masks = _default_masks()
        self.pcr_defaults = [ZERO32] * NUM_PCRS
        self.pcrs = list(self.pcr_defaults)

        self.objects: dict[int, TpmObject] = {}
        self.nv: dict[int, NvIndex] = {}
        self.sessions: dict[int, PolicySession] = {}
        self.sequences: dict[int, Any] = {}
        self.ticks = 0
        self.command_counts: Counter[str] = Counter()

        self._next_object = 0x80000000
        self._next_session = 0x03000000
        self._next_sequence = 0x80FF0000
        self._next_nv = 0x01500000
        self._wrap_counter = 0
        self.channel_epoch = 0

    # -- plumbing --------------------------------------------------------

    def _tick(self, name: str) -> None:
        self.command_counts[name] += 1
        self.ticks += self.cost_table.get(name, 1)

    def execute(self, name: str, args: Mapping[str, Any], locality: int) -> Any:
        """Dispatch one command arriving from the bus at ``locality``."""
        _check_locality(locality)
        if name not in _COMMANDS:
            raise TpmError("UNKNOWN_COMMAND", name)
        kwargs = dict(args)
        if _COMMANDS[name]:
            kwargs["locality"] = locality
        else:
            kwargs.pop("locality", None)
        try:
            return getattr(self, name)(**kwargs)
        except TypeError as exc:
            raise TpmError("UNKNOWN_COMMAND", f"bad arguments for {name}: {exc}") from exc

    @property
    def owned(self) -> bool:
        return self.owner_secret is not None

    @property
    def channel_psk(self) -> bytes | None:
        return self._channel_psk

    def begin_channel_epoch(self) -> int:
        """Chipset wiring, not a command: bump the persistent channel epoch."""
        self.channel_epoch += 1
        return self.channel_epoch

    def _alloc_object(self, kind: str, secret: bytes, auth_policy: bytes, context: bytes) -> TpmObject:
        public = sig_keygen(secret)[0] if kind in ASYMMETRIC else None
        obj = TpmObject(self._next_object, kind, secret, public, auth_policy, context)
        self.objects[obj.handle] = obj
        self._next_object += 1
        return obj

    def _object(self, handle: int, kind: str | tuple[str, ...] | None = None) -> TpmObject:
        obj = self.objects.get(handle)
        if obj is None:
            raise TpmError("UNKNOWN_HANDLE", f"object {handle:#x}")
        kinds = (kind,) if isinstance(kind, str) else kind
        if kinds is not None and obj.kind not in kinds:
            raise TpmError("KIND_MISMATCH", f"object {handle:#x} is {obj.kind}")
        return obj

    def _session(self, handle: int) -> PolicySession:
        s = self.sessions.get(handle)
        if s is None:
            raise TpmError("UNKNOWN_SESSION", f"session {handle!r}")
        return s

    def _authorize(self, session: int | None, auth_policy: bytes, locality: int) -> None:
        """Digest-equality gate. The session is consumed whatever the outcome."""
        if session is None:
            if auth_policy == ZERO32:
                return
            raise TpmError("POLICY_FAIL", "object requires a policy session")
        s = self.sessions.pop(session, None)
        if s is None:
            raise TpmError("UNKNOWN_SESSION", f"session {session!r}")
        if locality < s.min_locality or not mac_equal(s.digest, auth_policy):
            raise TpmError("POLICY_FAIL", "policy digest mismatch")

    def _pcr_index(self, index: int) -> int:
        if not isinstance(index, int) or not 0 <= index < NUM_PCRS:
            raise TpmError("BAD_INDEX", f"PCR {index!r}")
        return index

    def _check_pcr_read(self, index: int, locality: int) -> None:
        if index == 21 and locality != 4:
            raise TpmError("LOCALITY_FAIL", "PCR21 is readable at locality 4 only")

    # -- ownership and key hierarchy ------------------------------------

    @command
    def take_ownership(self, owner_secret: bytes) -> bytes:
        if self.owned:
            raise TpmError("ALREADY_OWNED")
        self.owner_secret = bytes(owner_secret)
        self._channel_psk = kdf(self._endorsement_seed, "CHANNEL", self.owner_secret, SYMKEY_SIZE)
        return self._channel_psk

    @command
    def create_primary(
        self, kind: str, creation_context: bytes, auth_policy: bytes = ZERO32
    ) -> tuple[int, bytes | None]:
        if not self.owned:
            raise TpmError("NOT_OWNED")
        if kind not in KEY_SIZES:
            raise TpmError("KIND_MISMATCH", f"unknown kind {kind!r}")
        if len(auth_policy) != DIGEST_SIZE:
            raise TpmError("BAD_SIZE", "auth_policy must be 32 bytes")
        secret = kdf(self._primary_seed, kind.upper(), creation_context, KEY_SIZES[kind])
        obj = self._alloc_object(kind, secret, bytes(auth_policy), bytes(creation_context))
        return obj.handle, obj.public_part

    def _wrap_keys(self, parent: TpmObject) -> tuple[bytes, bytes]:
        material = kdf(parent.secret_material, "WRAP", b"", SYMKEY_SIZE + DIGEST_SIZE)
        return material[:SYMKEY_SIZE], material[SYMKEY_SIZE:]

    def _parent(self, handle: int) -> TpmObject:
        parent = self.objects.get(handle)
        if parent is None:
            raise TpmError("UNKNOWN_PARENT", f"parent {handle!r}")
        return parent

    @command
    def create_wrapped(
        self, parent: int, kind: str, creation_context: bytes, auth_policy: bytes = ZERO32
    ) -> bytes:
        p = self._parent(parent)
        if kind not in KEY_SIZES:
            raise TpmError("KIND_MISMATCH", f"unknown kind {kind!r}")
        secret = kdf(p.secret_material, "CHILD-" + kind.upper(), creation_context, KEY_SIZES[kind])
        plain = codec.pack({
            "kind": kind,
            "secret": secret,
            "auth_policy": bytes(auth_policy),
            "context": bytes(creation_context),
        })
        enc_key, mac_key = self._wrap_keys(p)
        self._wrap_counter += 1
        head = struct.pack(">Q", self._wrap_counter)
        body = head + ctr_crypt(enc_key, self._wrap_counter, plain)
        return body + mac(mac_key, body)

    @command
    def load(self, parent: int, blob: bytes) -> tuple[int, bytes | None]:
        p = self._parent(parent)
        if len(blob) < 8 + DIGEST_SIZE:
            raise TpmError("BAD_WRAP", "blob too short")
        enc_key, mac_key = self._wrap_keys(p)
        body, tag = blob[:-DIGEST_SIZE], blob[-DIGEST_SIZE:]
        if not mac_equal(mac(mac_key, body), tag):
            raise TpmError("BAD_WRAP", "integrity check failed")
        (nonce,) = struct.unpack(">Q", body[:8])
        fields = codec.unpack(ctr_crypt(enc_key, nonce, body[8:]))
        obj = self._alloc_object(fields["kind"], fields["secret"], fields["auth_policy"], fields["context"])
        return obj.handle, obj.public_part

    # -- policy sessions -------------------------------------------------

    @command
    def policy_start_session(self, locality: int) -> int:
        _check_locality(locality)
        s = PolicySession(self._next_session, locality)
        self.sessions[s.handle] = s
        self._next_session += 1
        return s.handle

    @command
    def policy_command(self, session: int, kind: str, args: Mapping[str, Any], *, locality: int) -> bytes:
        """Extend a session digest with a LOCALITY, PCR or IDENTITY assertion."""
        s = self._session(session)
        if kind == "LOCALITY":
            minimum = int(args["min"])
            _check_locality(minimum)
            if locality < minimum or s.creation_locality < minimum:
                raise TpmError("LOCALITY_FAIL", f"locality below {minimum}")
            s.min_locality = max(s.min_locality, minimum)
            term = policy.locality_term(minimum)
        elif kind == "PCR":
            indices = sorted({self._pcr_index(i) for i in args["indices"]})
            if not indices:
                raise TpmError("EMPTY_SELECTION")
            for i in indices:
                self._check_pcr_read(i, locality)
            term = policy.pcr_term(indices, policy.pcr_composite(self.pcrs[i] for i in indices))
        elif kind == "IDENTITY":
            if s.creation_locality != 4 or locality != 4:
                raise TpmError("IDENTITY_LOCALITY", "identity assertions need locality 4")
            try:
                term = policy.identity_term(args["fields"])
            except (ValueError, KeyError) as exc:
                raise TpmError("BAD_POLICY", str(exc)) from exc
        else:
            raise TpmError("BAD_POLICY", f"unknown policy kind {kind!r}")
        s.digest = hash_extend(s.digest, term)
        return s.digest

    @command
    def policy_get_digest(self, session: int) -> bytes:
        return self._session(session).digest

    # -- object use ------------------------------------------------------

    @command
    def hmac_sign(self, handle: int, session: int | None, msg: bytes, *, locality: int) -> bytes:
        obj = self._object(handle, HMAC_KEY)
        self._authorize(session, obj.auth_policy, locality)
        return mac(obj.secret_material, msg)

    @command
    def hmac_verify(self, handle: int, session: int | None, msg: bytes, tag: bytes, *, locality: int) -> bool:
        obj = self._object(handle, HMAC_KEY)
        self._authorize(session, obj.auth_policy, locality)
        return mac_equal(mac(obj.secret_material, msg), tag)

    @command
    def sign(self, handle: int, session: int | None, digest: bytes, *, locality: int) -> bytes:
        obj = self._object(handle, SIGNING_KEY)
        self._authorize(session, obj.auth_policy, locality)
        return crypto.sign(obj.secret_material, digest)

    @command
    def encrypt_decrypt(self, handle: int, session: int | None, nonce: int, data: bytes, *, locality: int) -> bytes:
        obj = self._object(handle, SYMMETRIC_KEY)
        self._authorize(session, obj.auth_policy, locality)
        return ctr_crypt(obj.secret_material, nonce, data)

    @command
    def release_symmetric(self, handle: int, session: int | None, *, locality: int) -> bytes:
        """The only command that emits raw key material; locality 4 only."""
        obj = self._object(handle, SYMMETRIC_KEY)
        if locality != 4:
            raise TpmError("LOCALITY_FAIL", "key release is reserved to locality 4")
        self._authorize(session, obj.auth_policy, locality)
        return obj.secret_material

    @command
    def verify_signature(self, public_part: bytes, digest: bytes, signature: bytes) -> bool:
        try:
            return crypto.verify(public_part, digest, signature)
        except CryptoError as exc:
            raise TpmError("MALFORMED_KEY", str(exc)) from exc

    # -- hash sequences --------------------------------------------------

    @command
    def hash_sequence_start(self) -> int:
        handle = self._next_sequence
        self._next_sequence += 1
        self.sequences[handle] = hashlib.sha256()
        return handle

    def _sequence(self, seq: int):
        h = self.sequences.get(seq)
        if h is None:
            raise TpmError("UNKNOWN_SEQUENCE", f"sequence {seq!r}")
        return h

    @command
    def hash_sequence_update(self, seq: int, chunk: bytes) -> None:
        self._sequence(seq).update(bytes(chunk))

    @command
    def hash_sequence_complete(self, seq: int) -> bytes:
        h = self._sequence(seq)
        del self.sequences[seq]
        return h.digest()

    # -- PCRs ------------------------------------------------------------

    @command
    def pcr_extend(self, index: int, value: bytes, *, locality: int) -> None:
        i = self._pcr_index(index)
        if locality not in self.extend_masks[i]:
            raise TpmError("LOCALITY_FAIL", f"PCR{i} extend not allowed at locality {locality}")
        if len(value) != DIGEST_SIZE:
            raise TpmError("BAD_SIZE", "extend value must be 32 bytes")
        self.pcrs[i] = hash_extend(self.pcrs[i], value)

    @command
    def pcr_reset(self, index: int, *, locality: int) -> None:
        i = self._pcr_index(index)
        if locality not in self.reset_masks[i]:
            raise TpmError("LOCALITY_FAIL", f"PCR{i} reset not allowed at locality {locality}")
        self.pcrs[i] = self.pcr_defaults[i]

    @command
    def pcr_read(self, index: int, *, locality: int) -> bytes:
        i = self._pcr_index(index)
        self._check_pcr_read(i, locality)
        return self.pcrs[i]

    # -- NV storage ------------------------------------------------------

    @command
    def nv_define_space(self, kind: str, size: int, auth_policy: bytes = ZERO32) -> int:
        if kind not in (NV_COUNTER, NV_DATA):
            raise TpmError("KIND_MISMATCH", f"unknown NV kind {kind!r}")
        if kind == NV_COUNTER:
            size = 8
        elif not 1 <= size <= NV_MAX_DATA:
            raise TpmError("NV_RANGE", f"size {size}")
        if len(auth_policy) != DIGEST_SIZE:
            raise TpmError("BAD_SIZE", "auth_policy must be 32 bytes")
        index = NvIndex(self._next_nv, kind, size, bytes(auth_policy))
        self.nv[index.handle] = index
        self._next_nv += 1
        return index.handle

    def _nv(self, handle: int) -> NvIndex:
        index = self.nv.get(handle)
        if index is None:
            raise TpmError("UNKNOWN_HANDLE", f"NV index {handle!r}")
        return index

    @command
    def nv_increment(self, handle: int, session: int | None = None, *, locality: int) -> int:
        index = self._nv(handle)
        if index.kind != NV_COUNTER:
            raise TpmError("KIND_MISMATCH", "increment needs a counter index")
        self._authorize(session, index.auth_policy, locality)
        index.counter_value += 1
        return index.counter_value

    @command
    def nv_read(self, handle: int, session: int | None = None, *, locality: int) -> int | bytes:
        index = self._nv(handle)
        self._authorize(session, index.auth_policy, locality)
        return index.counter_value if index.kind == NV_COUNTER else index.data_payload

    @command
    def nv_write(self, handle: int, payload: bytes, session: int | None = None, *, locality: int) -> None:
        index = self._nv(handle)
        if index.kind != NV_DATA:
            raise TpmError("KIND_MISMATCH", "write needs a data index")
        if len(payload) > index.size:
            raise TpmError("NV_RANGE", f"{len(payload)} > {index.size}")
        self._authorize(session, index.auth_policy, locality)
        index.data_payload = bytes(payload)

    # -- clock and attestation ------------------------------------------

    @command
    def read_clock(self) -> int:
        return self.ticks

    def _attestation_signer(self, handle: int, session: int | None, locality: int) -> TpmObject:
        obj = self._object(handle, ATTESTATION_KEY)
        self._authorize(session, obj.auth_policy, locality)
        return obj

    @command
    def get_time(self, ak: int, session: int | None, qualifying: bytes, *, locality: int) -> TimeRecord:
        obj = self._attestation_signer(ak, session, locality)
        unsigned = TimeRecord(self.ticks, bytes(qualifying), b"")
        sig = crypto.sign(obj.secret_material, sha256(unsigned.signed_bytes()))
        return TimeRecord(self.ticks, bytes(qualifying), sig)

    @command
    def quote(self, ak: int, session: int | None, selection, qualifying: bytes, *, locality: int) -> Quote:
        self._object(ak, ATTESTATION_KEY)
        indices = tuple(sorted({self._pcr_index(i) for i in selection}))
        if not indices:
            raise TpmError("EMPTY_SELECTION")
        for i in indices:
            self._check_pcr_read(i, locality)
        obj = self._attestation_signer(ak, session, locality)
        composite = policy.pcr_composite(self.pcrs[i] for i in indices)
        unsigned = Quote(indices, composite, self.ticks, bytes(qualifying), b"")
        sig = crypto.sign(obj.secret_material, sha256(unsigned.signed_bytes()))
        return Quote(indices, composite, self.ticks, bytes(qualifying), sig)

    # -- persistence -----------------------------------------------------

    def persist(self) -> bytes:
        """Serialize the durable state. Sessions, sequences and objects are volatile."""
        entries = [
            ("primary_seed", self._primary_seed),
            ("endorsement_seed", self._endorsement_seed),
            ("owned", b"\x01" if self.owned else b"\x00"),
            ("owner_secret", self.owner_secret or b""),
            ("channel_psk", self._channel_psk or b""),
            ("clock", struct.pack(">Q", self.ticks)),
            ("pcr_defaults", b"".join(self.pcr_defaults)),
            ("next_nv", struct.pack(">I", self._next_nv)),
            ("wrap_counter", struct.pack(">Q", self._wrap_counter)),
            ("channel_epoch", struct.pack(">Q", self.channel_epoch)),
        ]
        for handle in sorted(self.nv):
            n = self.nv[handle]
            kind = b"\x01" if n.kind == NV_COUNTER else b"\x02"
            record = kind + struct.pack(">IQ", n.size, n.counter_value) + n.auth_policy + n.data_payload
            entries.append((f"nv.{handle:08x}", record))
        text = f"{STATE_MAGIC} {STATE_VERSION}\n"
        text += "".join(f"{key} = {value.hex()}\n" for key, value in entries)
        text += f"checksum = {sha256(text.encode()).hex()}\n"
        return text.encode()

    @classmethod
    def restore(cls, blob: bytes, cost_table: Mapping[str, int] | None = None) -> "TpmDevice":
        try:
            text = blob.decode("ascii")
        except (UnicodeDecodeError, AttributeError) as exc:
            raise TpmError("CORRUPT_STATE", "state is not ASCII text") from exc
        lines = text.split("\n")
        header = lines[0].split(" ")
        if len(header) != 2 or header[0] != STATE_MAGIC:
            raise TpmError("CORRUPT_STATE", "missing state header")
        if header[1] != STATE_VERSION:
            raise TpmError("VERSION_MISMATCH", f"state version {header[1]!r}")
        if not text.endswith("\n") or not lines[-2].startswith("checksum = "):
            raise TpmError("CORRUPT_STATE", "truncated state")
        body = text[: text.rindex("checksum = ")]
        if sha256(body.encode()).hex() != lines[-2][len("checksum = "):]:
            raise TpmError("CORRUPT_STATE", "checksum mismatch")

        values: dict[str, bytes] = {}
        for line in lines[1:-2]:
            key, sep, value = line.partition(" = ")
            if not sep or key in values:
                raise TpmError("CORRUPT_STATE", f"bad line {line!r}")
            try:
                values[key] = bytes.fromhex(value)
            except ValueError as exc:
                raise TpmError("CORRUPT_STATE", f"bad hex for {key}") from exc

        required = ("primary_seed", "endorsement_seed", "owned", "owner_secret",
                    "channel_psk", "clock", "pcr_defaults", "next_nv", "wrap_counter",
                    "channel_epoch")
        for key in values:
            if key not in required and not key.startswith("nv."):
                raise TpmError("CORRUPT_STATE", f"unknown key {key!r}")
        try:
            dev = cls(values["primary_seed"], values["endorsement_seed"], cost_table)
            if values["owned"] == b"\x01":
                dev.owner_secret = values["owner_secret"]
                dev._channel_psk = crypto.require_len(values["channel_psk"], SYMKEY_SIZE, "psk")
            (dev.ticks,) = struct.unpack(">Q", values["clock"])
            defaults = values["pcr_defaults"]
            if len(defaults) != NUM_PCRS * DIGEST_SIZE:
                raise ValueError("pcr_defaults length")
            dev.pcr_defaults = [defaults[i * 32:(i + 1) * 32] for i in range(NUM_PCRS)]
            dev.pcrs = list(dev.pcr_defaults)
            (dev._next_nv,) = struct.unpack(">I", values["next_nv"])
            (dev._wrap_counter,) = struct.unpack(">Q", values["wrap_counter"])
            (dev.channel_epoch,) = struct.unpack(">Q", values["channel_epoch"])
            for key, record in values.items():
                if not key.startswith("nv."):
                    continue
                handle = int(key[3:], 16)
                kind = {1: NV_COUNTER, 2: NV_DATA}[record[0]]
                size, counter = struct.unpack(">IQ", record[1:13])
                auth_policy = record[13:45]
                if len(auth_policy) != DIGEST_SIZE:
                    raise ValueError("short NV record")
                dev.nv[handle] = NvIndex(handle, kind, size, auth_policy, counter, record[45:])
        except (KeyError, ValueError, struct.error, IndexError, CryptoError) as exc:
            raise TpmError("CORRUPT_STATE", str(exc)) from exc
        return dev

    # -- views -----------------------------------------------------------

    def public_view(self) -> bytes:
        """What software can learn by querying the device: NV metadata, clock, PCRs except 21."""
        lines = [f"clock = {self.ticks}"]
        for i, value in enumerate(self.pcrs):
            if i != 21:
                lines.append(f"pcr{i} = {value.hex()}")
        for handle in sorted(self.nv):
            n = self.nv[handle]
            lines.append(f"nv.{handle:08x} = {n.kind} {n.counter_value} {n.auth_policy.hex()}")
        return ("\n".join(lines) + "\n").encode()

    def debug_object_secret(self, handle: int) -> bytes:
        """Test hook: raw secret of a loaded object. Not reachable through :meth:`execute`."""
        return self.objects[handle].secret_material

    def debug_all_secrets(self) -> list[bytes]:
        return [o.secret_material for o in self.objects.values()]
