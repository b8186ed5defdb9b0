"""SGX-like application processor with TPM-backed microcode.

The CPU model owns the enclave life cycle (ECREATE .. EREMOVE), a register
file with four protected BND registers, the state save area, local
attestation reports and the leak trace. Every microcode routine talks to the
TPM over the secure bus at locality 4 inside an exclusive programmed-I/O
session; nothing else in the simulator holds the locality-4 capability.

The leak trace is the adversary's view of the memory hierarchy: every byte
written to memory (SSA spills, store buffers, EPC tokens) is appended to it.
Registers never are.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Sequence, Union

from . import codec, policy
from .bus import IO, SecureBus, TpmClient
from .crypto import (
    BLOCK_SIZE,
    DIGEST_SIZE,
    SYMKEY_SIZE,
    ZERO32,
    ctr_crypt,
    hash_extend,
    kdf,
    mac,
    mac_equal,
    require_len,
    sha256,
)
from .errors import EnclaveError
from .tpm import ATTESTATION_KEY, HMAC_KEY, SIGNING_KEY, SYMMETRIC_KEY

GPR_NAMES = ("rax", "rbx", "rcx", "rdx", "rsi", "rdi",
             "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15")
NUM_BND = 4
USER_DATA_SIZE = 64
LAUNCH_PCRS = (11, 12, 13)
ATTESTATION_PCR = 21

# keyname -> (wire tag, TPM object kind)
KEYNAMES = {
    "EINITTOKEN": (0x0001, HMAC_KEY),
    "SEAL": (0x0004, SYMMETRIC_KEY),
    "SEAL-SYM": (0x0005, SYMMETRIC_KEY),
    "HMAC": (0x0006, HMAC_KEY),
    "SIGN": (0x0007, SIGNING_KEY),
    "ATTEST": (0x0008, ATTESTATION_KEY),
}

RUNNING = "running"
INTERRUPTED = "interrupted"
EXITED = "exited"

ERROR_CODES = frozenset({
    "UNKNOWN_ENCLAVE", "SEQUENCE_CLOSED", "MEASUREMENT_FINAL", "NOT_MEASURED",
    "BAD_TOKEN", "ALREADY_INIT", "NOT_INIT", "NOT_RUNNING", "RUNNING",
    "BAD_INSTRUCTION", "BAD_ADDRESS", "BAD_SELECTOR",
})


@codec.register
@dataclass(frozen=True)
class EnclaveIdentity:
    mrenclave: bytes = ZERO32
    mrsigner: bytes = ZERO32
    isvprodid: int = 0
    isvsvn: int = 0
    attributes: int = 0

    def serialize(self) -> bytes:
        return self.mrenclave + self.mrsigner + struct.pack(
            ">HHQ", self.isvprodid, self.isvsvn, self.attributes)

    def policy_fields(self, use_mrenclave: bool, use_mrsigner: bool) -> dict[str, bytes]:
        fields = {}
        if use_mrenclave:
            fields[policy.MRENCLAVE] = self.mrenclave
        if use_mrsigner:
            fields[policy.MRSIGNER] = self.mrsigner
        return fields


def token_body(identity: EnclaveIdentity, keyid: bytes) -> bytes:
    """EINITTOKEN body: mrenclave || mrsigner || isvprodid || isvsvn || attributes || keyid."""
    return identity.serialize() + keyid


def launch_pcr_values(identity: EnclaveIdentity) -> dict[int, bytes]:
    """PCR11..13 after reset-to-zero and one extend each with the enclave identity."""
    extended = (
        identity.mrenclave,
        identity.mrsigner,
        sha256(struct.pack(">HHQ", identity.isvprodid, identity.isvsvn, identity.attributes)),
    )
    return {i: hash_extend(ZERO32, v) for i, v in zip(LAUNCH_PCRS, extended)}


@dataclass(frozen=True)
class KeySelector:
    keyname: str
    use_mrenclave: bool = False
    use_mrsigner: bool = False
    keyid: bytes | None = None  # None: take the SECS keyid

    @property
    def flags(self) -> int:
        return (0x01 if self.use_mrenclave else 0) | (0x02 if self.use_mrsigner else 0)


@dataclass(frozen=True)
class KeyRef:
    """What EGETKEY hands back to the enclave: a TPM handle, never key bytes."""
    handle: int
    selector: KeySelector
    kind: str
    public_part: bytes | None = None


@dataclass(frozen=True)
class EinitToken:
    body: bytes
    tag: bytes


@codec.register
@dataclass(frozen=True)
class Report:
    target_identity: EnclaveIdentity
    reporting_identity: EnclaveIdentity
    user_data: bytes
    tag: bytes

    def body(self) -> bytes:
        return self.target_identity.serialize() + self.reporting_identity.serialize() + self.user_data

    def serialize(self) -> bytes:
        return self.body() + self.tag


@dataclass(frozen=True)
class SigStruct:
    author_public: bytes
    expected_mrenclave: bytes
    isvprodid: int
    isvsvn: int
    attributes: int
    signature: bytes

    def body(self) -> bytes:
        return (self.author_public + self.expected_mrenclave
                + struct.pack(">HHQ", self.isvprodid, self.isvsvn, self.attributes))


@dataclass
class RegisterFile:
    gprs: dict[str, int] = field(default_factory=lambda: dict.fromkeys(GPR_NAMES, 0))
    bnd: list[bytes] = field(default_factory=lambda: [bytes(SYMKEY_SIZE)] * NUM_BND, repr=False)

    def copy(self) -> "RegisterFile":
        return RegisterFile(dict(self.gprs), list(self.bnd))

    def scrub(self) -> None:
        self.gprs = dict.fromkeys(GPR_NAMES, 0)
        self.bnd = [bytes(SYMKEY_SIZE)] * NUM_BND


@dataclass(frozen=True)
class SsaFrame:
    gpr_snapshot: tuple[tuple[str, int], ...]
    bnd_ct: tuple[bytes, ...]
    aex_nonce: int

    def serialize(self) -> bytes:
        out = b"SSA" + struct.pack(">Q", self.aex_nonce)
        out += b"".join(struct.pack(">Q", v) for _, v in self.gpr_snapshot)
        return out + b"".join(self.bnd_ct)


@dataclass
class LeakTrace:
    records: list[tuple[str, bytes]] = field(default_factory=list)

    def append(self, source: str, data: bytes) -> None:
        self.records.append((source, bytes(data)))

    def snapshot(self) -> list[tuple[str, bytes]]:
        return list(self.records)


# -- abstract enclave instruction set ---------------------------------------

@dataclass(frozen=True)
class Nop:
    pass


@dataclass(frozen=True)
class LoadSecretToBnd:
    key: Union[KeyRef, KeySelector]
    slot: int = 0


@dataclass(frozen=True)
class MoveBndToGpr:
    slot: int
    reg: str


@dataclass(frozen=True)
class XorBnd:
    dst: int
    src: int


@dataclass(frozen=True)
class EncryptBlockWithBnd:
    slot: int
    addr: int
    nonce: int = 0
    block_index: int = 0


@dataclass(frozen=True)
class WriteMem:
    addr: int
    reg: str


@dataclass(frozen=True)
class LoadBndFromMem:
    slot: int
    addr: int


@dataclass(frozen=True)
class ReadTrustedTime:
    reg: str = "rax"


@dataclass(frozen=True)
class Exit:
    pass


Instruction = Union[Nop, LoadSecretToBnd, MoveBndToGpr, XorBnd, EncryptBlockWithBnd,
                    WriteMem, LoadBndFromMem, ReadTrustedTime, Exit]


@dataclass
class Secs:
    eid: int
    identity: EnclaveIdentity
    keyid: bytes
    init: bool = False
    aex_count: int = 0
    measurement_seq: int | None = None
    pages: list[tuple[int, bytes]] = field(default_factory=list)
    measured: bool = False
    memory: dict[int, bytes] = field(default_factory=dict, repr=False)
    context: "ExecContext | None" = None
    # microcode-private; register-resident in hardware
    _ssa_key: bytes | None = field(default=None, repr=False)


@dataclass
class ExecContext:
    eid: int
    program: tuple
    regs: RegisterFile = field(default_factory=RegisterFile)
    pc: int = 0
    state: str = RUNNING
    ssa: SsaFrame | None = None
    steps: int = 0


class Cpu:
    """The application processor. One instance per simulated platform."""

    def __init__(
        self,
        bus: SecureBus,
        seal_fuses: bytes,
        cpusvn: int,
        owner_digest: bytes,
        recorder: Callable[[str, str, bytes, str], object] | None = None,
    ):
        self.bus = bus
        self._seal_fuses = require_len(seal_fuses, DIGEST_SIZE, "seal fuses")
        self.cpusvn = cpusvn
        self._owner_binding = kdf(self._seal_fuses, "OWNERBIND", owner_digest, DIGEST_SIZE)
        self._mee_salt = kdf(self._seal_fuses, "MEE", b"", DIGEST_SIZE)
        self._capability = bus.issue_capability()
        self.recorder = recorder
        self.leaks = LeakTrace()
        self.enclaves: dict[int, Secs] = {}
        self._next_eid = 1
        self._released_keys: list[bytes] = []  # harness bookkeeping only
        # Called inside every microcode I/O session: the adversary's injection point.
        self.injection_points: list[Callable[[str], None]] = []

    # -- microcode plumbing ---------------------------------------------

    @contextmanager
    def _microcode(self, op: str) -> Iterator[TpmClient]:
        self.bus.io_session_open(4, self._capability)
        try:
            for hook in list(self.injection_points):
                hook(op)
            yield TpmClient(self.bus, 4, IO, self._capability, f"microcode:{op}", self.recorder)
        finally:
            self.bus.io_session_close()

    def _secs(self, eid: int) -> Secs:
        secs = self.enclaves.get(eid)
        if secs is None:
            raise EnclaveError("UNKNOWN_ENCLAVE", f"enclave {eid}")
        return secs

    def _running(self, ctx: ExecContext) -> Secs:
        secs = self._secs(ctx.eid)
        if ctx.state != RUNNING or secs.context is not ctx:
            raise EnclaveError("NOT_RUNNING", f"context is {ctx.state}")
        return secs

    def _identity_session(self, mc: TpmClient, identity: EnclaveIdentity, selector: KeySelector) -> int:
        session = mc.call("policy_start_session", locality=4)
        mc.call("policy_command", session=session, kind="IDENTITY",
                args={"fields": identity.policy_fields(selector.use_mrenclave, selector.use_mrsigner)})
        return session

    def _write_mem(self, secs: Secs, addr: int, data: bytes, source: str = "BUFFER") -> None:
        secs.memory[addr] = bytes(data)
        self.leaks.append(source, data)

    def secs(self, eid: int) -> Secs:
        return self._secs(eid)

    # -- creation and measurement ---------------------------------------

    def measure_signer(self, author_public: bytes) -> bytes:
        """MRSIGNER through a TPM hash sequence over the author's public key."""
        with self._microcode("measure_signer") as mc:
            seq = mc.call("hash_sequence_start")
            mc.call("hash_sequence_update", seq=seq, chunk=author_public)
            return mc.call("hash_sequence_complete", seq=seq)

    def ecreate(
        self,
        attributes: int,
        keyid: bytes = ZERO32,
        *,
        mrsigner: bytes = ZERO32,
        isvprodid: int = 0,
        isvsvn: int = 0,
    ) -> int:
        identity = EnclaveIdentity(ZERO32, mrsigner, isvprodid, isvsvn, attributes)
        secs = Secs(self._next_eid, identity, require_len(keyid, DIGEST_SIZE, "keyid"))
        with self._microcode("ecreate") as mc:
            secs.measurement_seq = mc.call("hash_sequence_start")
        self.enclaves[secs.eid] = secs
        self._next_eid += 1
        return secs.eid

    def eadd(self, eid: int, offset: int, content: bytes) -> int:
        secs = self._secs(eid)
        if secs.init or secs.measured:
            raise EnclaveError("SEQUENCE_CLOSED", "enclave measurement is closed")
        record = struct.pack(">Q", offset) + sha256(content)
        with self._microcode("eadd") as mc:
            mc.call("hash_sequence_update", seq=secs.measurement_seq, chunk=record)
        secs.pages.append((offset, sha256(content)))
        # EPC is MEE-encrypted: the hierarchy only ever sees an opaque token.
        self.leaks.append("EPC", sha256(self._mee_salt + content))
        return secs.measurement_seq

    def finalize_measurement(self, eid: int) -> bytes:
        secs = self._secs(eid)
        if secs.measured:
            raise EnclaveError("MEASUREMENT_FINAL", "measurement already finalized")
        if secs.init:
            raise EnclaveError("SEQUENCE_CLOSED")
        with self._microcode("finalize_measurement") as mc:
            mrenclave = mc.call("hash_sequence_complete", seq=secs.measurement_seq)
        secs.identity = replace(secs.identity, mrenclave=mrenclave)
        secs.measurement_seq = None
        secs.measured = True
        return mrenclave

    def verify_sigstruct(self, sigstruct: SigStruct) -> bool:
        with self._microcode("verify_sigstruct") as mc:
            return mc.call("verify_signature", public_part=sigstruct.author_public,
                           digest=sha256(sigstruct.body()), signature=sigstruct.signature)

    # -- key derivation --------------------------------------------------

    def derive_kdm_context(self, selector: KeySelector, secs: Secs) -> bytes:
        """Canonical key-derivation material for ``selector`` over ``secs``.

        Order: keyname tag, flag bitmap, [mrenclave], [mrsigner], isvprodid,
        isvsvn, attributes, keyid, cpusvn, owner binding.
        """
        if selector.keyname not in KEYNAMES:
            raise EnclaveError("BAD_SELECTOR", f"unknown keyname {selector.keyname!r}")
        ident = secs.identity
        out = struct.pack(">HB", KEYNAMES[selector.keyname][0], selector.flags)
        if selector.use_mrenclave:
            out += ident.mrenclave
        if selector.use_mrsigner:
            out += ident.mrsigner
        keyid = secs.keyid if selector.keyid is None else require_len(selector.keyid, DIGEST_SIZE, "keyid")
        out += struct.pack(">HHQ", ident.isvprodid, ident.isvsvn, ident.attributes)
        out += keyid + struct.pack(">H", self.cpusvn) + self._owner_binding
        return out

    def _create_key(self, mc: TpmClient, secs: Secs, selector: KeySelector) -> KeyRef:
        kind = KEYNAMES[selector.keyname][1]
        auth = policy.identity_policy(
            secs.identity.policy_fields(selector.use_mrenclave, selector.use_mrsigner))
        handle, public = mc.call("create_primary", kind=kind,
                                 creation_context=self.derive_kdm_context(selector, secs),
                                 auth_policy=auth)
        return KeyRef(handle, selector, kind, public)

    def _release_into_bnd(self, mc: TpmClient, ctx: ExecContext, secs: Secs, key: KeyRef, slot: int) -> None:
        session = self._identity_session(mc, secs.identity, key.selector)
        ctx.regs.bnd[slot] = mc.call("release_symmetric", handle=key.handle, session=session)
        self._released_keys.append(ctx.regs.bnd[slot])

    def egetkey(self, ctx: ExecContext, selector: KeySelector, bnd_slot: int | None = 0) -> KeyRef:
        """Derive a TPM key bound to the caller's identity.

        For SEAL-SYM the key is also released over the bus straight into
        ``BND[bnd_slot]`` (pass ``None`` to skip the release).
        """
        secs = self._running(ctx)
        if selector.keyname not in KEYNAMES or selector.keyname == "EINITTOKEN":
            raise EnclaveError("BAD_SELECTOR", f"keyname {selector.keyname!r} not available to enclaves")
        with self._microcode("egetkey") as mc:
            key = self._create_key(mc, secs, selector)
            if selector.keyname == "SEAL-SYM" and bnd_slot is not None:
                self._release_into_bnd(mc, ctx, secs, key, bnd_slot)
        return key

    def _keyed(self, op: str, ctx: ExecContext, key: KeyRef, cmd: str, **args):
        secs = self._running(ctx)
        with self._microcode(op) as mc:
            session = self._identity_session(mc, secs.identity, key.selector)
            return mc.call(cmd, handle=key.handle, session=session, **args)

    def key_hmac(self, ctx: ExecContext, key: KeyRef, msg: bytes) -> bytes:
        return self._keyed("key_hmac", ctx, key, "hmac_sign", msg=msg)

    def key_sign(self, ctx: ExecContext, key: KeyRef, digest: bytes) -> bytes:
        return self._keyed("key_sign", ctx, key, "sign", digest=digest)

    def key_crypt(self, ctx: ExecContext, key: KeyRef, nonce: int, data: bytes) -> bytes:
        return self._keyed("key_crypt", ctx, key, "encrypt_decrypt", nonce=nonce, data=data)

    def key_time(self, ctx: ExecContext, key: KeyRef, qualifying: bytes):
        secs = self._running(ctx)
        with self._microcode("key_time") as mc:
            session = self._identity_session(mc, secs.identity, key.selector)
            return mc.call("get_time", ak=key.handle, session=session, qualifying=qualifying)

    # -- NV storage bound to enclave identity ---------------------------

    def nv_define(self, ctx: ExecContext, kind: str, size: int, selector: KeySelector) -> int:
        secs = self._running(ctx)
        auth = policy.identity_policy(
            secs.identity.policy_fields(selector.use_mrenclave, selector.use_mrsigner))
        with self._microcode("nv_define") as mc:
            return mc.call("nv_define_space", kind=kind, size=size, auth_policy=auth)

    def _nv(self, op: str, ctx: ExecContext, handle: int, selector: KeySelector, **args):
        secs = self._running(ctx)
        with self._microcode(op) as mc:
            session = self._identity_session(mc, secs.identity, selector)
            return mc.call(op, handle=handle, session=session, **args)

    def nv_increment(self, ctx: ExecContext, handle: int, selector: KeySelector) -> int:
        return self._nv("nv_increment", ctx, handle, selector)

    def nv_read(self, ctx: ExecContext, handle: int, selector: KeySelector):
        return self._nv("nv_read", ctx, handle, selector)

    def nv_write(self, ctx: ExecContext, handle: int, selector: KeySelector, payload: bytes) -> None:
        self._nv("nv_write", ctx, handle, selector, payload=payload)

    # -- launch ----------------------------------------------------------

    def _launch_key(self, mc: TpmClient, secs: Secs) -> int:
        selector = KeySelector("EINITTOKEN", use_mrenclave=True, use_mrsigner=True)
        auth = policy.launch_policy(launch_pcr_values(secs.identity))
        handle, _ = mc.call("create_primary", kind=HMAC_KEY,
                            creation_context=self.derive_kdm_context(selector, secs),
                            auth_policy=auth)
        return handle

    def _extend_launch_pcrs(self, mc: TpmClient, identity: EnclaveIdentity) -> None:
        for i in LAUNCH_PCRS:
            mc.call("pcr_reset", index=i)
        extended = (identity.mrenclave, identity.mrsigner,
                    sha256(struct.pack(">HHQ", identity.isvprodid, identity.isvsvn, identity.attributes)))
        for i, value in zip(LAUNCH_PCRS, extended):
            mc.call("pcr_extend", index=i, value=value)

    def _launch_session(self, mc: TpmClient) -> int:
        session = mc.call("policy_start_session", locality=4)
        mc.call("policy_command", session=session, kind="LOCALITY", args={"min": 4})
        mc.call("policy_command", session=session, kind="PCR", args={"indices": list(LAUNCH_PCRS)})
        return session

    def _require_launchable(self, secs: Secs) -> None:
        if secs.init:
            raise EnclaveError("ALREADY_INIT")
        if not secs.measured:
            raise EnclaveError("NOT_MEASURED", "finalize the measurement first")

    def launch_prepare(self, eid: int) -> int:
        """Reset PCR11-13, extend the candidate identity and create the launch key."""
        secs = self._secs(eid)
        self._require_launchable(secs)
        with self._microcode("launch_prepare") as mc:
            self._extend_launch_pcrs(mc, secs.identity)
            return self._launch_key(mc, secs)

    def mint_einit_token(self, eid: int, launch_key: int) -> EinitToken:
        """HMAC the identity under the launch key inside a LOCALITY+PCR policy session."""
        secs = self._secs(eid)
        body = token_body(secs.identity, secs.keyid)
        with self._microcode("mint_einit_token") as mc:
            session = self._launch_session(mc)
            tag = mc.call("hmac_sign", handle=launch_key, session=session, msg=body)
        return EinitToken(body, tag)

    def reset_launch_pcrs(self) -> None:
        with self._microcode("reset_launch_pcrs") as mc:
            for i in LAUNCH_PCRS:
                mc.call("pcr_reset", index=i)

    def einit(self, eid: int, token: EinitToken) -> None:
        secs = self._secs(eid)
        self._require_launchable(secs)
        if token.body != token_body(secs.identity, secs.keyid):
            raise EnclaveError("BAD_TOKEN", "token minted for a different identity")
        with self._microcode("einit") as mc:
            try:
                self._extend_launch_pcrs(mc, secs.identity)
                lk = self._launch_key(mc, secs)
                ok = mc.call("hmac_verify", handle=lk, session=self._launch_session(mc),
                             msg=token.body, tag=token.tag)
            finally:
                for i in LAUNCH_PCRS:
                    mc.call("pcr_reset", index=i)
        if not ok:
            raise EnclaveError("BAD_TOKEN", "token MAC does not verify")
        secs.init = True

    # -- execution -------------------------------------------------------

    def eenter(self, eid: int, program: Sequence[Instruction]) -> ExecContext:
        secs = self._secs(eid)
        if not secs.init:
            raise EnclaveError("NOT_INIT")
        if secs.context is not None:
            raise EnclaveError("RUNNING", "enclave already has a live context")
        ctx = ExecContext(eid, tuple(program))
        if secs._ssa_key is None:
            selector = KeySelector("SEAL-SYM", use_mrenclave=True, use_mrsigner=True)
            with self._microcode("ssa_key") as mc:
                key = self._create_key(mc, secs, selector)
                session = self._identity_session(mc, secs.identity, selector)
                secs._ssa_key = mc.call("release_symmetric", handle=key.handle, session=session)
                self._released_keys.append(secs._ssa_key)
        secs.context = ctx
        return ctx

    def write_enclave_memory(self, eid: int, addr: int, data: bytes) -> None:
        """Copy input into EPC (MEE-protected: only an opaque token reaches the trace)."""
        secs = self._secs(eid)
        secs.memory[addr] = bytes(data)
        self.leaks.append("EPC", sha256(self._mee_salt + bytes(data)))

    def enclave_store(self, ctx: ExecContext, addr: int, data: bytes) -> None:
        """A software store from inside the enclave; passes through the store buffer."""
        self._write_mem(self._running(ctx), addr, data)

    def read_enclave_memory(self, eid: int, addr: int) -> bytes:
        secs = self._secs(eid)
        if addr not in secs.memory:
            raise EnclaveError("BAD_ADDRESS", f"{addr:#x}")
        return secs.memory[addr]

    def step(self, ctx: ExecContext) -> str:
        secs = self._running(ctx)
        if ctx.pc >= len(ctx.program):
            raise EnclaveError("BAD_INSTRUCTION", "fell off the end of the program")
        insn = ctx.program[ctx.pc]
        ctx.pc += 1
        ctx.steps += 1
        regs = ctx.regs
        if isinstance(insn, Nop):
            pass
        elif isinstance(insn, LoadSecretToBnd):
            key = insn.key
            with self._microcode("load_secret") as mc:
                if isinstance(key, KeySelector):
                    key = self._create_key(mc, secs, key)
                self._release_into_bnd(mc, ctx, secs, key, insn.slot)
        elif isinstance(insn, MoveBndToGpr):
            regs.gprs[insn.reg] = int.from_bytes(regs.bnd[insn.slot][:8], "big")
        elif isinstance(insn, XorBnd):
            a, b = regs.bnd[insn.dst], regs.bnd[insn.src]
            regs.bnd[insn.dst] = bytes(x ^ y for x, y in zip(a, b))
        elif isinstance(insn, EncryptBlockWithBnd):
            block = secs.memory.get(insn.addr)
            if block is None or len(block) > BLOCK_SIZE:
                raise EnclaveError("BAD_ADDRESS", f"{insn.addr:#x}")
            ct = ctr_crypt(regs.bnd[insn.slot], insn.nonce, block, insn.block_index)
            self._write_mem(secs, insn.addr, ct)
        elif isinstance(insn, WriteMem):
            self._write_mem(secs, insn.addr, struct.pack(">Q", regs.gprs[insn.reg]))
        elif isinstance(insn, LoadBndFromMem):
            data = secs.memory.get(insn.addr)
            if data is None:
                raise EnclaveError("BAD_ADDRESS", f"{insn.addr:#x}")
            regs.bnd[insn.slot] = data[:SYMKEY_SIZE].ljust(SYMKEY_SIZE, b"\x00")
        elif isinstance(insn, ReadTrustedTime):
            with self._microcode("read_time") as mc:
                regs.gprs[insn.reg] = mc.call("read_clock")
        elif isinstance(insn, Exit):
            self.eexit(ctx)
            return EXITED
        else:
            raise EnclaveError("BAD_INSTRUCTION", repr(insn))
        return RUNNING

    def run(self, ctx: ExecContext, interrupt_every_step: bool = False) -> ExecContext:
        while ctx.state != EXITED:
            if self.step(ctx) == EXITED:
                break
            if interrupt_every_step:
                self.aex(ctx)
                self.eresume(ctx)
        return ctx

    def read_trusted_time(self, ctx: ExecContext, reg: str = "rax") -> int:
        self._running(ctx)
        with self._microcode("read_time") as mc:
            ctx.regs.gprs[reg] = mc.call("read_clock")
        return ctx.regs.gprs[reg]

    # -- interrupts and exits -------------------------------------------

    def _encrypt_bnd(self, secs: Secs, nonce: int, bnd: Sequence[bytes]) -> tuple[bytes, ...]:
        return tuple(ctr_crypt(secs._ssa_key, nonce, b, 4 * i) for i, b in enumerate(bnd))

    def aex(self, ctx: ExecContext) -> SsaFrame:
        """Asynchronous exit: spill GPRs in clear, BND registers encrypted, then scrub."""
        secs = self._running(ctx)
        secs.aex_count += 1
        nonce = secs.aex_count
        frame = SsaFrame(tuple(ctx.regs.gprs.items()), self._encrypt_bnd(secs, nonce, ctx.regs.bnd), nonce)
        self.leaks.append("SSA", frame.serialize())
        ctx.ssa = frame
        ctx.regs.scrub()
        ctx.state = INTERRUPTED
        return frame

    def eresume(self, ctx: ExecContext) -> None:
        secs = self._secs(ctx.eid)
        if ctx.state != INTERRUPTED or ctx.ssa is None or secs.context is not ctx:
            raise EnclaveError("NOT_RUNNING", f"context is {ctx.state}")
        frame = ctx.ssa
        ctx.regs = RegisterFile(dict(frame.gpr_snapshot), list(self._encrypt_bnd(secs, frame.aex_nonce, frame.bnd_ct)))
        ctx.ssa = None
        ctx.state = RUNNING

    def eexit(self, ctx: ExecContext) -> None:
        """Leave the enclave. BND contents are scrubbed, never stored."""
        secs = self._running(ctx)
        ctx.regs.scrub()
        ctx.state = EXITED
        secs.context = None

    def eremove(self, eid: int) -> None:
        secs = self._secs(eid)
        if secs.context is not None:
            raise EnclaveError("RUNNING", "enclave has a live context")
        secs.memory.clear()
        secs.pages.clear()
        secs._ssa_key = None
        del self.enclaves[eid]

    # -- local attestation ----------------------------------------------

    def _report_key(self, target: EnclaveIdentity) -> bytes:
        return kdf(self._seal_fuses, "REPORT", target.serialize(), DIGEST_SIZE)

    def ereport(self, ctx: ExecContext, target: EnclaveIdentity, user_data: bytes) -> Report:
        secs = self._running(ctx)
        require_len(user_data, USER_DATA_SIZE, "report user data")
        unsigned = Report(target, secs.identity, bytes(user_data), b"")
        return replace(unsigned, tag=mac(self._report_key(target), unsigned.body()))

    def verify_report(self, ctx: ExecContext, report: Report) -> bool:
        """EVERIFYREPORT-style check in the target's context."""
        secs = self._running(ctx)
        expected = mac(self._report_key(secs.identity), report.body())
        return mac_equal(expected, report.tag)

    def attest_pcr21(self, qe_ctx: ExecContext, report: Report) -> None:
        """Reset PCR21 and extend it with the QE's MRENCLAVE and the report digest."""
        secs = self._running(qe_ctx)
        with self._microcode("attest_pcr21") as mc:
            mc.call("pcr_reset", index=ATTESTATION_PCR)
            mc.call("pcr_extend", index=ATTESTATION_PCR, value=secs.identity.mrenclave)
            mc.call("pcr_extend", index=ATTESTATION_PCR, value=sha256(report.serialize()))

    def key_quote(self, ctx: ExecContext, key: KeyRef, selection, qualifying: bytes):
        secs = self._running(ctx)
        with self._microcode("key_quote") as mc:
            session = self._identity_session(mc, secs.identity, key.selector)
            return mc.call("quote", ak=key.handle, session=session,
                           selection=list(selection), qualifying=qualifying)

    # -- harness hooks ---------------------------------------------------

    def debug_secrets(self) -> dict[str, bytes]:
        """Test hook: CPU-internal secrets the adversary must never observe."""
        out = {"seal_fuses": self._seal_fuses}
        for i, key in enumerate(self._released_keys):
            out[f"released_key:{i}"] = key
        return out
