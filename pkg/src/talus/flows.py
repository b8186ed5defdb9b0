"""End-to-end protocols over the CPU, bus and TPM models.

Measured creation, TPM-backed launch, PCR21 attestation, direct-to-register
data encryption, trusted time and the restart guard, plus the platform
wiring that ties the three state machines together and deterministic
per-flow command metrics.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterator, Sequence

from . import crypto
from .bus import DMA, SecureBus, TpmClient
from .crypto import ZERO32, hash_extend, kdf, mac_equal, sha256
from .enclave import (
    USER_DATA_SIZE,
    Cpu,
    EinitToken,
    EnclaveIdentity,
    EncryptBlockWithBnd,
    ExecContext,
    Exit,
    KeySelector,
    LoadBndFromMem,
    LoadSecretToBnd,
    Nop,
    ReadTrustedTime,
    Report,
    SigStruct,
)
from .errors import EnclaveError, FlowError, TalusError
from .tpm import NV_COUNTER, NV_DATA, Quote, TpmDevice, verify_quote

PROCEED = "PROCEED"
ABORT = "ABORT"

ERROR_CODES = frozenset({
    "MEASUREMENT_MISMATCH", "BAD_SIGNATURE", "BAD_TOKEN", "BAD_REPORT", "UNSEAL_FAIL",
})

SEAL_SELECTOR = KeySelector("SEAL", use_mrsigner=True)
SEAL_MAC_SELECTOR = KeySelector("HMAC", use_mrsigner=True)
NV_SELECTOR = KeySelector("SEAL", use_mrsigner=True)
ATTEST_SELECTOR = KeySelector("ATTEST", use_mrenclave=True)
DATA_SELECTOR = KeySelector("SEAL-SYM", use_mrenclave=True, use_mrsigner=True)

DATA_BASE = 0x10000
KEY_BUFFER = 0x8000


def derive_bytes(seed: int, label: str, n: int = 32) -> bytes:
    """Deterministic synthetic material for a scenario seed."""
    return kdf(struct.pack(">Q", seed & 0xFFFFFFFFFFFFFFFF) + b"talus", label, b"", n)


class Transcript:
    """Ordered protocol steps; digests stand in for arguments so nothing secret is logged."""

    def __init__(self):
        self.entries: list[dict] = []

    def record(self, actor: str, op: str, args: bytes, result: str) -> None:
        self.entries.append({
            "seq": len(self.entries),
            "actor": actor,
            "op": op,
            "args_digest": sha256(args).hex(),
            "result": result,
        })

    def jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.entries)


@dataclass
class FlowMetrics:
    tpm_command_count: int = 0
    bus_frame_count: int = 0
    per_command: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "tpm_command_count": self.tpm_command_count,
            "bus_frame_count": self.bus_frame_count,
            "per_command": dict(sorted(self.per_command.items())),
        }


class Platform:
    """One CPU, one TPM, the bus between them, and the OS's file store."""

    def __init__(self, tpm: TpmDevice, seal_fuses: bytes, cpusvn: int = 1,
                 transcript: Transcript | None = None, os_files: dict[str, bytes] | None = None):
        if not tpm.owned:
            raise FlowError("NOT_OWNED", "take ownership before wiring the platform")
        self.tpm = tpm
        self.transcript = transcript if transcript is not None else Transcript()
        self.os_files: dict[str, bytes] = os_files if os_files is not None else {}
        self._seal_fuses = seal_fuses
        self.cpusvn = cpusvn
        self.bus = SecureBus(tpm)
        self.cpu = Cpu(self.bus, seal_fuses, cpusvn, sha256(tpm.owner_secret), self.transcript.record)
        self.bus.establish(tpm.channel_psk)

    @classmethod
    def build(cls, seed: int, cpusvn: int = 1) -> "Platform":
        tpm = TpmDevice(derive_bytes(seed, "primary-seed"), derive_bytes(seed, "endorsement-seed"))
        tpm.take_ownership(derive_bytes(seed, "owner-secret"))
        return cls(tpm, derive_bytes(seed, "seal-fuses"), cpusvn)

    @classmethod
    def from_state(cls, blob: bytes, seed: int, cpusvn: int = 1) -> "Platform":
        return cls(TpmDevice.restore(blob), derive_bytes(seed, "seal-fuses"), cpusvn)

    def power_cycle(self) -> "Platform":
        """Persist the TPM, drop all volatile state and boot again on the same hardware."""
        tpm = TpmDevice.restore(self.tpm.persist(), self.tpm.cost_table)
        return Platform(tpm, self._seal_fuses, self.cpusvn, self.transcript, self.os_files)

    def software(self, locality: int = 1) -> TpmClient:
        """A TPM client for OS / application code (DMA cycles, no locality-4 capability)."""
        return TpmClient(self.bus, locality, DMA, None, f"software:l{locality}", self.transcript.record)

    def tracked_secrets(self) -> dict[str, bytes]:
        """Harness view of every key the adversary must never observe."""
        out = dict(self.cpu.debug_secrets())
        for obj in self.tpm.objects.values():
            out[f"tpm_object:{obj.handle:#x}:{obj.kind}"] = obj.secret_material
        out["channel_psk"] = self.tpm.channel_psk
        return out

    @contextmanager
    def metered(self) -> Iterator[FlowMetrics]:
        metrics = FlowMetrics()
        before = Counter(self.tpm.command_counts)
        frames = self.bus.frame_count
        yield metrics
        delta = Counter(self.tpm.command_counts)
        delta.subtract(before)
        metrics.per_command = {k: v for k, v in delta.items() if v}
        metrics.tpm_command_count = sum(metrics.per_command.values())
        metrics.bus_frame_count = self.bus.frame_count - frames


# -- creation ---------------------------------------------------------------

def page_record(offset: int, content: bytes) -> bytes:
    return struct.pack(">Q", offset) + sha256(content)


def expected_mrenclave(pages: Sequence[tuple[int, bytes]]) -> bytes:
    """The enclave author's offline measurement (what a signing tool computes)."""
    h = hashlib.sha256()
    for offset, content in pages:
        h.update(page_record(offset, content))
    return h.digest()


def make_sigstruct(author_seed: bytes, pages: Sequence[tuple[int, bytes]], isvprodid: int = 0,
                   isvsvn: int = 0, attributes: int = 0, mrenclave: bytes | None = None) -> SigStruct:
    public, private = crypto.sig_keygen(author_seed)
    unsigned = SigStruct(public, mrenclave or expected_mrenclave(pages), isvprodid, isvsvn, attributes, b"")
    return SigStruct(public, unsigned.expected_mrenclave, isvprodid, isvsvn, attributes,
                     crypto.sign(private, sha256(unsigned.body())))


def create_enclave(platform: Platform, pages: Sequence[tuple[int, bytes]], sigstruct: SigStruct,
                   keyid: bytes = ZERO32) -> int:
    """Measured creation; returns the enclave id with its identity filled in."""
    cpu = platform.cpu
    mrsigner = cpu.measure_signer(sigstruct.author_public)
    eid = cpu.ecreate(sigstruct.attributes, keyid, mrsigner=mrsigner,
                      isvprodid=sigstruct.isvprodid, isvsvn=sigstruct.isvsvn)
    try:
        for offset, content in pages:
            cpu.eadd(eid, offset, content)
        mrenclave = cpu.finalize_measurement(eid)
        if not cpu.verify_sigstruct(sigstruct):
            raise FlowError("BAD_SIGNATURE", "SIGSTRUCT signature does not verify")
        if not mac_equal(mrenclave, sigstruct.expected_mrenclave):
            raise FlowError("MEASUREMENT_MISMATCH", "measured MRENCLAVE differs from SIGSTRUCT")
    except TalusError:
        cpu.eremove(eid)
        raise
    return eid


# -- launch -----------------------------------------------------------------

def launch_enclave(platform: Platform, eid: int) -> EinitToken:
    cpu = platform.cpu
    try:
        lk = cpu.launch_prepare(eid)
        token = cpu.mint_einit_token(eid, lk)
    except TalusError:
        cpu.reset_launch_pcrs()
        raise
    try:
        cpu.einit(eid, token)
    except EnclaveError as exc:
        raise FlowError(exc.code, str(exc)) from exc
    return token


# -- attestation ------------------------------------------------------------

@dataclass(frozen=True)
class QuotePackage:
    report: Report
    qe_identity: EnclaveIdentity
    quote: Quote
    ak_public: bytes


def attest_enclave(platform: Platform, ctx: ExecContext, qe_ctx: ExecContext, nonce: bytes,
                   user_data: bytes = bytes(USER_DATA_SIZE)) -> QuotePackage:
    qe_identity = platform.cpu.secs(qe_ctx.eid).identity
    report = platform.cpu.ereport(ctx, qe_identity, user_data)
    return qe_quote(platform, qe_ctx, report, nonce)


def qe_quote(platform: Platform, qe_ctx: ExecContext, report: Report, nonce: bytes) -> QuotePackage:
    """The quoting enclave's half: check the report MAC, bind it into PCR21 and quote.

    The QE is a pass-through verifier; it inspects nothing beyond the MAC.
    """
    cpu = platform.cpu
    if not cpu.verify_report(qe_ctx, report):
        raise FlowError("BAD_REPORT", "report MAC does not verify in the QE")
    ak = cpu.egetkey(qe_ctx, ATTEST_SELECTOR)
    cpu.attest_pcr21(qe_ctx, report)
    quote = cpu.key_quote(qe_ctx, ak, [21], nonce)
    return QuotePackage(report, cpu.secs(qe_ctx.eid).identity, quote, ak.public_part)


def expected_pcr21(qe_mrenclave: bytes, report: Report) -> bytes:
    return hash_extend(hash_extend(ZERO32, qe_mrenclave), sha256(report.serialize()))


def verify_quote_package(pkg: QuotePackage, expected_qe_mrenclave: bytes, nonce: bytes,
                         trusted_ak: bytes | None = None) -> bool:
    """Remote verifier. Recomputes PCR21 from first principles; trusts no reported PCR value."""
    if trusted_ak is not None and pkg.ak_public != trusted_ak:
        return False
    if pkg.qe_identity.mrenclave != expected_qe_mrenclave:
        return False
    if pkg.report.target_identity != pkg.qe_identity:
        return False
    quote = pkg.quote
    if tuple(quote.selection) != (21,) or quote.qualifying != nonce:
        return False
    composite = sha256(expected_pcr21(expected_qe_mrenclave, pkg.report))
    if quote.composite != composite:
        return False
    try:
        return verify_quote(pkg.ak_public, quote)
    except crypto.CryptoError:
        return False


# -- sealing ----------------------------------------------------------------

@dataclass(frozen=True)
class SealedBlob:
    nonce: int
    ciphertext: bytes
    tag: bytes

    def to_bytes(self) -> bytes:
        return struct.pack(">QI", self.nonce, len(self.ciphertext)) + self.ciphertext + self.tag

    @classmethod
    def from_bytes(cls, blob: bytes) -> "SealedBlob":
        try:
            nonce, n = struct.unpack_from(">QI", blob)
        except struct.error as exc:
            raise FlowError("UNSEAL_FAIL", "malformed sealed blob") from exc
        ct, tag = blob[12:12 + n], blob[12 + n:]
        if len(ct) != n or len(tag) != crypto.DIGEST_SIZE:
            raise FlowError("UNSEAL_FAIL", "malformed sealed blob")
        return cls(nonce, ct, tag)


def seal_data(platform: Platform, ctx: ExecContext, payload: bytes) -> SealedBlob:
    """Seal under MRSIGNER-bound TPM keys; the keys themselves never leave the TPM."""
    cpu = platform.cpu
    nonce = cpu.read_trusted_time(ctx, "r15")
    enc = cpu.egetkey(ctx, SEAL_SELECTOR)
    ct = cpu.key_crypt(ctx, enc, nonce, payload)
    tag = cpu.key_hmac(ctx, cpu.egetkey(ctx, SEAL_MAC_SELECTOR), struct.pack(">Q", nonce) + ct)
    return SealedBlob(nonce, ct, tag)


def unseal_data(platform: Platform, ctx: ExecContext, blob: SealedBlob) -> bytes:
    cpu = platform.cpu
    tag = cpu.key_hmac(ctx, cpu.egetkey(ctx, SEAL_MAC_SELECTOR), struct.pack(">Q", blob.nonce) + blob.ciphertext)
    if not mac_equal(tag, blob.tag):
        raise FlowError("UNSEAL_FAIL", "sealed blob does not authenticate for this identity")
    return cpu.key_crypt(ctx, cpu.egetkey(ctx, SEAL_SELECTOR), blob.nonce, blob.ciphertext)


# -- data encryption --------------------------------------------------------

def _blocks(plaintext: bytes) -> list[bytes]:
    return [plaintext[i:i + crypto.BLOCK_SIZE] for i in range(0, len(plaintext), crypto.BLOCK_SIZE)]


def _encrypt_program(slot_loader, n_blocks: int, nonce: int) -> list:
    program = [slot_loader]
    program += [EncryptBlockWithBnd(0, DATA_BASE + 16 * i, nonce, i) for i in range(n_blocks)]
    program.append(Exit())
    return program


def _run_encrypt(platform: Platform, eid: int, program: list, blocks: list[bytes],
                 storm: bool, ctx: ExecContext | None = None) -> bytes:
    cpu = platform.cpu
    for i, block in enumerate(blocks):
        cpu.write_enclave_memory(eid, DATA_BASE + 16 * i, block)
    if ctx is None:
        ctx = cpu.eenter(eid, program)
    cpu.run(ctx, interrupt_every_step=storm)
    return b"".join(cpu.read_enclave_memory(eid, DATA_BASE + 16 * i) for i in range(len(blocks)))


def data_encrypt(platform: Platform, eid: int, plaintext: bytes, selector: KeySelector = DATA_SELECTOR,
                 nonce: int = 0, storm: bool = False) -> bytes:
    """Encrypt with a TPM-held key that only ever lives in BND0.

    The result is the counter-mode ciphertext under ``(key, nonce)``, so the
    TPM's ``encrypt_decrypt`` with the same key reverses it.
    """
    blocks = _blocks(plaintext)
    program = _encrypt_program(LoadSecretToBnd(selector, 0), len(blocks), nonce)
    return _run_encrypt(platform, eid, program, blocks, storm)


def provision_baseline_key(platform: Platform, ctx: ExecContext, data_key: bytes) -> None:
    """Seal a data key to disk for the insecure baseline."""
    platform.os_files["baseline.key.sealed"] = seal_data(platform, ctx, data_key).to_bytes()


def insecure_data_encrypt(platform: Platform, eid: int, plaintext: bytes, nonce: int = 0,
                          storm: bool = False) -> bytes:
    """Baseline variant: the key is unsealed from disk into enclave memory, then loaded."""
    cpu = platform.cpu
    blocks = _blocks(plaintext)
    program = _encrypt_program(LoadBndFromMem(0, KEY_BUFFER), len(blocks), nonce)
    ctx = cpu.eenter(eid, program)
    key = unseal_data(platform, ctx, SealedBlob.from_bytes(platform.os_files["baseline.key.sealed"]))
    cpu.enclave_store(ctx, KEY_BUFFER, key)
    return _run_encrypt(platform, eid, program, blocks, storm, ctx)


# -- restart guard ----------------------------------------------------------

_GUARD = struct.Struct(">QQII")   # threshold, aex budget, counter handle, budget handle
_BUDGET = struct.Struct(">QQ")    # cumulative aex count, threshold floor
UNLIMITED = 0xFFFFFFFFFFFFFFFF


def provision_restart_guard(platform: Platform, ctx: ExecContext, threshold: int,
                            aex_budget: int = UNLIMITED) -> SealedBlob:
    """Define the start counter and budget index, and seal the threshold with their handles."""
    cpu = platform.cpu
    counter = cpu.nv_define(ctx, NV_COUNTER, 8, NV_SELECTOR)
    budget = cpu.nv_define(ctx, NV_DATA, _BUDGET.size, NV_SELECTOR)
    cpu.nv_write(ctx, budget, NV_SELECTOR, _BUDGET.pack(0, threshold))
    return seal_data(platform, ctx, _GUARD.pack(threshold, aex_budget, counter, budget))


def reseal_threshold(platform: Platform, ctx: ExecContext, blob: SealedBlob, threshold: int) -> SealedBlob:
    """Seal a new threshold. The NV floor keeps the smallest one ever sealed."""
    cpu = platform.cpu
    _, aex_budget, counter, budget = _GUARD.unpack(unseal_data(platform, ctx, blob))
    cumulative, floor = _BUDGET.unpack(cpu.nv_read(ctx, budget, NV_SELECTOR))
    cpu.nv_write(ctx, budget, NV_SELECTOR, _BUDGET.pack(cumulative, min(floor, threshold)))
    return seal_data(platform, ctx, _GUARD.pack(threshold, aex_budget, counter, budget))


def restart_guard(platform: Platform, ctx: ExecContext, blob: SealedBlob) -> str:
    """Count this start, then decide. Increment comes first so a crash still costs a start."""
    cpu = platform.cpu
    try:
        threshold, aex_budget, counter, budget = _GUARD.unpack(unseal_data(platform, ctx, blob))
    except struct.error as exc:
        raise FlowError("UNSEAL_FAIL", "bad guard payload") from exc
    cpu.nv_increment(ctx, counter, NV_SELECTOR)
    starts = cpu.nv_read(ctx, counter, NV_SELECTOR)
    cumulative, floor = _BUDGET.unpack(cpu.nv_read(ctx, budget, NV_SELECTOR))
    if starts <= min(threshold, floor) and cumulative <= aex_budget:
        return PROCEED
    return ABORT


def record_run_interrupts(platform: Platform, ctx: ExecContext, blob: SealedBlob) -> int:
    """Add this run's AEX count to the persistent interrupt tally; returns the new total."""
    cpu = platform.cpu
    _, _, _, budget = _GUARD.unpack(unseal_data(platform, ctx, blob))
    cumulative, floor = _BUDGET.unpack(cpu.nv_read(ctx, budget, NV_SELECTOR))
    cumulative += cpu.secs(ctx.eid).aex_count
    cpu.nv_write(ctx, budget, NV_SELECTOR, _BUDGET.pack(cumulative, floor))
    return cumulative


# -- trusted time -----------------------------------------------------------

def trusted_time(platform: Platform, ctx: ExecContext) -> int:
    return platform.cpu.read_trusted_time(ctx, "rax")


# -- scenarios --------------------------------------------------------------

SCENARIOS = ("create", "launch", "attest", "encrypt", "counter-demo", "time-demo")
GUARD_FILE = "guard.sealed"
PAGE_SIZE = 4096


def scenario_pages(seed: int, label: str, n_pages: int) -> list[tuple[int, bytes]]:
    return [(i * PAGE_SIZE, derive_bytes(seed, f"{label}:page:{i}", 64)) for i in range(n_pages)]


def scenario_sigstruct(seed: int, pages: Sequence[tuple[int, bytes]], isvprodid: int = 1) -> SigStruct:
    return make_sigstruct(derive_bytes(seed, "author"), pages, isvprodid, isvsvn=1, attributes=0x4)


def workload(selector: KeySelector = DATA_SELECTOR) -> list:
    """A short enclave program that holds a released key in a register across interrupts."""
    return [Nop(), LoadSecretToBnd(selector, 1), Nop(), ReadTrustedTime("rbx"), Exit()]


@dataclass
class ScenarioResult:
    name: str
    outcome: str = "OK"
    outputs: dict[str, str] = field(default_factory=dict)
    metrics: dict[str, FlowMetrics] = field(default_factory=dict)


class ScenarioRunner:
    """Drives one named scenario on a platform; every step is deterministic in ``seed``."""

    def __init__(self, platform: Platform, seed: int, pages: int = 3, threshold: int = 3,
                 storm: bool = False):
        self.platform = platform
        self.seed = seed
        self.pages = pages
        self.threshold = threshold
        self.storm = storm
        self.result: ScenarioResult | None = None

    def _metered(self, flow: str, fn, *args):
        with self.platform.metered() as m:
            out = fn(self.platform, *args)
        self.result.metrics[flow] = m
        return out

    def _create(self, label: str = "app", isvprodid: int = 1) -> int:
        pages = scenario_pages(self.seed, label, self.pages)
        return self._metered(f"create:{label}", create_enclave, pages, scenario_sigstruct(self.seed, pages, isvprodid))

    def _launched(self, label: str = "app", isvprodid: int = 1) -> int:
        eid = self._create(label, isvprodid)
        self._metered(f"launch:{label}", launch_enclave, eid)
        return eid

    def _exercise(self, eid: int) -> None:
        ctx = self.platform.cpu.eenter(eid, workload())
        self.platform.cpu.run(ctx, interrupt_every_step=self.storm)

    def run(self, name: str) -> ScenarioResult:
        if name not in SCENARIOS:
            raise FlowError("BAD_CONFIG", f"unknown scenario {name!r}")
        self.result = ScenarioResult(name)
        getattr(self, "_scenario_" + name.replace("-", "_"))()
        return self.result

    def _scenario_create(self) -> None:
        eid = self._create()
        self.result.outputs["mrenclave"] = self.platform.cpu.secs(eid).identity.mrenclave.hex()

    def _scenario_launch(self) -> None:
        eid = self._launched()
        self._exercise(eid)
        self.result.outputs["mrenclave"] = self.platform.cpu.secs(eid).identity.mrenclave.hex()

    def _scenario_attest(self) -> None:
        app, qe = self._launched("app"), self._launched("qe", isvprodid=2)
        cpu = self.platform.cpu
        ctx, qe_ctx = cpu.eenter(app, workload()), cpu.eenter(qe, workload())
        nonce = derive_bytes(self.seed, "verifier-nonce")
        pkg = self._metered("attest", attest_enclave, ctx, qe_ctx, nonce)
        cpu.run(ctx, interrupt_every_step=self.storm)
        cpu.run(qe_ctx, interrupt_every_step=self.storm)
        ok = verify_quote_package(pkg, cpu.secs(qe).identity.mrenclave, nonce)
        self.result.outputs["verified"] = str(ok)
        if not ok:
            self.result.outcome = "BAD_QUOTE"

    def _scenario_encrypt(self) -> None:
        eid = self._launched()
        plaintext = derive_bytes(self.seed, "plaintext", 16 * self.pages + 5)
        ct = self._metered("encrypt", data_encrypt, eid, plaintext, DATA_SELECTOR, 0, self.storm)
        cpu = self.platform.cpu
        ctx = cpu.eenter(eid, [Exit()])
        key = cpu.egetkey(ctx, DATA_SELECTOR, bnd_slot=None)
        roundtrip = cpu.key_crypt(ctx, key, 0, ct)
        cpu.run(ctx)
        self.result.outputs["ciphertext"] = ct.hex()
        if roundtrip != plaintext:
            self.result.outcome = "ROUNDTRIP_MISMATCH"

    def _scenario_counter_demo(self) -> None:
        eid = self._launched()
        cpu = self.platform.cpu
        ctx = cpu.eenter(eid, workload())
        files = self.platform.os_files
        if GUARD_FILE not in files:
            files[GUARD_FILE] = provision_restart_guard(self.platform, ctx, self.threshold).to_bytes()
        blob = SealedBlob.from_bytes(files[GUARD_FILE])
        decision = self._metered("restart_guard", restart_guard, ctx, blob)
        self.result.outputs["decision"] = decision
        if decision == ABORT:
            cpu.eexit(ctx)
            self.result.outcome = ABORT
            return
        cpu.run(ctx, interrupt_every_step=self.storm)
        ctx = cpu.eenter(eid, [Exit()])
        self.result.outputs["cumulative_aex"] = str(record_run_interrupts(self.platform, ctx, blob))
        cpu.run(ctx)

    def _scenario_time_demo(self) -> None:
        eid = self._launched()
        cpu = self.platform.cpu
        ctx = cpu.eenter(eid, [Exit()])
        t1 = trusted_time(self.platform, ctx)
        t2 = trusted_time(self.platform, ctx)
        cpu.run(ctx)
        self.result.outputs.update(t1=str(t1), t2=str(t2))
        if not t1 < t2:
            self.result.outcome = "CLOCK_NOT_MONOTONIC"
