"""Executable threat model.

The attacker runs with OS privileges: locality 0 or 1 on the bus, the full
wiretap, the whole leak trace, the OS file store, interrupt injection at any
instruction boundary, enclave restarts, state-file and sealed-blob swaps.
It never reaches into CPU registers or TPM internals. Each attack returns an
:class:`AttackResult`; an attack that succeeds is a ``SECURITY_VIOLATION``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from typing import Callable, Iterable

from . import bus as bus_mod
from . import flows, tpm as tpm_mod
from .bus import BusFrame, SecureBus
from .crypto import ZERO32, sha256
from .enclave import EinitToken, ExecContext, Exit, Nop
from .errors import SecurityViolation, TalusError
from .flows import ABORT, DATA_SELECTOR, Platform, SealedBlob

MIN_SECRET_LEN = 8

NO_DECREASE = "NO_DECREASE"
SUCCEEDED = "SUCCEEDED"


@dataclass(frozen=True)
class Observables:
    """Everything outside CPU registers and TPM internals."""
    tap: tuple[BusFrame, ...]
    leaks: tuple[tuple[str, bytes], ...]
    os_files: tuple[tuple[str, bytes], ...]

    @classmethod
    def capture(cls, platform: Platform) -> "Observables":
        files = dict(platform.os_files)
        files["tpm.public"] = platform.tpm.public_view()
        files["transcript.jsonl"] = platform.transcript.jsonl().encode()
        return cls(tuple(platform.bus.tap()), tuple(platform.cpu.leaks.snapshot()),
                   tuple(sorted(files.items())))

    def blobs(self) -> Iterable[bytes]:
        for frame in self.tap:
            yield frame.wire()
        for _, data in self.leaks:
            yield data
        for _, data in self.os_files:
            yield data


def contains_secret(obs: Observables, secret: bytes) -> bool:
    if len(secret) < MIN_SECRET_LEN:
        raise TalusError("SECRET_TOO_SHORT", f"{len(secret)} bytes < {MIN_SECRET_LEN}")
    return any(secret in blob for blob in obs.blobs())


def leaked_secrets(obs: Observables, secrets: dict[str, bytes]) -> list[str]:
    return [name for name, value in secrets.items() if value is not None and contains_secret(obs, value)]


def interrupt_storm(platform: Platform, ctx: ExecContext) -> Observables:
    """Force an AEX and ERESUME after every instruction until the program exits."""
    cpu = platform.cpu
    while cpu.step(ctx) != "exited":
        cpu.aex(ctx)
        cpu.eresume(ctx)
    return Observables.capture(platform)


# -- attack results ---------------------------------------------------------

@dataclass(frozen=True)
class AttackResult:
    attack: str
    expected_error: str
    observed: str

    @property
    def verdict(self) -> str:
        return "DEFENDED" if self.observed == self.expected_error else "SECURITY_VIOLATION"

    def to_dict(self) -> dict:
        return {**asdict(self), "verdict": self.verdict}


def _attempt(name: str, expected: str, fn: Callable[[], object]) -> AttackResult:
    try:
        outcome = fn()
    except TalusError as exc:
        return AttackResult(name, expected, exc.code)
    return AttackResult(name, expected, outcome if isinstance(outcome, str) else SUCCEEDED)


def require_defended(result: AttackResult) -> AttackResult:
    if result.verdict != "DEFENDED":
        raise SecurityViolation(f"{result.attack}: expected {result.expected_error}, got {result.observed}")
    return result


# -- named attacks ----------------------------------------------------------

def replay_frame(platform: Platform, frame: BusFrame) -> AttackResult:
    """Re-inject a tapped request frame."""
    return _attempt("replay_frame", "REPLAY", lambda: platform.bus.inject(frame.wire(), origin="adversary"))


def tamper_frame(platform: Platform, frame: BusFrame) -> AttackResult:
    wire = bytearray(frame.wire())
    wire[14] ^= 0x01  # first ciphertext byte
    return _attempt("tamper_frame", "TAMPER", lambda: platform.bus.inject(bytes(wire), origin="adversary"))


def cross_channel_replay(platform: Platform, frame: BusFrame) -> AttackResult:
    """Replay a frame from an earlier channel epoch with its original sequence number."""
    return _attempt("cross_channel_replay", "TAMPER",
                    lambda: platform.bus.inject(frame.wire(), origin="adversary"))


def forge_token(platform: Platform, eid: int, token: EinitToken, mutation: Callable[[EinitToken], EinitToken],
                name: str = "forge_token") -> AttackResult:
    return _attempt(name, "BAD_TOKEN", lambda: platform.cpu.einit(eid, mutation(token)))


def cross_enclave_key_use(platform: Platform, key, ctx_b: ExecContext) -> AttackResult:
    """Enclave B presents a key handle that EGETKEY issued to enclave A."""
    return _attempt("cross_enclave_key_use", "POLICY_FAIL",
                    lambda: platform.cpu.key_hmac(ctx_b, key, b"exfiltrate"))


def low_locality_command(platform: Platform, locality: int, cmd: str, **args) -> AttackResult:
    return _attempt(f"low_locality:{cmd}@{locality}", "LOCALITY_FAIL",
                    lambda: platform.software(locality).call(cmd, **args))


def rollback_counter(platform: Platform, handle: int) -> AttackResult:
    """Try every OS-reachable way of lowering an NV counter, then check it did not drop."""
    sw = platform.software(1)
    before = platform.tpm.nv[handle].counter_value
    for cmd, args in (("nv_write", {"handle": handle, "payload": b"\x00" * 8}),
                      ("nv_define_space", {"kind": tpm_mod.NV_COUNTER, "size": 8}),
                      ("nv_increment", {"handle": handle})):
        try:
            sw.call(cmd, **args)
        except TalusError:
            pass
    after = platform.tpm.nv[handle].counter_value
    return AttackResult("rollback_counter", NO_DECREASE, NO_DECREASE if after >= before else "DECREASED")


def dma_during_io(platform: Platform, trigger: Callable[[], object]) -> AttackResult:
    """Fire a DMA command from inside the next microcode I/O session."""
    return _hooked(platform, "dma_during_io", "BUS_BUSY", trigger,
                   lambda: platform.software(0).call("read_clock"))


def nested_io_session(platform: Platform, trigger: Callable[[], object]) -> AttackResult:
    return _hooked(platform, "nested_io_session", "SESSION_BUSY", trigger,
                   lambda: platform.bus.io_session_open(2))


def _hooked(platform: Platform, name: str, expected: str, trigger, action) -> AttackResult:
    observed: list[AttackResult] = []

    def hook(op: str) -> None:
        if not observed:
            observed.append(_attempt(name, expected, action))

    platform.cpu.injection_points.append(hook)
    try:
        trigger()
    finally:
        platform.cpu.injection_points.remove(hook)
    return observed[0] if observed else AttackResult(name, expected, "NOT_TRIGGERED")


def sealed_blob_rollback(platform: Platform, ctx: ExecContext, old_blob: SealedBlob) -> AttackResult:
    """Feed the guard an older sealed threshold after the budget is spent."""
    return _attempt("sealed_blob_rollback", ABORT, lambda: flows.restart_guard(platform, ctx, old_blob))


# -- suite ------------------------------------------------------------------

class AttackSuite:
    """Builds an honest platform, then runs every attack case against it."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.platform = Platform.build(seed)
        self.results: list[AttackResult] = []

    def _add(self, result: AttackResult) -> None:
        self.results.append(result)

    def _sw(self, name: str, expected: str, cmd: str, locality: int = 1, **args) -> None:
        self._add(_attempt(name, expected, lambda: self.platform.software(locality).call(cmd, **args)))

    def _scratch_tpm(self) -> tpm_mod.TpmDevice:
        return tpm_mod.TpmDevice(flows.derive_bytes(self.seed, "scratch-primary"),
                                 flows.derive_bytes(self.seed, "scratch-endorsement"))

    def run(self) -> list[AttackResult]:
        p = self.platform
        seed = self.seed
        pages = flows.scenario_pages(seed, "app", 2)
        sig = flows.scenario_sigstruct(seed, pages)

        # creation
        bad_pages = [(pages[0][0], bytes([pages[0][1][0] ^ 1]) + pages[0][1][1:])] + pages[1:]
        self._add(_attempt("flip_page_byte", "MEASUREMENT_MISMATCH",
                           lambda: flows.create_enclave(p, bad_pages, sig)))
        wrong_author = flows.make_sigstruct(flows.derive_bytes(seed, "mallory"), pages, 1, 1, 0x4)
        forged = replace(wrong_author, author_public=sig.author_public)
        self._add(_attempt("wrong_author_key", "BAD_SIGNATURE", lambda: flows.create_enclave(p, pages, forged)))

        # launch: mint an honest token for A, then try to reuse or mutate it
        eid_a = flows.create_enclave(p, pages, sig)
        mal_pages = flows.scenario_pages(seed, "mallory", 2)
        eid_m = flows.create_enclave(p, mal_pages, flows.scenario_sigstruct(seed, mal_pages))
        lk = p.cpu.launch_prepare(eid_a)
        token = p.cpu.mint_einit_token(eid_a, lk)
        p.cpu.reset_launch_pcrs()
        self._add(forge_token(p, eid_m, token, lambda t: t, "reuse_token_for_other_enclave"))
        mal_identity = p.cpu.secs(eid_m).identity
        self._add(forge_token(p, eid_m, token, lambda t: replace(t, body=mal_identity.serialize() + t.body[-32:]),
                              "swap_mrenclave_in_token"))
        self._add(forge_token(p, eid_a, token, lambda t: replace(t, tag=bytes([t.tag[0] ^ 1]) + t.tag[1:]),
                              "flip_token_tag"))
        # LK misuse: extend A's identity, then try to sign at OS locality
        lk = p.cpu.launch_prepare(eid_m)
        self._sw("os_uses_launch_key", "POLICY_FAIL", "hmac_sign", handle=lk, session=None, msg=token.body)
        session = p.software(1).call("policy_start_session")
        self._sw("os_policy_locality", "LOCALITY_FAIL", "policy_command", session=session,
                 kind="LOCALITY", args={"min": 4})
        self._sw("os_identity_assertion", "IDENTITY_LOCALITY", "policy_command", session=session,
                 kind="IDENTITY", args={"fields": {"mrenclave": mal_identity.mrenclave}})
        self._sw("os_bad_policy_kind", "BAD_POLICY", "policy_command", session=session, kind="TRUST_ME", args={})
        self._sw("os_stale_session", "UNKNOWN_SESSION", "hmac_sign", handle=lk, session=0x03FFFFFF, msg=b"x")
        p.cpu.reset_launch_pcrs()
        flows.launch_enclave(p, eid_a)

        # PCR gating
        self._add(low_locality_command(p, 1, "pcr_reset", index=21))
        self._add(low_locality_command(p, 0, "pcr_extend", index=21, value=ZERO32))
        self._add(low_locality_command(p, 1, "pcr_read", index=21))
        self._add(low_locality_command(p, 1, "pcr_reset", index=11))
        self._add(low_locality_command(p, 1, "pcr_extend", index=17, value=ZERO32))
        self._sw("pcr_index_out_of_range", "BAD_INDEX", "pcr_read", index=99)
        self._sw("pcr_short_extend", "BAD_SIZE", "pcr_extend", index=16, value=b"short")

        # second enclave with a different signer for cross-identity attacks
        other_pages = flows.scenario_pages(seed, "other", 2)
        other_sig = flows.make_sigstruct(flows.derive_bytes(seed, "other-author"), other_pages, 1, 1, 0x4)
        eid_b = flows.create_enclave(p, other_pages, other_sig)
        flows.launch_enclave(p, eid_b)
        ctx_a = p.cpu.eenter(eid_a, [Nop(), Exit()])
        ctx_b = p.cpu.eenter(eid_b, [Nop(), Exit()])
        key_a = p.cpu.egetkey(ctx_a, flows.SEAL_MAC_SELECTOR)
        self._add(cross_enclave_key_use(p, key_a, ctx_b))
        sym_a = p.cpu.egetkey(ctx_a, DATA_SELECTOR, bnd_slot=None)
        self._sw("os_release_symmetric", "LOCALITY_FAIL", "release_symmetric", handle=sym_a.handle, session=None)
        sealed = flows.seal_data(p, ctx_a, b"enclave A secret")
        self._add(_attempt("unseal_other_signer", "UNSEAL_FAIL", lambda: flows.unseal_data(p, ctx_b, sealed)))
        flipped = replace(sealed, ciphertext=bytes([sealed.ciphertext[0] ^ 1]) + sealed.ciphertext[1:])
        self._add(_attempt("unseal_flipped_blob", "UNSEAL_FAIL", lambda: flows.unseal_data(p, ctx_a, flipped)))

        # attestation: tamper a report on its way to the QE
        report = p.cpu.ereport(ctx_a, p.cpu.secs(eid_b).identity, bytes(64))
        bad_report = replace(report, user_data=b"\x01" + report.user_data[1:])
        self._add(_attempt("tamper_report_in_transit", "BAD_REPORT",
                           lambda: flows.qe_quote(p, ctx_b, bad_report, ZERO32)))

        # bus discipline
        self._add(dma_during_io(p, lambda: p.cpu.read_trusted_time(ctx_a)))
        self._add(nested_io_session(p, lambda: p.cpu.read_trusted_time(ctx_a)))
        tapped = [f for f in p.bus.tap() if f.direction == bus_mod.REQUEST]
        self._add(replay_frame(p, tapped[-1]))
        self._add(tamper_frame(p, tapped[-1]))
        self._add(_attempt("forge_locality4", "LOCALITY_FAIL", lambda: p.software(4).call("read_clock")))
        self._add(_attempt("steal_capability", "LOCALITY_FAIL", p.bus.issue_capability))
        self._add(_attempt("bogus_locality", "INVALID_LOCALITY", lambda: p.software(7).call("read_clock")))
        self._add(_attempt("rogue_unestablished_bus", "NOT_ESTABLISHED",
                           lambda: SecureBus(p.tpm).send(b"{}", locality=0, cycle=bus_mod.DMA)))

        # restart guard, counters and state files
        # one start under threshold 3, then the owner tightens to 1: the old blob must not
        # buy the two starts it still nominally allows
        guard = flows.provision_restart_guard(p, ctx_a, 3)
        flows.restart_guard(p, ctx_a, guard)
        tighter = flows.reseal_threshold(p, ctx_a, guard, 1)
        self._add(sealed_blob_rollback(p, ctx_a, guard))
        self._add(_attempt("sealed_blob_current", ABORT, lambda: flows.restart_guard(p, ctx_a, tighter)))
        counter = next(h for h, n in p.tpm.nv.items() if n.kind == tpm_mod.NV_COUNTER)
        self._add(rollback_counter(p, counter))
        self._sw("os_reads_guarded_counter", "POLICY_FAIL", "nv_read", handle=counter)
        self._sw("nv_write_counter", "KIND_MISMATCH", "nv_write", handle=counter, payload=b"\x00" * 8)
        self._sw("nv_oversized", "NV_RANGE", "nv_define_space", kind=tpm_mod.NV_DATA, size=1 << 20)
        self._sw("nv_unknown_index", "UNKNOWN_HANDLE", "nv_read", handle=0x01FFFFFF)
        state = p.tpm.persist()
        edited = state.replace(b"channel_epoch = ", b"channel_epoch = 0", 1)
        self._add(_attempt("edit_state_file", "CORRUPT_STATE", lambda: tpm_mod.TpmDevice.restore(edited)))
        downgraded = state.replace(b"TALUS-TPM-STATE v1", b"TALUS-TPM-STATE v0", 1)
        self._add(_attempt("downgrade_state_file", "VERSION_MISMATCH",
                           lambda: tpm_mod.TpmDevice.restore(downgraded)))

        # malformed or unauthorized commands from the OS
        self._sw("retake_ownership", "ALREADY_OWNED", "take_ownership", owner_secret=b"mallory")
        self._sw("unknown_command", "UNKNOWN_COMMAND", "format_nvram")
        self._sw("unknown_object", "UNKNOWN_HANDLE", "hmac_sign", handle=0x80FFFFFF, session=None, msg=b"x")
        self._sw("bad_key_kind", "KIND_MISMATCH", "create_primary", kind="rootkit", creation_context=b"")
        self._sw("bad_policy_size", "BAD_SIZE", "create_primary", kind=tpm_mod.HMAC_KEY,
                 creation_context=b"", auth_policy=b"\x00")
        self._sw("unknown_parent", "UNKNOWN_PARENT", "load", parent=0x80FFFFFF, blob=b"\x00" * 64)
        parent, _ = p.software(1).call("create_primary", kind=tpm_mod.SYMMETRIC_KEY, creation_context=b"os-parent")
        self._sw("forged_wrap_blob", "BAD_WRAP", "load", parent=parent, blob=b"\x00" * 80)
        self._sw("malformed_author_key", "MALFORMED_KEY", "verify_signature",
                 public_part=b"\x01", digest=ZERO32, signature=b"\x00" * 64)
        self._sw("unknown_hash_sequence", "UNKNOWN_SEQUENCE", "hash_sequence_update", seq=0x1234, chunk=b"x")
        ak, _ = p.software(1).call("create_primary", kind=tpm_mod.ATTESTATION_KEY, creation_context=b"os-ak")
        self._sw("empty_quote_selection", "EMPTY_SELECTION", "quote", ak=ak, session=None, selection=[],
                 qualifying=ZERO32)
        self._add(low_locality_command(p, 1, "quote", ak=ak, session=None, selection=[21], qualifying=ZERO32))
        scratch = self._scratch_tpm()
        self._add(_attempt("unowned_create_primary", "NOT_OWNED",
                           lambda: scratch.execute("create_primary", {"kind": tpm_mod.HMAC_KEY,
                                                                      "creation_context": b""}, 0)))
        self._add(_attempt("tpm_bad_locality", "INVALID_LOCALITY",
                           lambda: scratch.execute("read_clock", {}, 9)))

        # replay across channels: everything tapped before a reboot is dead after it
        old_frame = p.bus.tap()[0]
        p.cpu.eexit(ctx_a)
        p.cpu.eexit(ctx_b)
        rebooted = p.power_cycle()
        self._add(cross_channel_replay(rebooted, old_frame))
        return self.results

    def covered_codes(self) -> set[str]:
        return {r.observed for r in self.results if r.verdict == "DEFENDED"}


def run_attack_suite(seed: int = 0) -> list[AttackResult]:
    return AttackSuite(seed).run()


def report_json(results: Iterable[AttackResult]) -> str:
    return json.dumps([r.to_dict() for r in results], indent=2, sort_keys=True)


def coverage_matrix(results: Iterable[AttackResult]) -> dict[str, list[str]]:
    """Every defined error code in the bus, TPM and flow layers mapped to the attacks that fire it."""
    defined = sorted(bus_mod.ERROR_CODES | tpm_mod.ERROR_CODES | flows.ERROR_CODES)
    hits: dict[str, list[str]] = {code: [] for code in defined}
    for r in results:
        if r.verdict == "DEFENDED" and r.observed in hits:
            hits[r.observed].append(r.attack)
    return hits


def honest_outputs(platform: Platform, seed: int) -> dict[str, str]:
    """Outputs of a fixed honest workload; used to show failed attacks leave no residue."""
    pages = flows.scenario_pages(seed, "honest", 2)
    eid = flows.create_enclave(platform, pages, flows.scenario_sigstruct(seed, pages, 3))
    token = flows.launch_enclave(platform, eid)
    ct = flows.data_encrypt(platform, eid, b"non-interference check")
    return {"mrenclave": platform.cpu.secs(eid).identity.mrenclave.hex(),
            "token": sha256(token.body + token.tag).hex(), "ciphertext": ct.hex()}

