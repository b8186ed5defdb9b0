"""Acceptance suite: the ten top-level criteria, each at its stated tolerance.

Every test prints exactly one ``[PASS]`` or ``[FAIL]`` line (visible even
under output capture) before asserting.
"""

from __future__ import annotations

import dataclasses
import json
import os
import random
import time

import pytest

from talus import adversary, crypto, flows
from talus.bus import REQUEST
from talus.enclave import Exit, LoadSecretToBnd, Nop, RegisterFile
from talus.flows import Platform

from . import golden, oracles
from .conftest import build_enclave
from .helpers import (
    IDENTITY_FIELDS,
    GuardWorld,
    flip_bit,
    identity_from_bytes,
    launch_attack_outcome,
    perturbed_inputs,
)
from .test_crypto import HMAC_VECTORS, SHA256_VECTORS

SECRECY_FLOWS = ("create", "launch", "attest", "encrypt", "counter-demo")


@pytest.fixture
def verdict(capsys):
    def report(number: int, title: str, ok: bool, detail: str = "") -> None:
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}" + (f" ({detail})" if detail else ""))
        assert ok, detail
    return report


def _secret_kind(name: str) -> str:
    return name.split(":")[-1] if name.startswith("tpm_object") else name.split(":")[0]


def test_criterion_01_secrecy(verdict):
    start = time.perf_counter()
    violations = []
    runs = 0
    kinds: set[str] = set()
    for seed in range(100):
        for name in SECRECY_FLOWS:
            for storm in (False, True):
                platform = Platform.build(seed)
                flows.ScenarioRunner(platform, seed, pages=2, storm=storm).run(name)
                obs = adversary.Observables.capture(platform)
                secrets = platform.tracked_secrets()
                kinds.update(_secret_kind(k) for k in secrets)
                leaked = adversary.leaked_secrets(obs, secrets)
                runs += 1
                if leaked:
                    violations.append((seed, name, storm, leaked))
    elapsed = time.perf_counter() - start
    required = {"seal_fuses", "released_key", "hmac-key", "symmetric-key", "attestation-key", "channel_psk"}
    ok = not violations and elapsed < 60 and required <= kinds
    verdict(1, "secrecy over 100 seeds x 5 flows x plain/storm", ok,
            f"{runs} runs, {len(violations)} violations, {elapsed:.1f}s")


def test_criterion_02_positive_control(verdict):
    platform = Platform.build(2)
    app = build_enclave(platform, 2)
    cpu = platform.cpu
    ctx = cpu.eenter(app.eid, [Exit()])
    data_key = flows.derive_bytes(2, "baseline-data-key", 16)
    flows.provision_baseline_key(platform, ctx, data_key)
    cpu.run(ctx)
    pt = b"baseline plaintext, two blocks!!"
    ct = flows.insecure_data_encrypt(platform, app.eid, pt)
    obs = adversary.Observables.capture(platform)
    ok = adversary.contains_secret(obs, data_key) and crypto.ctr_crypt(data_key, 0, ct) == pt
    verdict(2, "insecure baseline leaks its key to the oracle", ok)


def test_criterion_03_launch_control(verdict):
    rng = random.Random(3)
    platform = Platform.build(3)
    honest = build_enclave(platform, 3, "honest", launch=False)
    cpu = platform.cpu
    lk = cpu.launch_prepare(honest.eid)
    token = cpu.mint_einit_token(honest.eid, lk)
    cpu.reset_launch_pcrs()
    bad = []
    for trial in range(500):
        field = IDENTITY_FIELDS[trial % len(IDENTITY_FIELDS)]
        pages, sig = perturbed_inputs(rng, 3, honest.pages, field)
        codes = launch_attack_outcome(platform, honest.eid, token,
                                      lambda: cpu.launch_prepare(honest.eid), pages, sig)
        if not codes <= {"BAD_TOKEN", "POLICY_FAIL"}:
            bad.append((trial, field, codes))
    cpu.einit(honest.eid, token)
    ok = not bad and cpu.secs(honest.eid).init
    verdict(3, "500 single-field perturbations rejected, honest launch succeeds", ok, f"{len(bad)} accepted")


def test_criterion_04_attestation(verdict):
    rng = random.Random(4)
    platform = Platform.build(4)
    app = build_enclave(platform, 4, "app")
    qe = build_enclave(platform, 4, "qe", isvprodid=2)
    ctx, qctx = platform.cpu.eenter(app.eid, [Exit()]), platform.cpu.eenter(qe.eid, [Exit()])
    nonce = flows.derive_bytes(4, "nonce")
    pkg = flows.attest_enclave(platform, ctx, qctx, nonce, flows.derive_bytes(4, "ud", 64))
    qe_mre = qe.identity.mrenclave
    honest_ok = flows.verify_quote_package(pkg, qe_mre, nonce)
    accepted = 0
    for trial in range(200):
        target = ("report", "qe", "nonce")[trial % 3]
        tampered, n = pkg, nonce
        if target == "report":
            raw = flip_bit(pkg.report.serialize(), rng.randrange(8 * len(pkg.report.serialize())))
            tampered = dataclasses.replace(pkg, report=dataclasses.replace(
                pkg.report, target_identity=identity_from_bytes(raw[:76]),
                reporting_identity=identity_from_bytes(raw[76:152]), user_data=raw[152:216], tag=raw[216:]))
        elif target == "qe":
            raw = flip_bit(pkg.qe_identity.serialize(), rng.randrange(8 * 76))
            tampered = dataclasses.replace(pkg, qe_identity=identity_from_bytes(raw))
        else:
            n = flip_bit(nonce, rng.randrange(256))
        accepted += flows.verify_quote_package(tampered, qe_mre, n)
    locality_hits = 0
    for locality in range(4):
        sw = platform.software(locality)
        for cmd, args in (("pcr_reset", {}), ("pcr_extend", {"value": bytes(32)}), ("pcr_read", {})):
            try:
                sw.call(cmd, index=21, **args)
            except adversary.TalusError as exc:
                locality_hits += exc.code == "LOCALITY_FAIL"
    ok = honest_ok and accepted == 0 and locality_hits == 12
    verdict(4, "quote verifies honestly, 200 tampers rejected, PCR21 locked at localities 0-3", ok,
            f"honest={honest_ok} accepted={accepted} locality_fail={locality_hits}/12")


def test_criterion_05_restart_limiting(verdict):
    rng = random.Random(5)
    failures = []
    for threshold in (1, 3, 10):
        for trial in range(50):
            # an older, looser blob exists; the current one is T
            world = GuardWorld(1000 * threshold + trial, [threshold + rng.randrange(4), threshold])
            schedule = ["start"] * (threshold + 3) + [rng.choice(["restart", "rollback"]) for _ in range(8)]
            rng.shuffle(schedule)
            for action in schedule:
                world.step(action, rng)
            for _ in range(threshold + 3):  # keep trying after the schedule
                world.step(rng.choice(["start", "rollback"]), rng)
            if world.proceeds != threshold:
                failures.append((threshold, trial, world.proceeds))
    verdict(5, "exactly T PROCEEDs for T in {1,3,10} over 50 schedules each", not failures,
            f"{len(failures)} bad schedules")


def test_criterion_06_one_shot_ciphertext(verdict):
    platform = Platform.build(6)
    app = build_enclave(platform, 6)
    cpu = platform.cpu
    ctx = cpu.eenter(app.eid, [LoadSecretToBnd(flows.DATA_SELECTOR, 0)] + [Nop()] * 100 + [Exit()])
    cpu.step(ctx)
    sets = []
    for _ in range(100):
        frame = cpu.aex(ctx)
        sets.append(frame.bnd_ct)
        cpu.eresume(ctx)
        cpu.step(ctx)
    distinct = len(set(sets)) == 100
    rng = random.Random(6)
    mismatches = 0
    for _ in range(1000):
        ctx.regs = RegisterFile({k: rng.getrandbits(64) for k in ctx.regs.gprs},
                                [rng.randbytes(16) for _ in range(4)])
        before = ctx.regs.copy()
        cpu.aex(ctx)
        cpu.eresume(ctx)
        mismatches += ctx.regs != before
    verdict(6, "100 pairwise-distinct SSA ciphertext sets, 1000 exact AEX/ERESUME round trips",
            distinct and mismatches == 0, f"distinct={distinct} mismatches={mismatches}")


def test_criterion_07_oracle_equivalence(verdict):
    rng = random.Random(7)
    platform = Platform.build(7)
    cpu = platform.cpu
    bad = 0
    for i in range(100):
        pages = [(rng.getrandbits(32), rng.randbytes(rng.randrange(1, 200))) for _ in range(rng.randint(1, 16))]
        sig = flows.make_sigstruct(flows.derive_bytes(i, "author"), pages, rng.getrandbits(16),
                                   rng.getrandbits(16), rng.getrandbits(64))
        eid = flows.create_enclave(platform, pages, sig)
        ident = cpu.secs(eid).identity
        bad += ident.mrenclave != oracles.streaming_mrenclave(pages)
        lk = cpu.launch_prepare(eid)
        bad += platform.tpm.objects[lk].auth_policy != oracles.launch_policy(
            ident.mrenclave, ident.mrsigner, ident.isvprodid, ident.isvsvn, ident.attributes)
        cpu.reset_launch_pcrs()
        flows.launch_enclave(platform, eid)
        ctx = cpu.eenter(eid, [Exit()])
        for selector, term in ((flows.DATA_SELECTOR, oracles.identity_term(ident.mrenclave, ident.mrsigner)),
                               (flows.SEAL_SELECTOR, oracles.identity_term(mrsigner=ident.mrsigner)),
                               (flows.ATTEST_SELECTOR, oracles.identity_term(mrenclave=ident.mrenclave))):
            key = cpu.egetkey(ctx, selector, bnd_slot=None)
            bad += platform.tpm.objects[key.handle].auth_policy != oracles.policy_chain(term)
        cpu.run(ctx)
        cpu.eremove(eid)
    verdict(7, "mrenclave and EAP digests bit-exact against oracles over 100 enclaves", bad == 0,
            f"{bad} mismatches")


def test_criterion_08_crypto_vectors(verdict):
    sha_ok = all(crypto.sha256(m).hex() == d for m, d in SHA256_VECTORS)
    mac_ok = all(crypto.mac(k, m).hex() == t for k, m, t in HMAC_VECTORS)
    kdf_ok = True
    for _ in range(10):
        key, label, ctx, n = os.urandom(32), os.urandom(8), os.urandom(24), random.randint(1, 96)
        kdf_ok &= crypto.kdf(key, label, ctx, n) == oracles.sp800_108_counter(key, label, ctx, n)
    verdict(8, "SHA-256 / HMAC / KDF bit-exact", sha_ok and mac_ok and kdf_ok,
            f"sha={sha_ok} mac={mac_ok} kdf={kdf_ok}")


def test_criterion_09_bus_discipline(verdict):
    platform = Platform.build(9)
    app = build_enclave(platform, 9)
    ctx = platform.cpu.eenter(app.eid, [Exit()])
    request = [f for f in platform.bus.tap() if f.direction == REQUEST][-1]
    named = [adversary.replay_frame(platform, request), adversary.tamper_frame(platform, request),
             adversary.dma_during_io(platform, lambda: platform.cpu.read_trusted_time(ctx))]
    named_ok = [r.observed for r in named] == ["REPLAY", "TAMPER", "BUS_BUSY"]
    results = adversary.run_attack_suite(9)
    matrix = adversary.coverage_matrix(results)
    uncovered = sorted(code for code, hits in matrix.items() if not hits)
    all_defended = all(r.verdict == "DEFENDED" for r in results)
    ok = named_ok and not uncovered and all_defended
    verdict(9, "replay/tamper/DMA-during-IO rejected, every error path covered", ok,
            f"{len(results)} attacks, {len(matrix)} codes, uncovered={uncovered}")


def test_criterion_10_metrics_determinism(verdict):
    mismatched = [s for s in golden.METRIC_SCENARIOS
                  if golden.metrics_for(s) != json.loads(golden.metrics_path(s).read_text())]
    updates = {n: golden.metrics_for("create", pages=n)["create:app"]["per_command"]["hash_sequence_update"]
               for n in range(1, 17)}
    slopes = {updates[n + 1] - updates[n] for n in range(1, 16)}
    totals = [golden.metrics_for("create", pages=n)["create:app"]["tpm_command_count"] for n in (1, 8, 16)]
    affine = (totals[1] - totals[0]) * 8 == (totals[2] - totals[1]) * 7
    ok = not mismatched and slopes == {1} and affine
    verdict(10, "FlowMetrics match golden files, create is affine with slope 1 update/page", ok,
            f"mismatched={mismatched} slopes={sorted(slopes)}")

