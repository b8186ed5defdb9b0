"""Shared perturbation and schedule helpers for the property and acceptance suites."""

from __future__ import annotations

import dataclasses
import random
import struct

from talus import flows
from talus.enclave import EnclaveIdentity, Exit
from talus.errors import TalusError
from talus.flows import PROCEED, Platform

IDENTITY_FIELDS = ("mrenclave", "mrsigner", "isvprodid", "isvsvn", "attributes")


def identity_from_bytes(raw: bytes) -> EnclaveIdentity:
    prodid, svn, attrs = struct.unpack(">HHQ", raw[64:])
    return EnclaveIdentity(raw[:32], raw[32:64], prodid, svn, attrs)


def flip_bit(data: bytes, bit: int) -> bytes:
    out = bytearray(data)
    out[bit // 8] ^= 1 << (bit % 8)
    return bytes(out)


def perturbed_inputs(rng: random.Random, seed: int, pages, field: str):
    """Creation inputs that differ from the honest ones in exactly one identity field."""
    author = flows.derive_bytes(seed, "author")
    prodid, svn, attrs = 1, 1, 0x4
    pages = list(pages)
    if field == "mrenclave":
        i = rng.randrange(len(pages))
        pages[i] = (pages[i][0], flip_bit(pages[i][1], rng.randrange(8 * len(pages[i][1]))))
    elif field == "mrsigner":
        author = flip_bit(author, rng.randrange(256))
    elif field == "isvprodid":
        prodid ^= 1 << rng.randrange(16)
    elif field == "isvsvn":
        svn ^= 1 << rng.randrange(16)
    else:
        attrs ^= 1 << rng.randrange(64)
    return pages, flows.make_sigstruct(author, pages, prodid, svn, attrs)


def launch_attack_outcome(platform: Platform, honest_eid: int, token, lk_honest_fn, pages, sig) -> set[str]:
    """Every way the perturbed enclave might use the honest launch material; returns observed codes."""
    cpu = platform.cpu
    eid = flows.create_enclave(platform, pages, sig)
    codes = set()
    forged = dataclasses.replace(token, body=cpu.secs(eid).identity.serialize() + token.body[-32:])
    for candidate in (token, forged):
        try:
            cpu.einit(eid, candidate)
            codes.add("SUCCEEDED")
        except TalusError as exc:
            codes.add(exc.code)
    lk = lk_honest_fn()
    cpu.launch_prepare(eid)  # PCR11-13 now hold the perturbed identity
    try:
        cpu.mint_einit_token(honest_eid, lk)
        codes.add("SUCCEEDED")
    except TalusError as exc:
        codes.add(exc.code)
    finally:
        cpu.reset_launch_pcrs()
    cpu.eremove(eid)
    return codes


class GuardWorld:
    """A platform running the guarded enclave, able to crash and reboot between actions."""

    def __init__(self, seed: int, thresholds: list[int]):
        self.seed = seed
        self.platform = Platform.build(seed)
        self._enter()
        self.blobs = [flows.provision_restart_guard(self.platform, self.ctx, thresholds[0])]
        for t in thresholds[1:]:
            self.blobs.append(flows.reseal_threshold(self.platform, self.ctx, self.blobs[-1], t))
        self.proceeds = 0

    def _enter(self) -> None:
        pages = flows.scenario_pages(self.seed, "guarded", 2)
        eid = flows.create_enclave(self.platform, pages, flows.scenario_sigstruct(self.seed, pages))
        flows.launch_enclave(self.platform, eid)
        self.ctx = self.platform.cpu.eenter(eid, [Exit()])

    def start(self, blob) -> str:
        decision = flows.restart_guard(self.platform, self.ctx, blob)
        if decision == PROCEED:
            self.proceeds += 1
        return decision

    def crash_after_increment(self) -> None:
        """The enclave dies between the counter increment and the comparison."""
        _, _, counter, _ = flows._GUARD.unpack(flows.unseal_data(self.platform, self.ctx, self.blobs[-1]))
        self.platform.cpu.nv_increment(self.ctx, counter, flows.NV_SELECTOR)
        self.reboot()

    def reboot(self) -> None:
        self.platform = self.platform.power_cycle()
        self._enter()

    def step(self, action: str, rng: random.Random) -> None:
        if action == "start":
            self.start(self.blobs[-1])
        elif action == "rollback":
            self.start(rng.choice(self.blobs))
        elif action == "restart":
            self.reboot()
        elif action == "crash":
            self.crash_after_increment()

