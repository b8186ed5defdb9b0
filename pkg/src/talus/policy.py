"""Policy-digest terms and trial computation.

A policy digest starts at 32 zero bytes and is extended once per policy
command with ``hash_extend(digest, TAG || canonical args)``. The same helpers
serve the TPM (live sessions) and the microcode (computing the ``auth_policy``
to attach at object creation, i.e. a trial session).
"""

from __future__ import annotations

from typing import Iterable, Mapping

from .crypto import ZERO32, hash_extend, sha256

TAG_LOCALITY = b"POLICY_LOCALITY"
TAG_PCR = b"POLICY_PCR"
TAG_IDENTITY = b"POLICY_ID"

NUM_PCRS = 24

# Identity fields in canonical order, with their bitmap bit and encoded width.
MRENCLAVE = "mrenclave"
MRSIGNER = "mrsigner"
ISVPRODID = "isvprodid"
ISVSVN = "isvsvn"
IDENTITY_FIELDS = (
    (MRENCLAVE, 0x01, 32),
    (MRSIGNER, 0x02, 32),
    (ISVPRODID, 0x04, 2),
    (ISVSVN, 0x08, 2),
)


def pcr_bitmap(indices: Iterable[int]) -> bytes:
    bits = bytearray(3)
    for i in indices:
        bits[i // 8] |= 1 << (i % 8)
    return bytes(bits)


def pcr_composite(values: Iterable[bytes]) -> bytes:
    """Digest of the selected PCR values concatenated in index order."""
    return sha256(b"".join(values))


def locality_term(min_locality: int) -> bytes:
    return TAG_LOCALITY + bytes([min_locality])


def pcr_term(indices: Iterable[int], composite: bytes) -> bytes:
    return TAG_PCR + pcr_bitmap(indices) + composite


def _field_bytes(value: bytes | int, width: int) -> bytes:
    if isinstance(value, int):
        return value.to_bytes(width, "big")
    if len(value) != width:
        raise ValueError(f"identity field must be {width} bytes")
    return bytes(value)


def identity_term(fields: Mapping[str, bytes | int]) -> bytes:
    unknown = set(fields) - {name for name, _, _ in IDENTITY_FIELDS}
    if unknown:
        raise ValueError(f"unknown identity fields {sorted(unknown)}")
    bitmap = 0
    values = b""
    for name, bit, width in IDENTITY_FIELDS:
        if name in fields:
            bitmap |= bit
            values += _field_bytes(fields[name], width)
    return TAG_IDENTITY + bytes([bitmap]) + values


def chain(terms: Iterable[bytes], start: bytes = ZERO32) -> bytes:
    digest = start
    for term in terms:
        digest = hash_extend(digest, term)
    return digest


def identity_policy(fields: Mapping[str, bytes | int]) -> bytes:
    return chain([identity_term(fields)])


def launch_policy(pcr_values: Mapping[int, bytes]) -> bytes:
    """LOCALITY(4) followed by PCR over the given PCR values."""
    indices = sorted(pcr_values)
    composite = pcr_composite(pcr_values[i] for i in indices)
    return chain([locality_term(4), pcr_term(indices, composite)])
