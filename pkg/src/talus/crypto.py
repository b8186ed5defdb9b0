"""Deterministic primitives shared by the TPM model and the CPU microcode.

SHA-256 everywhere, HMAC-SHA-256 for MACs, SP800-108 counter-mode KDF with
an HMAC-SHA-256 PRF, AES-128-CTR for stream encryption and Ed25519 for
signatures (seed-based keygen, deterministic signing).
"""

from __future__ import annotations

import hashlib
import hmac
import struct

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .errors import CryptoError

DIGEST_SIZE = 32
SYMKEY_SIZE = 16
BLOCK_SIZE = 16
ZERO32 = bytes(DIGEST_SIZE)

_U64 = 0xFFFFFFFFFFFFFFFF


def require_len(value: bytes, size: int, what: str) -> bytes:
    if not isinstance(value, (bytes, bytearray)) or len(value) != size:
        raise CryptoError("BAD_LENGTH", f"{what} must be {size} bytes")
    return bytes(value)


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def hash_extend(old: bytes, data: bytes) -> bytes:
    """Return ``sha256(old || data)``, the PCR / measurement chaining step."""
    return hashlib.sha256(bytes(old) + bytes(data)).digest()


def mac(key: bytes, msg: bytes) -> bytes:
    if not key:
        raise CryptoError("EMPTY_KEY", "MAC key must be non-empty")
    return hmac.new(bytes(key), bytes(msg), hashlib.sha256).digest()


def mac_equal(a: bytes, b: bytes) -> bool:
    return hmac.compare_digest(bytes(a), bytes(b))


def kdf(seed: bytes, label: str | bytes, context: bytes, out_len: int) -> bytes:
    """SP800-108 KDF in counter mode with HMAC-SHA-256 as PRF.

    Each PRF block is ``HMAC(seed, [i]_32 || label || 0x00 || context || [L]_32)``
    with ``i`` starting at 1 and ``L`` the output length in bits.
    """
    if not seed:
        raise CryptoError("EMPTY_SEED", "KDF seed must be non-empty")
    if out_len < 1:
        raise CryptoError("BAD_LENGTH", "out_len must be >= 1")
    if isinstance(label, str):
        label = label.encode("ascii")
    fixed = bytes(label) + b"\x00" + bytes(context) + struct.pack(">I", out_len * 8)
    out = bytearray()
    counter = 1
    while len(out) < out_len:
        out += hmac.new(bytes(seed), struct.pack(">I", counter) + fixed, hashlib.sha256).digest()
        counter += 1
    return bytes(out[:out_len])


def ctr_crypt(key: bytes, nonce: int, data: bytes, block_offset: int = 0) -> bytes:
    """AES-128 in counter mode.

    The initial counter block is ``nonce (64-bit BE) || block index (64-bit BE)``,
    starting at ``block_offset``. Encryption and decryption are the same call.
    """
    require_len(key, SYMKEY_SIZE, "counter-mode key")
    if not data:
        return b""
    counter = struct.pack(">QQ", nonce & _U64, block_offset & _U64)
    enc = Cipher(algorithms.AES(bytes(key)), modes.CTR(counter)).encryptor()
    return enc.update(bytes(data)) + enc.finalize()


def sig_keygen(seed: bytes) -> tuple[bytes, bytes]:
    """Derive an Ed25519 key pair from a 32-byte seed; returns ``(public, private)``."""
    require_len(seed, DIGEST_SIZE, "signature seed")
    sk = Ed25519PrivateKey.from_private_bytes(bytes(seed))
    pk = sk.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    return pk, bytes(seed)


def sign(private: bytes, digest: bytes) -> bytes:
    try:
        sk = Ed25519PrivateKey.from_private_bytes(bytes(private))
    except (ValueError, TypeError) as exc:
        raise CryptoError("MALFORMED_KEY", "bad private key") from exc
    return sk.sign(bytes(digest))


def verify(public: bytes, digest: bytes, signature: bytes) -> bool:
    try:
        pk = Ed25519PublicKey.from_public_bytes(bytes(public))
    except (ValueError, TypeError) as exc:
        raise CryptoError("MALFORMED_KEY", "bad public key") from exc
    try:
        pk.verify(bytes(signature), bytes(digest))
    except InvalidSignature:
        return False
    return True
