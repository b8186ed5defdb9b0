from __future__ import annotations

import os

import pytest
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.kdf.kbkdf import CounterLocation, KBKDFHMAC, Mode
from hypothesis import given, settings
from hypothesis import strategies as st

from talus import crypto
from talus.errors import CryptoError

from . import oracles

# FIPS 180-4 example messages
SHA256_VECTORS = [
    (b"", "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"),
    (b"abc", "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"),
    (b"abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq",
     "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1"),
    (b"a" * 1_000_000, "cdc76e5c9914fb9281a1c7e284d73e67f1809a48a497200e046d39ccc7112cd0"),
]

# RFC 4231 HMAC-SHA-256 cases 1-4, 6, 7
HMAC_VECTORS = [
    (b"\x0b" * 20, b"Hi There",
     "b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7"),
    (b"Jefe", b"what do ya want for nothing?",
     "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843"),
    (b"\xaa" * 20, b"\xdd" * 50,
     "773ea91e36800e46854db8ebd09181a72959098b3ef8c122d9635514ced565fe"),
    (bytes(range(1, 26)), b"\xcd" * 50,
     "82558a389a443c0ea4cc819899f2083a85f0faa3e578f8077a2e3ff46729665b"),
    (b"\xaa" * 131, b"Test Using Larger Than Block-Size Key - Hash Key First",
     "60e431591ee0b67f0d8a26aacbf5b77f8e0bc6213728c5140546040f0ee37f54"),
    (b"\xaa" * 131,
     b"This is a test using a larger than block-size key and a larger than block-size data. "
     b"The key needs to be hashed before being used by the HMAC algorithm.",
     "9b09ffa71b942fcb27635fbcd5b0e944bfdc63644f0713938a7f51535c3a35e2"),
]


@pytest.mark.parametrize("msg,digest", SHA256_VECTORS, ids=["empty", "abc", "448bit", "million_a"])
def test_sha256_known_answers(msg, digest):
    assert crypto.sha256(msg).hex() == digest


def test_hash_extend_is_hash_of_concatenation():
    old, data = bytes(32), b"measurement"
    assert crypto.hash_extend(old, data) == crypto.sha256(old + data)


@pytest.mark.parametrize("key,msg,tag", HMAC_VECTORS)
def test_hmac_known_answers(key, msg, tag):
    assert crypto.mac(key, msg).hex() == tag
    assert oracles.hmac_sha256(key, msg).hex() == tag


def test_mac_rejects_empty_key():
    with pytest.raises(CryptoError) as err:
        crypto.mac(b"", b"x")
    assert err.value.code == "EMPTY_KEY"


def _kbkdf(key: bytes, label: bytes, context: bytes, length: int) -> bytes:
    return KBKDFHMAC(hashes.SHA256(), Mode.CounterMode, length, 4, 4, CounterLocation.BeforeFixed,
                     label, context, None).derive(key)


@pytest.mark.parametrize("i", range(10))
def test_kdf_matches_handwritten_oracle(i):
    rnd = os.urandom
    key, label, context = rnd(32), rnd(1 + i).hex().encode(), rnd(3 * i)
    length = 1 + (i * 13) % 80
    assert crypto.kdf(key, label, context, length) == oracles.sp800_108_counter(key, label, context, length)


@settings(max_examples=25, deadline=None)
@given(st.binary(min_size=1, max_size=64), st.binary(min_size=1, max_size=16),
       st.binary(max_size=40), st.integers(1, 100))
def test_kdf_matches_library_kbkdf(key, label, context, length):
    assert crypto.kdf(key, label, context, length) == _kbkdf(key, label, context, length)


def test_kdf_prefix_depends_on_length():
    # L is part of the fixed input, so a short output is not a prefix of a long one
    assert crypto.kdf(b"k", "X", b"", 16) != crypto.kdf(b"k", "X", b"", 32)[:16]


def test_kdf_rejects_empty_seed_and_zero_length():
    with pytest.raises(CryptoError):
        crypto.kdf(b"", "X", b"", 16)
    with pytest.raises(CryptoError):
        crypto.kdf(b"k", "X", b"", 0)


def test_ctr_matches_sp800_38a():
    key = bytes.fromhex("2b7e151628aed2a6abf7158809cf4f3c")
    nonce = 0xF0F1F2F3F4F5F6F7
    offset = 0xF8F9FAFBFCFDFEFF
    pt = bytes.fromhex("6bc1bee22e409f96e93d7e117393172a")
    assert crypto.ctr_crypt(key, nonce, pt, offset).hex() == "874d6191b620e3261bef6864990db6ce"


def test_ctr_block_offset_continues_stream():
    key = bytes(range(16))
    data = os.urandom(64)
    whole = crypto.ctr_crypt(key, 7, data)
    assert crypto.ctr_crypt(key, 7, data[32:], block_offset=2) == whole[32:]


def test_ctr_empty_and_bad_key():
    assert crypto.ctr_crypt(bytes(16), 0, b"") == b""
    with pytest.raises(CryptoError):
        crypto.ctr_crypt(bytes(15), 0, b"x")


def test_ed25519_rfc8032_test1():
    seed = bytes.fromhex("9d61b19deffd5a60ba844af492ec2cc44449c5697b326919703bac031cae7f60")
    public, private = crypto.sig_keygen(seed)
    assert public.hex() == "d75a980182b10ab7d54bfed3c964073a0ee172f3daa62325af021a68f707511a"
    sig = crypto.sign(private, b"")
    assert sig.hex() == (
        "e5564300c360ac729086e2cc806e828a84877f1eb8e5d974d873e065224901555"
        "fb8821590a33bacc61e39701cf9b46bd25bf5f0595bbe24655141438e7a100b")
    assert crypto.verify(public, b"", sig)
    assert not crypto.verify(public, b"x", sig)


def test_verify_malformed_key():
    with pytest.raises(CryptoError) as err:
        crypto.verify(b"\x01", b"", bytes(64))
    assert err.value.code == "MALFORMED_KEY"
