import random

import pytest

from dotsim.crypto import pkc
from dotsim.errors import DecryptFailure


def test_keygen_deterministic():
    a = pkc.keygen(b"seed-1")
    b = pkc.keygen(b"seed-1")
    c = pkc.keygen(b"seed-2")
    assert a.pk == b.pk and a.sk == b.sk
    assert a.pk != c.pk


def test_sign_verify_roundtrip():
    kp = pkc.keygen(b"signer")
    sig = pkc.sign(kp.sk, b"a message")
    assert pkc.verify(kp.pk, b"a message", sig)


def test_verify_rejects_wrong_key_and_tamper():
    kp = pkc.keygen(b"signer")
    other = pkc.keygen(b"other")
    msg = b"payload bytes"
    sig = pkc.sign(kp.sk, msg)
    assert not pkc.verify(other.pk, msg, sig)
    assert not pkc.verify(kp.pk, msg + b"x", sig)
    bad = bytearray(sig)
    bad[7] ^= 0x40
    assert not pkc.verify(kp.pk, msg, bytes(bad))


def test_unforgeability_proxy_bitflips():
    # Random bit flips on 1000 (msg, sig) pairs never verify.
    rng = random.Random(99)
    kp = pkc.keygen(b"flip")
    for i in range(1000):
        msg = b"m%d" % i
        sig = bytearray(pkc.sign(kp.sk, msg))
        if rng.random() < 0.5:
            sig[rng.randrange(len(sig))] ^= 1 << rng.randrange(8)
            assert not pkc.verify(kp.pk, msg, bytes(sig))
        else:
            flipped = bytearray(msg)
            flipped[rng.randrange(len(msg))] ^= 1 << rng.randrange(8)
            if bytes(flipped) != msg:
                assert not pkc.verify(kp.pk, bytes(flipped), bytes(sig))


def test_encrypt_decrypt_roundtrip():
    kp = pkc.keygen(b"enc")
    msg = b"\x00\x01secret key material" * 3
    ct = pkc.encrypt(kp.pk, msg, entropy=b"e1")
    assert pkc.decrypt(kp.sk, ct) == msg


def test_decrypt_wrong_key_fails():
    kp = pkc.keygen(b"enc")
    other = pkc.keygen(b"not-enc")
    ct = pkc.encrypt(kp.pk, b"hello", entropy=b"e2")
    with pytest.raises(DecryptFailure):
        pkc.decrypt(other.sk, ct)


def test_decrypt_tampered_fails():
    kp = pkc.keygen(b"enc")
    ct = bytearray(pkc.encrypt(kp.pk, b"hello world", entropy=b"e3"))
    ct[70] ^= 1
    with pytest.raises(DecryptFailure):
        pkc.decrypt(kp.sk, bytes(ct))


def test_large_payload_roundtrip():
    kp = pkc.keygen(b"enc")
    msg = bytes(range(256)) * 40  # 10 KiB
    assert pkc.decrypt(kp.sk, pkc.encrypt(kp.pk, msg, entropy=b"e4")) == msg
