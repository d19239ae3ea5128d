"""Schnorr signatures and hybrid encryption over a fixed prime-order group.

The group is the order-q subgroup of Z_p* for a 256-bit safe prime p = 2q+1.
This gives signatures that a threshold scheme can also produce (partial
signatures interpolate to an ordinary Schnorr signature verified by the same
routine), which is what the transfer protocols rely on.  Parameters are sized
for a deterministic desk-scale simulation, not for production hardness.

All randomness is derived via SHA-256 from explicit inputs, so runs are
reproducible: keygen from a caller seed, nonces from (sk, msg), encryption
from a caller-provided entropy tag.
"""

from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass

from dotsim.encoding import encode_bytes, encode_int
from dotsim.errors import DecryptFailure

# Safe-prime Schnorr group: p = 2q + 1, G generates the order-q subgroup.
P = 0xBBE99D85C0E2638B5D9F1E7A74E106E5A51939A4A2749D74F4B334D8F53646BF
Q = 0x5DF4CEC2E07131C5AECF8F3D3A708372D28C9CD2513A4EBA7A599A6C7A9B235F
G = 0x4


def _h(*parts: bytes) -> bytes:
    digest = hashlib.sha256()
    for part in parts:
        digest.update(encode_bytes(part))
    return digest.digest()


def hash_to_scalar(*parts: bytes) -> int:
    return int.from_bytes(_h(*parts), "big") % Q


def derive(*parts: bytes) -> bytes:
    """Deterministic 32-byte seed derivation for keys, nonces, puzzle chains."""
    return _h(b"derive", *parts)


@dataclass(frozen=True)
class KeyPair:
    sk: int
    pk: int


def keygen(seed: bytes) -> KeyPair:
    sk = hash_to_scalar(b"keygen", seed)
    if sk == 0:
        sk = 1
    return KeyPair(sk=sk, pk=pow(G, sk, P))


def pk_from_sk(sk: int) -> int:
    return pow(G, sk % Q, P)


def sign(sk: int, msg: bytes) -> bytes:
    """Schnorr signature (R, z) with a deterministic nonce k = H(sk, msg)."""
    k = hash_to_scalar(b"nonce", encode_int(sk), msg)
    if k == 0:
        k = 1
    r_point = pow(G, k, P)
    c = hash_to_scalar(b"challenge", encode_int(r_point), encode_int(pk_from_sk(sk)), msg)
    z = (k + c * sk) % Q
    return encode_int(r_point) + encode_int(z)


def verify(pk: int, msg: bytes, sig: bytes) -> bool:
    if len(sig) != 64:
        return False
    r_point = int.from_bytes(sig[:32], "big")
    z = int.from_bytes(sig[32:], "big")
    if not (0 < r_point < P) or not (0 <= z < Q):
        return False
    c = hash_to_scalar(b"challenge", encode_int(r_point), encode_int(pk), msg)
    return pow(G, z, P) == (r_point * pow(pk, c, P)) % P


def _keystream(key: bytes, length: int) -> bytes:
    out = b""
    counter = 0
    while len(out) < length:
        out += hashlib.sha256(key + counter.to_bytes(8, "big")).digest()
        counter += 1
    return out[:length]


def encrypt(pk: int, msg: bytes, entropy: bytes) -> bytes:
    """Hybrid ElGamal-KEM: ephemeral DH key wraps a stream cipher + MAC.

    `entropy` seeds the ephemeral scalar; callers pass a per-message unique
    tag (simulation determinism requires no ambient randomness).
    """
    y = hash_to_scalar(b"eph", entropy, encode_int(pk), msg)
    if y == 0:
        y = 1
    eph = pow(G, y, P)
    shared = pow(pk, y, P)
    key = _h(b"kem", encode_int(shared), encode_int(eph))
    body = bytes(a ^ b for a, b in zip(msg, _keystream(key, len(msg))))
    tag = hmac.new(key, body, hashlib.sha256).digest()
    return encode_int(eph) + tag + body


def decrypt(sk: int, ct: bytes) -> bytes:
    if len(ct) < 64:
        raise DecryptFailure("ciphertext too short")
    eph = int.from_bytes(ct[:32], "big")
    tag, body = ct[32:64], ct[64:]
    if not (0 < eph < P):
        raise DecryptFailure("bad ephemeral key")
    shared = pow(eph, sk, P)
    key = _h(b"kem", encode_int(shared), encode_int(eph))
    if not hmac.compare_digest(tag, hmac.new(key, body, hashlib.sha256).digest()):
        raise DecryptFailure("authentication failed")
    return bytes(a ^ b for a, b in zip(body, _keystream(key, len(body))))
