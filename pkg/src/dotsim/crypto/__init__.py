"""Cryptographic primitives: signatures/encryption, secret sharing, time-lock puzzles."""

from dotsim.crypto.pkc import KeyPair, keygen, sign, verify, encrypt, decrypt  # noqa: F401
