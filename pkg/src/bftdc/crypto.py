"""Signing and digest primitives.

Each principal holds a private Signer; verification goes through a
KeyDirectory mapping principal names to verification material. Two
interchangeable schemes are provided:

* Ed25519Signer — real public-key signatures (the production scheme).
* HashSigner — deterministic keyed-hash "signatures" (HMAC-SHA256 with a
  per-principal key known to the directory). Orders of magnitude faster,
  used by default in simulation; the directory plays the role of a
  trusted verifier, which is sound inside a single-process harness.

Both schemes bind the signature to the exact payload bytes: any mutation
of the payload, or verification under a different principal's key, fails.
"""

from __future__ import annotations

import hashlib
import hmac
from typing import Protocol

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


class Signer(Protocol):
    def sign(self, payload: bytes) -> bytes: ...


class _Verifier(Protocol):
    def verify(self, payload: bytes, sig: bytes) -> bool: ...


class HashSigner:
    __slots__ = ("_key",)

    def __init__(self, key: bytes) -> None:
        self._key = key

    def sign(self, payload: bytes) -> bytes:
        return hmac.new(self._key, payload, hashlib.sha256).digest()


class _HashVerifier:
    __slots__ = ("_key",)

    def __init__(self, key: bytes) -> None:
        self._key = key

    def verify(self, payload: bytes, sig: bytes) -> bool:
        want = hmac.new(self._key, payload, hashlib.sha256).digest()
        return hmac.compare_digest(want, sig)


class Ed25519Signer:
    __slots__ = ("_key",)

    def __init__(self, key: Ed25519PrivateKey | None = None) -> None:
        self._key = key or Ed25519PrivateKey.generate()

    def sign(self, payload: bytes) -> bytes:
        return self._key.sign(payload)

    def public_key(self) -> Ed25519PublicKey:
        return self._key.public_key()


class _Ed25519Verifier:
    __slots__ = ("_key",)

    def __init__(self, key: Ed25519PublicKey) -> None:
        self._key = key

    def verify(self, payload: bytes, sig: bytes) -> bool:
        try:
            self._key.verify(sig, payload)
            return True
        except InvalidSignature:
            return False


class KeyDirectory:
    """Maps principal names to verifiers. Unknown principals never verify."""

    def __init__(self) -> None:
        self._verifiers: dict[str, _Verifier] = {}

    def register(self, name: str, verifier: _Verifier) -> None:
        self._verifiers[name] = verifier

    def knows(self, name: str) -> bool:
        return name in self._verifiers

    def verify(self, name: str, payload: bytes, sig: bytes) -> bool:
        verifier = self._verifiers.get(name)
        if verifier is None:
            return False
        return verifier.verify(payload, sig)


def make_keyring(
    names: list[str], scheme: str = "hash"
) -> tuple[dict[str, Signer], KeyDirectory]:
    """Build one signer per principal plus the shared directory.

    Hash-scheme keys are derived from the principal name so that a given
    set of principals always yields the same signatures (determinism of
    simulated runs does not depend on key generation order).
    """
    directory = KeyDirectory()
    signers: dict[str, Signer] = {}
    for name in names:
        if scheme == "hash":
            key = sha256(b"bftdc-key:" + name.encode("utf-8"))
            signers[name] = HashSigner(key)
            directory.register(name, _HashVerifier(key))
        elif scheme == "ed25519":
            signer = Ed25519Signer()
            signers[name] = signer
            directory.register(name, _Ed25519Verifier(signer.public_key()))
        else:
            raise ValueError(f"unknown signature scheme: {scheme}")
    return signers, directory
