"""Hashing and simulation-grade signatures.

Signatures here are ``sha256(secret || msg)``.  They can only be verified by
someone who knows the secret, so every simulated world keeps a
:class:`KeyRegistry` mapping public digests back to secrets.  This is enough
to exercise protocol logic (who signed what) without real public-key
cryptography; it offers no protection against an adversary outside the
simulation.
"""

from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass

DIGEST_SIZE = 32


def hash(data: bytes) -> bytes:  # noqa: A001 - mirrors the H used throughout
    """SHA-256 of ``data`` as 32 raw bytes."""
    return hashlib.sha256(data).digest()


@dataclass(frozen=True)
class KeyPair:
    secret: bytes
    public: bytes

    @property
    def address(self) -> bytes:
        return self.public


class KeyRegistry:
    """Append-only public -> secret map owned by one simulated world."""

    def __init__(self) -> None:
        self._secrets: dict[bytes, bytes] = {}

    def keygen(self, seed: bytes) -> KeyPair:
        if len(seed) != DIGEST_SIZE:
            raise ValueError(f"seed must be {DIGEST_SIZE} bytes, got {len(seed)}")
        pair = KeyPair(secret=bytes(seed), public=hash(seed))
        self._secrets[pair.public] = pair.secret
        return pair

    def verify(self, public: bytes, msg: bytes, sig: bytes | None) -> bool:
        secret = self._secrets.get(public)
        if secret is None or sig is None:
            return False
        return hmac.compare_digest(sign(secret, msg), sig)

    def __contains__(self, public: bytes) -> bool:
        return public in self._secrets

    def __len__(self) -> int:
        return len(self._secrets)


DEFAULT_REGISTRY = KeyRegistry()


def keygen(seed: bytes, registry: KeyRegistry | None = None) -> KeyPair:
    return (DEFAULT_REGISTRY if registry is None else registry).keygen(seed)


def sign(secret: bytes, msg: bytes) -> bytes:
    return hash(secret + msg)


def verify(public: bytes, msg: bytes, sig: bytes | None,
           registry: KeyRegistry | None = None) -> bool:
    return (DEFAULT_REGISTRY if registry is None else registry).verify(public, msg, sig)


def seed_from(label: str | bytes) -> bytes:
    """Derive a 32-byte key seed from a human label (``"alice"`` etc.)."""
    if isinstance(label, str):
        label = label.encode()
    return hash(b"seed:" + label)
