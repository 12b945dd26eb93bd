"""Admission policies.

Every mechanism implements the same contract: :meth:`AdmissionPolicy.check`
is a pure probe returning an :class:`AdmissionDecision`, and
:meth:`AdmissionPolicy.commit` applies the side effects of accepting a
message (claiming a fee commitment, consuming quota).  ``admit`` does both.

Each policy exposes one controlling quantity (``threshold``) that a node
raises under load:

==================  =============================  ====================
policy              threshold                      priority
==================  =============================  ====================
direct fee          minimum fee rate (units/byte)  fee rate
indirect fee        minimum fee (units)            fee per message byte
hashcash            minimum difficulty             difficulty
coinage             minimum destroyed coinage      coinage per byte
proof-of-burn       burn per quota grant           remaining quota
UTXO identity       minimum UTXO value             remaining quota
==================  =============================  ====================
"""

from __future__ import annotations

import math
import struct
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from functools import cached_property
from typing import Hashable, Union

from . import crypto
from .ledger import InvalidTransaction, Ledger, Outpoint, Transaction

DEFAULT_WINDOW = 3600


class Reason(str, Enum):
    WRONG_PROOF_KIND = "WrongProofKind"
    BELOW_DIFFICULTY_FLOOR = "BelowDifficultyFloor"
    INVALID_POW = "InvalidPoW"
    INVALID_TX = "InvalidTx"
    FEE_TOO_LOW = "FeeTooLow"
    TX_NOT_FOUND = "TxNotFound"
    NO_COMMITMENT = "NoCommitment"
    ALREADY_CLAIMED = "AlreadyClaimed"
    INSUFFICIENT_COINAGE = "InsufficientCoinage"
    NO_BURN_OUTPUT = "NoBurnOutput"
    BURN_TOO_SMALL = "BurnTooSmall"
    UNKNOWN_IDENTITY = "UnknownIdentity"
    UTXO_NOT_FOUND = "UtxoNotFound"
    VALUE_TOO_SMALL = "ValueTooSmall"
    BAD_SIGNATURE = "BadSignature"
    QUOTA_EXHAUSTED = "QuotaExhausted"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class AdmissionDecision:
    admitted: bool
    reason: Reason | None = None
    priority: Fraction | None = None

    def __bool__(self) -> bool:
        return self.admitted


def accept(priority) -> AdmissionDecision:
    return AdmissionDecision(True, None, Fraction(priority))


def reject(reason: Reason) -> AdmissionDecision:
    return AdmissionDecision(False, reason, None)


# ---------------------------------------------------------------------------
# Proofs and messages
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoProof:
    tag = 0x00

    def encode(self) -> bytes:
        return bytes([self.tag])


@dataclass(frozen=True)
class HashcashProof:
    d: int
    n: int
    tag = 0x01

    def encode(self) -> bytes:
        return bytes([self.tag]) + struct.pack(">QQ", self.d, self.n)


@dataclass(frozen=True)
class FeeTxProof:
    txid: bytes
    tag = 0x02

    def encode(self) -> bytes:
        return bytes([self.tag]) + self.txid


@dataclass(frozen=True)
class CoinageTxProof:
    txid: bytes
    tag = 0x03

    def encode(self) -> bytes:
        return bytes([self.tag]) + self.txid


@dataclass(frozen=True)
class BurnIdentityProof:
    identity: bytes
    sig: bytes
    tag = 0x04

    def encode(self) -> bytes:
        return bytes([self.tag]) + self.identity + self.sig


@dataclass(frozen=True)
class UtxoOwnerProof:
    outpoint: Outpoint
    sig: bytes
    tag = 0x05

    def encode(self) -> bytes:
        return bytes([self.tag]) + self.outpoint.serialize() + self.sig


Proof = Union[NoProof, HashcashProof, FeeTxProof, CoinageTxProof,
              BurnIdentityProof, UtxoOwnerProof]


def decode_proof(data: bytes) -> tuple[Proof, bytes]:
    """Parse one proof from the front of ``data``; return it and the rest."""
    if not data:
        raise ValueError("empty proof")
    tag, body = data[0], data[1:]

    def take(n: int) -> bytes:
        nonlocal body
        if len(body) < n:
            raise ValueError(f"truncated proof (tag {tag:#x})")
        chunk, body = body[:n], body[n:]
        return chunk

    if tag == NoProof.tag:
        proof: Proof = NoProof()
    elif tag == HashcashProof.tag:
        proof = HashcashProof(*struct.unpack(">QQ", take(16)))
    elif tag == FeeTxProof.tag:
        proof = FeeTxProof(take(32))
    elif tag == CoinageTxProof.tag:
        proof = CoinageTxProof(take(32))
    elif tag == BurnIdentityProof.tag:
        proof = BurnIdentityProof(take(32), take(32))
    elif tag == UtxoOwnerProof.tag:
        txid = take(32)
        (index,) = struct.unpack(">I", take(4))
        proof = UtxoOwnerProof(Outpoint(txid, index), take(32))
    else:
        raise ValueError(f"unknown proof tag {tag:#x}")
    return proof, body


@dataclass(frozen=True)
class P2PMessage:
    """A message on the P2P network with its resource-control proof.

    ``declared_size`` is what the message costs in bandwidth; it defaults to
    the payload plus the encoded proof.  ``body`` optionally carries the
    decoded application object (offer, partial trade, chain transaction) so
    receivers need not re-parse ``payload``.
    """

    payload: bytes
    proof: Proof = NoProof()
    declared_size: int | None = None
    body: object = field(default=None, compare=False)

    def __post_init__(self):
        if self.declared_size is None:
            object.__setattr__(self, "declared_size",
                               len(self.payload) + len(self.proof.encode()))
        if self.declared_size <= 0:
            raise ValueError("declared_size must be positive")

    @cached_property
    def digest(self) -> bytes:
        return crypto.hash(self.payload)

    def encode(self) -> bytes:
        return (struct.pack(">I", len(self.payload)) + self.payload
                + struct.pack(">I", self.declared_size) + self.proof.encode())

    @classmethod
    def decode(cls, data: bytes) -> "P2PMessage":
        (n,) = struct.unpack(">I", data[:4])
        payload = data[4:4 + n]
        (size,) = struct.unpack(">I", data[4 + n:8 + n])
        proof, rest = decode_proof(data[8 + n:])
        if rest or len(payload) != n:
            raise ValueError("trailing or missing bytes in message")
        return cls(payload, proof, size)


# ---------------------------------------------------------------------------
# Hashcash
# ---------------------------------------------------------------------------

MAX_DIFFICULTY = 2 ** 64 - 1


def pow_preimage(payload: bytes, d: int, n: int) -> bytes:
    return payload + struct.pack(">QQ", d, n)


def pow_target(d: int) -> int:
    return (1 << 256) // d


def pow_valid(payload: bytes, d: int, n: int) -> bool:
    digest = crypto.hash(pow_preimage(payload, d, n))
    return int.from_bytes(digest, "big") <= pow_target(d)


def hashcash_solve(payload: bytes, d: int) -> int:
    """Smallest nonce ``n >= 0`` making ``(payload, d, n)`` a valid proof.

    Expected number of attempts is ``d``; the returned nonce plus one is the
    exact number of hashes spent.
    """
    if not 1 <= d <= MAX_DIFFICULTY:
        raise ValueError(f"difficulty must be in [1, 2^64), got {d}")
    target = pow_target(d)
    n = 0
    while int.from_bytes(crypto.hash(pow_preimage(payload, d, n)), "big") > target:
        n += 1
    return n


def hashcash_check(msg: P2PMessage, d: int, n: int, floor) -> AdmissionDecision:
    if d < floor:
        return reject(Reason.BELOW_DIFFICULTY_FLOOR)
    if not 1 <= d <= MAX_DIFFICULTY or not pow_valid(msg.payload, d, n):
        return reject(Reason.INVALID_POW)
    return accept(d)


# ---------------------------------------------------------------------------
# Fee- and coinage-based checks
# ---------------------------------------------------------------------------

class Claims:
    """Commitments already consumed: message digests and the txids paying
    for them.  A fee transaction pays for exactly one message."""

    def __init__(self):
        self.digests: set[bytes] = set()
        self.txids: set[bytes] = set()

    def __contains__(self, item: tuple[bytes, bytes]) -> bool:
        digest, txid = item
        return digest in self.digests or txid in self.txids

    def add(self, digest: bytes, txid: bytes) -> None:
        self.digests.add(digest)
        self.txids.add(txid)

    def __len__(self) -> int:
        return len(self.digests)


def direct_fee_check(tx: Transaction, view: Ledger, min_rate) -> AdmissionDecision:
    conf = view.confirmed.get(tx.txid)
    if conf is not None:
        # Already in a block: relaying it spends nothing new but is no spam.
        rate = Fraction(conf.fee, tx.size)
        return accept(rate) if rate >= min_rate else reject(Reason.FEE_TOO_LOW)
    try:
        fee = view.validate_tx(tx)
    except InvalidTransaction:
        return reject(Reason.INVALID_TX)
    rate = Fraction(fee, tx.size)
    if rate < min_rate:
        return reject(Reason.FEE_TOO_LOW)
    return accept(rate)


def indirect_fee_check(msg: P2PMessage, view: Ledger, min_fee,
                       claims: Claims) -> AdmissionDecision:
    txid = msg.proof.txid
    conf = view.confirmed.get(txid)
    if conf is None:
        return reject(Reason.TX_NOT_FOUND)
    if msg.digest not in conf.tx.burn_commitments():
        return reject(Reason.NO_COMMITMENT)
    if conf.fee < min_fee:
        return reject(Reason.FEE_TOO_LOW)
    if (msg.digest, txid) in claims:
        return reject(Reason.ALREADY_CLAIMED)
    return accept(Fraction(conf.fee, msg.declared_size))


def coinage_check(msg: P2PMessage, view: Ledger, min_coinage,
                  claims: Claims) -> AdmissionDecision:
    txid = msg.proof.txid
    conf = view.confirmed.get(txid)
    if conf is None:
        return reject(Reason.TX_NOT_FOUND)
    if conf.coinage < min_coinage:
        return reject(Reason.INSUFFICIENT_COINAGE)
    if msg.digest not in conf.tx.burn_commitments():
        return reject(Reason.NO_COMMITMENT)
    if (msg.digest, txid) in claims:
        return reject(Reason.ALREADY_CLAIMED)
    return accept(Fraction(conf.coinage, msg.declared_size))


# ---------------------------------------------------------------------------
# Identity quotas
# ---------------------------------------------------------------------------

class QuotaLedger:
    """Rolling-window grant counter keyed by identity.

    A grant made at ``t`` counts against the window until ``t + window``
    (exclusive).
    """

    def __init__(self, window: int = DEFAULT_WINDOW, grants_per_window: float = 1):
        if window <= 0:
            raise ValueError("window must be positive")
        self.window = window
        self.grants_per_window = grants_per_window
        self._grants: dict[Hashable, deque[int]] = {}

    def used(self, key: Hashable, now: int) -> int:
        stamps = self._grants.get(key)
        if not stamps:
            return 0
        horizon = now - self.window
        return sum(1 for t in stamps if t > horizon)

    def remaining(self, key: Hashable, now: int, grants: float | None = None) -> float:
        if grants is None:
            grants = self.grants_per_window
        return max(0, grants - self.used(key, now))

    def consume(self, key: Hashable, now: int) -> None:
        stamps = self._grants.setdefault(key, deque())
        self._prune(stamps, now)
        stamps.append(now)

    def prune(self, now: int) -> None:
        for key in list(self._grants):
            self._prune(self._grants[key], now)
            if not self._grants[key]:
                del self._grants[key]

    def _prune(self, stamps: deque[int], now: int) -> None:
        horizon = now - self.window
        while stamps and stamps[0] <= horizon:
            stamps.popleft()

    def stamps(self, key: Hashable) -> list[int]:
        return list(self._grants.get(key, ()))


class BurnRegistrationError(Exception):
    def __init__(self, reason: Reason, detail: str = ""):
        super().__init__(f"{reason.value}: {detail}" if detail else reason.value)
        self.reason = reason


def utxo_identity_check(msg: P2PMessage, view: Ledger, now: int, min_value,
                        quota: QuotaLedger) -> AdmissionDecision:
    outpoint = msg.proof.outpoint
    entry = view.utxos.get(outpoint)
    if entry is None:
        return reject(Reason.UTXO_NOT_FOUND)
    out = entry.output
    if out.name is None and out.value < min_value:
        return reject(Reason.VALUE_TOO_SMALL)
    if not view.registry.verify(out.owner, msg.digest, msg.proof.sig):
        return reject(Reason.BAD_SIGNATURE)
    left = quota.remaining(outpoint, now)
    if left <= 0:
        return reject(Reason.QUOTA_EXHAUSTED)
    return accept(_finite(left))


def _finite(x) -> Fraction:
    # An unlimited quota still needs a finite priority.
    return Fraction(x) if math.isfinite(x) else Fraction(2 ** 63)


# ---------------------------------------------------------------------------
# Policy objects
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LoadSignal:
    admitted: int
    target: int


class AdmissionPolicy:
    """Base class.  Subclasses set ``kind``, ``proof_type`` and implement
    ``_check``; ``_commit`` defaults to no side effects."""

    kind = "abstract"
    proof_type: type = NoProof
    knob = "threshold"

    def __init__(self, threshold=0, *, increase=2, decay=Fraction(9, 10)):
        self.base = Fraction(threshold)
        self.threshold = self.base
        self.increase = Fraction(increase)
        self.decay = Fraction(decay)
        if self.base < 0:
            raise ValueError("threshold must be non-negative")

    def check(self, msg: P2PMessage, view: Ledger, now: int) -> AdmissionDecision:
        if not isinstance(msg.proof, self.proof_type):
            return reject(Reason.WRONG_PROOF_KIND)
        return self._check(msg, view, now)

    def commit(self, msg: P2PMessage, view: Ledger, now: int) -> None:
        self._commit(msg, view, now)

    def admit(self, msg: P2PMessage, view: Ledger, now: int) -> AdmissionDecision:
        decision = self.check(msg, view, now)
        if decision.admitted:
            self.commit(msg, view, now)
        return decision

    def _check(self, msg, view, now) -> AdmissionDecision:
        raise NotImplementedError

    def _commit(self, msg, view, now) -> None:
        pass

    def raise_threshold(self, load: LoadSignal) -> Fraction:
        """Adjust the threshold from one window's admitted count.

        The step is the overload ratio, clamped to ``increase`` above target
        and to ``decay`` below it; the threshold never drops under its base.
        """
        if load.target <= 0:
            raise ValueError("target must be positive")
        ratio = Fraction(load.admitted, load.target)
        if ratio > 1:
            if self.threshold == 0:
                # Zero cannot grow multiplicatively; start from one unit.
                self.threshold = Fraction(1)
            else:
                self.threshold *= min(self.increase, ratio)
        elif ratio < 1:
            self.threshold = max(self.base, self.threshold * max(self.decay, ratio))
        return self.threshold

    def describe(self) -> dict:
        return {"kind": self.kind, self.knob: self.threshold}


class NoPolicy(AdmissionPolicy):
    """Admits everything; the baseline."""

    kind = "none"
    proof_type = object

    def _check(self, msg, view, now):
        return accept(0)


class DirectFeePolicy(AdmissionPolicy):
    kind = "direct_fee"
    knob = "min_fee_rate"

    def check(self, msg, view, now):
        if not isinstance(msg.body, Transaction):
            return reject(Reason.WRONG_PROOF_KIND)
        return direct_fee_check(msg.body, view, self.threshold)


class HashcashPolicy(AdmissionPolicy):
    kind = "hashcash"
    proof_type = HashcashProof
    knob = "min_difficulty"

    def __init__(self, threshold=1, **kw):
        super().__init__(threshold, **kw)

    def _check(self, msg, view, now):
        return hashcash_check(msg, msg.proof.d, msg.proof.n, self.threshold)


class IndirectFeePolicy(AdmissionPolicy):
    kind = "indirect_fee"
    proof_type = FeeTxProof
    knob = "min_fee"

    def __init__(self, threshold=0, **kw):
        super().__init__(threshold, **kw)
        self.claims = Claims()

    def _check(self, msg, view, now):
        return indirect_fee_check(msg, view, self.threshold, self.claims)

    def _commit(self, msg, view, now):
        self.claims.add(msg.digest, msg.proof.txid)


class CoinagePolicy(AdmissionPolicy):
    kind = "coinage"
    proof_type = CoinageTxProof
    knob = "min_coinage"

    def __init__(self, threshold=0, **kw):
        super().__init__(threshold, **kw)
        self.claims = Claims()

    def _check(self, msg, view, now):
        return coinage_check(msg, view, self.threshold, self.claims)

    def _commit(self, msg, view, now):
        self.claims.add(msg.digest, msg.proof.txid)


class BurnIdentityPolicy(AdmissionPolicy):
    """Quota for pseudonyms that provably burnt coins.

    An identity that burnt ``b`` in total receives
    ``floor(b / threshold) * grants_per_burn`` grants per window.
    """

    kind = "burn"
    proof_type = BurnIdentityProof
    knob = "min_burn"

    def __init__(self, threshold=1, *, window=DEFAULT_WINDOW, grants_per_burn=1, **kw):
        super().__init__(threshold, **kw)
        self.grants_per_burn = grants_per_burn
        self.quota = QuotaLedger(window, grants_per_burn)
        self.burned: dict[bytes, int] = {}
        self._registered: set[tuple[bytes, bytes]] = set()

    def grants(self, identity: bytes) -> float:
        burned = self.burned.get(identity, 0)
        if self.threshold == 0:
            return math.inf if identity in self.burned else 0
        return math.floor(burned / self.threshold) * self.grants_per_burn

    def register(self, view: Ledger, txid: bytes, identity: bytes) -> float:
        """Credit the burn in confirmed ``txid`` to ``identity``.

        Burns accumulate across registrations.  Raises
        :class:`BurnRegistrationError` if the accumulated burn is still below
        the threshold; the burn stays credited so a later top-up counts.
        """
        conf = view.confirmed.get(txid)
        if conf is None:
            raise BurnRegistrationError(Reason.TX_NOT_FOUND, txid.hex())
        if identity not in conf.tx.burn_commitments():
            raise BurnRegistrationError(Reason.NO_BURN_OUTPUT, txid.hex())
        if (txid, identity) in self._registered:
            raise BurnRegistrationError(Reason.ALREADY_CLAIMED, txid.hex())
        self._registered.add((txid, identity))
        self.burned[identity] = self.burned.get(identity, 0) + conf.tx.burned_value(identity)
        grants = self.grants(identity)
        if grants < 1:
            raise BurnRegistrationError(Reason.BURN_TOO_SMALL,
                                        f"{self.burned[identity]} < {self.threshold}")
        return grants

    def _check(self, msg, view, now):
        identity = msg.proof.identity
        if identity not in self.burned:
            return reject(Reason.UNKNOWN_IDENTITY)
        if not view.registry.verify(identity, msg.digest, msg.proof.sig):
            return reject(Reason.BAD_SIGNATURE)
        left = self.quota.remaining(identity, now, self.grants(identity))
        if left <= 0:
            return reject(Reason.QUOTA_EXHAUSTED)
        return accept(_finite(left))

    def _commit(self, msg, view, now):
        self.quota.consume(msg.proof.identity, now)


class UtxoIdentityPolicy(AdmissionPolicy):
    """One quota per unspent output worth at least ``threshold`` (any name
    output qualifies regardless of value)."""

    kind = "utxo"
    proof_type = UtxoOwnerProof
    knob = "min_value"

    def __init__(self, threshold=1, *, window=DEFAULT_WINDOW, grants_per_window=1, **kw):
        super().__init__(threshold, **kw)
        self.quota = QuotaLedger(window, grants_per_window)

    def _check(self, msg, view, now):
        return utxo_identity_check(msg, view, now, self.threshold, self.quota)

    def _commit(self, msg, view, now):
        self.quota.consume(msg.proof.outpoint, now)


POLICIES: dict[str, type[AdmissionPolicy]] = {
    cls.kind: cls for cls in (NoPolicy, DirectFeePolicy, HashcashPolicy,
                              IndirectFeePolicy, CoinagePolicy,
                              BurnIdentityPolicy, UtxoIdentityPolicy)
}


def make_policy(kind: str, **params) -> AdmissionPolicy:
    try:
        cls = POLICIES[kind]
    except KeyError:
        raise ValueError(f"unknown policy {kind!r}; choose from {sorted(POLICIES)}") from None
    return cls(**params)


# Proof constructors used by senders.

def sign_for_utxo(msg_payload: bytes, outpoint: Outpoint, key: crypto.KeyPair) -> UtxoOwnerProof:
    return UtxoOwnerProof(outpoint, crypto.sign(key.secret, crypto.hash(msg_payload)))


def sign_for_identity(msg_payload: bytes, key: crypto.KeyPair) -> BurnIdentityProof:
    return BurnIdentityProof(key.public, crypto.sign(key.secret, crypto.hash(msg_payload)))


def solve_message(payload: bytes, d: int) -> tuple[HashcashProof, int]:
    """Proof for ``payload`` at difficulty ``d`` and the number of hashes spent."""
    n = hashcash_solve(payload, d)
    return HashcashProof(d, n), n + 1
