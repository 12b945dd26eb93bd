"""Simplified Namecoin-style UTXO chain.

The full money supply exists at genesis and miners earn fees only, so at
every height::

    sum(live output values) + burned_total == supply

Outputs are plain coins, names (unique, transferable by spending with a
same-name output) or burns (provably unspendable, carrying a 32-byte
commitment).  Ages for coinage are measured in block timestamps.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from fractions import Fraction
from functools import cached_property
from typing import Iterable, Union

from . import crypto
from .crypto import KeyRegistry

MAX_NAME_LEN = 255
MAX_VALUE_LEN = 520
TX_VERSION = 0x01

KIND_COIN = 0x00
KIND_NAME = 0x01
KIND_BURN = 0x02


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class LedgerError(Exception):
    code = "LedgerError"

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        cls.code = cls.__name__


class AllocationMismatch(LedgerError):
    pass


class InvalidTransaction(LedgerError):
    pass


class MalformedTransaction(InvalidTransaction):
    pass


class MissingInput(InvalidTransaction):
    pass


class DuplicateInput(MissingInput):
    pass


class BadSignature(InvalidTransaction):
    pass


class ValueOverflow(InvalidTransaction):
    pass


class NameMismatch(InvalidTransaction):
    pass


class DuplicateName(InvalidTransaction):
    pass


class FeeTooLow(InvalidTransaction):
    pass


class AlreadyInMempool(LedgerError):
    pass


class MempoolFull(LedgerError):
    pass


class TooEarly(LedgerError):
    pass


# ---------------------------------------------------------------------------
# Data model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Coin:
    def payload(self) -> bytes:
        return b""


@dataclass(frozen=True)
class Name:
    name: bytes
    value: bytes = b""

    def __post_init__(self):
        if not 0 < len(self.name) <= MAX_NAME_LEN or len(self.value) > MAX_VALUE_LEN:
            raise ValueError(f"name must be 1..{MAX_NAME_LEN} bytes and value "
                             f"at most {MAX_VALUE_LEN} bytes")

    def payload(self) -> bytes:
        return (struct.pack(">B", len(self.name)) + self.name
                + struct.pack(">H", len(self.value)) + self.value)


@dataclass(frozen=True)
class Burn:
    commitment: bytes

    def payload(self) -> bytes:
        return self.commitment


OutputKind = Union[Coin, Name, Burn]
COIN = Coin()

_KIND_TAGS = {Coin: KIND_COIN, Name: KIND_NAME, Burn: KIND_BURN}


@dataclass(frozen=True)
class Output:
    value: int
    owner: bytes
    kind: OutputKind = COIN

    @property
    def is_burn(self) -> bool:
        return isinstance(self.kind, Burn)

    @property
    def name(self) -> bytes | None:
        return self.kind.name if isinstance(self.kind, Name) else None

    def serialize(self) -> bytes:
        payload = self.kind.payload()
        return (struct.pack(">Q", self.value) + self.owner
                + struct.pack(">BH", _KIND_TAGS[type(self.kind)], len(payload))
                + payload)


@dataclass(frozen=True, order=True)
class Outpoint:
    txid: bytes
    index: int

    def serialize(self) -> bytes:
        return self.txid + struct.pack(">I", self.index)

    def __str__(self) -> str:
        return f"{self.txid.hex()}:{self.index}"


@dataclass(frozen=True)
class TxInput:
    outpoint: Outpoint
    sig: bytes | None = None


@dataclass(frozen=True)
class Transaction:
    inputs: tuple[TxInput, ...]
    outputs: tuple[Output, ...]
    size: int

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "outputs", tuple(self.outputs))

    def serialize(self) -> bytes:
        """Canonical encoding; signatures are never part of it."""
        parts = [bytes([TX_VERSION]), struct.pack(">I", len(self.inputs))]
        parts += [i.outpoint.serialize() for i in self.inputs]
        parts.append(struct.pack(">I", len(self.outputs)))
        parts += [o.serialize() for o in self.outputs]
        parts.append(struct.pack(">I", self.size))
        return b"".join(parts)

    @cached_property
    def txid(self) -> bytes:
        return crypto.hash(self.serialize())

    @property
    def sighash(self) -> bytes:
        # Signatures are excluded from the encoding, so every signer commits
        # to the same digest, which is also the txid.
        return self.txid

    def outpoint(self, index: int) -> Outpoint:
        return Outpoint(self.txid, index)

    def with_sig(self, index: int, sig: bytes | None) -> "Transaction":
        inputs = list(self.inputs)
        inputs[index] = replace(inputs[index], sig=sig)
        return replace(self, inputs=tuple(inputs))

    def burn_commitments(self) -> list[bytes]:
        return [o.kind.commitment for o in self.outputs if o.is_burn]

    def burned_value(self, commitment: bytes | None = None) -> int:
        return sum(o.value for o in self.outputs
                   if o.is_burn and (commitment is None or o.kind.commitment == commitment))


def sign_inputs(tx: Transaction, keys: Iterable[crypto.KeyPair],
                ledger: "Ledger") -> Transaction:
    """Sign every input owned by one of ``keys``; other inputs are left as is."""
    by_owner = {k.public: k for k in keys}
    for i, txin in enumerate(tx.inputs):
        entry = ledger.utxos.get(txin.outpoint)
        if entry is not None and entry.output.owner in by_owner:
            tx = tx.with_sig(i, crypto.sign(by_owner[entry.output.owner].secret, tx.sighash))
    return tx


@dataclass(frozen=True)
class UtxoEntry:
    output: Output
    created_at: int


@dataclass(frozen=True)
class Confirmation:
    tx: Transaction
    height: int
    timestamp: int
    fee: int
    coinage: int


@dataclass(frozen=True)
class Block:
    height: int
    timestamp: int
    txs: tuple[Transaction, ...]
    coinbase: Transaction | None = None


@dataclass(frozen=True)
class ChainParams:
    supply: int = 1000
    capacity: int = 10
    block_interval: int = 600
    mempool_limit: int = 10_000
    min_fee_rate: Fraction = Fraction(0)
    miner: bytes = field(default_factory=lambda: crypto.hash(b"miner"))

    def __post_init__(self):
        if self.supply < 0:
            raise ValueError("supply must be non-negative")
        if self.capacity < 0:
            raise ValueError("capacity must be non-negative")
        if self.block_interval < 1:
            raise ValueError("block_interval must be >= 1 so timestamps strictly increase")
        if self.mempool_limit < 1:
            raise ValueError("mempool_limit must be >= 1")


@dataclass(frozen=True)
class MempoolEntry:
    tx: Transaction
    fee: int
    rate: Fraction

    @property
    def txid(self) -> bytes:
        return self.tx.txid

    def sort_key(self):
        """Best first: highest fee rate, then lowest txid."""
        return (-self.rate, self.tx.txid)


# ---------------------------------------------------------------------------
# Ledger
# ---------------------------------------------------------------------------

class Ledger:
    """Mutable chain state with a mempool.

    Create one with :meth:`genesis`.  The ledger is also the read-only view
    handed to admission policies; :meth:`snapshot` gives an independent copy.
    """

    def __init__(self, params: ChainParams, registry: KeyRegistry | None = None):
        self.params = params
        self.registry = registry if registry is not None else crypto.DEFAULT_REGISTRY
        self.utxos: dict[Outpoint, UtxoEntry] = {}
        self.names: dict[bytes, Outpoint] = {}
        self.name_owners: dict[bytes, list[bytes]] = {}
        self.burned_total = 0
        self.fees_credited = 0
        self.burns: dict[bytes, list[Outpoint]] = {}
        self.confirmed: dict[bytes, Confirmation] = {}
        self.mempool: dict[bytes, MempoolEntry] = {}
        self.blocks: list[Block] = []

    @classmethod
    def genesis(cls, params: ChainParams, allocations: Iterable[tuple[bytes, int]],
                registry: KeyRegistry | None = None) -> "Ledger":
        allocations = list(allocations)
        total = sum(v for _, v in allocations)
        if total != params.supply or any(v < 0 for _, v in allocations):
            raise AllocationMismatch(
                f"allocations sum to {total}, supply is {params.supply}")
        ledger = cls(params, registry)
        gtx = Transaction((), tuple(Output(v, owner) for owner, v in allocations), 1)
        ledger._apply(gtx, timestamp=0, height=0, fee=0, coinage=0)
        ledger.blocks.append(Block(0, 0, (gtx,)))
        return ledger

    # -- queries -----------------------------------------------------------

    @property
    def height(self) -> int:
        return self.blocks[-1].height

    @property
    def tip_time(self) -> int:
        return self.blocks[-1].timestamp

    @property
    def next_block_time(self) -> int:
        return self.tip_time + self.params.block_interval

    def total_utxo_value(self) -> int:
        return sum(e.output.value for e in self.utxos.values())

    def conservation_holds(self) -> bool:
        return self.total_utxo_value() + self.burned_total == self.params.supply

    def balance(self, owner: bytes) -> int:
        return sum(e.output.value for e in self.utxos.values()
                   if e.output.owner == owner and e.output.name is None)

    def coins_of(self, owner: bytes) -> list[tuple[Outpoint, UtxoEntry]]:
        """Plain coin outputs of ``owner``, oldest outpoint first."""
        found = [(op, e) for op, e in self.utxos.items()
                 if e.output.owner == owner and isinstance(e.output.kind, Coin)]
        return sorted(found, key=lambda item: (item[1].created_at, item[0]))

    def resolve_name(self, name: bytes) -> tuple[Outpoint, Output] | None:
        op = self.names.get(name)
        if op is None:
            return None
        return op, self.utxos[op].output

    def count_utxos_at_least(self, m: int) -> int:
        if m <= 0:
            raise ValueError("m must be positive")
        return sum(1 for e in self.utxos.values() if e.output.value >= m)

    def utxo_coinage(self, now: int) -> int:
        return sum(e.output.value * (now - e.created_at) for e in self.utxos.values())

    def destroyed_coinage(self, tx: Transaction, at: int | None = None) -> int:
        """Coin-seconds destroyed by spending ``tx``'s inputs at time ``at``.

        ``at`` defaults to the timestamp the next block would carry.
        """
        if at is None:
            at = self.next_block_time
        total = 0
        for txin in tx.inputs:
            entry = self.utxos.get(txin.outpoint)
            if entry is None:
                raise MissingInput(str(txin.outpoint))
            total += entry.output.value * (at - entry.created_at)
        return total

    def fee(self, tx: Transaction) -> int:
        value_in = 0
        for txin in tx.inputs:
            entry = self.utxos.get(txin.outpoint)
            if entry is None:
                raise MissingInput(str(txin.outpoint))
            value_in += entry.output.value
        return value_in - sum(o.value for o in tx.outputs)

    def fee_rate(self, tx: Transaction) -> Fraction:
        return Fraction(self.fee(tx), tx.size)

    def is_confirmed(self, txid: bytes) -> bool:
        return txid in self.confirmed

    def chain_bytes(self) -> int:
        """Declared bytes of every confirmed transaction after genesis."""
        return sum(c.tx.size for c in self.confirmed.values() if c.height > 0)

    # -- validation --------------------------------------------------------

    def validate_tx(self, tx: Transaction) -> int:
        """Check ``tx`` against the confirmed state; return its fee."""
        if tx.size <= 0:
            raise MalformedTransaction("declared size must be positive")
        if not tx.inputs:
            raise MalformedTransaction("transaction spends nothing")
        for out in tx.outputs:
            if out.value < 0:
                raise MalformedTransaction("negative output value")
            if len(out.owner) != crypto.DIGEST_SIZE:
                raise MalformedTransaction("owner must be a 32-byte digest")
            kind = out.kind
            if isinstance(kind, Name) and (len(kind.name) > MAX_NAME_LEN
                                           or len(kind.value) > MAX_VALUE_LEN
                                           or not kind.name):
                raise MalformedTransaction("name or value out of bounds")
            if isinstance(kind, Burn) and len(kind.commitment) != crypto.DIGEST_SIZE:
                raise MalformedTransaction("burn commitment must be 32 bytes")

        seen: set[Outpoint] = set()
        spent_names: list[bytes] = []
        value_in = 0
        for txin in tx.inputs:
            if txin.outpoint in seen:
                raise DuplicateInput(str(txin.outpoint))
            seen.add(txin.outpoint)
            entry = self.utxos.get(txin.outpoint)
            if entry is None:
                raise MissingInput(str(txin.outpoint))
            if not self.registry.verify(entry.output.owner, tx.sighash, txin.sig):
                raise BadSignature(str(txin.outpoint))
            value_in += entry.output.value
            if entry.output.name is not None:
                spent_names.append(entry.output.name)

        value_out = sum(o.value for o in tx.outputs)
        if value_out > value_in:
            raise ValueOverflow(f"outputs {value_out} exceed inputs {value_in}")

        out_names = [o.name for o in tx.outputs if o.name is not None]
        if len(set(out_names)) != len(out_names):
            raise DuplicateName("same name created twice in one transaction")
        for name in spent_names:
            if name not in out_names:
                raise NameMismatch(f"name input {name!r} has no matching output")
        for name in out_names:
            if name not in spent_names and name in self.names:
                raise DuplicateName(f"{name!r} is already registered")
        return value_in - value_out

    # -- mempool -----------------------------------------------------------

    def submit_tx(self, tx: Transaction) -> MempoolEntry:
        """Validate ``tx`` and put it in the mempool.

        When the mempool is full the lowest fee-rate entry is evicted to
        make room, unless the incoming transaction would itself be the one
        evicted, in which case :class:`MempoolFull` is raised.
        """
        if tx.txid in self.mempool:
            raise AlreadyInMempool(tx.txid.hex())
        fee = self.validate_tx(tx)
        entry = MempoolEntry(tx, fee, Fraction(fee, tx.size))
        if entry.rate < self.params.min_fee_rate:
            raise FeeTooLow(f"fee rate {entry.rate} below {self.params.min_fee_rate}")
        if len(self.mempool) >= self.params.mempool_limit:
            worst = max(self.mempool.values(), key=MempoolEntry.sort_key)
            if entry.sort_key() >= worst.sort_key():
                raise MempoolFull(f"fee rate {entry.rate} does not beat {worst.rate}")
            del self.mempool[worst.txid]
        self.mempool[tx.txid] = entry
        return entry

    def select_block_txs(self) -> list[MempoolEntry]:
        """Greedy top-C by fee rate, skipping entries that conflict with a
        better one already chosen (same outpoint or same new name)."""
        chosen: list[MempoolEntry] = []
        spent: set[Outpoint] = set()
        new_names: set[bytes] = set()
        for entry in sorted(self.mempool.values(), key=MempoolEntry.sort_key):
            if len(chosen) >= self.params.capacity:
                break
            ops = {i.outpoint for i in entry.tx.inputs}
            regs = self._registrations(entry.tx)
            if ops & spent or regs & new_names:
                continue
            chosen.append(entry)
            spent |= ops
            new_names |= regs
        return chosen

    def mine_block(self, now: int | None = None) -> Block:
        if now is None:
            now = self.next_block_time
        if now < self.next_block_time:
            raise TooEarly(f"next block allowed at {self.next_block_time}, got {now}")
        height = self.height + 1
        chosen = self.select_block_txs()
        total_fee = 0
        for entry in chosen:
            coinage = self.destroyed_coinage(entry.tx, at=now)
            self._apply(entry.tx, timestamp=now, height=height, fee=entry.fee,
                        coinage=coinage)
            del self.mempool[entry.txid]
            total_fee += entry.fee
        coinbase = None
        if total_fee:
            # The height in the size field keeps coinbase txids distinct.
            coinbase = Transaction((), (Output(total_fee, self.params.miner),), height)
            self._apply(coinbase, timestamp=now, height=height, fee=0, coinage=0)
            self.fees_credited += total_fee
        block = Block(height, now, tuple(e.tx for e in chosen), coinbase)
        self.blocks.append(block)
        self._purge_mempool()
        return block

    def _purge_mempool(self) -> None:
        for txid in list(self.mempool):
            try:
                self.validate_tx(self.mempool[txid].tx)
            except InvalidTransaction:
                del self.mempool[txid]

    def _registrations(self, tx: Transaction) -> set[bytes]:
        spent = set()
        for txin in tx.inputs:
            entry = self.utxos.get(txin.outpoint)
            if entry is not None and entry.output.name is not None:
                spent.add(entry.output.name)
        return {o.name for o in tx.outputs if o.name is not None} - spent

    def _apply(self, tx: Transaction, *, timestamp: int, height: int, fee: int,
               coinage: int) -> None:
        for txin in tx.inputs:
            entry = self.utxos.pop(txin.outpoint)
            if entry.output.name is not None:
                del self.names[entry.output.name]
        for index, out in enumerate(tx.outputs):
            op = Outpoint(tx.txid, index)
            if out.is_burn:
                self.burned_total += out.value
                self.burns.setdefault(out.kind.commitment, []).append(op)
                continue
            self.utxos[op] = UtxoEntry(out, timestamp)
            if out.name is not None:
                self.names[out.name] = op
                owners = self.name_owners.setdefault(out.name, [])
                if not owners or owners[-1] != out.owner:
                    owners.append(out.owner)
        self.confirmed[tx.txid] = Confirmation(tx, height, timestamp, fee, coinage)

    def snapshot(self) -> "Ledger":
        copy = Ledger(self.params, self.registry)
        copy.utxos = dict(self.utxos)
        copy.names = dict(self.names)
        copy.name_owners = {k: list(v) for k, v in self.name_owners.items()}
        copy.burned_total = self.burned_total
        copy.fees_credited = self.fees_credited
        copy.burns = {k: list(v) for k, v in self.burns.items()}
        copy.confirmed = dict(self.confirmed)
        copy.mempool = dict(self.mempool)
        copy.blocks = list(self.blocks)
        return copy


def genesis(params: ChainParams, allocations: Iterable[tuple[bytes, int]],
            registry: KeyRegistry | None = None) -> Ledger:
    return Ledger.genesis(params, allocations, registry)


def payment(ledger: Ledger, payer: crypto.KeyPair, outputs: list[Output], fee: int,
            size: int = 250, extra_inputs: Iterable[Outpoint] = ()) -> Transaction:
    """Build and sign a transaction paying ``outputs`` from ``payer``'s coins.

    Coins are taken oldest first until outputs plus fee are covered; any
    remainder returns to the payer as change.
    """
    need = sum(o.value for o in outputs) + fee
    extra_inputs = list(extra_inputs)
    inputs = [TxInput(op) for op in extra_inputs]
    have = sum(ledger.utxos[op].output.value for op in extra_inputs)
    for op, entry in ledger.coins_of(payer.public):
        if have >= need:
            break
        if op in extra_inputs:
            continue
        inputs.append(TxInput(op))
        have += entry.output.value
    if have < need:
        raise ValueOverflow(f"{payer.public.hex()[:8]} holds {have}, needs {need}")
    outs = list(outputs)
    if have > need:
        outs.append(Output(have - need, payer.public))
    tx = Transaction(tuple(inputs), tuple(outs), size)
    return sign_inputs(tx, [payer], ledger)
