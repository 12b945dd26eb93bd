"""Atomic name trading brokered by signed offers.

A seller announces a :class:`SellOffer` signed by the key owning the name.
A buyer answers with a :class:`PartialTradeTx`: one transaction spending the
buyer's coins *and* the name, paying the price to the seller and the name to
the buyer, with only the buyer's inputs signed.  The seller checks the terms,
signs the name input and broadcasts.  Because everything happens in a single
transaction, either the name and the payment both move or neither does.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum

from . import crypto
from .ledger import (
    Coin,
    InvalidTransaction,
    Ledger,
    LedgerError,
    Output,
    Outpoint,
    Transaction,
    TxInput,
)

DEFAULT_OFFER_TTL = 24 * 3600

OFFER_TAG = 0x01
TAKE_TAG = 0x02


class ExchangeError(Exception):
    pass


class NameUnknown(ExchangeError):
    pass


class NotOwner(ExchangeError):
    pass


class OfferInvalid(ExchangeError):
    pass


class InsufficientFunds(ExchangeError):
    pass


class TermsMismatch(ExchangeError):
    """The partial transaction does not implement the offer."""


class PriceMismatch(TermsMismatch):
    pass


class WrongPayout(TermsMismatch):
    pass


class WrongName(TermsMismatch):
    pass


class BadBuyerSignature(ExchangeError):
    pass


class OfferStatus(str, Enum):
    OK = "Ok"
    NAME_UNKNOWN = "NameUnknown"
    BAD_SIGNATURE = "BadSignature"
    EXPIRED = "Expired"
    OWNER_CHANGED = "OwnerChanged"


@dataclass(frozen=True)
class OfferCheck:
    status: OfferStatus

    def __bool__(self) -> bool:
        return self.status is OfferStatus.OK


@dataclass(frozen=True)
class SellOffer:
    name: bytes
    price: int
    payout_address: bytes
    expiry: int
    offer_sig: bytes
    signer: bytes  # key that signed; not part of the signed serialization

    def serialize(self) -> bytes:
        return (struct.pack(">B", len(self.name)) + self.name
                + struct.pack(">Q", self.price) + self.payout_address
                + struct.pack(">Q", self.expiry))

    @property
    def digest(self) -> bytes:
        return crypto.hash(self.serialize())

    def to_payload(self) -> bytes:
        return bytes([OFFER_TAG]) + self.serialize() + self.signer + self.offer_sig

    def to_record(self) -> dict:
        return {"name": self.name.decode(errors="replace"), "price": self.price,
                "payout": self.payout_address.hex(), "expiry": self.expiry,
                "digest": self.digest.hex()}


@dataclass(frozen=True)
class PartialTradeTx:
    tx: Transaction
    offer_digest: bytes
    buyer: bytes

    def to_payload(self) -> bytes:
        sigs = b"".join(i.sig or bytes(32) for i in self.tx.inputs)
        return (bytes([TAKE_TAG]) + self.offer_digest + self.buyer
                + self.tx.serialize() + sigs)

    def payment_to(self, address: bytes) -> int:
        return sum(o.value for o in self.tx.outputs
                   if o.owner == address and isinstance(o.kind, Coin))


def make_offer(view: Ledger, name: bytes, price: int, payout: bytes, expiry: int,
               owner_secret: bytes) -> SellOffer:
    found = view.resolve_name(name)
    if found is None:
        raise NameUnknown(name.decode(errors="replace"))
    _, out = found
    signer = crypto.hash(owner_secret)
    if signer != out.owner:
        raise NotOwner(name.decode(errors="replace"))
    unsigned = SellOffer(name, price, payout, expiry, b"", signer)
    return SellOffer(name, price, payout, expiry,
                     crypto.sign(owner_secret, unsigned.digest), signer)


def verify_offer(view: Ledger, offer: SellOffer, now: int) -> OfferCheck:
    found = view.resolve_name(offer.name)
    if found is None:
        return OfferCheck(OfferStatus.NAME_UNKNOWN)
    _, out = found
    if not view.registry.verify(offer.signer, offer.digest, offer.offer_sig):
        return OfferCheck(OfferStatus.BAD_SIGNATURE)
    if offer.signer != out.owner:
        if offer.signer in view.name_owners.get(offer.name, ()):
            return OfferCheck(OfferStatus.OWNER_CHANGED)
        return OfferCheck(OfferStatus.BAD_SIGNATURE)
    if now >= offer.expiry:
        return OfferCheck(OfferStatus.EXPIRED)
    return OfferCheck(OfferStatus.OK)


def trade_size(n_inputs: int, n_outputs: int) -> int:
    """Declared size using typical single-key input/output byte counts."""
    return 10 + 148 * n_inputs + 34 * n_outputs


def build_take(view: Ledger, offer: SellOffer, buyer_secret: bytes,
               buyer_utxos: list[Outpoint] | None = None, *, fee: int = 1,
               now: int | None = None) -> PartialTradeTx:
    """Buyer side of the trade: fund, assemble and sign the buyer inputs.

    ``buyer_utxos`` defaults to the buyer's coins, oldest first, taken until
    price plus fee is covered.
    """
    if now is not None and not verify_offer(view, offer, now):
        raise OfferInvalid(verify_offer(view, offer, now).status.value)
    found = view.resolve_name(offer.name)
    if found is None:
        raise OfferInvalid("name is not live")
    name_op, name_out = found
    buyer = crypto.hash(buyer_secret)
    need = offer.price + fee

    if buyer_utxos is None:
        buyer_utxos, have = [], 0
        for op, entry in view.coins_of(buyer):
            if have >= need:
                break
            buyer_utxos.append(op)
            have += entry.output.value
    have = 0
    for op in buyer_utxos:
        entry = view.utxos.get(op)
        if entry is None or entry.output.owner != buyer:
            raise InsufficientFunds(f"{op} is not a live coin of the buyer")
        have += entry.output.value
    if have < need:
        raise InsufficientFunds(f"buyer holds {have}, needs {need}")

    inputs = [TxInput(op) for op in buyer_utxos] + [TxInput(name_op)]
    outputs = [Output(offer.price, offer.payout_address),
               Output(name_out.value, buyer, name_out.kind)]
    if have > need:
        outputs.append(Output(have - need, buyer))
    tx = Transaction(tuple(inputs), tuple(outputs), trade_size(len(inputs), len(outputs)))
    sig = crypto.sign(buyer_secret, tx.sighash)
    for i in range(len(buyer_utxos)):
        tx = tx.with_sig(i, sig)
    return PartialTradeTx(tx, offer.digest, buyer)


def seller_verify_and_sign(view: Ledger, partial: PartialTradeTx, offer: SellOffer,
                           seller_secret: bytes) -> Transaction:
    """Seller side: refuse anything that does not implement ``offer`` exactly."""
    found = view.resolve_name(offer.name)
    if found is None:
        raise NameUnknown(offer.name.decode(errors="replace"))
    name_op, name_out = found
    seller = crypto.hash(seller_secret)
    if seller != name_out.owner:
        raise NotOwner(offer.name.decode(errors="replace"))
    if partial.offer_digest != offer.digest:
        raise PriceMismatch("partial answers a different offer")

    tx = partial.tx
    name_inputs = [i for i, txin in enumerate(tx.inputs) if txin.outpoint == name_op]
    if len(name_inputs) != 1:
        raise WrongName("name input missing")
    name_outputs = [o for o in tx.outputs if o.name is not None]
    if (len(name_outputs) != 1 or name_outputs[0].name != offer.name
            or name_outputs[0].owner != partial.buyer):
        raise WrongName("name does not go to the declared buyer")

    if not any(o.owner == offer.payout_address for o in tx.outputs):
        raise WrongPayout("nothing is paid to the payout address")
    paid = partial.payment_to(offer.payout_address)
    if paid < offer.price:
        raise PriceMismatch(f"pays {paid}, price is {offer.price}")

    for i, txin in enumerate(tx.inputs):
        if i == name_inputs[0]:
            continue
        entry = view.utxos.get(txin.outpoint)
        # Every other input must be the buyer's own coin; a seller-owned
        # extra input would spend the seller's money with the same digest.
        if (entry is None or entry.output.owner != partial.buyer
                or not view.registry.verify(partial.buyer, tx.sighash, txin.sig)):
            raise BadBuyerSignature(str(txin.outpoint))

    return tx.with_sig(name_inputs[0], crypto.sign(seller_secret, tx.sighash))


def pick_best(view: Ledger, offer: SellOffer,
              partials: list[PartialTradeTx]) -> PartialTradeTx | None:
    """Highest payment to the seller among partials that pass the checks the
    seller can make without signing; ties go to the smallest txid."""
    good = []
    for p in partials:
        if p.offer_digest != offer.digest:
            continue
        good.append((-p.payment_to(offer.payout_address), p.tx.txid, p))
    if not good:
        return None
    return min(good, key=lambda t: (t[0], t[1]))[2]


class SettleStatus(str, Enum):
    CONFIRMED = "Confirmed"
    PENDING = "Pending"
    REJECTED = "Rejected"
    DROPPED = "Dropped"


@dataclass(frozen=True)
class SettleOutcome:
    status: SettleStatus
    reason: str | None = None
    height: int | None = None


def settle(view: Ledger, full_tx: Transaction, *, mine: bool = True,
           now: int | None = None) -> SettleOutcome:
    """Submit the signed trade and, with ``mine``, produce the next block."""
    try:
        view.submit_tx(full_tx)
    except LedgerError as exc:
        return SettleOutcome(SettleStatus.REJECTED, exc.code)
    if not mine:
        return SettleOutcome(SettleStatus.PENDING)
    view.mine_block(now)
    return trade_status(view, full_tx)


def trade_status(view: Ledger, tx: Transaction) -> SettleOutcome:
    conf = view.confirmed.get(tx.txid)
    if conf is not None:
        return SettleOutcome(SettleStatus.CONFIRMED, height=conf.height)
    if tx.txid in view.mempool:
        return SettleOutcome(SettleStatus.PENDING)
    try:
        view.validate_tx(tx)
    except InvalidTransaction as exc:
        return SettleOutcome(SettleStatus.DROPPED, exc.code)
    return SettleOutcome(SettleStatus.DROPPED)
