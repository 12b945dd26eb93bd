"""Shared builders and independent oracles for the test suite."""

from __future__ import annotations

import itertools
import random
from fractions import Fraction

from rescontrol import crypto, exchange
from rescontrol.crypto import KeyRegistry
from rescontrol.ledger import (
    Name,
    ChainParams,
    Ledger,
    Outpoint,
    Output,
    Transaction,
    TxInput,
    sign_inputs,
)


def make_ledger(amounts, *, capacity=10, block_interval=10, mempool_limit=10_000,
                label="k"):
    """Ledger whose genesis gives ``amounts[i]`` to key ``i``."""
    reg = KeyRegistry()
    keys = [reg.keygen(crypto.seed_from(f"{label}{i}")) for i in range(len(amounts))]
    params = ChainParams(supply=sum(amounts), capacity=capacity,
                         block_interval=block_interval, mempool_limit=mempool_limit)
    ledger = Ledger.genesis(params, [(k.public, a) for k, a in zip(keys, amounts)], reg)
    return ledger, keys


def genesis_outpoint(ledger: Ledger, i: int) -> Outpoint:
    return Outpoint(ledger.blocks[0].txs[0].txid, i)


def spend(ledger, key, ops, outputs, size=250):
    tx = Transaction(tuple(TxInput(op) for op in ops), tuple(outputs), size)
    return sign_inputs(tx, [key], ledger)


def pay_with_fee(ledger, key, op, fee, size=250, tag=0):
    """Spend ``op`` back to its owner leaving ``fee``; ``tag`` varies the
    txid by splitting off a dust output."""
    value = ledger.utxos[op].output.value
    outs = [Output(value - fee - tag, key.public)]
    if tag:
        outs.append(Output(tag, key.public))
    return spend(ledger, key, [op], outs, size)


# -- block selection oracles --------------------------------------------------

def exhaustive_fee_oracle(entries, capacity, *, uniform_size):
    """Best subset of at most ``capacity`` non-conflicting entries.

    Uniform sizes: maximise total fee.  Mixed sizes: maximise the summed fee
    rate (the quantity top-C-by-rate greedily optimises).  Ties prefer more
    transactions, then the lexicographically smallest (-rate, txid) list.
    """
    entries = list(entries)
    best_key, best = None, set()
    for k in range(min(capacity, len(entries)) + 1):
        for combo in itertools.combinations(entries, k):
            if uniform_size:
                score = sum(e.fee for e in combo)
            else:
                score = sum((Fraction(e.fee, e.tx.size) for e in combo), Fraction(0))
            order = sorted((-Fraction(e.fee, e.tx.size), e.tx.txid) for e in combo)
            key = (-score, -k, order)
            if best_key is None or key < best_key:
                best_key, best = key, {e.tx.txid for e in combo}
    return best


def greedy_exclusion_oracle(entries, capacity):
    chosen, spent = [], set()
    for e in sorted(entries, key=lambda e: (-Fraction(e.fee, e.tx.size), e.tx.txid)):
        if len(chosen) == capacity:
            break
        ops = {i.outpoint for i in e.tx.inputs}
        if ops & spent:
            continue
        chosen.append(e.tx.txid)
        spent |= ops
    return set(chosen)


def fee_case(rng: random.Random, *, conflicts: bool, uniform_size: bool):
    """Random mempool of at most 10 transactions and capacity of at most 5."""
    n = rng.randint(0, 10)
    capacity = rng.randint(1, 5)
    payers = n if not conflicts else max(1, n - rng.randint(0, n // 2))
    ledger, keys = make_ledger([1000] * max(payers, 1), capacity=capacity,
                               label=f"fee{rng.random()}")
    entries = []
    for j in range(n):
        who = j if j < payers else rng.randrange(payers)
        op = genesis_outpoint(ledger, who)
        size = 250 if uniform_size else rng.randint(100, 400)
        tx = pay_with_fee(ledger, keys[who], op, rng.randint(0, 30), size, tag=j + 1)
        entries.append(ledger.submit_tx(tx))
    return ledger, entries, capacity


# -- name trades ------------------------------------------------------------

NAME = b"d/bob"


def market(buyer_coins=(150,), seller_coins=10, label="x"):
    """Seller (key 0) owns ``d/bob``; buyers follow."""
    ledger, keys = make_ledger([seller_coins, *buyer_coins], label=label)
    seller = keys[0]
    reg = spend(ledger, seller, [genesis_outpoint(ledger, 0)],
                [Output(0, seller.public, Name(NAME)), Output(seller_coins, seller.public)])
    ledger.submit_tx(reg)
    ledger.mine_block()
    return ledger, seller, keys[1:]


def offer_for(ledger, seller, price=100, expiry=1000):
    return exchange.make_offer(ledger, NAME, price, seller.public, expiry, seller.secret)


def state(ledger):
    return {op: (e.output.owner, e.output.value, e.output.kind)
            for op, e in ledger.utxos.items()}


def run_trade_case(rng: random.Random):
    """One randomised trade with an optional adversarial twist.

    Returns (ledger before, ledger after, full tx or None, seller, buyer)."""
    price = rng.randint(1, 60)
    coins = rng.randint(0, 120)
    ledger, seller, (buyer,) = market(buyer_coins=(coins,), label=f"a{rng.random()}")
    before = ledger.snapshot()
    try:
        offer = offer_for(ledger, seller, price=price)
        partial = exchange.build_take(ledger, offer, buyer.secret, fee=rng.randint(0, 2))
        full = exchange.seller_verify_and_sign(ledger, partial, offer, seller.secret)
    except exchange.ExchangeError:
        return before, ledger, None, seller, buyer
    twist = rng.randrange(4)
    if twist == 1:
        # Seller moves the name elsewhere first.
        name_op = ledger.resolve_name(NAME)[0]
        ledger.submit_tx(spend(ledger, seller, [name_op],
                               [Output(0, seller.public, Name(NAME, b"moved"))]))
        ledger.mine_block()
        before = ledger.snapshot()
    elif twist == 2:
        # Buyer spends a coin first.
        op = full.inputs[0].outpoint
        ledger.submit_tx(spend(ledger, buyer, [op], [Output(0, buyer.public)]))
        ledger.mine_block()
        before = ledger.snapshot()
    elif twist == 3:
        full = full.with_sig(len(full.inputs) - 1, b"\x00" * 32)
    exchange.settle(ledger, full)
    return before, ledger, full, seller, buyer


def check_atomic(before, after, full, seller, buyer):
    assert after.conservation_holds()
    owner_before = before.resolve_name(NAME)[1].owner
    owner_after = after.resolve_name(NAME)[1].owner
    settled = full is not None and full.txid in after.confirmed
    name_moved = owner_before != owner_after
    assert name_moved == settled
    if full is None:
        return
    price = full.outputs[0].value
    paid = after.balance(seller.public) - before.balance(seller.public)
    assert paid == (price if settled else 0)
    if not settled:
        assert state(after) == state(before)
