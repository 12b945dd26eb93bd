"""Stand-alone chain experiments that do not need the gossip network."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from fractions import Fraction

from .. import crypto
from ..crypto import KeyRegistry
from ..ledger import Burn, ChainParams, Ledger, Output, Transaction, TxInput, sign_inputs
from ..policies import CoinagePolicy, CoinageTxProof, P2PMessage


@dataclass
class WaitResult:
    seed: int
    waits: list[int] = field(default_factory=list)
    admitted: int = 0
    rejected: int = 0

    @property
    def mean(self) -> Fraction:
        return Fraction(sum(self.waits), len(self.waits)) if self.waits else Fraction(0)


def coinage_wait_run(seed: int, *, supply: int = 1000, holding: int = 10,
                     tx_per_second: int = 1, mean_block_gap: int = 10,
                     others: int = 20, horizon: int = 5000) -> WaitResult:
    """Time an ``holding``-coin user waits between coinage-backed messages.

    Every coin holder (the observed user plus ``others`` random holders of
    the rest of the supply) is greedy: it commits a message as soon as its
    single coin will carry enough coinage at the next possible block.  The
    threshold is ``supply / tx_per_second`` coin-seconds, block capacity is
    ``tx_per_second * mean_block_gap`` and block gaps are exponential, so
    the whole supply competes for exactly the capacity the threshold was
    sized for.  A wait runs from the confirmation that created the user's
    coin to the confirmation whose coinage admits the next message.
    """
    rng = random.Random(seed)
    registry = KeyRegistry()
    threshold = Fraction(supply, tx_per_second)
    params = ChainParams(supply=supply, capacity=tx_per_second * mean_block_gap,
                         block_interval=1)
    rest = supply - holding
    cuts = sorted(rng.sample(range(1, rest), others - 1))
    shares = [b - a for a, b in zip([0] + cuts, cuts + [rest])]
    keys = [registry.keygen(crypto.seed_from(f"wait:{seed}:{i}")) for i in range(others + 1)]
    amounts = [holding] + shares
    ledger = Ledger.genesis(params, list(zip((k.public for k in keys), amounts)), registry)
    policy = CoinagePolicy(threshold)
    observed = keys[0].public

    pending: dict[bytes, tuple[int, bytes, int]] = {}  # txid -> (holder, payload, created)
    result = WaitResult(seed)
    t, counter = 0, 0
    while t < horizon:
        t += max(1, round(rng.expovariate(1 / mean_block_gap)))
        block = ledger.mine_block(t)
        for tx in block.txs:
            holder, payload, created = pending.pop(tx.txid)
            msg = P2PMessage(payload, CoinageTxProof(tx.txid))
            if policy.admit(msg, ledger, t):
                result.admitted += 1
                if keys[holder].public == observed:
                    result.waits.append(t - created)
            else:
                result.rejected += 1
        busy = {i.outpoint for e in ledger.mempool.values() for i in e.tx.inputs}
        for holder, key in enumerate(keys):
            for op, entry in ledger.coins_of(key.public):
                if op in busy:
                    continue
                age = t + params.block_interval - entry.created_at
                if entry.output.value * age < threshold:
                    continue
                counter += 1
                payload = f"msg:{seed}:{counter}".encode()
                outs = (Output(0, key.public, Burn(crypto.hash(payload))),
                        Output(entry.output.value, key.public))
                tx = sign_inputs(Transaction((TxInput(op),), outs, 200), [key], ledger)
                ledger.submit_tx(tx)
                pending[tx.txid] = (holder, payload, entry.created_at)
    return result


def coinage_wait_experiment(runs: int = 100, seed: int = 0, **kw) -> tuple[Fraction, list[WaitResult]]:
    """Mean wait of the observed user over ``runs`` seeded runs."""
    results = [coinage_wait_run(seed + r, **kw) for r in range(runs)]
    waits = [w for r in results for w in r.waits]
    mean = Fraction(sum(waits), len(waits)) if waits else Fraction(0)
    return mean, results
