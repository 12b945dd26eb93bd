"""Executes a scenario: one chain, one gossip network, scripted actors.

Timeline of a run::

    t = 0                  setup transactions (name registrations, burns,
                           attacker UTXO splits) go to the mempool
    t = block_interval     first block confirms them; burn identities are
                           registered at every node
    t = messaging_start    honest sellers, buyers and the attacker start
    t = duration           actors stop; in-flight messages drain

Every chain transaction that backs a proof is recorded so the report can
measure how much block space the policy itself consumed and when.
"""

from __future__ import annotations

import math
import random
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction

from .. import crypto, exchange
from ..crypto import KeyPair, KeyRegistry
from ..exchange import DEFAULT_OFFER_TTL, PartialTradeTx, SellOffer
from ..ledger import (
    Burn,
    ChainParams,
    Ledger,
    LedgerError,
    Name,
    Outpoint,
    Output,
    Transaction,
    TxInput,
    sign_inputs,
)
from ..netsim import NetConfig, Network
from ..policies import (
    CoinageTxProof,
    FeeTxProof,
    NoProof,
    P2PMessage,
    BurnRegistrationError,
    make_policy,
    sign_for_identity,
    sign_for_utxo,
    solve_message,
)
from .scenario import Scenario

BACKING_TX_SIZE = 200
SPAM_TAG = 0x00


@dataclass
class Actor:
    label: str
    role: str  # "seller", "buyer" or "attacker"
    key: KeyPair
    node: int
    hashrate: int
    identities: list[KeyPair] = field(default_factory=list)
    locked: set[Outpoint] = field(default_factory=set)
    busy_until: int = 0
    sent: int = 0
    name: bytes | None = None
    offer: SellOffer | None = None
    done: bool = False


@dataclass
class MessageInfo:
    role: str
    sender: str
    origin: int
    wanted_at: int
    broadcast_at: int | None = None
    kind: str = "opaque"


@dataclass
class PendingBacked:
    actor: Actor
    payload: bytes
    body: object
    kind: str
    wanted_at: int


@dataclass
class TradeRecord:
    offer: str
    buyer: str
    seller: str
    txid: str = ""
    status: str = "taken"
    atomic: bool | None = None


class World:
    def __init__(self, scenario: Scenario):
        self.sc = scenario
        self.rng = random.Random(scenario.seed)
        self.registry = KeyRegistry()
        self.kind = scenario.policy.kind
        self.threshold = scenario.threshold
        self.start = scenario.messaging_start
        self.end = scenario.duration

        self.params = ChainParams(supply=scenario.ledger.supply,
                                  capacity=scenario.ledger.capacity,
                                  block_interval=scenario.ledger.block_interval)
        net = scenario.net
        self.net_config = NetConfig(nodes=net.nodes, topology=net.topology,
                                    degree=net.degree, latency=net.latency,
                                    bandwidth=net.bandwidth, tick=net.tick,
                                    seed=scenario.seed)
        self.actors: list[Actor] = []
        allocations = self._make_actors()
        self.ledger = Ledger.genesis(self.params, allocations, self.registry)
        self.network = Network(self.net_config, self.ledger, self._policy_for_node)

        self.messages: dict[bytes, MessageInfo] = {}
        self.pending: dict[bytes, PendingBacked] = {}
        self.backing: dict[bytes, str] = {}
        self.burn_txs: list[tuple[bytes, bytes]] = []
        self.registration_errors: Counter = Counter()
        self.attacker_cost = Counter(fees=0, burned=0, coinage=0, hashes=0)
        self.attacker_attempts = 0
        self.attacker_unfunded = 0
        self.honest_unfunded = 0
        self.trades: dict[bytes, TradeRecord] = {}

    # -- construction ------------------------------------------------------

    def _key(self, label: str) -> KeyPair:
        return self.registry.keygen(crypto.seed_from(f"{self.sc.seed}:{label}"))

    def _make_actors(self) -> list[tuple[bytes, int]]:
        h, a = self.sc.honest, self.sc.attacker
        nodes = self.net_config.nodes
        allocations = []
        for i in range(h.sellers):
            actor = Actor(f"seller{i}", "seller", self._key(f"seller{i}"),
                          self.rng.randrange(nodes), h.hashrate)
            actor.name = f"d/name{i}".encode()
            self.actors.append(actor)
            allocations.append((actor.key.public, h.seller_coins))
        for j in range(h.buyers):
            actor = Actor(f"buyer{j}", "buyer", self._key(f"buyer{j}"),
                          self.rng.randrange(nodes), h.hashrate)
            self.actors.append(actor)
            allocations.append((actor.key.public, h.buyer_coins))
            allocations.append((actor.key.public, h.proof_coins))
        if a.coins:
            actor = Actor("attacker", "attacker", self._key("attacker"),
                          self.rng.randrange(nodes), a.hashrate)
            self.actors.append(actor)
            allocations.append((actor.key.public, a.coins))
        rest = self.params.supply - sum(v for _, v in allocations)
        if rest:
            allocations.append((crypto.hash(b"reserve"), rest))
        return allocations

    def _policy_for_node(self, node_id: int):
        p = self.sc.policy
        kw = {"threshold": self.threshold}
        if self.kind == "utxo":
            kw.update(window=p.window, grants_per_window=p.grants)
        elif self.kind == "burn":
            kw.update(window=p.window, grants_per_burn=p.grants)
        elif self.kind == "none":
            kw = {}
        return make_policy(self.kind, **kw)

    @property
    def attacker(self) -> Actor | None:
        return next((a for a in self.actors if a.role == "attacker"), None)

    # -- running -----------------------------------------------------------

    def run(self) -> Network:
        net = self.network
        net.at(0, self._setup, "setup")
        interval = self.params.block_interval
        net.every(interval, interval, self._on_block, "block", until=self.end)
        if self.sc.policy.controller_target is not None:
            net.enable_controller(self.sc.policy.controller_target,
                                  self.sc.policy.controller_window, start=self.start)
        self._schedule_honest()
        self._schedule_attacker()
        net.run(self.end + self.drain_time())
        return net

    def drain_time(self) -> int:
        bound = self.network.diameter() * (self.net_config.latency + self.net_config.tick)
        return bound + self.net_config.tick

    def _setup(self, net: Network, now: int) -> None:
        # Sellers hold a single coin, so the name registration and any burn
        # share one transaction.
        for actor in self.actors:
            if actor.role == "attacker":
                continue
            outs = []
            if actor.role == "seller":
                outs.append(Output(0, actor.key.public, Name(actor.name)))
            if self.kind == "burn":
                outs.append(Output(math.ceil(self.threshold), actor.key.public,
                                   Burn(actor.key.public)))
            if outs:
                tx = self._spend_first(actor, outs, fee=0)
                if self._submit(tx) and self.kind == "burn":
                    self.burn_txs.append((tx.txid, actor.key.public))
        attacker = self.attacker
        if attacker is not None:
            self._attacker_setup(attacker)

    def _attacker_setup(self, actor: Actor) -> None:
        a = self.sc.attacker
        coins = a.coins
        t = self.threshold
        if self.kind == "burn":
            if a.strategy == "sybil" and t > 0:
                per = math.ceil(t)
                count = coins // per
                keys = [self._key(f"attacker:id{i}") for i in range(count)]
                outs = [Output(per, actor.key.public, Burn(k.public)) for k in keys]
                actor.identities = keys
            else:
                keys = [actor.key]
                outs = [Output(coins, actor.key.public, Burn(actor.key.public))]
                actor.identities = keys
            tx = self._spend_first(actor, outs, fee=0)
            if self._submit(tx):
                self.attacker_cost["burned"] += sum(o.value for o in outs)
                for k in keys:
                    self.burn_txs.append((tx.txid, k.public))
            return
        if a.strategy not in ("sybil", "burst"):
            return
        if self.kind == "utxo":
            per = max(1, math.ceil(t))
        elif self.kind == "indirect_fee":
            per = max(1, math.ceil(t))
        elif self.kind == "direct_fee":
            per = max(1, math.ceil(t * BACKING_TX_SIZE))
        elif self.kind == "coinage":
            per = max(1, coins // a.split)
        else:
            return
        count = min(coins // per, 1000)
        if count < 2:
            return
        outs = [Output(per, actor.key.public) for _ in range(count)]
        tx = self._spend_first(actor, outs, fee=0)
        if self._submit(tx):
            self.backing.setdefault(tx.txid, "split")

    def _spend_first(self, actor: Actor, outputs: list[Output], fee: int) -> Transaction | None:
        need = sum(o.value for o in outputs) + fee
        for op, entry in self._spendable(actor):
            if entry.output.value >= need:
                outs = list(outputs)
                if entry.output.value > need:
                    outs.append(Output(entry.output.value - need, actor.key.public))
                tx = Transaction((TxInput(op),), tuple(outs), BACKING_TX_SIZE)
                return sign_inputs(tx, [actor.key], self.ledger)
        return None

    def _spendable(self, actor: Actor):
        """Confirmed coins not already spent by a mempool transaction."""
        busy = {i.outpoint for e in self.ledger.mempool.values() for i in e.tx.inputs}
        return [(op, e) for op, e in self.ledger.coins_of(actor.key.public)
                if op not in busy and op not in actor.locked]

    def _submit(self, tx: Transaction | None) -> bool:
        if tx is None:
            return False
        try:
            self.ledger.submit_tx(tx)
        except LedgerError:
            return False
        return True

    # -- blocks ------------------------------------------------------------

    def _on_block(self, net: Network, now: int) -> None:
        block = self.ledger.mine_block(now)
        confirmed = {tx.txid for tx in block.txs}
        if self.burn_txs and self.kind == "burn":
            self._register_burns(confirmed)
        for txid in list(self.pending):
            pb = self.pending[txid]
            if txid in confirmed:
                del self.pending[txid]
                proof_cls = FeeTxProof if pb.kind == "indirect_fee" else CoinageTxProof
                if pb.actor.role == "attacker" and pb.kind == "coinage":
                    self.attacker_cost["coinage"] += self.ledger.confirmed[txid].coinage
                self._broadcast(pb.actor, pb.payload, pb.body, proof_cls(txid))
            elif txid not in self.ledger.mempool:
                del self.pending[txid]
        self._settle_trades(now, confirmed)

    def _register_burns(self, confirmed: set[bytes]) -> None:
        remaining = []
        for txid, identity in self.burn_txs:
            if txid not in confirmed:
                remaining.append((txid, identity))
                continue
            self.backing.setdefault(txid, "burn")
            for node in self.network.nodes.values():
                try:
                    node.policy.register(self.ledger, txid, identity)
                except BurnRegistrationError as exc:
                    self.registration_errors[exc.reason.value] += 1
        self.burn_txs = remaining

    # -- sending -----------------------------------------------------------

    def send(self, actor: Actor, payload: bytes, body: object, kind: str, now: int) -> bool:
        """Attach whatever proof the policy needs and inject the message,
        possibly later (after a proof-of-work or a confirmation)."""
        actor.sent += 1
        if self.kind == "direct_fee":
            # The message is a paying transaction; ``payload`` is ignored.
            return self._send_direct(actor, now, kind)
        self.messages.setdefault(crypto.hash(payload), MessageInfo(
            actor.role, actor.label, actor.node, now, kind=kind))
        if self.kind == "none":
            return self._broadcast(actor, payload, body, NoProof())
        if self.kind == "utxo":
            op = self._identity_outpoint(actor, body)
            if op is None:
                return self._unfunded(actor)
            if op.txid in self.ledger.confirmed and self.ledger.confirmed[op.txid].height > 0:
                self.backing.setdefault(op.txid, "identity")
            return self._broadcast(actor, payload, body, sign_for_utxo(payload, op, actor.key))
        if self.kind == "burn":
            ids = actor.identities or [actor.key]
            key = ids[(actor.sent - 1) % len(ids)]
            return self._broadcast(actor, payload, body, sign_for_identity(payload, key))
        if self.kind == "hashcash":
            if actor.role == "attacker" and actor.busy_until > now:
                # A flooder with fixed hash power sends as fast as it can
                # solve; it does not build a backlog of stale proofs.
                return False
            d = max(1, math.ceil(self._node_threshold(actor)))
            proof, hashes = solve_message(payload, d)
            ready = max(now, actor.busy_until) + math.ceil(Fraction(hashes, actor.hashrate))
            actor.busy_until = ready
            if actor.role == "attacker":
                self.attacker_cost["hashes"] += hashes
            if ready > self.end:
                return False
            self.network.at(ready, lambda net, t: self._broadcast(actor, payload, body, proof),
                            "pow-ready")
            return True
        if self.kind in ("indirect_fee", "coinage"):
            tx = self._backing_tx(actor, crypto.hash(payload))
            if tx is None or not self._submit(tx):
                return self._unfunded(actor)
            self.backing[tx.txid] = "per-message"
            if actor.role == "attacker" and self.kind == "indirect_fee":
                self.attacker_cost["fees"] += self.ledger.mempool[tx.txid].fee
            self.pending[tx.txid] = PendingBacked(actor, payload, body, self.kind, now)
            return True
        raise AssertionError(self.kind)

    def _unfunded(self, actor: Actor) -> bool:
        if actor.role == "attacker":
            self.attacker_unfunded += 1
        else:
            self.honest_unfunded += 1
        return False

    def _node_threshold(self, actor: Actor) -> Fraction:
        return self.network.nodes[actor.node].policy.threshold

    def _identity_outpoint(self, actor: Actor, body) -> Outpoint | None:
        if isinstance(body, SellOffer):
            found = self.ledger.resolve_name(body.name)
            return found[0] if found else None
        if isinstance(body, PartialTradeTx):
            return body.tx.inputs[0].outpoint
        t = self._node_threshold(actor)
        coins = [op for op, e in self.ledger.coins_of(actor.key.public)
                 if e.output.value >= t]
        if not coins:
            return None
        return coins[(actor.sent - 1) % len(coins)]

    def _backing_tx(self, actor: Actor, digest: bytes) -> Transaction | None:
        t = self._node_threshold(actor)
        when = self.ledger.next_block_time
        best = None
        for op, entry in self._spendable(actor):
            if self.kind == "indirect_fee":
                if entry.output.value >= t:
                    best = (op, entry)
                    break
            else:
                coinage = entry.output.value * (when - entry.created_at)
                if coinage >= t and (best is None or coinage > best[2]):
                    best = (op, entry, coinage)
        if best is None:
            return None
        op, entry = best[0], best[1]
        fee = math.ceil(t) if self.kind == "indirect_fee" else 0
        outs = [Output(0, actor.key.public, Burn(digest))]
        if entry.output.value > fee:
            outs.append(Output(entry.output.value - fee, actor.key.public))
        tx = Transaction((TxInput(op),), tuple(outs), BACKING_TX_SIZE)
        return sign_inputs(tx, [actor.key], self.ledger)

    def _send_direct(self, actor: Actor, now: int, kind: str) -> bool:
        rate = self._node_threshold(actor)
        fee = max(1, math.ceil(rate * BACKING_TX_SIZE))
        spendable = [(op, e) for op, e in self._spendable(actor) if e.output.value >= fee]
        if not spendable:
            return self._direct_unfunded(actor, now, kind)
        op, entry = spendable[0]
        outs = []
        if entry.output.value > fee:
            outs.append(Output(entry.output.value - fee, actor.key.public))
        tx = sign_inputs(Transaction((TxInput(op),), tuple(outs), BACKING_TX_SIZE),
                         [actor.key], self.ledger)
        if not self._submit(tx):
            return self._direct_unfunded(actor, now, kind)
        self.backing[tx.txid] = "per-message"
        if actor.role == "attacker":
            self.attacker_cost["fees"] += fee
        payload = tx.serialize()
        self.messages[crypto.hash(payload)] = MessageInfo(actor.role, actor.label,
                                                          actor.node, now, kind=kind)
        return self._broadcast(actor, payload, tx, NoProof())

    def _direct_unfunded(self, actor: Actor, now: int, kind: str) -> bool:
        # No transaction exists, so file the attempt under a synthetic key.
        key = crypto.hash(f"unfunded:{actor.label}:{actor.sent}".encode())
        self.messages[key] = MessageInfo(actor.role, actor.label, actor.node, now, kind=kind)
        return self._unfunded(actor)

    def _broadcast(self, actor: Actor, payload: bytes, body, proof) -> bool:
        msg = P2PMessage(payload, proof, body=body)
        info = self.messages[msg.digest]
        if info.broadcast_at is None:
            info.broadcast_at = self.network.now
        tag = "spam" if actor.role == "attacker" else info.kind
        self.network.broadcast(actor.node, msg, tag=tag)
        return True

    # -- honest actors -----------------------------------------------------

    def _schedule_honest(self) -> None:
        h = self.sc.honest
        span = self.end - self.start
        if h.offers_per_day > 0:
            period = 86400 // h.offers_per_day
            for actor in self.actors:
                if actor.role != "seller":
                    continue
                first = self.start + self.rng.randrange(max(1, min(period, span) // 2))
                self.network.every(first, period, self._make_offer_action(actor),
                                   f"offer:{actor.label}", until=self.end)
        interval = self.params.block_interval
        for actor in self.actors:
            if actor.role == "buyer" and self.kind != "direct_fee":
                first = self.start + interval + self.rng.randrange(max(1, span // 4))
                self.network.every(first, interval, self._make_buyer_action(actor),
                                   f"take:{actor.label}", until=self.end)
        if self.kind == "direct_fee":
            # On a currency network honest traffic is payments.
            for actor in self.actors:
                if actor.role == "seller":
                    first = self.start + self.rng.randrange(max(1, span // 2))
                    self.network.every(first, 3600, self._make_payment_action(actor),
                                       f"pay:{actor.label}", until=self.end)

    def _make_offer_action(self, actor: Actor):
        def act(net: Network, now: int) -> None:
            if self.kind == "direct_fee" or now > self.end:
                return
            found = self.ledger.resolve_name(actor.name)
            if found is None or found[1].owner != actor.key.public:
                return
            offer = exchange.make_offer(self.ledger, actor.name, self.sc.honest.price,
                                        actor.key.public, now + DEFAULT_OFFER_TTL,
                                        actor.key.secret)
            actor.offer = offer
            self.send(actor, offer.to_payload(), offer, "offer", now)
        return act

    def _make_payment_action(self, actor: Actor):
        def act(net: Network, now: int) -> None:
            if now > self.end:
                return
            actor.sent += 1
            self._send_direct(actor, now, "payment")
        return act

    def _make_buyer_action(self, actor: Actor):
        def act(net: Network, now: int) -> None:
            if actor.done or now > self.end:
                return
            node = self.network.nodes[actor.node]
            taken = {t.offer for t in self.trades.values()}
            for offer in sorted(node.active_offers(now), key=lambda o: (o.price, o.digest)):
                if offer.digest.hex() in taken or not exchange.verify_offer(self.ledger, offer, now):
                    continue
                coins = [op for op, e in self.ledger.coins_of(actor.key.public)
                         if e.output.value >= offer.price + 1]
                busy = {i.outpoint for e in self.ledger.mempool.values() for i in e.tx.inputs}
                coins = [op for op in coins if op not in busy]
                if not coins:
                    return
                trade_coin = coins[0]
                actor.locked.add(trade_coin)
                partial = exchange.build_take(self.ledger, offer, actor.key.secret,
                                              [trade_coin], now=now)
                seller = next(a for a in self.actors if a.key.public == offer.signer)
                self.trades[partial.tx.txid] = TradeRecord(offer.digest.hex(), actor.label,
                                                           seller.label, partial.tx.txid.hex())
                actor.done = True
                self.send(actor, partial.to_payload(), partial, "take", now)
                return
        return act

    def _settle_trades(self, now: int, confirmed: set[bytes]) -> None:
        for txid, record in self.trades.items():
            if record.status == "signed":
                if txid in confirmed:
                    record.status = "settled"
                    record.atomic = self._trade_applied(txid)
                elif txid not in self.ledger.mempool:
                    record.status = "dropped"
                    record.atomic = True
        for actor in self.actors:
            if actor.role != "seller" or actor.offer is None:
                continue
            partials = self.network.nodes[actor.node].takes.get(actor.offer.digest, [])
            candidates = [p for p in partials
                          if self.trades.get(p.tx.txid) and self.trades[p.tx.txid].status == "taken"]
            best = exchange.pick_best(self.ledger, actor.offer, candidates)
            if best is None:
                continue
            try:
                full = exchange.seller_verify_and_sign(self.ledger, best, actor.offer,
                                                       actor.key.secret)
            except exchange.ExchangeError:
                self.trades[best.tx.txid].status = "refused"
                continue
            if self._submit(full):
                self.trades[best.tx.txid].status = "signed"
                actor.offer = None

    def _trade_applied(self, txid: bytes) -> bool:
        tx = self.ledger.confirmed[txid].tx
        name_out = next(o for o in tx.outputs if o.name is not None)
        found = self.ledger.resolve_name(name_out.name)
        return found is not None and found[1].owner == name_out.owner

    # -- attacker ----------------------------------------------------------

    def _schedule_attacker(self) -> None:
        actor = self.attacker
        if actor is None:
            return
        a = self.sc.attacker
        span = self.end - self.start
        count = int(a.rate * span)
        if a.strategy == "burst":
            at = a.burst_at if a.burst_at is not None else self.start + span // 2
            times = [at] * count
        else:
            times = [self.start + int(Fraction(k) / a.rate) for k in range(count)]
        for k, t in enumerate(times):
            if t <= self.end:
                self.network.at(t, self._make_spam_action(actor, k), "spam")

    def _make_spam_action(self, actor: Actor, k: int):
        def act(net: Network, now: int) -> None:
            self.attacker_attempts += 1
            payload = bytes([SPAM_TAG]) + f"spam:{self.sc.seed}:{k}".encode()
            self.send(actor, payload, None, "spam", now)
        return act


def run_world(scenario: Scenario) -> World:
    world = World(scenario)
    world.run()
    return world
