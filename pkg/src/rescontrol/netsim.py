"""Deterministic discrete-event flooding network.

Every node runs its own admission policy instance against one shared chain.
A message is relayed at most once per node, to every peer but the sender,
and only if the node's policy admits it.  Each node can spend a fixed number
of bytes per tick on relaying; admitted messages that do not fit wait for
the next tick, highest policy priority first.

Events are ordered by ``(time, phase, sequence)``.  All deliveries at one
instant are handled before the node decides what to relay, so simultaneous
arrivals compete on priority rather than on arrival order.
"""

from __future__ import annotations

import heapq
import itertools
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable

import networkx as nx

from . import exchange
from .exchange import PartialTradeTx, SellOffer
from .ledger import Ledger
from .policies import AdmissionPolicy, LoadSignal, P2PMessage

log = logging.getLogger(__name__)

TOPOLOGIES = ("ring", "random", "complete")


class DisconnectedTopology(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    nodes: int = 10
    topology: str = "random"
    degree: int = 4
    latency: int = 1
    bandwidth: int | None = None  # bytes per tick per node; None = unlimited
    tick: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"topology must be one of {TOPOLOGIES}")
        if self.nodes < 1:
            raise DisconnectedTopology("need at least one node")
        if self.latency < 0 or self.tick < 1:
            raise ValueError("latency must be >= 0 and tick >= 1")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.topology == "random":
            if self.degree >= self.nodes:
                raise DisconnectedTopology(
                    f"degree {self.degree} needs more than {self.nodes} nodes")
            if self.degree < 1 or (self.degree * self.nodes) % 2:
                raise DisconnectedTopology(
                    f"no {self.degree}-regular graph on {self.nodes} nodes")


def build_topology(config: NetConfig) -> dict[int, list[int]]:
    config.validate()
    n = config.nodes
    if config.topology == "ring":
        graph = nx.cycle_graph(n) if n > 2 else nx.path_graph(n)
    elif config.topology == "complete":
        graph = nx.complete_graph(n)
    else:
        graph = nx.random_regular_graph(config.degree, n, seed=config.seed)
    if not nx.is_connected(graph):
        raise DisconnectedTopology(f"{config.topology} graph with seed {config.seed}")
    return {v: sorted(graph.neighbors(v)) for v in sorted(graph.nodes)}


class EventKind(str, Enum):
    DELIVER = "deliver"
    FLUSH = "flush"
    CONTROL = "control"
    ACTION = "action"


# Phases order same-time events: deliveries, then relay decisions, then
# controller and scenario actions.
_PHASE = {EventKind.DELIVER: 0, EventKind.FLUSH: 1, EventKind.CONTROL: 2,
          EventKind.ACTION: 3}


@dataclass(order=True)
class Event:
    at: int
    phase: int
    seq: int
    kind: EventKind = field(compare=False)
    node: int | None = field(compare=False, default=None)
    msg: P2PMessage | None = field(compare=False, default=None)
    sender: int | None = field(compare=False, default=None)
    action: Callable | None = field(compare=False, default=None)
    label: str = field(compare=False, default="")
    data: tuple = field(compare=False, default=())


@dataclass(frozen=True)
class TraceRecord:
    time: int
    node: int | None
    event: str
    digest: str = ""
    decision: str = ""
    reason: str = ""
    peer: int | None = None
    tag: str = ""

    def to_json(self) -> str:
        return json.dumps({"time": self.time, "node": self.node, "event": self.event,
                           "digest": self.digest, "decision": self.decision,
                           "reason": self.reason, "peer": self.peer, "tag": self.tag},
                          sort_keys=True, separators=(",", ":"))


@dataclass
class _Pending:
    msg: P2PMessage
    sender: int | None
    arrived: int
    seq: int


class Node:
    def __init__(self, node_id: int, peers: list[int], policy: AdmissionPolicy,
                 bandwidth: int | None):
        self.id = node_id
        self.peers = peers
        self.policy = policy
        self.bandwidth = bandwidth
        self.seen: set[bytes] = set()
        self.offer_book: dict[bytes, SellOffer] = {}
        self.takes: dict[bytes, list[PartialTradeTx]] = {}
        self.pending: list[_Pending] = []
        self.first_seen: dict[bytes, int] = {}
        self.window_admitted = 0
        self.threshold_trajectory: list[tuple[int, str]] = []
        self._tick = -1
        self._spent = 0

    def budget_left(self, tick: int) -> float:
        if self.bandwidth is None:
            return float("inf")
        if tick != self._tick:
            self._tick, self._spent = tick, 0
        return self.bandwidth - self._spent

    def charge(self, tick: int, size: int) -> None:
        self.budget_left(tick)
        self._spent += size

    def fits(self, tick: int, size: int) -> bool:
        left = self.budget_left(tick)
        # A message larger than the whole budget may use a fresh tick alone.
        return size <= left or (self.bandwidth is not None and self._spent == 0)

    def active_offers(self, now: int) -> list[SellOffer]:
        return [o for o in self.offer_book.values() if o.expiry > now]


def default_validator(node: Node, msg: P2PMessage, view: Ledger, now: int) -> str | None:
    """Application-level checks run before the resource policy."""
    body = msg.body
    if isinstance(body, SellOffer):
        check = exchange.verify_offer(view, body, now)
        return None if check else check.status.value
    if isinstance(body, PartialTradeTx):
        for txin in body.tx.inputs:
            if txin.sig is None:
                continue
            if not view.registry.verify(body.buyer, body.tx.sighash, txin.sig):
                return "BadBuyerSignature"
    return None


class Network:
    """A flood-gossip network over one shared :class:`Ledger`.

    ``policy_factory`` is called once per node id so that every node owns an
    independent policy state.
    """

    def __init__(self, config: NetConfig, ledger: Ledger,
                 policy_factory: Callable[[int], AdmissionPolicy],
                 validator=default_validator):
        self.config = config
        self.ledger = ledger
        self.adjacency = build_topology(config)
        self.nodes = {i: Node(i, peers, policy_factory(i), config.bandwidth)
                      for i, peers in self.adjacency.items()}
        self.validator = validator
        self.now = 0
        self.trace: list[TraceRecord] = []
        self.deliveries = 0
        self._queue: list[Event] = []
        self._seq = itertools.count()
        self._flush_at: dict[int, set[int]] = {}
        self._tags: dict[bytes, str] = {}

    # -- scheduling ---------------------------------------------------------

    def _push(self, at: int, kind: EventKind, **kw) -> None:
        heapq.heappush(self._queue, Event(at, _PHASE[kind], next(self._seq), kind, **kw))

    def at(self, when: int, action: Callable[["Network", int], None], label: str = "") -> None:
        """Run ``action(network, when)`` at simulated time ``when``."""
        self._push(when, EventKind.ACTION, action=action, label=label)

    def every(self, start: int, period: int, action, label: str = "",
              until: int | None = None) -> None:
        def step(net, now):
            action(net, now)
            if until is None or now + period <= until:
                net.at(now + period, step, label)
        self.at(start, step, label)

    def enable_controller(self, target: int, window: int, start: int = 0) -> None:
        """Every ``window`` seconds each node feeds its admitted count to its
        policy's threshold controller."""
        for node in self.nodes.values():
            node.threshold_trajectory.append((start, str(node.policy.threshold)))
            self._push(start + window, EventKind.CONTROL, node=node.id,
                       data=(target, window))

    def broadcast(self, origin: int, msg: P2PMessage, at: int | None = None,
                  tag: str = "") -> None:
        """Inject ``msg`` at ``origin``.  The origin applies its own policy
        first; nothing leaves the node if it rejects."""
        if origin not in self.nodes:
            raise KeyError(f"no node {origin}")
        if tag:
            self._tags.setdefault(msg.digest, tag)
        when = self.now if at is None else at
        self._push(when, EventKind.DELIVER, node=origin, msg=msg, sender=None)

    # -- processing --------------------------------------------------------

    def run(self, until: int) -> list[TraceRecord]:
        start = len(self.trace)
        while self._queue and self._queue[0].at <= until:
            ev = heapq.heappop(self._queue)
            self.now = ev.at
            if ev.kind is EventKind.DELIVER:
                self._on_deliver(ev)
            elif ev.kind is EventKind.FLUSH:
                self._flush(self.nodes[ev.node])
            elif ev.kind is EventKind.CONTROL:
                self._control(ev)
            else:
                self._record(None, "action", tag=ev.label)
                ev.action(self, ev.at)
        self.now = max(self.now, until)
        return self.trace[start:]

    def _record(self, node: int | None, event: str, msg: P2PMessage | None = None,
                decision: str = "", reason: str = "", peer: int | None = None,
                tag: str = "") -> None:
        digest = msg.digest.hex() if msg is not None else ""
        if msg is not None and not tag:
            tag = self._tags.get(msg.digest, "")
        self.trace.append(TraceRecord(self.now, node, event, digest, decision,
                                      reason, peer, tag))

    def _on_deliver(self, ev: Event) -> None:
        node = self.nodes[ev.node]
        msg = ev.msg
        if ev.sender is not None:
            self.deliveries += 1
        if msg.digest in node.seen or any(p.msg.digest == msg.digest for p in node.pending):
            self._record(node.id, "drop", msg, "duplicate", "Duplicate", ev.sender)
            return
        node.pending.append(_Pending(msg, ev.sender, self.now, ev.seq))
        self._schedule_flush(node.id, self.now)

    def _schedule_flush(self, node_id: int, when: int) -> None:
        slot = self._flush_at.setdefault(when, set())
        if node_id not in slot:
            slot.add(node_id)
            self._push(when, EventKind.FLUSH, node=node_id)

    def _flush(self, node: Node) -> None:
        self._flush_at.get(self.now, set()).discard(node.id)
        if not self._flush_at.get(self.now):
            self._flush_at.pop(self.now, None)
        tick = self.now // self.config.tick
        ranked = []
        for p in node.pending:
            admitted, reason, priority = self._probe(node, p.msg)
            if not admitted:
                self._record(node.id, "drop", p.msg, "reject", reason, p.sender)
                continue
            ranked.append((-priority, p.seq, p))
        ranked.sort(key=lambda r: (r[0], r[1]))
        waiting = []
        for _, _, p in ranked:
            if not node.fits(tick, p.msg.declared_size):
                waiting.append(p)
                continue
            # Quota or claims may have been used by a message relayed just now.
            admitted, reason, _ = self._probe(node, p.msg)
            if not admitted:
                self._record(node.id, "drop", p.msg, "reject", reason, p.sender)
                continue
            self._relay(node, p, tick)
        node.pending = waiting
        if waiting:
            for p in waiting:
                self._record(node.id, "queue", p.msg, "wait", "OverBudget", p.sender)
            self._schedule_flush(node.id, (tick + 1) * self.config.tick)

    def _probe(self, node: Node, msg: P2PMessage):
        """(admitted, reason, priority) without side effects."""
        if self.validator is not None:
            bad = self.validator(node, msg, self.ledger, self.now)
            if bad:
                return False, bad, None
        decision = node.policy.check(msg, self.ledger, self.now)
        if not decision.admitted:
            return False, decision.reason.value, None
        return True, "", decision.priority

    def _relay(self, node: Node, p: _Pending, tick: int) -> None:
        msg = p.msg
        node.seen.add(msg.digest)
        node.first_seen[msg.digest] = self.now
        node.policy.commit(msg, self.ledger, self.now)
        node.window_admitted += 1
        node.charge(tick, msg.declared_size)
        body = msg.body
        if isinstance(body, SellOffer):
            node.offer_book[body.digest] = body
        elif isinstance(body, PartialTradeTx):
            node.takes.setdefault(body.offer_digest, []).append(body)
        self._record(node.id, "relay", msg, "admit", "", p.sender)
        for peer in node.peers:
            if peer != p.sender:
                self._push(self.now + self.config.latency, EventKind.DELIVER,
                           node=peer, msg=msg, sender=node.id)

    def _control(self, ev: Event) -> None:
        node = self.nodes[ev.node]
        target, window = ev.data
        new = node.policy.raise_threshold(LoadSignal(node.window_admitted, target))
        node.threshold_trajectory.append((self.now, str(new)))
        self._record(node.id, "control", decision=str(new),
                     reason=f"admitted={node.window_admitted}")
        node.window_admitted = 0
        self._push(self.now + window, EventKind.CONTROL, node=node.id, data=ev.data)

    # -- analysis -----------------------------------------------------------

    def diameter(self) -> int:
        graph = nx.Graph()
        graph.add_nodes_from(self.adjacency)
        graph.add_edges_from((a, b) for a, peers in self.adjacency.items() for b in peers)
        return nx.diameter(graph)

    def degree_sum(self) -> int:
        return sum(len(p) for p in self.adjacency.values())

    def trace_lines(self) -> Iterable[str]:
        return (r.to_json() for r in self.trace)

    def write_trace(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for line in self.trace_lines():
                fh.write(line + "\n")
