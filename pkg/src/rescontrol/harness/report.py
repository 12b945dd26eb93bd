"""Scenario reports, policy comparison and rendering.

Every count in a report is recomputed from the raw trace, never taken from
counters kept during the run, so a report can always be checked against its
trace.  Rationals stay :class:`~fractions.Fraction` until rendering, where
they become ``"p/q"`` strings.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import math
from collections import Counter, defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path

from .scenario import Scenario
from .world import World, run_world


class ChainUsage(str, Enum):
    NONE = "None"
    ONLY_SETUP = "Only-Setup"
    PER_MESSAGE = "Per-message"
    ADDITIONAL = "Additional"


class ReportIOError(OSError):
    exit_code = 4


@dataclass
class ChainBytes:
    setup: int = 0
    messaging: int = 0
    backing_txs: int = 0
    usage: ChainUsage = ChainUsage.NONE


@dataclass
class NodeCounts:
    node: int
    admitted: int = 0
    rejected: int = 0
    duplicates: int = 0
    queued: int = 0
    spam_admitted: int = 0
    spam_max_per_window: int = 0


@dataclass
class ScenarioReport:
    scenario: str
    policy: str
    seed: int
    threshold: Fraction
    decisions: int = 0
    admitted: int = 0
    rejected: int = 0
    rejected_by_reason: dict[str, int] = field(default_factory=dict)
    duplicates: int = 0
    legit_wanted: int = 0
    legit_sent: int = 0
    legit_unfunded: int = 0
    legit_delivered: int = 0
    legit_delivery_ratio: Fraction = Fraction(0)
    latency_p50: int = 0
    latency_p90: int = 0
    latency_max: int = 0
    latency_bound: int = 0
    proof_wait_mean: Fraction = Fraction(0)
    proof_wait_max: int = 0
    spam_attempted: int = 0
    spam_injected: int = 0
    spam_admitted: int = 0
    spam_delivery_ratio: Fraction = Fraction(0)
    spam_max_per_node_window: int = 0
    attacker_fees: int = 0
    attacker_burned: int = 0
    attacker_coinage: int = 0
    attacker_hashes: int = 0
    attacker_cost_per_spam: Fraction = Fraction(0)
    chain: ChainBytes = field(default_factory=ChainBytes)
    trades: dict[str, int] = field(default_factory=dict)
    threshold_trajectory: list[tuple[int, str]] = field(default_factory=list)
    per_node: list[NodeCounts] = field(default_factory=list)
    trace_records: int = 0
    trace_sha256: str = ""

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(value):
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, Fraction):
        return str(value)
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def nearest_rank(values: list[int], q: Fraction) -> int:
    """Nearest-rank percentile; 0 for an empty list."""
    if not values:
        return 0
    ordered = sorted(values)
    rank = max(1, math.ceil(q * len(ordered)))
    return ordered[rank - 1]


# -- building --------------------------------------------------------------

def build_report(world: World) -> ScenarioReport:
    sc = world.sc
    net = world.network
    report = ScenarioReport(sc.name, sc.policy.kind, sc.seed, world.threshold)
    window = sc.policy.window

    nodes = {i: NodeCounts(i) for i in sorted(net.nodes)}
    reasons: Counter = Counter()
    spam_windows: dict[int, Counter] = defaultdict(Counter)
    for rec in net.trace:
        if rec.node is None or rec.event in ("action", "control"):
            continue
        counts = nodes[rec.node]
        if rec.event == "relay":
            counts.admitted += 1
            if rec.tag == "spam":
                counts.spam_admitted += 1
                spam_windows[rec.node][(rec.time - world.start) // window] += 1
        elif rec.event == "drop" and rec.decision == "reject":
            counts.rejected += 1
            reasons[rec.reason] += 1
        elif rec.event == "drop" and rec.decision == "duplicate":
            counts.duplicates += 1
        elif rec.event == "queue":
            counts.queued += 1
    for node_id, per_window in spam_windows.items():
        nodes[node_id].spam_max_per_window = max(per_window.values())
    report.per_node = list(nodes.values())
    report.admitted = sum(n.admitted for n in nodes.values())
    report.rejected = sum(n.rejected for n in nodes.values())
    report.decisions = report.admitted + report.rejected
    report.duplicates = sum(n.duplicates for n in nodes.values())
    report.rejected_by_reason = dict(sorted(reasons.items()))
    report.spam_admitted = sum(n.spam_admitted for n in nodes.values())
    report.spam_max_per_node_window = max((n.spam_max_per_window for n in nodes.values()),
                                          default=0)

    _delivery(world, report)
    _attacker(world, report)
    report.chain = measure_chain_bytes(world)
    report.trades = dict(sorted(Counter(t.status for t in world.trades.values()).items()))
    node0 = net.nodes[min(net.nodes)]
    report.threshold_trajectory = list(node0.threshold_trajectory) or [(0, str(world.threshold))]

    lines = [r.to_json() for r in net.trace]
    report.trace_records = len(lines)
    report.trace_sha256 = hashlib.sha256("\n".join(lines).encode()).hexdigest()
    return report


def _delivery(world: World, report: ScenarioReport) -> None:
    net = world.network
    all_nodes = list(net.nodes.values())
    latencies, waits = [], []
    legit_sent = legit_delivered = 0
    spam_reach = []
    report.legit_wanted = sum(1 for info in world.messages.values() if info.role != "attacker")
    for digest, info in world.messages.items():
        if info.broadcast_at is None:
            continue
        reached = [n.first_seen[digest] for n in all_nodes if digest in n.first_seen]
        if info.role == "attacker":
            spam_reach.append(Fraction(len(reached), len(all_nodes)))
            continue
        legit_sent += 1
        waits.append(info.broadcast_at - info.wanted_at)
        if len(reached) == len(all_nodes):
            legit_delivered += 1
            latencies.append(max(reached) - info.broadcast_at)
    report.legit_sent = legit_sent
    report.legit_unfunded = world.honest_unfunded
    report.legit_delivered = legit_delivered
    report.legit_delivery_ratio = (Fraction(legit_delivered, legit_sent)
                                   if legit_sent else Fraction(1))
    report.latency_p50 = nearest_rank(latencies, Fraction(1, 2))
    report.latency_p90 = nearest_rank(latencies, Fraction(9, 10))
    report.latency_max = max(latencies, default=0)
    report.latency_bound = latency_bound(world)
    report.proof_wait_mean = Fraction(sum(waits), len(waits)) if waits else Fraction(0)
    report.proof_wait_max = max(waits, default=0)
    report.spam_injected = len(spam_reach)
    report.spam_delivery_ratio = (sum(spam_reach, Fraction(0)) / len(spam_reach)
                                  if spam_reach else Fraction(0))


def latency_bound(world: World) -> int:
    """Worst-case flood time: one hop latency per edge on the longest
    shortest path, plus a queue allowance.

    Without a bandwidth cap nothing ever waits, so the allowance is zero.
    With a cap it is one tick at the origin and at every hop, which holds
    as long as honest messages are not outranked for a whole tick.
    """
    cfg = world.net_config
    d = world.network.diameter()
    queue = 0 if cfg.bandwidth is None else (d + 1) * cfg.tick
    return d * cfg.latency + queue


def _attacker(world: World, report: ScenarioReport) -> None:
    cost = world.attacker_cost
    report.spam_attempted = world.attacker_attempts
    report.attacker_fees = cost["fees"]
    report.attacker_burned = cost["burned"]
    report.attacker_coinage = cost["coinage"]
    report.attacker_hashes = cost["hashes"]
    total = cost["fees"] + cost["burned"]
    report.attacker_cost_per_spam = (Fraction(total, report.spam_injected)
                                     if report.spam_injected else Fraction(0))


def measure_chain_bytes(world: World) -> ChainBytes:
    """Bytes of confirmed transactions that exist only because of the policy,
    split at the moment messaging starts."""
    out = ChainBytes()
    messages_are_txs = world.kind == "direct_fee"
    for txid in world.backing:
        conf = world.ledger.confirmed.get(txid)
        if conf is None or conf.height == 0:
            continue
        out.backing_txs += 1
        if conf.timestamp < world.start:
            out.setup += conf.tx.size
        else:
            out.messaging += conf.tx.size
    if out.messaging:
        out.usage = ChainUsage.PER_MESSAGE if messages_are_txs else ChainUsage.ADDITIONAL
    elif out.setup:
        out.usage = ChainUsage.ONLY_SETUP
    return out


def run_scenario(scenario: Scenario) -> ScenarioReport:
    return build_report(run_world(scenario.validate()))


def run_with_trace(scenario: Scenario) -> tuple[ScenarioReport, list[str]]:
    world = run_world(scenario.validate())
    return build_report(world), list(world.network.trace_lines())


# -- comparison ------------------------------------------------------------

MATRIX_COLUMNS = ("policy", "threshold", "chain_usage", "setup_bytes", "messaging_bytes",
                  "spam_admitted", "spam_max_per_node_window", "spam_delivery",
                  "legit_delivery", "latency_p90", "proof_wait_mean", "attacker_cost")


@dataclass
class ComparisonMatrix:
    template: str
    rows: list[dict]
    reports: list[ScenarioReport]

    def to_dict(self) -> dict:
        return {"template": self.template, "columns": list(MATRIX_COLUMNS),
                "rows": _plain(self.rows),
                "reports": [r.to_dict() for r in self.reports]}

    def row(self, policy: str) -> dict:
        return next(r for r in self.rows if r["policy"] == policy)


def matrix_row(report: ScenarioReport) -> dict:
    cost = report.attacker_fees + report.attacker_burned
    return {
        "policy": report.policy,
        "threshold": report.threshold,
        "chain_usage": report.chain.usage,
        "setup_bytes": report.chain.setup,
        "messaging_bytes": report.chain.messaging,
        "spam_admitted": report.spam_admitted,
        "spam_max_per_node_window": report.spam_max_per_node_window,
        "spam_delivery": report.spam_delivery_ratio,
        "legit_delivery": report.legit_delivery_ratio,
        "latency_p90": report.latency_p90,
        "proof_wait_mean": report.proof_wait_mean,
        "attacker_cost": (f"{cost} coins + {report.attacker_coinage} coin-s"
                          f" + {report.attacker_hashes} hashes"),
    }


def compare_policies(template: Scenario, policies: list[str],
                     workers: int = 1) -> ComparisonMatrix:
    """Run ``template`` once per policy; rows keep the order of ``policies``.

    With ``workers > 1`` the runs happen in separate processes.  Each run
    owns its whole world, so the result does not depend on ``workers``.
    """
    scenarios = [template.with_policy(kind).validate() for kind in policies]
    if workers > 1 and len(scenarios) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(run_scenario, scenarios))
    else:
        reports = [run_scenario(s) for s in scenarios]
    return ComparisonMatrix(template.name, [matrix_row(r) for r in reports], reports)


# -- rendering ---------------------------------------------------------------

FORMATS = ("json", "text")


def render(obj, fmt: str = "json") -> str:
    if fmt not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}")
    if fmt == "json":
        return json.dumps(obj.to_dict(), indent=2) + "\n"
    if isinstance(obj, ComparisonMatrix):
        return _matrix_text(obj)
    return _report_text(obj)


def _report_text(report: ScenarioReport) -> str:
    buf = io.StringIO()
    data = report.to_dict()
    nested = ("rejected_by_reason", "chain", "trades", "threshold_trajectory", "per_node")
    width = max(len(k) for k in data)
    for key, value in data.items():
        if key not in nested:
            buf.write(f"{key:<{width}}  {value}\n")
    for key in ("rejected_by_reason", "chain", "trades"):
        buf.write(f"\n[{key}]\n")
        for k, v in data[key].items():
            buf.write(f"  {k:<{width - 2}}  {v}\n")
    buf.write("\n[threshold_trajectory]\n")
    for t, value in data["threshold_trajectory"]:
        buf.write(f"  {t:>8}  {value}\n")
    buf.write("\n[per_node]\n")
    cols = list(data["per_node"][0]) if data["per_node"] else []
    buf.write(_table(cols, [[n[c] for c in cols] for n in data["per_node"]]))
    return buf.getvalue()


def _matrix_text(matrix: ComparisonMatrix) -> str:
    rows = _plain(matrix.rows)
    return (f"template: {matrix.template}\n"
            + _table(list(MATRIX_COLUMNS), [[r[c] for c in MATRIX_COLUMNS] for r in rows]))


def _table(header: list[str], rows: list[list]) -> str:
    cells = [header] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def emit_report(obj, path: str | Path, fmt: str = "json") -> Path:
    """Write a report or matrix to ``path``.  Same input, same bytes."""
    text = render(obj, fmt)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise ReportIOError(f"cannot write {path}: {exc}") from exc
    return path
