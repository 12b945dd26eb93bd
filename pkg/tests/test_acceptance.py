"""End-to-end acceptance suite.

Each test is tagged with the criterion it covers; the terminal summary
prints one PASS/FAIL line per criterion.
"""

import json
import random
import time
from collections import defaultdict
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from helpers import (
    check_atomic,
    exhaustive_fee_oracle,
    fee_case,
    genesis_outpoint,
    greedy_exclusion_oracle,
    make_ledger,
    run_trade_case,
    spend,
)
from rescontrol import crypto
from rescontrol.harness.experiments import coinage_wait_experiment
from rescontrol.harness.report import ChainUsage, compare_policies, render, run_with_trace
from rescontrol.harness.scenario import scenario_from_dict
from rescontrol.ledger import Burn, Output, Outpoint
from rescontrol.netsim import NetConfig, Network
from rescontrol.policies import (
    CoinagePolicy,
    CoinageTxProof,
    FeeTxProof,
    IndirectFeePolicy,
    P2PMessage,
    hashcash_check,
    hashcash_solve,
)

HOUR = 3600


def criterion(number, title):
    return pytest.mark.criterion(number, title)


# -- shared generators ----------------------------------------------------------

def split_value(rng, value, parts):
    if parts <= 1 or value == 0:
        return [value]
    cuts = sorted(rng.randint(0, value) for _ in range(parts - 1))
    return [b - a for a, b in zip([0] + cuts, cuts + [value])]


def random_history(rng, supply, *, blocks, max_outputs, on_block):
    """Random valid transaction sequence: payments, splits, fees and burns
    between a handful of keys, mined at random block times."""
    n_keys = rng.randint(1, 6)
    amounts = split_value(rng, supply, n_keys)
    ledger, keys = make_ledger(amounts, capacity=rng.randint(1, 5),
                               block_interval=rng.randint(1, 20),
                               label=f"h{rng.random()}")
    by_owner = {k.public: k for k in keys}
    for _ in range(blocks):
        busy = {i.outpoint for e in ledger.mempool.values() for i in e.tx.inputs}
        coins = [(op, e) for op, e in ledger.utxos.items()
                 if e.output.owner in by_owner and op not in busy]
        for _ in range(rng.randint(0, 4)):
            if not coins:
                break
            op, entry = coins.pop(rng.randrange(len(coins)))
            key = by_owner[entry.output.owner]
            value = entry.output.value
            fee = rng.randint(0, min(value, 3))
            burn = rng.randint(0, value - fee) if rng.random() < 0.2 else 0
            pieces = split_value(rng, value - fee - burn, rng.randint(1, max_outputs))
            outs = [Output(v, rng.choice(keys).public) for v in pieces]
            if burn:
                outs.append(Output(burn, key.public, Burn(crypto.hash(op.serialize()))))
            ledger.submit_tx(spend(ledger, key, [op], outs, size=rng.randint(100, 400)))
        ledger.mine_block(ledger.next_block_time + rng.randint(0, 30))
        on_block(ledger)
    return ledger


def replayed_unspent_value(ledger):
    """Independent recount: replay every block and sum what is left unspent."""
    outputs, spent = {}, set()
    for block in ledger.blocks:
        txs = list(block.txs) + ([block.coinbase] if block.coinbase else [])
        for tx in txs:
            spent.update(i.outpoint for i in tx.inputs)
            for k, out in enumerate(tx.outputs):
                if not out.is_burn:
                    outputs[Outpoint(tx.txid, k)] = out.value
    return sum(v for op, v in outputs.items() if op not in spent)


# -- 1 --------------------------------------------------------------------------

@criterion(1, "Hashcash round-trip, attempt statistics, one hash per check")
def test_hashcash_correctness_and_statistics(monkeypatch, record_property):
    started = time.perf_counter()
    rng = random.Random(1)
    for d in (1, 2, 16, 256):
        for _ in range(1000):
            payload = rng.randbytes(rng.randint(1, 64))
            n = hashcash_solve(payload, d)
            assert hashcash_check(P2PMessage(payload), d, n, d).admitted

    trials = 10_000
    attempts = [hashcash_solve(rng.randbytes(16), 16) + 1 for _ in range(trials)]
    mean = sum(attempts) / trials
    assert abs(mean - 16) <= 0.15 * 16

    calls = []
    real = crypto.hash
    monkeypatch.setattr(crypto, "hash", lambda data: calls.append(1) or real(data))
    checks = 0
    for d in (1, 2, 16, 256, 2 ** 40):
        for n in (0, 1, 12345):
            hashcash_check(P2PMessage(b"probe"), d, n, 1)
            checks += 1
    assert len(calls) == checks
    elapsed = time.perf_counter() - started
    assert elapsed < 30
    record_property("detail", f"mean attempts {mean:.2f} at d=16, "
                              f"{len(calls)}/{checks} hashes, {elapsed:.1f}s")


# -- 2 --------------------------------------------------------------------------

@criterion(2, "Coinage growth over quiet windows is exactly (sum UTXO) * dt <= M * dt")
def test_coinage_quiet_window_bound(record_property):
    rng = random.Random(2)
    windows = 0

    def check(ledger):
        nonlocal windows
        total = replayed_unspent_value(ledger)
        assert total == ledger.total_utxo_value()
        t1 = ledger.tip_time + rng.randint(0, 50)
        t2 = t1 + rng.randint(0, 500)
        growth = ledger.utxo_coinage(t2) - ledger.utxo_coinage(t1)
        assert growth == total * (t2 - t1)
        assert growth <= ledger.params.supply * (t2 - t1)
        windows += 1

    for _ in range(1000):
        random_history(rng, rng.randint(1, 5000), blocks=rng.randint(1, 6), max_outputs=5,
                       on_block=check)
    record_property("detail", f"1000 histories, {windows} quiet windows")


# -- 3 --------------------------------------------------------------------------

@criterion(3, "Mean coinage admission wait within 30% of M/(m*C) = 100 s")
def test_coinage_wait_time(record_property):
    mean, results = coinage_wait_experiment(runs=100, seed=0)
    assert len(results) == 100 and all(r.waits for r in results)
    record_property("detail", f"mean wait {float(mean):.1f} s over 100 runs")
    assert Fraction(70) <= mean <= Fraction(130)


# -- 4 --------------------------------------------------------------------------

BOUND_MS = (1, 10, 100)


def check_scarcity(ledger):
    supply = ledger.params.supply
    for m in BOUND_MS:
        assert ledger.count_utxos_at_least(m) <= supply // m


@criterion(4, "At most floor(M/m) outputs of value >= m")
@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2 ** 32))
def test_utxo_scarcity(seed):
    rng = random.Random(seed)
    random_history(rng, 1000, blocks=rng.randint(1, 25), max_outputs=40,
                   on_block=check_scarcity)


def test_utxo_scarcity_is_tight():
    ledger, (a,) = make_ledger([1000], capacity=10)
    op = genesis_outpoint(ledger, 0)
    ledger.submit_tx(spend(ledger, a, [op], [Output(1, crypto.hash(i.to_bytes(2, "big")))
                                           for i in range(1000)]))
    ledger.mine_block()
    assert ledger.count_utxos_at_least(1) == 1000
    check_scarcity(ledger)


# -- 5 --------------------------------------------------------------------------

@criterion(5, "Block selection matches the exhaustive and greedy-exclusion oracles")
def test_fee_market_oracle(record_property):
    rng = random.Random(5)
    mismatches = 0
    cases = 10_000
    for i in range(cases):
        conflicts = i % 2 == 1
        uniform = (i // 2) % 2 == 0
        ledger, entries, capacity = fee_case(rng, conflicts=conflicts, uniform_size=uniform)
        if conflicts:
            expected = greedy_exclusion_oracle(entries, capacity)
        else:
            expected = exhaustive_fee_oracle(entries, capacity, uniform_size=uniform)
        got = {tx.txid for tx in ledger.mine_block().txs}
        mismatches += got != expected
    record_property("detail", f"{mismatches} mismatches over {cases} cases")
    assert mismatches == 0


# -- 6 --------------------------------------------------------------------------

@criterion(6, "Trades settle all-or-nothing under conflicting spends")
def test_trade_atomicity(record_property):
    rng = random.Random(6)
    outcomes = defaultdict(int)
    for _ in range(1600):
        before, after, full, seller, buyer = run_trade_case(rng)
        check_atomic(before, after, full, seller, buyer)
        if full is None:
            outcomes["refused"] += 1
        else:
            outcomes["settled" if full.txid in after.confirmed else "failed"] += 1
    assert outcomes["settled"] + outcomes["failed"] >= 1000
    assert outcomes["settled"] > 100 and outcomes["failed"] > 100
    record_property("detail", ", ".join(f"{k} {v}" for k, v in sorted(outcomes.items())))


# -- 7 --------------------------------------------------------------------------

def max_sliding(times, window):
    times = sorted(times)
    best, lo = 0, 0
    for hi, t in enumerate(times):
        while times[lo] <= t - window:
            lo += 1
        best = max(best, hi - lo + 1)
    return best


@criterion(7, "UTXO quota caps spam at 10/hour/node; honest delivery 1.0 within bound")
def test_spam_suppression(record_property):
    details = []
    for strategy in ("flood", "sybil"):
        sc = scenario_from_dict({
            "duration": 3 * HOUR,
            "policy": {"kind": "utxo", "threshold": 1, "grants": 1, "window": HOUR},
            "honest": {"offers_per_day": 1},
            "attacker": {"coins": 10, "rate": "1", "strategy": strategy},
        })
        report, lines = run_with_trace(sc)
        per_node = defaultdict(list)
        for line in lines:
            rec = json.loads(line)
            if rec["event"] == "relay" and rec["tag"] == "spam":
                per_node[rec["node"]].append(rec["time"])
        worst = max((max_sliding(ts, HOUR) for ts in per_node.values()), default=0)
        assert report.spam_attempted > 1000
        assert worst <= 10
        assert report.legit_sent > 0 and report.legit_delivery_ratio == 1
        assert report.latency_max <= report.latency_bound
        details.append(f"{strategy}: worst {worst}/h, latency {report.latency_max}"
                       f"<={report.latency_bound}")
    record_property("detail", "; ".join(details))


# -- 8 --------------------------------------------------------------------------

def replay_fixture(rng, label):
    ledger, keys = make_ledger([50] * 6, block_interval=1, label=label)
    commitments = {}
    for i, key in enumerate(keys):
        payloads = [f"{label}:{i}:{j}".encode() for j in range(rng.randint(1, 3))]
        fee = rng.randint(1, 5)
        outs = [Output(0, key.public, Burn(crypto.hash(p))) for p in payloads]
        outs.append(Output(50 - fee, key.public))
        tx = spend(ledger, key, [genesis_outpoint(ledger, i)], outs)
        ledger.submit_tx(tx)
        commitments[tx.txid] = payloads
    ledger.mine_block(rng.randint(10, 100))
    return ledger, commitments


PROOFS = {"indirect_fee": (IndirectFeePolicy, FeeTxProof),
          "coinage": (CoinagePolicy, CoinageTxProof)}


@criterion(8, "No fee or coinage payment is claimed twice")
def test_claim_uniqueness(record_property):
    rng = random.Random(8)
    attempts = accepted_total = 0
    for kind, (policy_cls, proof_cls) in PROOFS.items():
        for round_ in range(50):
            ledger, commitments = replay_fixture(rng, f"{kind}{round_}")
            txids = list(commitments) + [crypto.hash(b"ghost")]
            payloads = [p for ps in commitments.values() for p in ps] + [b"stranger"]
            policy = policy_cls(threshold=1)
            claimed = defaultdict(list)
            for _ in range(300):
                payload, txid = rng.choice(payloads), rng.choice(txids)
                msg = P2PMessage(payload, proof_cls(txid),
                                 declared_size=rng.randint(1, 500))
                attempts += 1
                if policy.admit(msg, ledger, 200):
                    claimed[txid].append(payload)
            assert all(len(v) == 1 for v in claimed.values())
            for txid, (payload,) in claimed.items():
                assert payload in commitments[txid]
            accepted_total += len(claimed)

        # Over the network: every node claims each payment at most once.
        ledger, commitments = replay_fixture(rng, f"{kind}-net")
        network = Network(NetConfig(nodes=6, topology="complete"), ledger,
                          lambda i: policy_cls(threshold=1))
        for txid, payloads in commitments.items():
            for _ in range(8):
                p = rng.choice(payloads)
                network.broadcast(rng.randrange(6), P2PMessage(p, proof_cls(txid)),
                                  at=rng.randint(200, 260))
        network.run(400)
        digest_tx = {crypto.hash(p).hex(): t for t, ps in commitments.items() for p in ps}
        per_node = defaultdict(set)
        for rec in network.trace:
            if rec.event == "relay":
                per_node[(rec.node, digest_tx[rec.digest])].add(rec.digest)
        assert all(len(v) == 1 for v in per_node.values())
        assert len(per_node) == 6 * len(commitments)
    record_property("detail", f"{attempts} replay attempts, {accepted_total} first claims, "
                              f"0 double claims")


# -- 9 --------------------------------------------------------------------------

EXPECTED_USAGE = {
    "hashcash": ChainUsage.NONE,
    "direct_fee": ChainUsage.PER_MESSAGE,
    "indirect_fee": ChainUsage.ADDITIONAL,
    "coinage": ChainUsage.ADDITIONAL,
    "burn": ChainUsage.ONLY_SETUP,
    "utxo": ChainUsage.ONLY_SETUP,
}


@criterion(9, "Blockchain usage class per policy, derived from measured chain bytes")
def test_comparison_matrix(record_property):
    template = scenario_from_dict({
        "name": "table",
        "duration": 2 * HOUR,
        "net": {"nodes": 8, "degree": 3},
        "attacker": {"coins": 10, "rate": "1/10", "strategy": "sybil"},
    })
    matrix = compare_policies(template, list(EXPECTED_USAGE))
    for row in matrix.rows:
        setup, messaging = row["setup_bytes"], row["messaging_bytes"]
        if messaging:
            derived = (ChainUsage.PER_MESSAGE if row["policy"] == "direct_fee"
                       else ChainUsage.ADDITIONAL)
        else:
            derived = ChainUsage.ONLY_SETUP if setup else ChainUsage.NONE
        assert row["chain_usage"] is derived
        assert row["chain_usage"] is EXPECTED_USAGE[row["policy"]], row
        assert row["legit_delivery"] == 1
    record_property("detail", ", ".join(f"{r['policy']}={r['chain_usage'].value}"
                                        for r in matrix.rows))


# -- 10 -------------------------------------------------------------------------

@criterion(10, "Same seed gives a byte-identical trace and report")
def test_determinism(record_property):
    scenarios = [
        {"policy": "coinage", "duration": HOUR,
         "net": {"nodes": 8, "degree": 3, "bandwidth": 400},
         "attacker": {"coins": 10, "strategy": "burst"}},
        {"policy": {"kind": "hashcash", "threshold": 4, "controller_target": 30,
                    "controller_window": 600},
         "duration": HOUR, "net": {"nodes": 6, "degree": 3},
         "attacker": {"coins": 1, "rate": "1/5"}},
        {"policy": "utxo", "seed": 11, "duration": 2 * HOUR,
         "attacker": {"coins": 10, "rate": "1", "strategy": "sybil"}},
    ]
    for data in scenarios:
        first = run_with_trace(scenario_from_dict(data))
        second = run_with_trace(scenario_from_dict(data))
        assert first[1] == second[1]
        assert render(first[0]) == render(second[0])
        assert render(first[0], "text") == render(second[0], "text")
    other = run_with_trace(scenario_from_dict({**scenarios[2], "seed": 12}))
    assert other[1] != first[1]
    record_property("detail", f"{len(scenarios)} scenarios rerun")
