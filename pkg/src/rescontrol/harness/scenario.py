"""Scenario files.

A scenario is a YAML mapping.  Every key is optional; ``policy`` may be a
bare policy name.  See ``docs/scenario-format.md`` for the full grammar.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any

import yaml

from ..netsim import TOPOLOGIES

SCHEMA_VERSION = 1
HARNESS_POLICIES = ("none", "direct_fee", "indirect_fee", "hashcash", "coinage",
                    "burn", "utxo")
STRATEGIES = ("flood", "sybil", "burst")


class ScenarioError(Exception):
    exit_code = 1


class ParseError(ScenarioError):
    exit_code = 3


class ValidationError(ScenarioError):
    exit_code = 2

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class NetSpec:
    nodes: int = 12
    topology: str = "random"
    degree: int = 4
    latency: int = 1
    bandwidth: int | None = None
    tick: int = 1


@dataclass
class LedgerSpec:
    supply: int = 1000
    capacity: int = 100
    block_interval: int = 60


@dataclass
class PolicySpec:
    kind: str = "none"
    # None picks a per-kind default once the ledger is known.
    threshold: Fraction | None = None
    window: int = 3600
    grants: int = 1
    controller_target: int | None = None
    controller_window: int = 3600


@dataclass
class HonestSpec:
    sellers: int = 3
    seller_coins: int = 20
    price: int = 100
    offers_per_day: int = 1
    buyers: int = 1
    buyer_coins: int = 150
    proof_coins: int = 20
    hashrate: int = 2000


@dataclass
class AttackerSpec:
    coins: int = 0
    rate: Fraction = Fraction(1, 20)
    strategy: str = "flood"
    hashrate: int = 20000
    burst_at: int | None = None
    split: int = 10


@dataclass
class Scenario:
    name: str = "scenario"
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    duration: int = 3 * 3600
    setup: int | None = None
    net: NetSpec = field(default_factory=NetSpec)
    ledger: LedgerSpec = field(default_factory=LedgerSpec)
    policy: PolicySpec = field(default_factory=PolicySpec)
    honest: HonestSpec = field(default_factory=HonestSpec)
    attacker: AttackerSpec = field(default_factory=AttackerSpec)

    @property
    def messaging_start(self) -> int:
        return self.setup if self.setup is not None else 2 * self.ledger.block_interval

    def default_threshold(self) -> Fraction:
        kind, led = self.policy.kind, self.ledger
        if kind == "hashcash":
            return Fraction(16)
        if kind == "coinage":
            # Supply over capacity in transactions per second.
            return Fraction(math.ceil(Fraction(led.supply * led.block_interval, led.capacity)))
        if kind == "direct_fee":
            return Fraction(1, 100)
        if kind in ("indirect_fee", "utxo"):
            return Fraction(1)
        if kind == "burn":
            return Fraction(5)
        return Fraction(0)

    @property
    def threshold(self) -> Fraction:
        t = self.policy.threshold
        return self.default_threshold() if t is None else Fraction(t)

    def with_policy(self, kind: str, **overrides) -> "Scenario":
        policy = dataclasses.replace(self.policy, kind=kind, threshold=None, **overrides)
        return dataclasses.replace(self, policy=policy, name=f"{self.name}:{kind}")

    def with_seed(self, seed: int) -> "Scenario":
        return dataclasses.replace(self, seed=seed)

    def honest_funding(self) -> int:
        h = self.honest
        return h.sellers * h.seller_coins + h.buyers * (h.buyer_coins + h.proof_coins)

    def validate(self) -> "Scenario":
        _check(self.schema_version == SCHEMA_VERSION, "schema_version",
               f"unsupported version {self.schema_version}, expected {SCHEMA_VERSION}")
        _check(self.duration > 0, "duration", "must be positive")
        n = self.net
        _check(n.nodes >= 1, "net.nodes", "must be >= 1")
        _check(n.topology in TOPOLOGIES, "net.topology", f"must be one of {TOPOLOGIES}")
        _check(n.latency >= 0, "net.latency", "must be >= 0")
        _check(n.tick >= 1, "net.tick", "must be >= 1")
        _check(n.bandwidth is None or n.bandwidth > 0, "net.bandwidth", "must be positive")
        if n.topology == "random":
            _check(0 < n.degree < n.nodes, "net.degree", "must be in [1, nodes)")
            _check(n.degree * n.nodes % 2 == 0, "net.degree", "degree * nodes must be even")
        led = self.ledger
        _check(led.supply > 0, "ledger.supply", "must be positive")
        _check(led.capacity >= 1, "ledger.capacity", "must be >= 1")
        _check(led.block_interval >= 1, "ledger.block_interval", "must be >= 1")
        p = self.policy
        _check(p.kind in HARNESS_POLICIES, "policy.kind",
               f"unknown policy {p.kind!r}; choose from {HARNESS_POLICIES}")
        _check(p.threshold is None or p.threshold >= 0, "policy.threshold", "must be >= 0")
        _check(p.window >= 1, "policy.window", "must be >= 1")
        _check(p.grants >= 1, "policy.grants", "must be >= 1")
        _check(self.duration >= p.window, "duration", "must cover at least one policy window")
        _check(p.controller_target is None or p.controller_target >= 1,
               "policy.controller_target", "must be >= 1")
        _check(p.controller_window >= 1, "policy.controller_window", "must be >= 1")
        _check(0 <= self.messaging_start < self.duration, "setup",
               "must be inside the run")
        _check(self.messaging_start > led.block_interval or p.kind in ("none", "hashcash"),
               "setup", "must leave at least one block for setup transactions")
        h = self.honest
        for name in ("sellers", "seller_coins", "price", "buyers", "buyer_coins",
                     "proof_coins", "offers_per_day"):
            _check(getattr(h, name) >= 0, f"honest.{name}", "must be >= 0")
        _check(h.hashrate >= 1, "honest.hashrate", "must be >= 1")
        a = self.attacker
        _check(a.coins >= 0, "attacker.coins", "must be >= 0")
        _check(a.coins <= led.supply, "attacker.coins",
               f"budget {a.coins} exceeds the money supply {led.supply}")
        _check(a.rate > 0, "attacker.rate", "must be positive")
        _check(a.strategy in STRATEGIES, "attacker.strategy", f"must be one of {STRATEGIES}")
        _check(a.hashrate >= 1, "attacker.hashrate", "must be >= 1")
        _check(a.split >= 1, "attacker.split", "must be >= 1")
        _check(self.honest_funding() + a.coins <= led.supply, "honest",
               f"actors need {self.honest_funding() + a.coins}, supply is {led.supply}")
        return self

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _check(ok: bool, path: str, message: str) -> None:
    if not ok:
        raise ValidationError(path, message)


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, Fraction):
        return str(value)
    return value


_SECTIONS = {"net": NetSpec, "ledger": LedgerSpec, "policy": PolicySpec,
             "honest": HonestSpec, "attacker": AttackerSpec}
_FRACTION_FIELDS = {("policy", "threshold"), ("attacker", "rate")}


def _coerce(section: str, key: str, value: Any, default: Any):
    path = f"{section}.{key}" if section else key
    if (section, key) in _FRACTION_FIELDS:
        if value is None:
            return None
        try:
            return Fraction(str(value))
        except (ValueError, ZeroDivisionError):
            raise ValidationError(path, f"not a number: {value!r}") from None
    if isinstance(default, bool) or isinstance(value, bool):
        raise ValidationError(path, "booleans are not accepted here")
    if isinstance(default, int) or (default is None and isinstance(value, int)):
        if value is None and default is None:
            return None
        if not isinstance(value, int):
            raise ValidationError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ValidationError(path, f"expected a string, got {value!r}")
        return value
    if value is None:
        return None
    raise ValidationError(path, f"unexpected value {value!r}")


def _build(cls, data: dict, section: str):
    if not isinstance(data, dict):
        raise ValidationError(section, "expected a mapping")
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)} - set(_SECTIONS)
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise ValidationError(f"{section}.{key}" if section else str(key), "unknown field")
        kwargs[key] = _coerce(section, key, value, getattr(defaults, key))
    return cls(**kwargs)


def scenario_from_dict(data: dict) -> Scenario:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ValidationError("<root>", "scenario must be a mapping")
    data = dict(data)
    if isinstance(data.get("policy"), str):
        data["policy"] = {"kind": data["policy"]}
    sections = {}
    for name, cls in _SECTIONS.items():
        if name in data:
            sections[name] = _build(cls, data.pop(name) or {}, name)
    top = _build(Scenario, data, "")
    return dataclasses.replace(top, **sections).validate()


def load_scenario(path: str | Path) -> Scenario:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return scenario_from_dict(data)


def dump_scenario(scenario: Scenario) -> str:
    """YAML echo of a scenario with every default filled in."""
    return yaml.safe_dump(scenario.to_dict(), sort_keys=False)
