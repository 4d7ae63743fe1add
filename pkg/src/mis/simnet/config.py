"""Simulation configuration and scenario files."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

from .faults import Behavior, FaultPlan

OPS = ("register", "update", "revoke", "extend", "transfer", "resolve")


class ConfigInvalid(ValueError):
    pass


@dataclass(frozen=True)
class LinkSpec:
    base_ms: float
    jitter_ms: float = 0.0

    def __post_init__(self) -> None:
        if self.base_ms < 0 or self.jitter_ms < 0:
            raise ConfigInvalid("latency base and jitter must be non-negative")

    @property
    def max_ms(self) -> float:
        return self.base_ms + self.jitter_ms


@dataclass(frozen=True)
class LatencyModel:
    """One-way delay per region pair: base plus uniform jitter in [-jitter, +jitter]."""

    intra: LinkSpec = LinkSpec(1.0, 0.5)
    inter: LinkSpec = LinkSpec(80.0, 20.0)
    overrides: tuple[tuple[str, str, LinkSpec], ...] = ()

    @classmethod
    def zero(cls) -> "LatencyModel":
        return cls(LinkSpec(0.0), LinkSpec(0.0))

    def link(self, a: str, b: str) -> LinkSpec:
        for x, y, spec in self.overrides:
            if (x, y) == (a, b) or (y, x) == (a, b):
                return spec
        return self.intra if a == b else self.inter

    def sample(self, a: str, b: str, rng) -> float:
        spec = self.link(a, b)
        if spec.jitter_ms == 0:
            return spec.base_ms
        return max(0.0, spec.base_ms + rng.uniform(-spec.jitter_ms, spec.jitter_ms))

    def max_delay(self) -> float:
        return max([self.intra.max_ms, self.inter.max_ms] + [s.max_ms for _, _, s in self.overrides])

    def to_json(self) -> dict:
        return {
            "intra": [self.intra.base_ms, self.intra.jitter_ms],
            "inter": [self.inter.base_ms, self.inter.jitter_ms],
            "overrides": [{"a": a, "b": b, "base": s.base_ms, "jitter": s.jitter_ms}
                          for a, b, s in self.overrides],
        }

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> "LatencyModel":
        base = cls()
        intra = LinkSpec(*d["intra"]) if "intra" in d else base.intra
        inter = LinkSpec(*d["inter"]) if "inter" in d else base.inter
        overrides = tuple((o["a"], o["b"], LinkSpec(o["base"], o.get("jitter", 0.0)))
                          for o in d.get("overrides", ()))
        return cls(intra, inter, overrides)


@dataclass(frozen=True)
class NodeSpec:
    node_id: str
    region: str
    bookkeeper: bool = True
    voter: bool = True
    owned_types: tuple[int, ...] = (0,)


@dataclass(frozen=True)
class CostModel:
    """Simulated compute time per step, in ms."""

    propose_ms: float = 1.0
    vote_ms: float = 1.0
    aggregate_ms: float = 1.0
    commit_ms: float = 1.0
    storage_ms: float = 284.0
    lookup_ms: float = 0.1
    metadata_ms: float = 0.1
    fetch_ms: float = 0.1

    def __post_init__(self) -> None:
        if any(v < 0 for v in asdict(self).values()):
            raise ConfigInvalid("costs must be non-negative")


@dataclass(frozen=True)
class WorkloadSpec:
    request_rate: float = 0.0
    mix: tuple[tuple[str, float], ...] = (
        ("register", 0.5), ("update", 0.2), ("revoke", 0.1),
        ("extend", 0.1), ("transfer", 0.05), ("resolve", 0.05),
    )
    type_weights: tuple[tuple[int, float], ...] = (
        (1, 0.4), (2, 0.2), (3, 0.1), (4, 0.05), (5, 0.15), (6, 0.1),
    )
    population: int = 0
    ttl_s: int = 10**7
    max_fee: float = 10.0

    def __post_init__(self) -> None:
        if self.request_rate < 0:
            raise ConfigInvalid("request_rate must be non-negative")
        unknown = [op for op, _ in self.mix if op not in OPS]
        if unknown:
            raise ConfigInvalid(f"unknown workload operations {unknown}")
        if any(w < 0 for _, w in self.mix) or not math.isclose(sum(w for _, w in self.mix), 1.0,
                                                                 abs_tol=1e-9):
            raise ConfigInvalid("workload mix fractions must be non-negative and sum to 1")
        if any(t == 0 or w < 0 for t, w in self.type_weights) or not self.type_weights:
            raise ConfigInvalid("type weights cover non-identity types with non-negative weight")
        if self.population < 0 or self.ttl_s <= 0:
            raise ConfigInvalid("population must be >= 0 and ttl positive")


@dataclass(frozen=True)
class SimConfig:
    seed: int
    nodes: tuple[NodeSpec, ...]
    latency: LatencyModel = LatencyModel()
    drop_rate: float = 0.0
    vote_timeout_ms: float = 500.0
    aggregate_timeout_ms: float = 500.0
    max_tx_per_block: int = 100_000
    rotation_period: int = 1
    good_voter_window: int = 3
    hot_len: int = 10
    warm_len: int = 10
    workload: WorkloadSpec = WorkloadSpec()
    costs: CostModel = CostModel()
    rounds: int | None = 100
    duration_s: float | None = None
    drain_rounds: int = 200
    scheme: str = "ed25519"
    dns_cache_users: int = 1
    name: str = "sim"

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if not self.nodes:
            raise ConfigInvalid("no nodes")
        ids = [n.node_id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ConfigInvalid("duplicate node ids")
        if not any(n.voter for n in self.nodes) or not any(n.bookkeeper for n in self.nodes):
            raise ConfigInvalid("need at least one voter and one bookkeeper")
        if any(0 not in n.owned_types for n in self.nodes):
            raise ConfigInvalid("every node owns the identity type")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ConfigInvalid("drop_rate must lie in [0, 1)")
        if self.rounds is None and self.duration_s is None:
            raise ConfigInvalid("set rounds or duration_s")
        if self.rounds is not None and self.rounds < 1:
            raise ConfigInvalid("rounds must be >= 1")
        if self.duration_s is not None and self.duration_s <= 0:
            raise ConfigInvalid("duration_s must be positive")
        if self.vote_timeout_ms <= 0 or self.aggregate_timeout_ms <= 0:
            raise ConfigInvalid("timeouts must be positive")
        if self.max_tx_per_block < 1 or self.rotation_period < 1 or self.good_voter_window < 1:
            raise ConfigInvalid("block cap, rotation period and voter window must be >= 1")
        if self.scheme not in ("ed25519", "bls"):
            raise ConfigInvalid(f"unknown signature scheme {self.scheme!r}")
        if self.dns_cache_users < 1:
            raise ConfigInvalid("at least one DNS cache user")
        f = self.fault_bound
        if self.hot_len < 1 or self.warm_len < 1 or (f > 0 and self.warm_len % (2 * f)):
            raise ConfigInvalid(
                f"hot/warm windows must be >= 1 and warm_len divisible by 2f={2 * f}")

    @property
    def node_ids(self) -> list[str]:
        return [n.node_id for n in self.nodes]

    @property
    def regions(self) -> list[str]:
        seen: list[str] = []
        for n in self.nodes:
            if n.region not in seen:
                seen.append(n.region)
        return seen

    @property
    def n_voters(self) -> int:
        return sum(1 for n in self.nodes if n.voter)

    @property
    def fault_bound(self) -> int:
        """Byzantine nodes tolerated: bounded by the voter count and by the node count."""
        return min((self.n_voters - 1) // 3, (len(self.nodes) - 1) // 3)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "nodes": [{"id": n.node_id, "region": n.region, "bookkeeper": n.bookkeeper,
                       "voter": n.voter, "owned_types": list(n.owned_types)} for n in self.nodes],
            "latency": self.latency.to_json(),
            "drop_rate": self.drop_rate,
            "consensus": {"vote_timeout_ms": self.vote_timeout_ms,
                          "aggregate_timeout_ms": self.aggregate_timeout_ms,
                          "max_tx_per_block": self.max_tx_per_block,
                          "rotation_period": self.rotation_period,
                          "good_voter_window": self.good_voter_window},
            "storage": {"hot_len": self.hot_len, "warm_len": self.warm_len},
            "workload": {"request_rate": self.workload.request_rate,
                         "mix": dict(self.workload.mix),
                         "type_weights": {str(t): w for t, w in self.workload.type_weights},
                         "population": self.workload.population,
                         "ttl_s": self.workload.ttl_s, "max_fee": self.workload.max_fee},
            "costs": asdict(self.costs),
            "rounds": self.rounds,
            "duration_s": self.duration_s,
            "drain_rounds": self.drain_rounds,
            "scheme": self.scheme,
            "dns_cache_users": self.dns_cache_users,
        }


def make_nodes(regions: Sequence[tuple[str, int]], bookkeepers: int | None = None,
               voters: int | None = None) -> tuple[NodeSpec, ...]:
    """Nodes ``n000, n001, ...`` laid out region by region.

    When only some nodes hold a right, it goes to nodes picked round-robin
    across regions so every region is represented.
    """
    specs: list[tuple[str, str]] = []
    for region, count in regions:
        for _ in range(count):
            specs.append((f"n{len(specs):03d}", region))
    order = _round_robin(specs)
    bk = set(order[: bookkeepers] if bookkeepers is not None else order)
    vt = set(order[: voters] if voters is not None else order)
    return tuple(NodeSpec(i, r, i in bk, i in vt) for i, r in specs)


def _round_robin(specs: Sequence[tuple[str, str]]) -> list[str]:
    by_region: dict[str, list[str]] = {}
    for node_id, region in specs:
        by_region.setdefault(region, []).append(node_id)
    out: list[str] = []
    queues = list(by_region.values())
    while any(queues):
        for q in queues:
            if q:
                out.append(q.pop(0))
    return out


@dataclass(frozen=True)
class Scenario:
    config: SimConfig
    faults: FaultPlan = field(default_factory=FaultPlan)
    sweep: tuple[int, ...] = ()
    sweep_regions: tuple[str, ...] = ()
    bookkeepers: int | None = None
    voters: int | None = None

    def sized(self, n: int) -> SimConfig:
        """The config with ``n`` nodes spread evenly over the sweep regions."""
        regions = self.sweep_regions or tuple(self.config.regions)
        base, extra = divmod(n, len(regions))
        layout = [(r, base + (1 if i < extra else 0)) for i, r in enumerate(regions)]
        nodes = make_nodes(layout, self.bookkeepers, self.voters)
        return replace(self.config, nodes=nodes, name=f"{self.config.name}-{n}",
                       warm_len=_fit_warm(nodes, self.config.warm_len))


def _fit_warm(nodes: Sequence[NodeSpec], warm_len: int) -> int:
    """Nearest warm window divisible by 2f for this node set."""
    voters = sum(1 for n in nodes if n.voter)
    f = min((voters - 1) // 3, (len(nodes) - 1) // 3)
    if f > 0 and warm_len % (2 * f):
        return 2 * f * max(1, round(warm_len / (2 * f)))
    return warm_len


def _get(d: Mapping, key: str, kind, default):
    if key not in d:
        return default
    value = d[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if value is not None and not isinstance(value, kind):
        raise ConfigInvalid(f"{key!r} must be {kind.__name__}, got {type(value).__name__}")
    return value


_TOP_KEYS = {"name", "seed", "nodes", "regions", "bookkeepers", "voters", "latency", "drop_rate",
             "consensus", "storage", "workload", "costs", "rounds", "duration_s", "drain_rounds",
             "scheme", "dns_cache_users", "faults", "sweep", "description"}


def scenario_from_json(doc: Mapping[str, Any]) -> Scenario:
    if not isinstance(doc, Mapping):
        raise ConfigInvalid("scenario must be a JSON object")
    unknown = sorted(set(doc) - _TOP_KEYS)
    if unknown:
        raise ConfigInvalid(f"unknown scenario keys {unknown}")
    try:
        bookkeepers = _get(doc, "bookkeepers", int, None)
        voters = _get(doc, "voters", int, None)
        if "nodes" in doc:
            nodes = tuple(
                NodeSpec(n["id"], n.get("region", "r0"), n.get("bookkeeper", True),
                         n.get("voter", True), tuple(n.get("owned_types", (0,))))
                for n in doc["nodes"])
        elif "regions" in doc:
            nodes = make_nodes([(r, int(c)) for r, c in doc["regions"].items()], bookkeepers, voters)
        else:
            raise ConfigInvalid("scenario needs 'nodes' or 'regions'")
        cons = doc.get("consensus", {})
        store = doc.get("storage", {})
        wl = doc.get("workload", {})
        workload = WorkloadSpec(
            request_rate=_get(wl, "request_rate", float, 0.0),
            mix=tuple((k, float(v)) for k, v in wl["mix"].items()) if "mix" in wl
            else WorkloadSpec().mix,
            type_weights=tuple((int(k), float(v)) for k, v in wl["type_weights"].items())
            if "type_weights" in wl else WorkloadSpec().type_weights,
            population=_get(wl, "population", int, 0),
            ttl_s=_get(wl, "ttl_s", int, 10**7),
            max_fee=_get(wl, "max_fee", float, 10.0),
        )
        costs = CostModel(**{k: float(v) for k, v in doc.get("costs", {}).items()})
        cfg = SimConfig(
            seed=_get(doc, "seed", int, 0),
            nodes=nodes,
            latency=LatencyModel.from_json(doc.get("latency", {})),
            drop_rate=_get(doc, "drop_rate", float, 0.0),
            vote_timeout_ms=_get(cons, "vote_timeout_ms", float, 500.0),
            aggregate_timeout_ms=_get(cons, "aggregate_timeout_ms", float, 500.0),
            max_tx_per_block=_get(cons, "max_tx_per_block", int, 100_000),
            rotation_period=_get(cons, "rotation_period", int, 1),
            good_voter_window=_get(cons, "good_voter_window", int, 3),
            hot_len=_get(store, "hot_len", int, 10),
            warm_len=_get(store, "warm_len", int, 10),
            workload=workload,
            costs=costs,
            rounds=_get(doc, "rounds", int, 100 if "duration_s" not in doc else None),
            duration_s=_get(doc, "duration_s", float, None),
            drain_rounds=_get(doc, "drain_rounds", int, 200),
            scheme=_get(doc, "scheme", str, "ed25519"),
            dns_cache_users=_get(doc, "dns_cache_users", int, 1),
            name=_get(doc, "name", str, "sim"),
        )
        faults = FaultPlan.from_json(doc.get("faults", []))
        for node in faults.nodes():
            if node not in cfg.node_ids:
                raise ConfigInvalid(f"fault plan names unknown node {node!r}")
        sweep = doc.get("sweep", {})
        return Scenario(
            cfg, faults,
            tuple(int(x) for x in sweep.get("node_counts", ())),
            tuple(sweep.get("regions", ())),
            bookkeepers, voters,
        )
    except ConfigInvalid:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigInvalid(f"bad scenario: {exc}") from exc


def load_scenario(path: str | Path) -> Scenario:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigInvalid(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"{path} is not valid JSON: {exc}") from exc
    return scenario_from_json(doc)


def bundled_scenario(name: str) -> Path:
    path = Path(__file__).resolve().parent.parent / "scenarios" / name
    if not path.exists():
        raise ConfigInvalid(f"no scenario file or bundled scenario named {name!r}")
    return path


__all__ = [
    "Behavior", "ConfigInvalid", "CostModel", "FaultPlan", "LatencyModel", "LinkSpec",
    "NodeSpec", "Scenario", "SimConfig", "WorkloadSpec", "bundled_scenario", "load_scenario",
    "make_nodes", "scenario_from_json", "OPS",
]
