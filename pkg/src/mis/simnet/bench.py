"""Resolve latency over a registered population.

The population is registered through real consensus rounds on an
in-process cluster. Each region then gets one metadata server and one
storage server holding full replicas. A client in a random region resolves
a random identifier, and its simulated latency is the sum of the round
trips to whichever servers actually answered plus the per-step compute
costs.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Sequence

from ..identifiers import Identifier, IdentifierType
from ..registry import Expired, RegistryError, build_request, identity_for_key, register_tx
from ..resolution import (
    MetadataStore,
    Mode,
    ResolutionError,
    ResolverClients,
    ResourceRef,
    StorageServer,
    publish,
    resolve,
)
from .cluster import Cluster
from .config import CostModel, LatencyModel
from .metrics import distribution

DEFAULT_REGIONS = ("r0", "r1", "r2", "r3")
LONG_TTL = 10**8


@dataclass
class ResolveStats:
    samples: list[float] = field(default_factory=list)
    excluded: int = 0
    failures: int = 0
    population: int = 0

    def summary(self) -> dict:
        out = distribution(self.samples)
        out.update(excluded=self.excluded, failures=self.failures, population=self.population)
        return out

    @property
    def mean(self) -> float:
        return sum(self.samples) / len(self.samples) if self.samples else 0.0


class RegionalClients(ResolverClients):
    """Resolver clients that prefer locations in their own region."""

    def __init__(self, *args, region: str, region_of: dict[str, str], **kwargs) -> None:
        super().__init__(*args, **kwargs)
        self.region = region
        self.region_of = region_of

    def order_locations(self, locations: Sequence[ResourceRef]) -> list[ResourceRef]:
        return sorted(locations, key=lambda ref: self.region_of[str(ref.server_identity)] != self.region)


@dataclass
class Population:
    cluster: Cluster
    live: list[Identifier]
    expired: list[Identifier]


def register_population(count: int, seed: int = 0, expired: int = 0, nodes: int = 4,
                        per_block: int = 5000) -> Population:
    """Register ``count`` live identifiers (plus ``expired`` short-lived ones)
    through consensus. One identity in ten; the rest are content names."""
    cluster = Cluster(n=nodes, seed=seed, max_tx_per_block=max(per_block, 1))
    total = count + expired
    n_users = max(1, total // 10)
    users = []
    for u in range(n_users):
        name = f"user{u:06d}"
        key = cluster.user_key(name)
        ident = identity_for_key(key.public)
        users.append((name, key, ident))
    live, gone = [], []

    def _flush() -> None:
        while cluster.pending():
            cluster.commit(advance_s=1.0)

    for name, key, ident in users:
        cluster.submit(register_tx(build_request(name, ident, key, LONG_TTL, 0.0, cluster.clock), key))
        if cluster.pending() >= per_block:
            _flush()
    _flush()
    live.extend(u[2] for u in users)
    k = 0
    while len(live) + len(gone) < total:
        name, key, _ = users[k % n_users]
        short = len(gone) < expired and k % 2 == 1
        ident = Identifier(IdentifierType.CONTENT, f"/bench/{k:07d}.bin")
        ttl = 5 if short else LONG_TTL
        cluster.submit(register_tx(build_request(name, ident, key, ttl, 0.0, cluster.clock), key))
        (gone if short else live).append(ident)
        k += 1
        if cluster.pending() >= per_block:
            _flush()
    _flush()
    return Population(cluster, live[:count], gone)


def measure_resolve(population: int, samples: int, latency: LatencyModel | None = None,
                    costs: CostModel | None = None, seed: int = 0, expired: int = 0,
                    regions: Sequence[str] = DEFAULT_REGIONS, nodes: int = 4) -> ResolveStats:
    latency = latency or LatencyModel()
    costs = costs or CostModel()
    pop = register_population(population, seed, expired, nodes)
    cluster = pop.cluster
    # let the short-lived registrations lapse
    cluster.clock += 60.0
    meta = {r: MetadataStore(f"M-{r}") for r in regions}
    storage, region_of = {}, {}
    for i, r in enumerate(regions):
        key = cluster.user_key(f"storage-{r}")
        sid = identity_for_key(key.public)
        storage[r] = StorageServer(sid, Identifier(IdentifierType.IPV4, f"192.0.2.{10 + i}"))
        region_of[str(sid)] = r
    every = ResolverClients(cluster.registry, list(meta.values()), list(storage.values()),
                            cluster.clock)
    refs = tuple(ResourceRef(s.identity, s.address, Mode.PUSH) for s in storage.values())
    by_owner = {str(rec.identifier): rec.owner_username
                for rec in cluster.registry.state.index.values()}
    for ident in pop.live:
        publish(by_owner[str(ident)], ident, f"resource {ident}".encode(), refs, every)

    rng = random.Random(f"resolve-{seed}")
    stats = ResolveStats(population=len(pop.live))
    pool = pop.live + pop.expired
    for _ in range(samples):
        ident = pool[rng.randrange(len(pool))]
        region = regions[rng.randrange(len(regions))]
        stores = sorted(meta.values(), key=lambda m: m.name != f"M-{region}")
        servers = sorted(storage.values(), key=lambda s: region_of[str(s.identity)] != region)
        clients = RegionalClients(cluster.registry, stores, servers, cluster.clock,
                                  region=region, region_of=region_of)
        before_m = {m.name: m.reads for m in stores}
        before_s = {str(s.identity): s.reads for s in servers}
        try:
            resolve(ident, clients)
        except Expired:
            stats.excluded += 1
            continue
        except (ResolutionError, RegistryError):
            stats.failures += 1
            continue
        # registry lookup at a consortium node in the client's region
        ms = 2 * latency.sample(region, region, rng) + costs.lookup_ms
        for m in stores:
            for _ in range(m.reads - before_m[m.name]):
                ms += 2 * latency.sample(region, m.name[2:], rng) + costs.metadata_ms
        for s in servers:
            sid = str(s.identity)
            for _ in range(s.reads - before_s[sid]):
                ms += 2 * latency.sample(region, region_of[sid], rng) + costs.fetch_ms
        stats.samples.append(ms)
    return stats
