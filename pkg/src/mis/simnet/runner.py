"""Event loop, simulated network and the simulation driver."""

from __future__ import annotations

import hashlib
import heapq
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from ..consensus import Block, CommitMsg, ConsensusConfig, Transaction, genesis_block
from ..crypto import get_scheme
from ..identifiers import Identifier
from ..ledger import PeerHandle, StorageConfig
from ..registry import BlockDelta, Registry, RegistryError, identity_for_key
from .config import ConfigInvalid, SimConfig
from .faults import Behavior, FaultPlan, Kind, UnknownNode, inject
from .metrics import MetricsReport, RoundRow
from .node import SimNode, TxSubmit
from .workload import Workload


class SafetyViolation(RuntimeError):
    """Two correct nodes committed different blocks at the same height."""

    def __init__(self, height: int, first: tuple[str, bytes], second: tuple[str, bytes]) -> None:
        super().__init__(
            f"height {height}: {first[0]} committed {first[1].hex()[:16]}, "
            f"{second[0]} committed {second[1].hex()[:16]}")
        self.height = height
        self.first = first
        self.second = second


class EventLoop:
    """Min-heap of (time, sequence) ordered callbacks; ties run in scheduling order."""

    def __init__(self) -> None:
        self.now = 0.0
        self.events = 0
        self._queue: list[tuple[float, int, Callable, tuple]] = []
        self._seq = 0

    def schedule(self, t: float, fn: Callable, *args: Any) -> None:
        if t < self.now:
            t = self.now
        heapq.heappush(self._queue, (t, self._seq, fn, args))
        self._seq += 1

    def run(self, until: float | None = None) -> None:
        q = self._queue
        while q:
            if until is not None and q[0][0] > until:
                self.now = until
                return
            t, _, fn, args = heapq.heappop(q)
            self.now = t
            self.events += 1
            fn(*args)

    def __len__(self) -> int:
        return len(self._queue)


def dns_cache_key(seed: int, i: int, scheme: str):
    return get_scheme(scheme).keygen(f"dns-cache-{seed}-{i}".encode())


@dataclass
class SimResult:
    report: MetricsReport
    heads: dict[str, tuple[int, str]]
    state_digests: dict[str, str]
    crashed: list[str]
    correct: list[str]
    events: int
    sim: "Simulation" = field(repr=False)

    @property
    def converged(self) -> bool:
        heads = {self.heads[n] for n in self.correct}
        digests = {self.state_digests[n] for n in self.correct}
        return len(heads) == 1 and len(digests) == 1

    def final_states(self) -> dict:
        return {"heads": {n: [h, x] for n, (h, x) in self.heads.items()},
                "state_digests": self.state_digests}


class Simulation:
    def __init__(self, config: SimConfig, faults: FaultPlan | None = None) -> None:
        config.validate()
        self.config = config
        self.plan = faults or FaultPlan()
        for node in self.plan.nodes():
            if node not in config.node_ids:
                raise UnknownNode(node)
        self.loop = EventLoop()
        self.net_rng = random.Random(f"net-{config.seed}")
        self.client_rng = random.Random(f"client-{config.seed}")
        scheme = get_scheme(config.scheme)
        keys = [scheme.keygen(f"node-{config.seed}-{n.node_id}".encode()) for n in config.nodes]
        self.ccfg = ConsensusConfig(
            bookkeeper_set=tuple(k.public for k, n in zip(keys, config.nodes) if n.bookkeeper),
            voter_set=tuple(k.public for k, n in zip(keys, config.nodes) if n.voter),
            max_tx_per_block=config.max_tx_per_block,
            vote_timeout_ms=config.vote_timeout_ms,
            aggregate_timeout_ms=config.aggregate_timeout_ms,
            aggregator_rotation_period=config.rotation_period,
            good_voter_window=config.good_voter_window,
            faults=config.fault_bound,
        )
        self.scfg = StorageConfig(len(config.nodes), config.fault_bound, config.hot_len,
                                  config.warm_len)
        genesis = genesis_block()
        self.dns_users = []
        for i in range(1, config.dns_cache_users + 1):
            key = dns_cache_key(config.seed, i, config.scheme)
            self.dns_users.append((f"DNS_cache:{i}", identity_for_key(key.public), key.public))
        self.nodes: list[SimNode] = []
        for rank, (spec, key) in enumerate(zip(config.nodes, keys)):
            registry = Registry()
            for username, ident, pk in self.dns_users:
                registry.bootstrap_identity(username, ident, pk)
            self.nodes.append(SimNode(self, spec, rank, key, self.ccfg, self.scfg, registry, genesis))
        self.node_by_id = {n.id: n for n in self.nodes}
        self.node_by_key = {n.key.public: n for n in self.nodes}
        self.bookkeepers = [n for n in self.nodes if n.spec.bookkeeper]
        self.workload = Workload(config.workload, config.seed, scheme)
        max_link = config.latency.max_delay()
        slow = max((b.delay_ms for _, b in self.plan.behaviors if b.kind == Kind.DELAYED), default=0.0)
        c = config.costs
        # long enough for a full round including both aggregator deadlines, a
        # missing-list fetch and the commit broadcast, on the slowest link
        self.round_timeout_ms = (config.vote_timeout_ms + 2 * config.aggregate_timeout_ms
                                 + 6 * (max_link + slow) + c.propose_ms + c.vote_ms
                                 + c.aggregate_ms + 10.0)
        self.resubmit_ms = 4 * self.round_timeout_ms
        self.stop_round: int | None = config.rounds + 1 if config.rounds is not None else None
        self.arrivals_open = True
        self.committed: dict[int, tuple[str, bytes]] = {}
        self.commits: dict[int, tuple[str, CommitMsg, float]] = {}
        self.block_txs: dict[int, int] = {}
        self.aborts: dict[int, int] = {}
        self.resolve_ms: list[float] = []
        self.tx_routes: dict[bytes, tuple[Transaction, int]] = {}
        self._verdicts: dict[bytes, dict[tuple[bytes, float], str | None]] = {}
        self._last_round_of_duration: int | None = None
        self.last_progress_ms = 0.0
        self.reference = next((n for n in self.nodes if not self.plan.behavior(n.id).byzantine),
                              self.nodes[0])

    # -- network ------------------------------------------------------------

    def send(self, src: SimNode, dst_id: str, msg) -> None:
        dst = self.node_by_id[dst_id]
        if dst is src:
            self.loop.schedule(self.loop.now, dst.receive, msg)
            return
        if self.config.drop_rate and self.net_rng.random() < self.config.drop_rate:
            return
        delay = self.config.latency.sample(src.region, dst.region, self.net_rng)
        b = src.behavior
        if b.kind == Kind.DELAYED:
            delay += b.delay_ms
        self.loop.schedule(self.loop.now + delay, dst.receive, msg)

    def broadcast(self, src: SimNode, msg) -> None:
        for node in self.nodes:
            self.send(src, node.id, msg)

    # -- shared services ----------------------------------------------------

    def check(self, node: SimNode, tx: Transaction, now: float) -> str | None:
        """Validity of ``tx`` against ``node``'s committed state, memoised by head.

        The registry is a pure function of the chain, so nodes on the same head
        share verdicts.
        """
        per_head = self._verdicts.get(node.head)
        if per_head is None:
            if len(self._verdicts) > 8:
                self._verdicts.pop(next(iter(self._verdicts)))
            per_head = self._verdicts[node.head] = {}
        key = (tx.tx_id, now)
        if key not in per_head:
            try:
                node.registry.check_tx(tx, now)
                per_head[key] = None
            except RegistryError as exc:
                per_head[key] = exc.code
        return per_head[key]

    def stopping(self, r: int) -> bool:
        return self.stop_round is not None and r >= self.stop_round

    def inject(self, node_id: str, behavior: Behavior) -> None:
        """Switch ``node_id`` to ``behavior`` from the next event on."""
        self.plan = inject(self.plan, node_id, behavior, self.node_by_id)

    def inject_at(self, t_ms: float, node_id: str, behavior: Behavior) -> None:
        if node_id not in self.node_by_id:
            raise UnknownNode(node_id)
        self.loop.schedule(t_ms, self.inject, node_id, behavior)

    def correct_nodes(self) -> list[SimNode]:
        return [n for n in self.nodes if not self.plan.behavior(n.id).byzantine]

    # -- callbacks from nodes -----------------------------------------------

    def on_crash(self, node: SimNode) -> None:
        pass

    def on_abort(self, node: SimNode, r: int) -> None:
        self.aborts[r] = self.aborts.get(r, 0) + 1
        self._maybe_stop(r)

    def on_tx_rejected(self, node: SimNode, tx: Transaction, reason: str) -> None:
        if node is self.reference or not self.plan.behavior(node.id).byzantine:
            self.workload.reject(tx.tx_id, reason)
            self.tx_routes.pop(tx.tx_id, None)

    def on_commit_sent(self, node: SimNode, commit: CommitMsg) -> None:
        self.commits.setdefault(commit.round, (node.id, commit, self.loop.now))

    def on_block_stored(self, node: SimNode, block: Block, delta: BlockDelta, r: int) -> None:
        h = block.height
        self.last_progress_ms = self.loop.now
        first = False
        if not self.plan.behavior(node.id).byzantine:
            seen = self.committed.get(h)
            if seen is None:
                first = True
                self.committed[h] = (node.id, block.header.hash)
                self.block_txs[h] = sum(len(tl.txs) for tl in block.bodies)
            elif seen[1] != block.header.hash:
                raise SafetyViolation(h, seen, (node.id, block.header.hash))
        if node is self.reference:
            self.workload.observe_block(block, delta)
        node.trim_archive()
        if first:
            # every transaction in a block is settled, applied or rejected
            for tx in block.transactions:
                self.tx_routes.pop(tx.tx_id, None)
            # decided once per height so every node sees the same stop round
            self._maybe_stop(r)

    def _maybe_stop(self, r: int) -> None:
        if self.stop_round is not None or self.config.duration_s is None:
            return
        if self.loop.now < self.config.duration_s * 1000:
            return
        if self._last_round_of_duration is None:
            self._last_round_of_duration = r
        drained = not self.tx_routes
        if drained or r >= self._last_round_of_duration + self.config.drain_rounds:
            self.stop_round = r + 1

    # -- clients ------------------------------------------------------------

    def _arrival(self) -> None:
        now = self.loop.now
        if self.config.duration_s is not None and now >= self.config.duration_s * 1000:
            self.arrivals_open = False
        if self.stop_round is not None and all(n.idle or n.crashed for n in self.nodes):
            self.arrivals_open = False
        if not self.arrivals_open:
            return
        op, tx, ident = self.workload.make(now / 1000.0)
        if tx is not None:
            self._submit(tx, 0)
        elif ident is not None:
            self._client_resolve(ident)
        self.loop.schedule(now + self.workload.next_gap_ms(), self._arrival)

    def _submit(self, tx: Transaction, attempt: int) -> None:
        if not self.bookkeepers:
            return
        target = self.bookkeepers[(self.client_rng.randrange(len(self.bookkeepers)) + attempt)
                                  % len(self.bookkeepers)]
        self.tx_routes[tx.tx_id] = (tx, attempt)
        delay = self.config.latency.sample(target.region, target.region, self.client_rng)
        self.loop.schedule(self.loop.now + delay, target.receive, TxSubmit(tx))
        self.loop.schedule(self.loop.now + self.resubmit_ms, self._resubmit_check, tx.tx_id, attempt)

    def _resubmit_check(self, tx_id: bytes, attempt: int) -> None:
        route = self.tx_routes.get(tx_id)
        if route is None or route[1] != attempt:
            return
        if all(n.idle or n.crashed for n in self.nodes):
            return
        self._submit(route[0], attempt + 1)

    def resolve_cost_ms(self, region: str, rng: random.Random) -> float:
        """Registry lookup, metadata fetch and resource fetch, each a round trip
        to a server in the client's own region."""
        lat, c = self.config.latency, self.config.costs
        rtt = sum(lat.sample(region, region, rng) * 2 for _ in range(3))
        return rtt + c.lookup_ms + c.metadata_ms + c.fetch_ms

    def _client_resolve(self, ident: Identifier) -> None:
        try:
            self.reference.registry.lookup(ident, self.loop.now / 1000.0)
        except RegistryError:
            return
        region = self.config.regions[self.client_rng.randrange(len(self.config.regions))]
        self.resolve_ms.append(self.resolve_cost_ms(region, self.client_rng))

    # -- driving ------------------------------------------------------------

    def run(self) -> SimResult:
        for node in self.nodes:
            self.loop.schedule(0.0, node.start_round, 1)
        if self.config.workload.request_rate > 0:
            self.loop.schedule(self.workload.next_gap_ms(), self._arrival)
        self.loop.run()
        return self._result()

    def _rows(self) -> list[RoundRow]:
        rows = []
        correct = self.correct_nodes()
        voters = [n for n in correct if n.spec.voter]
        for r in sorted(self.commits):
            agg_id, commit, sent = self.commits[r]
            stored = [n.times[r] for n in correct if r in n.times and n.times[r].stored is not None]
            if not stored:
                continue
            signers = set(commit.header.voters_agg_sig.signers)
            started = [t.start for t in stored]
            prepared = [n.times[r].prepared for n in voters
                        if n.key.public in signers and r in n.times and n.times[r].prepared is not None]
            if not prepared:
                prepared = [sent]
            t0 = sum(started) / len(started)
            t1 = sum(prepared) / len(prepared)
            t3 = sum(t.assembled for t in stored) / len(stored)
            t4 = sum(t.stored for t in stored) / len(stored)
            rows.append(RoundRow.from_ms(r, commit.height, t1 - t0, sent - t1, t3 - sent, t4 - t3,
                                         self.block_txs.get(commit.height, 0)))
        return rows

    def _result(self) -> SimResult:
        heads, digests = {}, {}
        for n in self.nodes:
            heads[n.id] = (n.height, n.head.hex())
            digests[n.id] = hashlib.sha256(n.registry.export_state()).hexdigest()
        correct = [n.id for n in self.correct_nodes() if not n.crashed]
        report = MetricsReport(self._rows(), list(self.resolve_ms))
        report.extra = {
            "name": self.config.name,
            "seed": self.config.seed,
            "nodes": len(self.nodes),
            "fault_bound": self.config.fault_bound,
            "faults": self.plan.to_json(),
            "rounds_started": max((max(n.times, default=0) for n in self.nodes), default=0),
            "aborted_rounds": len(self.aborts),
            "height": max((h for h, _ in heads.values()), default=0),
            "sim_time_ms": round(self.last_progress_ms, 3),
            "transactions": self.workload.counts(),
            "rejections": self.workload.rejection_reasons(),
            "converged": len({heads[i] for i in correct}) == 1 and len({digests[i] for i in correct}) == 1,
        }
        return SimResult(report, heads, digests, [n.id for n in self.nodes if n.crashed], correct,
                         self.loop.events, self)

    def peer_handles(self, down: Iterable[str] = ()) -> list[PeerHandle]:
        """Every node's store as a network peer; ``down`` and crashed nodes refuse."""
        off = set(down)
        out = []
        for n in self.nodes:
            b = self.plan.behavior(n.id)
            corrupt = b.heights if b.kind == Kind.CORRUPT_STORAGE else ()
            out.append(PeerHandle(n.ledger, up=not (n.crashed or n.id in off), corrupt=corrupt))
        return out


def run(config: SimConfig, faults: FaultPlan | None = None) -> SimResult:
    return Simulation(config, faults).run()


__all__ = ["ConfigInvalid", "EventLoop", "SafetyViolation", "SimResult", "Simulation", "run"]
