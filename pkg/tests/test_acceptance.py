"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The terminal summary repeats all lines at the end of the run.
"""

import random
import time
from fractions import Fraction
from itertools import combinations, product

from hypothesis import given, settings
from hypothesis import strategies as st

from mis.consensus import (
    ABSENT,
    APPROVE,
    REJECT,
    Block,
    BlockHeader,
    Outcome,
    TxList,
    VoteMsg,
    compress_votes,
    decompress_votes,
    tally,
    tally_counts,
    tally_words,
)
from mis.crypto import ZERO_DIGEST, AggregateSignature, get_scheme, hash_bytes
from mis.erasure import InsufficientChunks
from mis.identifiers import Identifier, IdentifierType, NodeDescriptor, derive_spaces
from mis.ledger import BlockState, StorageConfig, cache_count, classify, decode_block, encode_block
from mis.registry import (
    RecordStatus,
    Registry,
    Revoked,
    build_request,
    identity_for_key,
    register_tx,
    revoke_tx,
    update_tx,
)
from mis.resolution import (
    MetadataStore,
    Mode,
    ResolverClients,
    ResourceRef,
    StorageServer,
    inter_translate,
    publish,
    resolve,
    worked_example,
)
from mis.simnet import (
    Behavior,
    CostModel,
    FaultPlan,
    SimConfig,
    WorkloadSpec,
    bundled_scenario,
    load_scenario,
    make_nodes,
    run,
)
from mis.simnet.bench import measure_resolve
from mis.simnet.cluster import Cluster
from mis.simnet.workload import Workload

TARGET_TOTAL_MS = 349.79


# -- 1 ----------------------------------------------------------------------


def fault_plan_for(seed: int) -> FaultPlan:
    rng = random.Random(f"safety-{seed}")
    node = f"n{rng.randrange(4):03d}"
    kind = rng.choice(("silent_voter", "equivocating_bookkeeper", "crashed_aggregator"))
    if kind == "silent_voter":
        behavior = Behavior.silent_voter()
    elif kind == "equivocating_bookkeeper":
        behavior = Behavior.equivocating_bookkeeper()
    else:
        behavior = Behavior.crash(rng.randrange(1, 500), when_aggregator=True)
    return FaultPlan(((node, behavior),), kind)


def test_c01_consensus_safety(criterion):
    with criterion(1, "consensus safety, 50 seeds x 500 rounds, n=4 f=1") as c:
        start = time.perf_counter()
        kinds: dict[str, int] = {}
        heights = []
        for seed in range(50):
            plan = fault_plan_for(seed)
            kinds[plan.label] = kinds.get(plan.label, 0) + 1
            cfg = SimConfig(seed=seed, nodes=make_nodes([("local", 4)]), rounds=500,
                            workload=WorkloadSpec(request_rate=5.0),
                            costs=CostModel(storage_ms=5.0))
            result = run(cfg, plan)  # SafetyViolation would propagate
            c.check(result.converged, f"seed {seed}: correct nodes disagree {result.heads}")
            heights.append(result.report.extra["height"])
        elapsed = time.perf_counter() - start
        c.note(f"faults {dict(sorted(kinds.items()))}")
        c.note(f"heights {min(heights)}..{max(heights)}")
        c.note(f"runtime {elapsed:.1f}s")
        c.check(elapsed < 120, f"runtime {elapsed:.1f}s exceeds 120s")


# -- 2 ----------------------------------------------------------------------


def literal_rule(approvals: int, disapprovals: int, n: int) -> Outcome:
    two_thirds = Fraction(2, 3) * n
    if approvals > two_thirds:
        return Outcome.VALID
    if disapprovals > two_thirds:
        return Outcome.INVALID
    return Outcome.UNDECIDED


def test_c02_tally_rule_oracle(criterion):
    with criterion(2, "tally rule against the literal two-thirds rule") as c:
        cases = 0
        for n in (4, 7, 10):
            voters = [bytes([i]) * 32 for i in range(n)]
            for a in range(n + 1):
                for d in range(n + 1 - a):
                    expected = literal_rule(a, d, n)
                    ballots = [APPROVE] * a + [REJECT] * d + [ABSENT] * (n - a - d)
                    words = [compress_votes([b]) for b in ballots]
                    digest = hash_bytes(b"list")
                    votes = [VoteMsg(pk, 1, 1, ZERO_DIGEST, 1, w, (digest,), b"")
                             for pk, w in zip(voters, words)]
                    got = (tally_counts(a, d, n), tally_words(words, n, 1)[0],
                           tally(votes, n, 1).outcomes[0])
                    c.check(all(g == expected for g in got),
                            f"n={n} approve={a} reject={d}: {got} != {expected}")
                    cases += 1
        c.note(f"{cases} multisets over n in (4, 7, 10), 100% agreement")


# -- 3 ----------------------------------------------------------------------


def test_c03_vote_compression_round_trip(criterion):
    with criterion(3, "vote compression round trip") as c:
        exhaustive = 0
        for length in range(11):
            for v in product((ABSENT, APPROVE, REJECT), repeat=length):
                c.check(decompress_votes(compress_votes(v), length) == list(v), f"{v}")
                exhaustive += 1
        rng = random.Random(3)
        for _ in range(10_000):
            length = rng.randrange(11, 257)
            v = [rng.choice((ABSENT, APPROVE, REJECT)) for _ in range(length)]
            c.check(decompress_votes(compress_votes(v), length) == v, f"length {length}")
        c.note(f"{exhaustive} exhaustive vectors (length 0..10) + 10000 random (length 11..256)")


# -- 4 ----------------------------------------------------------------------


def block_sizes(rng: random.Random, count: int) -> list[int]:
    sizes = [1, 1 << 20]
    while len(sizes) < count:
        sizes.append(int(2 ** rng.uniform(0, 20)))
    return sizes


def test_c04_rs_recovery(criterion):
    with criterion(4, "RS recovery from any n-2f chunks, failure below") as c:
        for n in (4, 6):
            cfg = StorageConfig(n, 1, 1, 2)
            k = n - 2
            rng = random.Random(n)
            decodes = refusals = 0
            for size in block_sizes(rng, 200):
                data = rng.randbytes(size)
                cs = encode_block(data, cfg)
                for combo in combinations(range(1, n + 1), k):
                    got = decode_block({i: cs.chunk(i) for i in combo}, size, cfg)
                    c.check(got == data, f"n={n} size={size} subset {combo} decoded wrongly")
                    decodes += 1
                for combo in combinations(range(1, n + 1), k - 1):
                    try:
                        decode_block({i: cs.chunk(i) for i in combo}, size, cfg)
                    except InsufficientChunks:
                        refusals += 1
                    else:
                        c.check(False, f"n={n} size={size}: {k - 1} chunks decoded")
            c.note(f"n={n}: 200 blocks, {decodes} decodes, {refusals} refusals")


# -- 5 ----------------------------------------------------------------------


def test_c05_cache_schedule_endpoints(criterion):
    configs = st.integers(1, 12).flatmap(lambda f: st.tuples(
        st.just(f), st.integers(1, 30), st.integers(1, 12).map(lambda m: 2 * f * m),
        st.integers(0, 200)))
    seen, broken = [], []

    @settings(max_examples=1000, deadline=None, derandomize=True, database=None)
    @given(configs)
    def prop(params):
        f, hot, warm, extra = params
        cfg = StorageConfig(3 * f + 1, f, hot, warm)
        h_max = hot + warm + extra
        latest, oldest = h_max - hot, h_max - hot - warm + 1
        assert classify(latest, h_max, cfg) == BlockState.WARM
        assert classify(oldest, h_max, cfg) == BlockState.WARM
        counts = [cache_count(h, h_max, cfg) for h in range(oldest, latest + 1)]
        seen.append(params)
        if counts[-1] != 2 * f + 1 or counts[0] != 1 or counts != sorted(counts):
            broken.append((f, hot, warm, counts[0], counts[-1]))

    with criterion(5, "cache schedule endpoints and monotonicity") as c:
        prop()
        c.note(f"{len(seen)} random (f, L_h, L_w) configurations")
        c.check(len(seen) >= 1000, f"only {len(seen)} configurations ran")
        if broken:
            shapes = sorted({(f, warm) for f, _, warm, _, _ in broken})
            c.note(f"{len(broken)} violate an endpoint; (f, L_w) = {shapes[:6]}"
                   f"{' ...' if len(shapes) > 6 else ''}; first (f, L_h, L_w, oldest, latest) "
                   f"= {broken[0]}")
        c.check(not broken, f"{len(broken)} of {len(seen)} configurations break the schedule")


# -- 6 ----------------------------------------------------------------------


def test_c06_availability_with_two_nodes_down(criterion):
    with criterion(6, "every height readable with any 2 of 4 nodes down") as c:
        cfg = SimConfig(seed=6, nodes=make_nodes([("local", 4)]), rounds=30, hot_len=3,
                        warm_len=6, workload=WorkloadSpec(request_rate=40.0),
                        costs=CostModel(storage_ms=5.0))
        result = run(cfg)
        sim = result.sim
        c.check(result.converged, "simulation did not converge")
        h_max = sim.nodes[0].height
        states = {classify(h, h_max, sim.scfg).value for h in range(h_max + 1)}
        c.check(states == {"hot", "warm", "cold"}, f"chain only spans {states}")
        reads = 0
        for down in combinations([n.id for n in sim.nodes], 2):
            peers = sim.peer_handles(down)
            for reader in (n for n in sim.nodes if n.id not in down):
                for h in range(h_max + 1):
                    block = reader.ledger.get_block(h, peers)
                    c.check(block.header == reader.ledger.headers[h],
                            f"{reader.id} read a wrong block {h} with {down} down")
                    reads += 1
        c.note(f"h_max={h_max}, 6 failure pairs, {reads} reads")


# -- 7 ----------------------------------------------------------------------


def tx_sequence(total: int, per_block: int) -> list[list]:
    """Workload transactions grouped into blocks, generated against a scratch registry."""
    wl = Workload(WorkloadSpec(), seed=7, scheme=get_scheme("ed25519"))
    scratch = Chain()
    blocks, now = [], 0.0
    while sum(len(b) for b in blocks) < total:
        now += 1.0
        batch = []
        while len(batch) < min(per_block, total - sum(len(b) for b in blocks)):
            _, tx, _ = wl.make(now)
            if tx is not None:
                batch.append(tx)
        block, delta = scratch.block(batch, now)
        wl.observe_block(block, delta)
        blocks.append(batch)
    return blocks


class Chain:
    def __init__(self) -> None:
        self.reg = Registry()
        self.prev = ZERO_DIGEST
        self.height = 0

    def block(self, txs, t):
        self.height += 1
        tl = TxList(bytes(32), self.height, tuple(txs), float(t))
        empty = AggregateSignature.empty()
        header = BlockHeader(self.height, self.prev, float(t), (1,), (), empty, empty,
                             ((tl.merkle_root, tl.produced_at),))
        self.prev = header.hash
        block = Block(header, (tl,))
        return block, self.reg.apply_block(block)


def lifecycle() -> list[str]:
    cluster = Cluster(n=4, seed=77)
    key = cluster.user_key("hana")
    cluster.execute(register_tx(build_request("hana", identity_for_key(key.public), key,
                                              10**6, 1.0, cluster.clock), key))
    ident = Identifier(IdentifierType.CONTENT, "/hana/clip.mp4")
    server_key = cluster.user_key("store")
    server = StorageServer(identity_for_key(server_key.public),
                           Identifier(IdentifierType.IPV4, "192.0.2.5"))
    meta = MetadataStore("M")
    refs = [ResourceRef(server.identity, server.address, Mode.PUSH)]

    def clients():
        return ResolverClients(cluster.registry, [meta], [server], cluster.clock)

    steps = []
    (out,) = cluster.execute(register_tx(
        build_request("hana", ident, key, 10**6, 1.0, cluster.clock, hash_bytes(b"v1")), key))
    assert out.status == "committed", out
    publish("hana", ident, b"v1", refs, clients())
    steps.append("register")
    assert resolve(ident, clients()).resource == b"v1"
    steps.append("resolve")
    (out,) = cluster.execute(update_tx(ident, hash_bytes(b"v2"), key, cluster.clock))
    assert out.status == "committed", out
    publish("hana", ident, b"v2", refs, clients())
    steps.append("update")
    assert resolve(ident, clients()).resource == b"v2"
    steps.append("resolve")
    (out,) = cluster.execute(revoke_tx(ident, key, cluster.clock))
    assert out.status == "committed", out
    steps.append("revoke")
    try:
        resolve(ident, clients())
    except Revoked:
        steps.append("resolve(Revoked)")
    (out,) = cluster.execute(register_tx(
        build_request("hana", ident, key, 10**6, 1.0, cluster.clock, hash_bytes(b"v3")), key))
    assert out.status == "committed", out
    publish("hana", ident, b"v3", refs, clients())
    steps.append("re-register")
    res = resolve(ident, clients())
    assert res.resource == b"v3" and res.record.status == RecordStatus.ACTIVE
    steps.append("resolve")
    return steps


def test_c07_registry_determinism(criterion):
    with criterion(7, "registry replay determinism and lifecycle") as c:
        blocks = tx_sequence(10_000, 500)
        total = sum(len(b) for b in blocks)
        c.check(total == 10_000, f"{total} transactions generated")
        exports = []
        for _ in range(2):
            chain = Chain()
            applied = rejected = 0
            for i, txs in enumerate(blocks):
                _, delta = chain.block(txs, float(i + 1))
                applied += len(delta.applied)
                rejected += len(delta.rejected)
            exports.append(chain.reg.export_state())
        c.check(exports[0] == exports[1], "state exports differ")
        c.note(f"{len(blocks)} blocks, {total} txs ({applied} applied, {rejected} rejected), "
               f"export {len(exports[0])} bytes identical")
        steps = lifecycle()
        expected = ["register", "resolve", "update", "resolve", "revoke", "resolve(Revoked)",
                    "re-register", "resolve"]
        c.check(steps == expected, f"lifecycle stopped after {steps}")
        c.note("lifecycle " + " -> ".join(steps))


# -- 8 ----------------------------------------------------------------------


def test_c08_inter_translation(criterion):
    with criterion(8, "inter-translation of a legacy domain") as c:
        ex = worked_example()
        t = inter_translate(ex.domain, ex.spaces["C_0"], ex.clients, ex.domains)
        chain = [str(i) for i in t.identifiers]
        expected = ["type6:metaverse.sub3.com", "type0:04d9806ec30dac7e5", "type5:142.251.42.228"]
        c.check(chain == expected, f"chain {chain}")
        c.check(t.username == "DNS_cache:1", f"owner {t.username}")
        answer = ex.domains.resolve_domain("metaverse.sub3.com", ex.clients.now)
        c.check(answer.cached, "second lookup missed the DNS cache")
        c.check(hash_bytes(answer.resource) == answer.metadata.verification == answer.record.digest,
                "cached answer fails digest verification")
        c.check(answer.resource == b"142.251.42.228", f"answer {answer.resource!r}")
        content = resolve(ex.content, ex.clients)
        c.check(hash_bytes(content.resource) == content.record.digest, "content digest mismatch")
        c.note(" -> ".join(f"({t.username}, {s})" if s.startswith("type0") else s for s in chain))
        c.note("answer digest verified, content in C_2 verified")


# -- 9 ----------------------------------------------------------------------


def test_c09_latency_shape(criterion):
    with criterion(9, "desk-scale latency shape (4-region, storage 284 ms)") as c:
        scenario = load_scenario(bundled_scenario("uk-my-80.json"))
        cfg = scenario.config
        c.check(cfg.costs.storage_ms == 284.0, "scenario storage cost is not 284 ms")
        result = run(cfg, scenario.faults)
        report = result.report
        means = report.phase_means()
        total, share = report.mean_total_ms, report.consensus_share
        c.note(f"{cfg.rounds} rounds, {len(cfg.nodes)} nodes, phases {means}")
        c.note(f"mean total {total:.1f} ms vs {TARGET_TOTAL_MS} ms +-15% "
               f"[{TARGET_TOTAL_MS * 0.85:.1f}, {TARGET_TOTAL_MS * 1.15:.1f}]")
        c.note(f"consensus share {share:.3f} (< 0.25 required)")
        stats = measure_resolve(20_000, 2_000, seed=9, expired=200)
        c.note(f"resolve mean {stats.mean:.2f} ms over {stats.population} identifiers "
               f"({len(stats.samples)} samples, {stats.excluded} expired excluded)")
        c.check(stats.failures == 0, f"{stats.failures} resolve failures")
        c.check(stats.mean < 50.0, f"resolve mean {stats.mean:.2f} ms")
        c.check(abs(total - TARGET_TOTAL_MS) <= 0.15 * TARGET_TOTAL_MS,
                f"mean total {total:.1f} ms outside +-15% of {TARGET_TOTAL_MS}")
        c.check(share < 0.25, f"consensus share {share:.3f} >= 0.25")


# -- 10 ---------------------------------------------------------------------


def test_c10_throughput_plumbing(criterion):
    with criterion(10, "1000 req/s for 60 s, nothing dropped") as c:
        cfg = SimConfig(seed=10, nodes=make_nodes([("local", 4)]), rounds=None, duration_s=60.0,
                        workload=WorkloadSpec(request_rate=1000.0))
        result = run(cfg)
        counts = result.report.extra["transactions"]
        biggest = result.report.summary()["max_block_txs"]
        c.note(f"{counts['submitted']} submitted, {counts['committed']} committed, "
               f"{counts['rejected']} rejected, {counts['pending']} pending")
        c.note(f"max block {biggest} txs, height {result.report.extra['height']}")
        c.check(result.converged, "nodes did not converge")
        c.check(counts["pending"] == 0, f"{counts['pending']} transactions never settled")
        c.check(counts["committed"] + counts["rejected"] == counts["submitted"],
                "settled count does not add up")
        c.check(biggest <= 100_000, f"block of {biggest} txs")


# -- 11 ---------------------------------------------------------------------


def naive_spaces(nodes: list[NodeDescriptor], types: range) -> set:
    """Every type set containing identity whose owners form a non-empty node set."""
    out = set()
    others = [t for t in types if t != 0]
    for r in range(len(others) + 1):
        for extra in combinations(others, r):
            ts = frozenset((0, *extra))
            members = frozenset(n.node_id for n in nodes if ts <= n.owned_types)
            if members:
                out.add((ts, members))
    return out


def test_c11_identifier_space_oracle(criterion):
    with criterion(11, "identifier spaces against naive enumeration") as c:
        rng = random.Random(11)
        total = 0
        for _ in range(500):
            n_types = rng.randint(1, 4)
            nodes = [
                NodeDescriptor(f"N{i}", frozenset({0} | {t for t in range(1, n_types)
                                                         if rng.random() < 0.5}))
                for i in range(rng.randint(1, 5))
            ]
            got = derive_spaces(nodes)
            c.check({(s.type_set, s.members) for s in got} == naive_spaces(nodes, range(n_types)),
                    f"mismatch for {nodes}")
            c.check(len(got) == len({s.type_set for s in got}), "duplicate spaces")
            total += len(got)
        c.note(f"500 universes, {total} spaces, all equal")
