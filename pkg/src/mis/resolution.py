"""Metadata files, storage servers and the resolve / translate pipeline.

Resolution runs in four steps: look the identifier up in the registry,
fetch its metadata file from a metadata server, fetch the resource from a
location named in that file, and check the resource digest. A digest
mismatch sends the client back to step three with the next location.

Domain names not registered by anyone are answered from a legacy DNS stub
and cached under reserved ``DNS_cache:i`` users. Cache writes never go
through consensus.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, Sequence

from .crypto import hash_bytes, metadata_address
from .identifiers import (
    Identifier,
    IdentifierSpace,
    IdentifierType,
    format_identifier,
    parse_identifier,
)
from .registry import (
    Expired,
    IdentifierRecord,
    NotFound,
    NotOwner,
    RecordStatus,
    Registry,
    Revoked,
)

__all__ = [
    "Mode", "ResourceRef", "MetadataFile", "ResolutionResult", "TranslationResult",
    "MetadataStore", "StorageServer", "ResolverClients", "DnsStub", "DomainResolver",
    "resolve", "publish", "inter_translate", "worked_example", "WorkedExample",
    "NotFound", "Expired", "Revoked", "NotOwner", "MetadataUnavailable",
    "ResourceUnavailable", "IntegrityFailure", "DnsUnreachable", "NxDomain",
    "Untranslatable", "DigestMismatch", "StoreUnavailable", "DNS_CACHE_PREFIX",
]

DNS_CACHE_PREFIX = "DNS_cache:"
ADDRESS_TYPES = frozenset({IdentifierType.IPV4, IdentifierType.HYPERBOLIC})
PULL_TYPES = frozenset({IdentifierType.CONTENT, IdentifierType.SERVICE})


class ResolutionError(Exception):
    code = "resolution-error"


class MetadataUnavailable(ResolutionError):
    code = "metadata-unavailable"


class ResourceUnavailable(ResolutionError):
    code = "resource-unavailable"


class IntegrityFailure(ResolutionError):
    code = "integrity-failure"


class DnsUnreachable(ResolutionError):
    code = "dns-unreachable"


class NxDomain(ResolutionError):
    code = "nxdomain"


class Untranslatable(ResolutionError):
    code = "untranslatable"


class DigestMismatch(ResolutionError):
    code = "digest-mismatch"


class StoreUnavailable(ResolutionError):
    code = "store-unavailable"


class Mode(str, Enum):
    PUSH = "push"
    PULL = "pull"


@dataclass(frozen=True)
class ResourceRef:
    server_identity: Identifier
    locator: Identifier
    mode: Mode

    def __post_init__(self) -> None:
        if not self.server_identity.is_identity:
            raise ValueError("server_identity must be an identity identifier")
        if self.mode == Mode.PULL and self.locator.itype not in PULL_TYPES:
            raise ValueError("pull locators must be content or service names")
        if self.mode == Mode.PUSH and self.locator.itype not in ADDRESS_TYPES:
            raise ValueError("push locators must be network addresses")

    def to_json(self) -> dict:
        return {"server_identity": str(self.server_identity), "locator": str(self.locator),
                "mode": self.mode.value}

    @classmethod
    def from_json(cls, d: Mapping) -> "ResourceRef":
        return cls(parse_identifier(d["server_identity"]), parse_identifier(d["locator"]),
                   Mode(d["mode"]))


@dataclass(frozen=True)
class MetadataFile:
    subject: Identifier
    locations: tuple[ResourceRef, ...]
    verification: bytes
    extras: Mapping[str, object] = field(default_factory=dict)
    version: int = 1

    def __post_init__(self) -> None:
        if not self.locations:
            raise ValueError("a metadata file needs at least one location")

    def to_json(self) -> bytes:
        doc = {
            "subject": str(self.subject),
            "locations": [r.to_json() for r in self.locations],
            "verification": self.verification.hex(),
            "extras": dict(self.extras),
            "version": self.version,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_json(cls, data: bytes) -> "MetadataFile":
        doc = json.loads(data)
        return cls(
            parse_identifier(doc["subject"]),
            tuple(ResourceRef.from_json(r) for r in doc["locations"]),
            bytes.fromhex(doc["verification"]),
            doc["extras"],
            doc["version"],
        )

    def same_content(self, other: "MetadataFile") -> bool:
        return replace(self, version=0).to_json() == replace(other, version=0).to_json()


@dataclass(frozen=True)
class ResolutionResult:
    record: IdentifierRecord
    metadata: MetadataFile
    resource: bytes
    attempts: int
    cached: bool = False


@dataclass(frozen=True)
class TranslationResult:
    source: Identifier
    chain: tuple[tuple[Identifier, str], ...]
    username: str
    mode: Mode

    @property
    def identifiers(self) -> list[Identifier]:
        return [ident for ident, _ in self.chain]


# --------------------------------------------------------------------------
# Stores


class MetadataStore:
    """A metadata server: full replica of every metadata file, keyed by address."""

    def __init__(self, name: str) -> None:
        self.name = name
        self.available = True
        self.corrupt = False
        self.files: dict[bytes, bytes] = {}
        self.reads = 0

    def put(self, addr: bytes, md: MetadataFile) -> None:
        if not self.available:
            raise StoreUnavailable(f"metadata server {self.name} is down")
        cur = self.files.get(addr)
        if cur is None or MetadataFile.from_json(cur).version <= md.version:
            self.files[addr] = md.to_json()

    def peek(self, addr: bytes) -> MetadataFile | None:
        raw = self.files.get(addr)
        return None if raw is None else MetadataFile.from_json(raw)

    def get(self, addr: bytes) -> MetadataFile:
        if not self.available:
            raise MetadataUnavailable(f"metadata server {self.name} is down")
        self.reads += 1
        raw = self.files.get(addr)
        if raw is None:
            raise MetadataUnavailable(f"{self.name} has no file at {addr.hex()[:16]}")
        md = MetadataFile.from_json(raw)
        if self.corrupt:
            md = replace(md, verification=hash_bytes(md.verification))
        return md


class StorageServer:
    """Holds resource blobs. Push fetches address the server; pull fetches name the content."""

    def __init__(self, identity: Identifier, address: Identifier) -> None:
        self.identity = identity
        self.address = address
        self.available = True
        self.corrupt = False
        self.blobs: dict[str, bytes] = {}
        self.reads = 0

    def put(self, key: Identifier, data: bytes) -> None:
        if not self.available:
            raise StoreUnavailable(f"storage server {self.identity} is down")
        self.blobs[str(key)] = bytes(data)

    def holds(self, key: Identifier) -> bool:
        return str(key) in self.blobs

    def get(self, key: Identifier) -> bytes:
        if not self.available:
            raise ResourceUnavailable(f"storage server {self.identity} is down")
        self.reads += 1
        try:
            data = self.blobs[str(key)]
        except KeyError:
            raise ResourceUnavailable(f"{self.identity} does not hold {key}") from None
        return bytes(b ^ 0xFF for b in data) if self.corrupt else data


@dataclass
class ResolverClients:
    registry: Registry
    metadata_stores: Sequence[MetadataStore]
    storage: Sequence[StorageServer]
    now: float = 0.0

    def lookup(self, ident: Identifier) -> IdentifierRecord:
        return self.registry.lookup(ident, self.now)

    def fetch_metadata(self, rec: IdentifierRecord) -> MetadataFile:
        """First reachable metadata server whose file matches the record."""
        last: Exception | None = None
        for store in self.metadata_stores:
            try:
                md = store.get(rec.metadata_addr)
            except MetadataUnavailable as exc:
                last = exc
                continue
            if md.subject != rec.identifier:
                last = MetadataUnavailable(f"{store.name} returned a file for {md.subject}")
                continue
            if rec.digest is not None and md.verification != rec.digest:
                last = MetadataUnavailable(f"{store.name} file disagrees with the registry digest")
                continue
            return md
        raise MetadataUnavailable(f"no metadata server served {rec.identifier}: {last}")

    def order_locations(self, locations: Sequence[ResourceRef]) -> list[ResourceRef]:
        """Order in which a client tries the metadata file's locations."""
        return list(locations)

    def replicas(self, ref: ResourceRef, subject: Identifier) -> list[tuple[StorageServer, Identifier]]:
        """Servers a fetch for ``ref`` may reach, in the order they are tried."""
        if ref.mode == Mode.PUSH:
            return [(s, subject) for s in self.storage
                    if s.identity == ref.server_identity and s.address == ref.locator]
        named = [s for s in self.storage if s.identity == ref.server_identity]
        others = sorted((s for s in self.storage if s.identity != ref.server_identity
                         and s.holds(ref.locator)), key=lambda s: str(s.identity))
        return [(s, ref.locator) for s in named + others]


def resolve(ident: Identifier, clients: ResolverClients, max_attempts: int = 3) -> ResolutionResult:
    if max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    rec = clients.lookup(ident)
    md = clients.fetch_metadata(rec)
    expected = rec.digest if rec.digest is not None else md.verification
    attempts, mismatched = 0, False
    seen: set[tuple[str, str]] = set()
    for ref in clients.order_locations(md.locations):
        for server, key in clients.replicas(ref, ident):
            if (str(server.identity), str(key)) in seen:
                continue
            seen.add((str(server.identity), str(key)))
            if attempts >= max_attempts:
                break
            attempts += 1
            try:
                data = server.get(key)
            except ResourceUnavailable:
                continue
            if hash_bytes(data) == expected:
                return ResolutionResult(rec, md, data, attempts)
            mismatched = True
    if mismatched:
        raise IntegrityFailure(f"{ident}: no location served bytes matching the digest")
    raise ResourceUnavailable(f"{ident}: no location reachable after {attempts} attempt(s)")


def publish(
    username: str,
    ident: Identifier,
    resource: bytes,
    locations: Sequence[ResourceRef],
    clients: ResolverClients,
    extras: Mapping[str, object] | None = None,
) -> bytes:
    """Store the resource at its locations and its metadata on every metadata server."""
    rec = clients.lookup(ident)
    if rec.owner_username != username:
        raise NotOwner(f"{ident} belongs to {rec.owner_username!r}, not {username!r}")
    digest = hash_bytes(resource)
    if rec.digest is not None and rec.digest != digest:
        raise DigestMismatch(f"resource digest differs from the one registered for {ident}")
    addr = metadata_address(username, ident)
    down = [s.name for s in clients.metadata_stores if not s.available]
    if down or not clients.metadata_stores:
        raise StoreUnavailable(f"metadata servers down: {down}")
    for ref in locations:
        targets = [s for s in clients.storage if s.identity == ref.server_identity]
        if ref.mode == Mode.PUSH:
            targets = [s for s in targets if s.address == ref.locator]
        if not targets:
            raise StoreUnavailable(f"no storage server {ref.server_identity}")
        for s in targets:
            s.put(ident if ref.mode == Mode.PUSH else ref.locator, resource)
    md = MetadataFile(ident, tuple(locations), digest, dict(extras or {}), 1)
    current = [m for m in (s.peek(addr) for s in clients.metadata_stores) if m is not None]
    if current:
        latest = max(current, key=lambda m: m.version)
        md = replace(md, version=latest.version if latest.same_content(md) else latest.version + 1)
    for store in clients.metadata_stores:
        store.put(addr, md)
    return addr


# --------------------------------------------------------------------------
# Legacy DNS compatibility


class DnsStub:
    """Table-driven stand-in for a DNS server, loaded from ``name TYPE value ttl`` lines."""

    def __init__(self, records: Mapping[str, Sequence[tuple[str, str, int]]] | None = None) -> None:
        self.records: dict[str, list[tuple[str, str, int]]] = {
            k.lower().rstrip("."): list(v) for k, v in (records or {}).items()
        }
        self.reachable = True
        self.queries = 0

    @classmethod
    def from_zone(cls, text: str) -> "DnsStub":
        records: dict[str, list[tuple[str, str, int]]] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValueError(f"zone line {lineno}: expected 'name TYPE value ttl'")
            name, rtype, value, ttl = parts
            records.setdefault(name.lower().rstrip("."), []).append((rtype.upper(), value, int(ttl)))
        return cls(records)

    def query(self, name: str, rtype: str = "A") -> list[tuple[str, int]]:
        if not self.reachable:
            raise DnsUnreachable("DNS server unreachable")
        self.queries += 1
        answers = [(v, ttl) for t, v, ttl in self.records.get(name.lower().rstrip("."), ())
                   if t == rtype]
        if not answers:
            raise NxDomain(f"{name} does not exist")
        return answers


class DomainResolver:
    """Answers ``type6`` lookups from DNS_cache users, falling back to the DNS stub.

    Cache entries live beside the consensus state rather than in it: they
    are written directly on a miss and expire with the DNS TTL.
    """

    def __init__(self, registry: Registry, cache_users: Sequence[str], stub: DnsStub,
                 metadata_stores: Sequence[MetadataStore]) -> None:
        if not cache_users:
            raise ValueError("at least one DNS_cache user is required")
        for u in cache_users:
            if registry.active_identity(u, 0.0) is None:
                raise NotFound(f"cache user {u!r} has no identity in the registry")
        self.registry = registry
        self.cache_users = list(cache_users)
        self.stub = stub
        self.metadata_stores = metadata_stores
        self.overlay: dict[str, dict[str, IdentifierRecord]] = {u: {} for u in cache_users}
        self.cache_writes = 0
        self.hits = 0
        self.misses = 0

    def shard(self, domain: str) -> str:
        idx = int.from_bytes(hash_bytes(domain.encode())[:8], "big") % len(self.cache_users)
        return self.cache_users[idx]

    def cached(self, domain: str, now: float) -> IdentifierRecord | None:
        key = str(Identifier(IdentifierType.DOMAIN, domain))
        for user in self.cache_users:
            rec = self.overlay[user].get(key)
            if rec is not None and rec.effective_status(now) == RecordStatus.ACTIVE:
                return rec
        return None

    def _read_metadata(self, rec: IdentifierRecord) -> MetadataFile:
        clients = ResolverClients(self.registry, self.metadata_stores, ())
        return clients.fetch_metadata(rec)

    def resolve_domain(self, name: str, now: float) -> ResolutionResult:
        name = name.lower().rstrip(".")
        ident = Identifier(IdentifierType.DOMAIN, name)
        rec = self.cached(name, now)
        if rec is not None:
            self.hits += 1
            md = self._read_metadata(rec)
            return ResolutionResult(rec, md, _answer_bytes(md), 1, cached=True)
        self.misses += 1
        answers = self.stub.query(name, "A")  # NxDomain propagates; nothing is cached
        user = self.shard(name)
        entry = self.registry.active_identity(user, now)
        ips = sorted({v for v, _ in answers})
        ttl = min(t for _, t in answers)
        locations = tuple(
            ResourceRef(entry.identity, Identifier(IdentifierType.IPV4, ip), Mode.PUSH) for ip in ips
        )
        extras = {"A": [str(Identifier(IdentifierType.IPV4, ip)) for ip in ips], "ttl": ttl}
        resource = "\n".join(ips).encode()
        md = MetadataFile(ident, locations, hash_bytes(resource), extras, 1)
        addr = metadata_address(user, ident)
        old = self.overlay[user].get(str(ident))
        if old is not None:
            prev = next((s.peek(addr) for s in self.metadata_stores if s.peek(addr)), None)
            if prev is not None:
                md = replace(md, version=prev.version + 1)
        for store in self.metadata_stores:
            if store.available:
                store.put(addr, md)
        rec = IdentifierRecord(ident, user, entry.identity_key, addr, md.verification, now, now + ttl)
        self.overlay[user][str(ident)] = rec
        self.cache_writes += 1
        return ResolutionResult(rec, md, resource, 1, cached=False)


def _answer_bytes(md: MetadataFile) -> bytes:
    return "\n".join(parse_identifier(a).name for a in md.extras.get("A", ())).encode()


# --------------------------------------------------------------------------
# Inter-translation


def _space_label(itype: int, requester: IdentifierSpace) -> str:
    if itype in requester.type_set:
        return requester.label
    return IdentifierSpace(frozenset({int(IdentifierType.IDENTITY), int(itype)}), frozenset()).label


def inter_translate(
    ident: Identifier,
    requester_space: IdentifierSpace,
    clients: ResolverClients,
    domains: DomainResolver | None = None,
) -> TranslationResult:
    """Turn ``ident`` into an identity plus a locator the requester can route on."""
    if IdentifierType.IDENTITY not in requester_space.type_set:
        raise ValueError("requester space must contain identity")
    if ident.itype in requester_space.type_set:
        owner = ""
        try:
            owner = clients.lookup(ident).owner_username
        except (NotFound, Expired, Revoked):
            pass
        return TranslationResult(ident, ((ident, requester_space.label),), owner, Mode.PUSH)
    try:
        rec = clients.lookup(ident)
        md = clients.fetch_metadata(rec)
    except NotFound:
        if domains is None or ident.itype != IdentifierType.DOMAIN:
            raise
        res = domains.resolve_domain(ident.name, clients.now)
        rec, md = res.record, res.metadata
    user = clients.registry.state.users.get(rec.owner_username)
    if user is None:
        raise NotFound(f"owner {rec.owner_username!r} has no identity")
    chain: list[tuple[Identifier, str]] = [
        (ident, _space_label(ident.itype, requester_space)),
        (user.identity, requester_space.label),
    ]
    usable = [r for r in md.locations
              if r.locator.itype in requester_space.type_set
              or r.locator.itype in ADDRESS_TYPES or r.mode == Mode.PULL]
    if not usable:
        raise Untranslatable(f"{ident}: no location of a type the requester can use")
    for ref in usable:
        if ref.locator not in [c for c, _ in chain[1:]]:
            chain.append((ref.locator, _space_label(ref.locator.itype, requester_space)))
    return TranslationResult(ident, tuple(chain), rec.owner_username, usable[0].mode)


# --------------------------------------------------------------------------
# Worked example


@dataclass
class WorkedExample:
    registry: Registry
    clients: ResolverClients
    domains: DomainResolver
    spaces: dict[str, IdentifierSpace]
    metadata_server: MetadataStore
    storage: dict[str, StorageServer]
    domain: Identifier
    address: Identifier
    content: Identifier
    cache_identity: Identifier


def worked_example(now: float = 10.0) -> WorkedExample:
    """Three identifier spaces, one metadata server and one DNS cache user.

    ``C_0`` knows only identities, ``C_1`` holds the domain name and
    ``C_2`` the video content, which is fetched by name (pull mode).
    """
    from . import crypto
    from .registry import build_request, register_tx
    from .consensus import Block, BlockHeader, TxList
    from .crypto import AggregateSignature, ZERO_DIGEST

    reg = Registry()
    scheme = crypto.get_scheme("ed25519")
    cache_identity = Identifier(IdentifierType.IDENTITY, "04d9806ec30dac7e5")
    reg.bootstrap_identity(DNS_CACHE_PREFIX + "1", cache_identity, scheme.keygen(b"dns-cache-1").public)

    s1_id = Identifier(IdentifierType.IDENTITY, "storage-s1")
    s2_id = Identifier(IdentifierType.IDENTITY, "storage-s2")
    s1 = StorageServer(s1_id, Identifier(IdentifierType.IPV4, "142.251.42.228"))
    s2 = StorageServer(s2_id, Identifier(IdentifierType.IPV4, "10.0.2.1"))
    meta = MetadataStore("M")

    owner_key = scheme.keygen(b"metaverse-sub1")
    owner = "metaverse_sub1"
    content = Identifier(IdentifierType.CONTENT, "/metaverse_sub1/002.mp4")
    video = b"\x00\x00\x00\x18ftypmp42" + bytes(range(256)) * 8
    identity = Identifier(IdentifierType.IDENTITY, owner_key.public.hex())
    txs = (
        register_tx(build_request(owner, identity, owner_key, 10**9, 1.0, 1.0), owner_key),
        register_tx(build_request(owner, content, owner_key, 10**9, 1.0, 1.0,
                                  digest=hash_bytes(video)), owner_key),
    )
    body = TxList(owner_key.public, 1, txs[:1], 1.0), TxList(owner_key.public, 2, txs[1:], 2.0)
    empty = AggregateSignature.empty()
    for h, tl in enumerate(body, start=1):
        header = BlockHeader(h, ZERO_DIGEST, float(h), (1,), (), empty, empty,
                             ((tl.merkle_root, tl.produced_at),))
        reg.apply_block(Block(header, (tl,)))

    clients = ResolverClients(reg, [meta], [s1, s2], now)
    publish(owner, content, video, [ResourceRef(s2_id, content, Mode.PULL)], clients)

    stub = DnsStub.from_zone("metaverse.sub3.com A 142.251.42.228 3600\n")
    domains = DomainResolver(reg, [DNS_CACHE_PREFIX + "1"], stub, [meta])
    spaces = {
        "C_0": IdentifierSpace(frozenset({0}), frozenset({"E", "M", "S_1", "S_2"})),
        "C_1": IdentifierSpace(frozenset({0, 5, 6}), frozenset({"M", "S_1"})),
        "C_2": IdentifierSpace(frozenset({0, 1}), frozenset({"M", "S_2"})),
    }
    return WorkedExample(
        reg, clients, domains, spaces, meta, {"S_1": s1, "S_2": s2},
        Identifier(IdentifierType.DOMAIN, "metaverse.sub3.com"),
        Identifier(IdentifierType.IPV4, "142.251.42.228"),
        content, cache_identity,
    )
