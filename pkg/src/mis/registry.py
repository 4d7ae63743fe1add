"""Global state of who owns which identifier, and the operations that change it.

State only changes through :meth:`Registry.apply_block`, i.e. after a
block has been committed. Bookkeepers and voters use
:meth:`Registry.check_tx` against a snapshot to decide whether a
transaction may enter a block at all.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property, lru_cache
from typing import Iterable, Sequence

from . import crypto
from .codec import Reader, Writer
from .consensus import Block, OpKind, Transaction, priority_key
from .crypto import KeyPair, metadata_address
from .identifiers import Identifier, IdentifierError, IdentifierType, format_identifier, parse_identifier


class RegistryError(Exception):
    code = "registry-error"


class MissingField(RegistryError):
    code = "missing-field"

    def __init__(self, name: str) -> None:
        super().__init__(f"required field {name} is missing")
        self.field = name


class BadSignature(RegistryError):
    code = "bad-signature"


class DuplicateActiveIdentifier(RegistryError):
    code = "duplicate-identifier"


class DuplicateUsername(RegistryError):
    code = "duplicate-username"


class NoIdentity(RegistryError):
    code = "no-identity"


class AddressMismatch(RegistryError):
    code = "address-mismatch"


class NotFound(RegistryError):
    code = "not-found"


class Expired(RegistryError):
    code = "expired"


class Revoked(RegistryError):
    code = "revoked"


class UnknownUsername(RegistryError):
    code = "unknown-username"


class NotOwner(RegistryError):
    code = "not-owner"


class ConflictLost(RegistryError):
    code = "conflict-lost"


class InvalidPayload(RegistryError):
    code = "invalid-payload"


class RecordStatus(str, Enum):
    ACTIVE = "active"
    REVOKED = "revoked"
    EXPIRED = "expired"


# --------------------------------------------------------------------------
# Payloads


def _opt_ident(r: Reader) -> Identifier | None:
    text = r.opt_text()
    if text is None:
        return None
    try:
        return parse_identifier(text)
    except IdentifierError as exc:
        raise InvalidPayload(str(exc)) from exc


@dataclass(frozen=True)
class RegistrationRequest:
    username: str
    identifier: Identifier | None
    metadata_addr: bytes | None
    ttl: int | None
    fee: float | None
    timestamp: float | None
    signature: bytes = b""
    about_me: str | None = None
    digest: bytes | None = None

    def signing_bytes(self) -> bytes:
        return self._signing

    @cached_property
    def _signing(self) -> bytes:
        w = Writer().text("REGISTER").text(self.username)
        w.opt_text(None if self.identifier is None else format_identifier(self.identifier))
        w.opt_blob(self.metadata_addr)
        w.u8(self.ttl is not None).u64(self.ttl or 0)
        w.u8(self.fee is not None).f64(self.fee or 0.0)
        w.u8(self.timestamp is not None).f64(self.timestamp or 0.0)
        w.opt_text(self.about_me).opt_blob(self.digest)
        return w.getvalue()

    def to_bytes(self) -> bytes:
        return Writer().raw(self.signing_bytes()).blob(self.signature).getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "RegistrationRequest":
        r = Reader(data)
        if r.text() != "REGISTER":
            raise InvalidPayload("not a registration request")
        username = r.text()
        ident = _opt_ident(r)
        addr = r.opt_blob()
        has_ttl, ttl = r.u8(), r.u64()
        has_fee, fee = r.u8(), r.f64()
        has_ts, ts = r.u8(), r.f64()
        about, digest, sig = r.opt_text(), r.opt_blob(), r.blob()
        r.expect_end()
        return cls(username, ident, addr, ttl if has_ttl else None, fee if has_fee else None,
                   ts if has_ts else None, sig, about, digest)


@dataclass(frozen=True)
class UpdateRequest:
    identifier: Identifier
    digest: bytes | None
    metadata_addr: bytes | None = None

    def to_bytes(self) -> bytes:
        return (Writer().text("UPDATE").text(format_identifier(self.identifier))
                .opt_blob(self.digest).opt_blob(self.metadata_addr).getvalue())

    @classmethod
    def from_bytes(cls, data: bytes) -> "UpdateRequest":
        r = Reader(data)
        if r.text() != "UPDATE":
            raise InvalidPayload("not an update")
        out = cls(parse_identifier(r.text()), r.opt_blob(), r.opt_blob())
        r.expect_end()
        return out


@dataclass(frozen=True)
class RevokeRequest:
    identifier: Identifier

    def to_bytes(self) -> bytes:
        return Writer().text("REVOKE").text(format_identifier(self.identifier)).getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "RevokeRequest":
        r = Reader(data)
        if r.text() != "REVOKE":
            raise InvalidPayload("not a revocation")
        out = cls(parse_identifier(r.text()))
        r.expect_end()
        return out


@dataclass(frozen=True)
class ExtendRequest:
    identifier: Identifier
    delta: int

    def to_bytes(self) -> bytes:
        return (Writer().text("EXTEND").text(format_identifier(self.identifier))
                .u64(self.delta).getvalue())

    @classmethod
    def from_bytes(cls, data: bytes) -> "ExtendRequest":
        r = Reader(data)
        if r.text() != "EXTEND":
            raise InvalidPayload("not an extension")
        out = cls(parse_identifier(r.text()), r.u64())
        r.expect_end()
        return out


@dataclass(frozen=True)
class TransferRequest:
    identifier: Identifier
    recipient_username: str
    recipient_key: bytes

    def to_bytes(self) -> bytes:
        return (Writer().text("TRANSFER").text(format_identifier(self.identifier))
                .text(self.recipient_username).blob(self.recipient_key).getvalue())

    @classmethod
    def from_bytes(cls, data: bytes) -> "TransferRequest":
        r = Reader(data)
        if r.text() != "TRANSFER":
            raise InvalidPayload("not a transfer")
        out = cls(parse_identifier(r.text()), r.text(), r.blob())
        r.expect_end()
        return out


_PAYLOADS = {
    OpKind.REGISTER: RegistrationRequest,
    OpKind.UPDATE: UpdateRequest,
    OpKind.REVOKE: RevokeRequest,
    OpKind.EXTEND_VALIDITY: ExtendRequest,
    OpKind.TRANSFER_OWNERSHIP: TransferRequest,
}


def decode_payload(tx: Transaction):
    return _decode(tx.op_kind, tx.payload)


@lru_cache(maxsize=1 << 16)
def _decode(op_kind: OpKind, payload: bytes):
    # payload types are frozen, so one decoded instance can be shared
    try:
        return _PAYLOADS[op_kind].from_bytes(payload)
    except RegistryError:
        raise
    except Exception as exc:
        raise InvalidPayload(f"cannot decode {tx.op_kind.name} payload: {exc}") from exc


def identity_for_key(public: bytes) -> Identifier:
    return Identifier(IdentifierType.IDENTITY, public.hex())


def build_request(
    username: str,
    ident: Identifier,
    key: KeyPair,
    ttl: int,
    fee: float,
    timestamp: float,
    digest: bytes | None = None,
    about_me: str | None = None,
) -> RegistrationRequest:
    req = RegistrationRequest(username, ident, metadata_address(username, ident), ttl, fee,
                              timestamp, b"", about_me, digest)
    return replace(req, signature=crypto.sign(req.signing_bytes(), key))


def register_tx(req: RegistrationRequest, key: KeyPair) -> Transaction:
    return Transaction(OpKind.REGISTER, req.to_bytes(), key.public, float(req.fee or 0.0),
                       float(req.timestamp or 0.0)).signed(key)


def update_tx(ident: Identifier, digest: bytes | None, key: KeyPair, timestamp: float,
              fee: float = 0.0) -> Transaction:
    return Transaction(OpKind.UPDATE, UpdateRequest(ident, digest).to_bytes(), key.public,
                       fee, timestamp).signed(key)


def revoke_tx(ident: Identifier, key: KeyPair, timestamp: float, fee: float = 0.0) -> Transaction:
    return Transaction(OpKind.REVOKE, RevokeRequest(ident).to_bytes(), key.public,
                       fee, timestamp).signed(key)


def extend_tx(ident: Identifier, delta: int, key: KeyPair, timestamp: float,
              fee: float = 0.0) -> Transaction:
    return Transaction(OpKind.EXTEND_VALIDITY, ExtendRequest(ident, delta).to_bytes(),
                       key.public, fee, timestamp).signed(key)


def transfer_tx(ident: Identifier, recipient: str, recipient_key: bytes, key: KeyPair,
                timestamp: float, fee: float = 0.0) -> Transaction:
    return Transaction(OpKind.TRANSFER_OWNERSHIP,
                       TransferRequest(ident, recipient, recipient_key).to_bytes(),
                       key.public, fee, timestamp).signed(key)


# --------------------------------------------------------------------------
# State


@dataclass
class IdentifierRecord:
    identifier: Identifier
    owner_username: str
    owner_key: bytes
    metadata_addr: bytes
    digest: bytes | None
    registered_at: float
    expires_at: float
    status: RecordStatus = RecordStatus.ACTIVE

    def effective_status(self, now: float) -> RecordStatus:
        if self.status == RecordStatus.ACTIVE and now >= self.expires_at:
            return RecordStatus.EXPIRED
        return self.status

    def to_json(self) -> dict:
        return {
            "identifier": format_identifier(self.identifier),
            "owner_username": self.owner_username,
            "owner_key": self.owner_key.hex(),
            "metadata_addr": self.metadata_addr.hex(),
            "digest": None if self.digest is None else self.digest.hex(),
            "registered_at": self.registered_at,
            "expires_at": self.expires_at,
            "status": self.status.value,
        }

    @classmethod
    def from_json(cls, d: dict) -> "IdentifierRecord":
        return cls(
            parse_identifier(d["identifier"]),
            d["owner_username"],
            bytes.fromhex(d["owner_key"]),
            bytes.fromhex(d["metadata_addr"]),
            None if d["digest"] is None else bytes.fromhex(d["digest"]),
            d["registered_at"],
            d["expires_at"],
            RecordStatus(d["status"]),
        )


@dataclass
class UserEntry:
    username: str
    identity: Identifier
    identity_key: bytes
    created_at: float


@dataclass
class GlobalState:
    users: dict[str, UserEntry] = field(default_factory=dict)
    tables: dict[str, list[IdentifierRecord]] = field(default_factory=dict)
    index: dict[str, IdentifierRecord] = field(default_factory=dict)


@dataclass
class BlockDelta:
    height: int
    applied: list[tuple[bytes, str]] = field(default_factory=list)
    rejected: list[tuple[bytes, str]] = field(default_factory=list)
    about_me: list[tuple[str, Identifier, str]] = field(default_factory=list)


def resolve_conflicts(
    register_txs: Sequence[tuple[Transaction, RegistrationRequest]],
) -> tuple[list[Transaction], list[Transaction]]:
    """Settle competing registrations inside one block.

    Highest fee wins, then earliest timestamp, then smallest tx id. Two
    identity registrations for the same username also compete. The result
    depends only on the set of inputs, not their order.
    """
    winners, losers = [], []
    claimed: set[str] = set()
    for tx, req in sorted(register_txs, key=lambda p: priority_key(p[0])):
        keys = {"id:" + format_identifier(req.identifier)}
        if req.identifier.is_identity:
            keys.add("user:" + req.username)
        if keys & claimed:
            losers.append(tx)
        else:
            claimed |= keys
            winners.append(tx)
    return winners, losers


class Registry:
    def __init__(self) -> None:
        self.state = GlobalState()
        self.audit: list[dict] = []
        self._expiry: list[tuple[float, str]] = []

    # -- queries ---------------------------------------------------------

    def active_identity(self, username: str, now: float) -> UserEntry | None:
        user = self.state.users.get(username)
        if user is None:
            return None
        rec = self.state.index.get(format_identifier(user.identity))
        if rec is None or rec.owner_username != username:
            return None
        if rec.effective_status(now) != RecordStatus.ACTIVE:
            return None
        return user

    def lookup(self, ident: Identifier, now: float) -> IdentifierRecord:
        rec = self.state.index.get(format_identifier(ident))
        if rec is None:
            raise NotFound(f"{ident} is not registered")
        status = rec.effective_status(now)
        if status == RecordStatus.REVOKED:
            raise Revoked(f"{ident} was revoked")
        if status == RecordStatus.EXPIRED:
            raise Expired(f"{ident} expired at {rec.expires_at}")
        return rec

    def lookup_username(self, username: str) -> list[IdentifierRecord]:
        if username not in self.state.users:
            raise UnknownUsername(f"no user {username!r}")
        return list(self.state.tables.get(username, ()))

    def _active_record(self, ident: Identifier, now: float) -> IdentifierRecord | None:
        rec = self.state.index.get(format_identifier(ident))
        if rec is not None and rec.effective_status(now) == RecordStatus.ACTIVE:
            return rec
        return None

    # -- validation ------------------------------------------------------

    def validate_request(self, req: RegistrationRequest, now: float) -> None:
        ident = req.identifier
        if not req.username:
            raise MissingField("Username")
        if ident is None:
            raise MissingField("Identity_Identifier")
        if req.metadata_addr is None:
            raise MissingField("Hash_Identity_Identifier")
        if req.ttl is None:
            raise MissingField("TTL")
        if req.fee is None:
            raise MissingField("Fee")
        if req.timestamp is None:
            raise MissingField("Timestamp")
        if not req.signature:
            raise MissingField("Signature")
        if req.ttl <= 0:
            raise InvalidPayload("TTL must be positive")
        if req.fee < 0:
            raise InvalidPayload("fee must be non-negative")
        if req.metadata_addr != metadata_address(req.username, ident):
            raise AddressMismatch("metadata address is not hash(username, identifier)")
        if ident.is_identity:
            try:
                key = bytes.fromhex(ident.name)
            except ValueError:
                raise BadSignature("identity name is not a hex public key") from None
        else:
            user = self.active_identity(req.username, now)
            if user is None:
                raise NoIdentity(f"{req.username!r} holds no active identity")
            key = user.identity_key
        try:
            ok = crypto.verify(req.signing_bytes(), req.signature, key)
        except crypto.CryptoError as exc:
            raise BadSignature(str(exc)) from exc
        if not ok:
            raise BadSignature("request signature does not verify")
        if self._active_record(ident, now) is not None:
            raise DuplicateActiveIdentifier(f"{ident} is already registered")
        if ident.is_identity and self.active_identity(req.username, now) is not None:
            raise DuplicateUsername(f"{req.username!r} already holds an active identity")

    def check_tx(self, tx: Transaction, now: float) -> object:
        """Raise unless ``tx`` could apply to the current state; returns the decoded payload."""
        if not tx.signature_ok():
            raise BadSignature("transaction signature does not verify")
        payload = decode_payload(tx)
        if tx.op_kind == OpKind.REGISTER:
            self.validate_request(payload, now)
            expected = (bytes.fromhex(payload.identifier.name) if payload.identifier.is_identity
                        else self.state.users[payload.username].identity_key)
            if tx.submitter != expected:
                raise NotOwner("registration not submitted by the registrant key")
            return payload
        rec = self._active_record(payload.identifier, now)
        if rec is None:
            self.lookup(payload.identifier, now)  # raises the precise reason
            raise NotFound(str(payload.identifier))
        if tx.submitter != rec.owner_key:
            raise NotOwner(f"{payload.identifier} is not owned by the submitter")
        if tx.op_kind == OpKind.EXTEND_VALIDITY and payload.delta <= 0:
            raise InvalidPayload("extension must be positive")
        if tx.op_kind == OpKind.TRANSFER_OWNERSHIP:
            if payload.identifier.is_identity:
                raise InvalidPayload("identity identifiers cannot be transferred")
            recipient = self.active_identity(payload.recipient_username, now)
            if recipient is None or recipient.identity_key != payload.recipient_key:
                raise NoIdentity(f"recipient {payload.recipient_username!r} has no matching identity")
        return payload

    def tx_ok(self, tx: Transaction, now: float) -> bool:
        try:
            self.check_tx(tx, now)
        except RegistryError:
            return False
        return True

    # -- mutation ----------------------------------------------------------

    def bootstrap_identity(self, username: str, identity: Identifier, key: bytes,
                           expires_at: float = float("inf")) -> IdentifierRecord:
        """Seed a reserved user (e.g. DNS cache owners) into genesis state."""
        rec = IdentifierRecord(identity, username, key, metadata_address(username, identity),
                               None, 0.0, expires_at)
        self._insert(rec, now=0.0)
        return rec

    def _insert(self, rec: IdentifierRecord, now: float) -> None:
        key = format_identifier(rec.identifier)
        if rec.identifier.is_identity:
            self.state.users[rec.owner_username] = UserEntry(
                rec.owner_username, rec.identifier, rec.owner_key, now)
        old = self.state.index.get(key)
        if old is not None and old.status == RecordStatus.ACTIVE:
            old.status = RecordStatus.EXPIRED
        self.state.tables.setdefault(rec.owner_username, []).append(rec)
        self.state.index[key] = rec
        if rec.expires_at != float("inf"):
            heapq.heappush(self._expiry, (rec.expires_at, key))

    def _sweep(self, now: float) -> None:
        while self._expiry and self._expiry[0][0] <= now:
            when, key = heapq.heappop(self._expiry)
            rec = self.state.index.get(key)
            if rec is not None and rec.status == RecordStatus.ACTIVE and rec.expires_at <= now:
                rec.status = RecordStatus.EXPIRED

    def apply_block(self, block: Block) -> BlockDelta:
        now = block.header.timestamp
        delta = BlockDelta(block.height)
        self._sweep(now)
        txs = list(block.transactions)
        candidates = []
        for tx in txs:
            if tx.op_kind != OpKind.REGISTER:
                continue
            try:
                candidates.append((tx, self.check_tx(tx, now)))
            except RegistryError:
                pass
        _, losers = resolve_conflicts(candidates)
        lost = {tx.tx_id for tx in losers}
        for tx in txs:
            try:
                if tx.tx_id in lost:
                    raise ConflictLost("outbid by a competing registration")
                payload = self.check_tx(tx, now)
                self._apply(tx, payload, now, delta)
            except RegistryError as exc:
                delta.rejected.append((tx.tx_id, exc.code))
                self.audit.append({"height": block.height, "tx_id": tx.tx_id.hex(),
                                   "op": tx.op_kind.name.lower(), "result": "rejected",
                                   "reason": exc.code, "detail": str(exc)})
            else:
                delta.applied.append((tx.tx_id, tx.op_kind.name.lower()))
                self.audit.append({"height": block.height, "tx_id": tx.tx_id.hex(),
                                   "op": tx.op_kind.name.lower(), "result": "applied"})
        return delta

    def _apply(self, tx: Transaction, payload, now: float, delta: BlockDelta) -> None:
        if tx.op_kind == OpKind.REGISTER:
            req: RegistrationRequest = payload
            rec = IdentifierRecord(req.identifier, req.username, tx.submitter, req.metadata_addr,
                                   req.digest, now, now + req.ttl)
            self._insert(rec, now)
            if req.about_me is not None:
                delta.about_me.append((req.username, req.identifier, req.about_me))
            return
        rec = self.state.index[format_identifier(payload.identifier)]
        if tx.op_kind == OpKind.UPDATE:
            rec.digest = payload.digest
            if payload.metadata_addr is not None:
                rec.metadata_addr = payload.metadata_addr
        elif tx.op_kind == OpKind.REVOKE:
            rec.status = RecordStatus.REVOKED
        elif tx.op_kind == OpKind.EXTEND_VALIDITY:
            rec.expires_at += payload.delta
            heapq.heappush(self._expiry, (rec.expires_at, format_identifier(rec.identifier)))
        elif tx.op_kind == OpKind.TRANSFER_OWNERSHIP:
            old = self.state.tables[rec.owner_username]
            old[:] = [r for r in old if r is not rec]
            rec.owner_username = payload.recipient_username
            rec.owner_key = payload.recipient_key
            rec.metadata_addr = metadata_address(rec.owner_username, rec.identifier)
            self.state.tables.setdefault(rec.owner_username, []).append(rec)

    # -- export ------------------------------------------------------------

    def export_state(self) -> bytes:
        doc = {
            "users": {
                u: {"identity": format_identifier(e.identity), "identity_key": e.identity_key.hex(),
                    "created_at": e.created_at}
                for u, e in self.state.users.items()
            },
            "tables": {u: [r.to_json() for r in recs] for u, recs in self.state.tables.items()},
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=True).encode()

    @classmethod
    def import_state(cls, data: bytes) -> "Registry":
        doc = json.loads(data)
        reg = cls()
        for u, e in doc["users"].items():
            reg.state.users[u] = UserEntry(u, parse_identifier(e["identity"]),
                                           bytes.fromhex(e["identity_key"]), e["created_at"])
        for u, recs in doc["tables"].items():
            for d in recs:
                rec = IdentifierRecord.from_json(d)
                reg.state.tables.setdefault(u, []).append(rec)
                key = format_identifier(rec.identifier)
                cur = reg.state.index.get(key)
                if cur is None or rec.registered_at >= cur.registered_at:
                    reg.state.index[key] = rec
                if rec.status == RecordStatus.ACTIVE and rec.expires_at != float("inf"):
                    heapq.heappush(reg._expiry, (rec.expires_at, key))
        return reg

    def write_audit(self, path) -> None:
        with open(path, "w") as fh:
            for entry in self.audit:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")


def iter_identifiers(records: Iterable[IdentifierRecord]) -> list[str]:
    return [format_identifier(r.identifier) for r in records]
