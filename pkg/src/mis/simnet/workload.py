"""Client workload: Poisson request arrivals and per-transaction accounting.

Clients only build operations on identifiers they have seen committed, so
every generated transaction is valid when it is created. A transaction can
still lose an in-block auction or be overtaken by another operation; those
end up explicitly rejected rather than silently lost.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from ..consensus import Block, Transaction
from ..crypto import KeyPair, SignatureScheme
from ..identifiers import Identifier, IdentifierType, parse_identifier
from ..registry import (
    BlockDelta,
    build_request,
    decode_payload,
    extend_tx,
    identity_for_key,
    register_tx,
    revoke_tx,
    transfer_tx,
    update_tx,
)
from .config import WorkloadSpec


@dataclass
class TxRecord:
    op: str
    submitted_at: float
    status: str = "pending"
    reason: str = ""
    height: int | None = None


@dataclass
class ClientUser:
    username: str
    key: KeyPair
    identity: Identifier
    active: bool = False


class _Bag:
    """List with O(1) removal by key and deterministic random choice."""

    def __init__(self) -> None:
        self.items: list[str] = []
        self.pos: dict[str, int] = {}

    def add(self, key: str) -> None:
        if key not in self.pos:
            self.pos[key] = len(self.items)
            self.items.append(key)

    def discard(self, key: str) -> None:
        i = self.pos.pop(key, None)
        if i is None:
            return
        last = self.items.pop()
        if i < len(self.items):
            self.items[i] = last
            self.pos[last] = i

    def choice(self, rng: random.Random) -> str | None:
        return self.items[rng.randrange(len(self.items))] if self.items else None

    def __len__(self) -> int:
        return len(self.items)


def _type_name(itype: int, n: int, rng: random.Random) -> str:
    if itype == IdentifierType.CONTENT:
        return f"/sub{rng.randrange(100)}/{n:07d}.mp4"
    if itype == IdentifierType.SERVICE:
        return f"/sub{rng.randrange(100)}/svc{n:07d}"
    if itype == IdentifierType.GEO_LOCATION:
        return f"{rng.uniform(-90, 90):.5f},{rng.uniform(-180, 180):.5f},{n}"
    if itype == IdentifierType.HYPERBOLIC:
        return f"{rng.uniform(0, 20):.4f},{rng.uniform(0, 6.283):.4f},{n}"
    if itype == IdentifierType.IPV4:
        return f"10.{(n >> 16) & 255}.{(n >> 8) & 255}.{n & 255}"
    return f"site{n:07d}.example"


class Workload:
    def __init__(self, spec: WorkloadSpec, seed: int, scheme: SignatureScheme) -> None:
        self.spec = spec
        self.rng = random.Random(seed)
        self.scheme = scheme
        self.users: list[ClientUser] = []
        self.active_users = _Bag()
        self.by_name: dict[str, ClientUser] = {}
        self._key_index: dict[bytes, ClientUser] = {}
        self.owned = _Bag()  # committed non-identity identifiers, by canonical text
        self.owner: dict[str, str] = {}
        self.busy: set[str] = set()
        self.records: dict[bytes, TxRecord] = {}
        self.inflight: dict[bytes, tuple[str, str]] = {}
        self._counter = 0
        self._ops = [op for op, _ in spec.mix]
        self._op_w = [w for _, w in spec.mix]
        self._types = [t for t, _ in spec.type_weights]
        self._type_w = [w for _, w in spec.type_weights]
        self.resolves = 0

    # -- arrivals -----------------------------------------------------------

    def next_gap_ms(self) -> float:
        if self.spec.request_rate <= 0:
            return float("inf")
        return self.rng.expovariate(self.spec.request_rate / 1000.0)

    def _new_user(self) -> ClientUser:
        idx = len(self.users)
        key = self.scheme.keygen(f"user-{idx}-{self.rng.getrandbits(64)}".encode())
        user = ClientUser(f"user{idx:06d}", key, identity_for_key(key.public))
        self.users.append(user)
        self.by_name[user.username] = user
        self._key_index[key.public] = user
        return user

    def _fee(self) -> float:
        return round(self.rng.uniform(0.0, self.spec.max_fee), 3)

    def _track(self, tx: Transaction, op: str, now: float, subject: str) -> Transaction:
        self.records[tx.tx_id] = TxRecord(op, now)
        self.inflight[tx.tx_id] = (op, subject)
        if subject:
            self.busy.add(subject)
        return tx

    def register_identity(self, now: float) -> Transaction:
        user = self._new_user()
        req = build_request(user.username, user.identity, user.key, self.spec.ttl_s, self._fee(), now)
        return self._track(register_tx(req, user.key), "register", now, "")

    def register_other(self, now: float, itype: int | None = None) -> Transaction | None:
        name = self.active_users.choice(self.rng)
        if name is None:
            return None
        user = self.by_name[name]
        itype = itype if itype is not None else self.rng.choices(self._types, self._type_w)[0]
        self._counter += 1
        ident = Identifier(itype, _type_name(itype, self._counter, self.rng))
        req = build_request(user.username, ident, user.key, self.spec.ttl_s, self._fee(), now)
        return self._track(register_tx(req, user.key), "register", now, str(ident))

    def _pick_owned(self) -> tuple[str, ClientUser] | None:
        for _ in range(8):
            key = self.owned.choice(self.rng)
            if key is None:
                return None
            if key not in self.busy:
                return key, self.by_name[self.owner[key]]
        return None

    def make(self, now: float) -> tuple[str, Transaction | None, Identifier | None]:
        """One client request: (op, transaction or None, identifier to resolve or None)."""
        op = self.rng.choices(self._ops, self._op_w)[0]
        if op == "resolve":
            key = self.owned.choice(self.rng)
            if key is not None:
                self.resolves += 1
                return op, None, parse_identifier(key)
            op = "register"
        if op != "register":
            picked = self._pick_owned()
            if picked is not None:
                key, user = picked
                ident = parse_identifier(key)
                fee = self._fee()
                if op == "update":
                    digest = self.rng.getrandbits(256).to_bytes(32, "big")
                    tx = update_tx(ident, digest, user.key, now, fee)
                elif op == "revoke":
                    tx = revoke_tx(ident, user.key, now, fee)
                elif op == "extend":
                    tx = extend_tx(ident, 3600, user.key, now, fee)
                else:
                    name = self.active_users.choice(self.rng)
                    target = self.by_name[name] if name else None
                    if target is None or target is user:
                        op, tx = "extend", extend_tx(ident, 3600, user.key, now, fee)
                    else:
                        tx = transfer_tx(ident, target.username, target.key.public, user.key, now, fee)
                return op, self._track(tx, op, now, key), None
            op = "register"
        # new users while few exist, otherwise mostly new identifiers for existing users
        if len(self.active_users) < 8 or self.rng.random() < 0.3:
            return "register", self.register_identity(now), None
        tx = self.register_other(now)
        return "register", tx if tx is not None else self.register_identity(now), None

    # -- accounting -----------------------------------------------------------

    def reject(self, tx_id: bytes, reason: str) -> None:
        self._settle(tx_id, "rejected", reason, None)

    def _settle(self, tx_id: bytes, status: str, reason: str, height: int | None) -> None:
        rec = self.records.get(tx_id)
        if rec is None or rec.status != "pending":
            return
        rec.status, rec.reason, rec.height = status, reason, height
        op, subject = self.inflight.pop(tx_id, ("", ""))
        if subject:
            self.busy.discard(subject)

    def observe_block(self, block: Block, delta: BlockDelta) -> None:
        """Update the client view from a committed block (reference node)."""
        txs = {tx.tx_id: tx for tx in block.transactions}
        for tx_id, reason in delta.rejected:
            self._settle(tx_id, "rejected", reason, block.height)
        for tx_id, _ in delta.applied:
            info = self.inflight.get(tx_id)
            self._settle(tx_id, "committed", "", block.height)
            if info is None:
                continue
            op, subject = info
            tx = txs[tx_id]
            if op == "register" and not subject:
                user = self._key_index.get(tx.submitter)
                if user is not None:
                    user.active = True
                    self.active_users.add(user.username)
            elif op == "register":
                self.owned.add(subject)
                self.owner[subject] = self._key_index[tx.submitter].username
            elif op == "revoke":
                self.owned.discard(subject)
                self.owner.pop(subject, None)
            elif op == "transfer":
                self.owner[subject] = decode_payload(tx).recipient_username

    def counts(self) -> dict[str, int]:
        out = {"submitted": len(self.records), "committed": 0, "rejected": 0, "pending": 0}
        for rec in self.records.values():
            out[rec.status] += 1
        out["resolves"] = self.resolves
        return out

    def rejection_reasons(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for rec in self.records.values():
            if rec.status == "rejected":
                out[rec.reason] = out.get(rec.reason, 0) + 1
        return dict(sorted(out.items()))
