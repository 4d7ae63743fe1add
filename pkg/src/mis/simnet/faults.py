"""Per-node fault behaviours for the simulator."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Mapping


class UnknownNode(KeyError):
    pass


class Kind(str, Enum):
    HONEST = "honest"
    CRASH = "crash"
    SILENT_VOTER = "silent_voter"
    EQUIVOCATING_BOOKKEEPER = "equivocating_bookkeeper"
    CORRUPT_STORAGE = "corrupt_storage"
    DELAYED = "delayed"


@dataclass(frozen=True)
class Behavior:
    kind: Kind = Kind.HONEST
    at_round: int = 0
    when_aggregator: bool = False
    heights: frozenset[int] = frozenset()
    delay_ms: float = 0.0

    @classmethod
    def honest(cls) -> "Behavior":
        return cls()

    @classmethod
    def crash(cls, at_round: int = 1, when_aggregator: bool = False) -> "Behavior":
        """Stop at ``at_round``; with ``when_aggregator`` the node first stops at the
        moment it would emit a commit, on or after that round."""
        return cls(Kind.CRASH, at_round=at_round, when_aggregator=when_aggregator)

    @classmethod
    def silent_voter(cls) -> "Behavior":
        return cls(Kind.SILENT_VOTER)

    @classmethod
    def equivocating_bookkeeper(cls) -> "Behavior":
        return cls(Kind.EQUIVOCATING_BOOKKEEPER)

    @classmethod
    def corrupt_storage(cls, heights: Iterable[int]) -> "Behavior":
        return cls(Kind.CORRUPT_STORAGE, heights=frozenset(heights))

    @classmethod
    def delayed(cls, ms: float) -> "Behavior":
        if ms < 0:
            raise ValueError("delay must be non-negative")
        return cls(Kind.DELAYED, delay_ms=ms)

    @property
    def byzantine(self) -> bool:
        """Everything except honest and merely slow nodes."""
        return self.kind not in (Kind.HONEST, Kind.DELAYED)

    def to_json(self) -> dict:
        d: dict[str, Any] = {"behavior": self.kind.value}
        if self.kind == Kind.CRASH:
            d["at_round"] = self.at_round
            d["when_aggregator"] = self.when_aggregator
        elif self.kind == Kind.CORRUPT_STORAGE:
            d["heights"] = sorted(self.heights)
        elif self.kind == Kind.DELAYED:
            d["delay_ms"] = self.delay_ms
        return d

    @classmethod
    def from_json(cls, d: Mapping[str, Any]) -> "Behavior":
        kind = Kind(d["behavior"])
        if kind == Kind.CRASH:
            return cls.crash(int(d.get("at_round", 1)), bool(d.get("when_aggregator", False)))
        if kind == Kind.CORRUPT_STORAGE:
            return cls.corrupt_storage(int(h) for h in d.get("heights", ()))
        if kind == Kind.DELAYED:
            return cls.delayed(float(d.get("delay_ms", 0.0)))
        return cls(kind)


@dataclass(frozen=True)
class FaultPlan:
    behaviors: tuple[tuple[str, Behavior], ...] = ()
    label: str = ""

    def behavior(self, node_id: str) -> Behavior:
        for node, b in self.behaviors:
            if node == node_id:
                return b
        return Behavior()

    def nodes(self) -> list[str]:
        return [node for node, _ in self.behaviors]

    def byzantine_nodes(self) -> list[str]:
        return [node for node, b in self.behaviors if b.byzantine]

    def with_behavior(self, node_id: str, behavior: Behavior) -> "FaultPlan":
        rest = tuple((n, b) for n, b in self.behaviors if n != node_id)
        if behavior.kind == Kind.HONEST:
            return replace(self, behaviors=rest)
        return replace(self, behaviors=rest + ((node_id, behavior),))

    def to_json(self) -> list[dict]:
        return [{"node": n, **b.to_json()} for n, b in self.behaviors]

    @classmethod
    def from_json(cls, items: Iterable[Mapping[str, Any]]) -> "FaultPlan":
        plan = cls()
        for item in items:
            plan = plan.with_behavior(str(item["node"]), Behavior.from_json(item))
        return plan


def inject(plan: FaultPlan, node: str, behavior: Behavior,
           known_nodes: Iterable[str] | None = None) -> FaultPlan:
    """Return ``plan`` with ``node`` switched to ``behavior``."""
    if known_nodes is not None and node not in list(known_nodes):
        raise UnknownNode(node)
    return plan.with_behavior(node, behavior)
