"""Typed identifiers, node descriptors and identifier spaces.

An identifier is the pair ``(type code, name)`` written canonically as
``type<code>:<name>``. An identifier space is a set of types (always
including identity) together with every node that owns all of them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from itertools import combinations
from typing import Iterable, Mapping

MAX_NAME_BYTES = 1024


class IdentifierType(IntEnum):
    IDENTITY = 0
    CONTENT = 1
    SERVICE = 2
    GEO_LOCATION = 3
    HYPERBOLIC = 4
    IPV4 = 5
    DOMAIN = 6


DEFAULT_LABELS: dict[int, str] = {
    0: "identity",
    1: "content",
    2: "service",
    3: "geo-location",
    4: "hyperbolic coordinate",
    5: "IPv4 address",
    6: "domain name",
}


class IdentifierError(ValueError):
    pass


class MissingSeparator(IdentifierError):
    pass


class UnknownType(IdentifierError):
    pass


class EmptyName(IdentifierError):
    pass


class MalformedName(IdentifierError):
    pass


class Oversize(IdentifierError):
    pass


class NodeMissingIdentity(IdentifierError):
    pass


class TypeRegistry:
    """Maps type codes to labels. Extensible; code 0 is always identity."""

    def __init__(self, labels: Mapping[int, str] | None = None) -> None:
        labels = dict(DEFAULT_LABELS if labels is None else labels)
        if labels.get(0) is None:
            raise ValueError("type registry must define identity (code 0)")
        if any(code < 0 for code in labels):
            raise ValueError("type codes are non-negative")
        if len(set(labels.values())) != len(labels):
            raise ValueError("each type code needs its own label")
        self._labels = labels

    def __contains__(self, code: object) -> bool:
        return code in self._labels

    def label(self, code: int) -> str:
        try:
            return self._labels[code]
        except KeyError:
            raise UnknownType(f"type code {code} is not registered") from None

    @property
    def codes(self) -> tuple[int, ...]:
        return tuple(sorted(self._labels))


DEFAULT_REGISTRY = TypeRegistry()


@dataclass(frozen=True, order=True)
class Identifier:
    itype: int
    name: str

    def __post_init__(self) -> None:
        _check_name(self.name)

    def __str__(self) -> str:
        return format_identifier(self)

    @property
    def is_identity(self) -> bool:
        return self.itype == IdentifierType.IDENTITY


def _check_name(name: str) -> None:
    if not name or not name.strip():
        raise EmptyName("identifier name is empty")
    if name != name.strip():
        raise MalformedName(f"identifier name has surrounding whitespace: {name!r}")
    if len(name.encode("utf-8")) > MAX_NAME_BYTES:
        raise Oversize(f"identifier name exceeds {MAX_NAME_BYTES} bytes")


def format_identifier(ident: Identifier) -> str:
    return f"type{int(ident.itype)}:{ident.name}"


def parse_identifier(text: str, registry: TypeRegistry = DEFAULT_REGISTRY) -> Identifier:
    """Parse ``type<code>:<name>``.

    Only the first ``:`` separates type from name, so names may contain
    colons themselves.
    """
    prefix, sep, name = text.partition(":")
    if not sep:
        raise MissingSeparator(f"no ':' in {text!r}")
    if not prefix.startswith("type") or not prefix[4:].isdigit():
        raise UnknownType(f"malformed type prefix {prefix!r}")
    code = int(prefix[4:])
    if code not in registry:
        raise UnknownType(f"type code {code} is not registered")
    return Identifier(code, name)


@dataclass(frozen=True)
class NodeDescriptor:
    node_id: str
    owned_types: frozenset[int] = field(default_factory=lambda: frozenset({0}))

    def __post_init__(self) -> None:
        object.__setattr__(self, "owned_types", frozenset(self.owned_types))


@dataclass(frozen=True)
class IdentifierSpace:
    type_set: frozenset[int]
    members: frozenset[str]

    @property
    def label(self) -> str:
        return "C{" + ",".join(str(c) for c in sorted(self.type_set)) + "}"


def space_contains(space: IdentifierSpace, node: NodeDescriptor) -> bool:
    return space.type_set <= node.owned_types


def derive_spaces(
    universe: Iterable[NodeDescriptor],
    registry: TypeRegistry = DEFAULT_REGISTRY,
) -> list[IdentifierSpace]:
    """Every non-empty identifier space the universe supports.

    Enumerates type sets that contain identity, drawn from the types some
    node actually owns. Output is ordered by (size, sorted codes).
    """
    nodes = list(universe)
    for node in nodes:
        if IdentifierType.IDENTITY not in node.owned_types:
            raise NodeMissingIdentity(f"node {node.node_id} does not own identity")
        unknown = [c for c in node.owned_types if c not in registry]
        if unknown:
            raise UnknownType(f"node {node.node_id} owns unregistered types {sorted(unknown)}")

    present = sorted({c for node in nodes for c in node.owned_types} - {0})
    spaces = []
    for k in range(len(present) + 1):
        for extra in combinations(present, k):
            type_set = frozenset((0, *extra))
            members = frozenset(n.node_id for n in nodes if type_set <= n.owned_types)
            if members:
                spaces.append(IdentifierSpace(type_set, members))
    return spaces
