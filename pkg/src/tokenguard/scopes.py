"""Hierarchical scopes.

Edges point from a broad scope to the specific scopes it implies, e.g.
``orders:admin -> write:orders -> read:orders``.  The graph is a DAG; a
scope may be implied by several broader ones.  Tokens carry the minimized
grant and checks expand it on demand.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

from .errors import CycleDetected, DuplicateScope, UnknownImplied, UnknownScope

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScopeNode:
    name: str
    implies: frozenset[str] = frozenset()
    deprecated: bool = False
    description: str = ""


@dataclass(frozen=True)
class _Snapshot:
    nodes: Mapping[str, ScopeNode] = field(default_factory=dict)
    closures: dict[str, frozenset[str]] = field(default_factory=dict)


class ScopeGraph:
    """Mutations are serialized and publish a new immutable snapshot;
    reads work on whichever snapshot was current when they started."""

    def __init__(self, on_deprecated: Callable[[str], None] | None = None) -> None:
        self._snap = _Snapshot()
        self._lock = threading.Lock()
        self.on_deprecated = on_deprecated

    @classmethod
    def from_config(cls, entries: Iterable[Mapping], **kwargs) -> "ScopeGraph":
        """Build from ``[{name, implies, deprecated}]``, in any order."""
        graph = cls(**kwargs)
        graph.load(entries)
        return graph

    def load(self, entries: Iterable[Mapping]) -> None:
        pending = [dict(e) for e in entries]
        # define dependencies first; entries whose implied scopes are still missing wait
        while pending:
            progress = False
            for entry in list(pending):
                implies = set(entry.get("implies", ()))
                if implies <= set(self.names()):
                    self.define_scope(entry["name"], implies, description=entry.get("description", ""))
                    if entry.get("deprecated"):
                        self.deprecate_scope(entry["name"])
                    pending.remove(entry)
                    progress = True
            if not progress:
                entry = pending[0]
                missing = set(entry.get("implies", ())) - set(self.names()) - {e["name"] for e in pending}
                if missing:
                    raise UnknownImplied(", ".join(sorted(missing)))
                raise CycleDetected(entry["name"])

    def to_config(self) -> list[dict]:
        return [
            {"name": n.name, "implies": sorted(n.implies), "deprecated": n.deprecated, "description": n.description}
            for n in sorted(self._snap.nodes.values(), key=lambda n: n.name)
        ]

    # -- mutation -----------------------------------------------------------

    def define_scope(self, name: str, implies: Iterable[str] = (), *, description: str = "") -> "ScopeGraph":
        implies = frozenset(implies)
        if not name or not name.strip() or any(c.isspace() for c in name):
            raise ValueError("scope names must be non-empty and contain no whitespace")
        with self._lock:
            nodes = self._snap.nodes
            if name in implies:
                raise CycleDetected(name)
            if name in nodes:
                raise DuplicateScope(name)
            unknown = implies - nodes.keys()
            if unknown:
                raise UnknownImplied(", ".join(sorted(unknown)))
            # a fresh node has no incoming edges, so it cannot close a cycle
            new_nodes = dict(nodes)
            new_nodes[name] = ScopeNode(name, implies, False, description)
            self._publish(new_nodes)
        return self

    def add_implication(self, broad: str, specific: str) -> "ScopeGraph":
        with self._lock:
            nodes = self._snap.nodes
            for n in (broad, specific):
                if n not in nodes:
                    raise UnknownScope(n)
            if broad == specific or broad in self._closure(specific, nodes):
                raise CycleDetected(f"{broad} -> {specific}")
            new_nodes = dict(nodes)
            old = nodes[broad]
            new_nodes[broad] = ScopeNode(old.name, old.implies | {specific}, old.deprecated, old.description)
            self._publish(new_nodes)
        return self

    def deprecate_scope(self, name: str) -> "ScopeGraph":
        with self._lock:
            nodes = self._snap.nodes
            if name not in nodes:
                raise UnknownScope(name)
            old = nodes[name]
            new_nodes = dict(nodes)
            new_nodes[name] = ScopeNode(old.name, old.implies, True, old.description)
            self._publish(new_nodes)
        logger.info("scope %s deprecated", name)
        return self

    def _publish(self, nodes: dict[str, ScopeNode]) -> None:
        self._snap = _Snapshot(nodes)

    # -- queries ------------------------------------------------------------

    def names(self) -> frozenset[str]:
        return frozenset(self._snap.nodes)

    def node(self, name: str) -> ScopeNode:
        try:
            return self._snap.nodes[name]
        except KeyError:
            raise UnknownScope(name) from None

    def active_names(self) -> frozenset[str]:
        return frozenset(n for n, node in self._snap.nodes.items() if not node.deprecated)

    def is_deprecated(self, name: str) -> bool:
        return self.node(name).deprecated

    def expand_scopes(self, granted: Iterable[str]) -> frozenset[str]:
        """``granted`` plus everything it transitively implies."""
        snap = self._snap
        cache = snap.closures
        out: set[str] = set()
        for name in granted:
            if name not in snap.nodes:
                raise UnknownScope(name)
            closure = cache.get(name)
            if closure is None:
                closure = self._closure(name, snap.nodes)
                cache[name] = closure
            out |= closure
        return frozenset(out)

    def is_satisfied(self, required: Iterable[str], granted: Iterable[str]) -> bool:
        required = set(required)
        for name in required:
            if name not in self._snap.nodes:
                raise UnknownScope(name)
        return required <= self.expand_scopes(granted)

    def minimize_grant(self, requested: Iterable[str], allowed: Iterable[str]) -> frozenset[str]:
        """Least-privilege grant: the irredundant, non-deprecated part of
        ``requested`` that ``allowed`` covers."""
        requested = set(requested)
        nodes = self._snap.nodes
        for name in requested:
            if name not in nodes:
                raise UnknownScope(name)
        candidates = requested & self.expand_scopes(allowed)
        for name in sorted(candidates):
            if nodes[name].deprecated:
                candidates.discard(name)
                logger.warning("deprecated scope %s excluded from grant", name)
                if self.on_deprecated is not None:
                    self.on_deprecated(name)
        closures = {name: self.expand_scopes([name]) - {name} for name in candidates}
        return frozenset(
            name for name in candidates
            if not any(name in closures[other] for other in candidates if other != name)
        )

    @staticmethod
    def _closure(name: str, nodes: Mapping[str, ScopeNode]) -> frozenset[str]:
        seen = {name}
        stack = [name]
        while stack:
            for nxt in nodes[stack.pop()].implies:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return frozenset(seen)
