"""Token, user, app and system-wide revocation with mergeable digests.

A :class:`RevocationDigest` is an exact, versioned summary that verifiers
pull instead of calling introspection per request.  Merging is a join
(union of ids, max of cutoffs and versions), so replicas converge in any
order and a merge can never un-revoke anything.

Cutoffs are inclusive: a token with ``iat <= cutoff`` is dead.
"""

from __future__ import annotations

import enum
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

from .errors import InvalidSubject, RevocationStale
from .persistence import MemoryBackend

logger = logging.getLogger(__name__)

DEFAULT_MAX_STALENESS = 60
DIGEST_BUDGET_BYTES = 1 << 20

_LOG = "revocations"


class RevocationKind(str, enum.Enum):
    TOKEN = "token"
    USER = "user"
    APP = "app"
    SYSTEM = "system"


class Freshness(str, enum.Enum):
    FRESH = "fresh"
    STALE = "stale"


@dataclass(frozen=True)
class RevocationEntry:
    kind: RevocationKind
    subject: str
    cutoff_iat: int
    recorded_at: int
    reason: str = ""

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "subject": self.subject, "cutoff_iat": self.cutoff_iat,
                "recorded_at": self.recorded_at, "reason": self.reason}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "RevocationEntry":
        return cls(RevocationKind(doc["kind"]), doc["subject"], doc["cutoff_iat"], doc["recorded_at"],
                   doc.get("reason", ""))


@dataclass(frozen=True)
class RevocationDigest:
    version: int = 0
    token_ids: frozenset[str] = frozenset()
    user_cutoffs: Mapping[str, int] = field(default_factory=dict)
    app_cutoffs: Mapping[str, int] = field(default_factory=dict)
    global_cutoff: int | None = None
    produced_at: int = 0

    def to_dict(self) -> dict:
        doc = {
            "version": self.version,
            "produced_at": self.produced_at,
            "token_ids": sorted(self.token_ids),
            "user_cutoffs": dict(sorted(self.user_cutoffs.items())),
            "app_cutoffs": dict(sorted(self.app_cutoffs.items())),
        }
        if self.global_cutoff is not None:
            doc["global_cutoff"] = self.global_cutoff
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, doc: Mapping) -> "RevocationDigest":
        return cls(
            version=int(doc["version"]),
            token_ids=frozenset(doc.get("token_ids", ())),
            user_cutoffs={str(k): int(v) for k, v in doc.get("user_cutoffs", {}).items()},
            app_cutoffs={str(k): int(v) for k, v in doc.get("app_cutoffs", {}).items()},
            global_cutoff=doc.get("global_cutoff"),
            produced_at=int(doc.get("produced_at", 0)),
        )


def is_revoked(claims, token_id: str | None, digest: RevocationDigest) -> bool:
    token_id = token_id if token_id is not None else claims.jti
    if token_id is not None and token_id in digest.token_ids:
        return True
    cutoff = digest.user_cutoffs.get(claims.sub)
    if cutoff is not None and claims.iat <= cutoff:
        return True
    cutoff = digest.app_cutoffs.get(claims.app_id)
    if cutoff is not None and claims.iat <= cutoff:
        return True
    return digest.global_cutoff is not None and claims.iat <= digest.global_cutoff


def _max_merge(a: Mapping[str, int], b: Mapping[str, int]) -> dict[str, int]:
    out = dict(a)
    for k, v in b.items():
        if k not in out or v > out[k]:
            out[k] = v
    return out


def merge_digest(local: RevocationDigest, remote: RevocationDigest) -> RevocationDigest:
    if local.global_cutoff is None:
        global_cutoff = remote.global_cutoff
    elif remote.global_cutoff is None:
        global_cutoff = local.global_cutoff
    else:
        global_cutoff = max(local.global_cutoff, remote.global_cutoff)
    return RevocationDigest(
        version=max(local.version, remote.version),
        token_ids=local.token_ids | remote.token_ids,
        user_cutoffs=_max_merge(local.user_cutoffs, remote.user_cutoffs),
        app_cutoffs=_max_merge(local.app_cutoffs, remote.app_cutoffs),
        global_cutoff=global_cutoff,
        produced_at=max(local.produced_at, remote.produced_at),
    )


def enforce_staleness(digest: RevocationDigest, now: int, max_staleness_seconds: int) -> Freshness:
    return Freshness.STALE if now - digest.produced_at > max_staleness_seconds else Freshness.FRESH


def digest_check(
    digest: RevocationDigest,
    now: int,
    max_staleness_seconds: int = DEFAULT_MAX_STALENESS,
    *,
    fail_safe: bool = True,
    fallback: Callable[[object], bool] | None = None,
) -> Callable[[object], bool]:
    """Revocation predicate for :func:`verify_token` backed by a synced digest.

    While the digest is stale the predicate either defers to ``fallback``
    (typically synchronous introspection) or, in fail-safe mode, rejects
    everything with :class:`RevocationStale`.
    """
    stale = enforce_staleness(digest, now, max_staleness_seconds) is Freshness.STALE

    def check(claims) -> bool:
        if stale:
            if fallback is not None:
                return fallback(claims)
            if fail_safe:
                raise RevocationStale(f"digest v{digest.version} produced_at={digest.produced_at}")
        return is_revoked(claims, None, digest)

    return check


class RevocationRegistry:
    """Authoritative revocation log.

    Every effective revocation appends to the log and bumps the version.
    Repeating a revocation that changes nothing is a no-op for the digest
    (hooks and audit still run).  Hooks run synchronously before
    :meth:`revoke` returns so caches are already purged.
    """

    def __init__(self, backend: MemoryBackend | None = None, *, audit=None,
                 clock: Callable[[], float] | None = None) -> None:
        self.backend = backend if backend is not None else MemoryBackend()
        self.audit = audit
        self.clock = clock or time.time
        self.hooks: list[Callable[[RevocationEntry], None]] = []
        self._lock = threading.RLock()
        self._token_ids: dict[str, int] = {}
        self._users: dict[str, int] = {}
        self._apps: dict[str, int] = {}
        self._global: int | None = None
        self._version = 0
        self._cached: RevocationDigest | None = None
        for record in self.backend.read_log(_LOG):
            if "gc" in record:
                self._gc(record["gc"], record["max_lifetime"])
                self._version += 1
            else:
                self._apply(RevocationEntry.from_dict(record))

    @property
    def version(self) -> int:
        return self._version

    def add_hook(self, hook: Callable[[RevocationEntry], None]) -> None:
        self.hooks.append(hook)

    def revoke(self, kind: RevocationKind | str, subject: str, cutoff_iat: int | None = None,
               reason: str = "", now: int | None = None) -> RevocationEntry:
        kind = RevocationKind(kind)
        now = int(self.clock()) if now is None else int(now)
        cutoff = now if cutoff_iat is None else int(cutoff_iat)
        if not isinstance(subject, str) or not subject or subject != subject.strip():
            raise InvalidSubject(repr(subject))
        if (kind is RevocationKind.SYSTEM) != (subject == "*"):
            raise InvalidSubject("system revocations take subject '*' and only those")
        if cutoff > now:
            raise InvalidSubject("cutoff_iat may not be in the future")
        entry = RevocationEntry(kind, subject, cutoff, now, reason)
        with self._lock:
            if self._apply(entry):
                self.backend.append(_LOG, entry.to_dict())
            for hook in self.hooks:
                hook(entry)
            if self.audit is not None:
                self.audit.record_event(
                    "revoke", timestamp=now,
                    token_id=subject if kind is RevocationKind.TOKEN else None,
                    user_id=subject if kind is RevocationKind.USER else None,
                    client_id=subject if kind is RevocationKind.APP else None,
                    reason=reason or None,
                    detail={"kind": kind.value, "cutoff_iat": cutoff},
                )
        logger.info("revoked %s %s cutoff=%s (%s)", kind.value, subject, cutoff, reason)
        return entry

    def _apply(self, entry: RevocationEntry) -> bool:
        """Fold ``entry`` into the state; False when it changes nothing."""
        if entry.kind is RevocationKind.TOKEN:
            if entry.subject in self._token_ids:
                return False
            self._token_ids[entry.subject] = entry.recorded_at
        elif entry.kind is RevocationKind.SYSTEM:
            if self._global is not None and entry.cutoff_iat <= self._global:
                return False
            self._global = entry.cutoff_iat
        else:
            table = self._users if entry.kind is RevocationKind.USER else self._apps
            if entry.subject in table and entry.cutoff_iat <= table[entry.subject]:
                return False
            table[entry.subject] = entry.cutoff_iat
        self._version += 1
        self._cached = None
        return True

    def build_digest(self, now: int | None = None) -> RevocationDigest:
        produced_at = int(self.clock()) if now is None else int(now)
        with self._lock:
            if self._cached is None:
                self._cached = RevocationDigest(
                    version=self._version,
                    token_ids=frozenset(self._token_ids),
                    user_cutoffs=dict(self._users),
                    app_cutoffs=dict(self._apps),
                    global_cutoff=self._global,
                )
            cached = self._cached
        return RevocationDigest(cached.version, cached.token_ids, cached.user_cutoffs, cached.app_cutoffs,
                                cached.global_cutoff, produced_at)

    def is_revoked(self, claims, token_id: str | None = None) -> bool:
        """Check against the authoritative state (always fresh)."""
        with self._lock:
            tid = token_id if token_id is not None else claims.jti
            if tid is not None and tid in self._token_ids:
                return True
            for table, key in ((self._users, claims.sub), (self._apps, claims.app_id)):
                cutoff = table.get(key)
                if cutoff is not None and claims.iat <= cutoff:
                    return True
            return self._global is not None and claims.iat <= self._global

    def entries(self) -> list[RevocationEntry]:
        return [RevocationEntry.from_dict(r) for r in self.backend.read_log(_LOG) if "gc" not in r]

    def collect_garbage(self, now: int, max_token_lifetime: int) -> int:
        """Forget revocations that can only match already-expired tokens.

        A token alive at ``now`` has ``iat >= now - max_token_lifetime``, so
        any cutoff (or token-id record time) before that bound is moot.
        Returns the number of dropped items.
        """
        with self._lock:
            dropped = self._gc(now, max_token_lifetime)
            if dropped:
                self.backend.append(_LOG, {"gc": now, "max_lifetime": max_token_lifetime})
                self._version += 1
            return dropped

    def _gc(self, now: int, max_lifetime: int) -> int:
        horizon = now - max_lifetime
        dropped = 0
        for tid in [t for t, at in self._token_ids.items() if at < horizon]:
            del self._token_ids[tid]
            dropped += 1
        for table in (self._users, self._apps):
            for key in [k for k, c in table.items() if c < horizon]:
                del table[key]
                dropped += 1
        if self._global is not None and self._global < horizon:
            self._global = None
            dropped += 1
        if dropped:
            self._cached = None
        return dropped


def merge_all(digests: Iterable[RevocationDigest]) -> RevocationDigest:
    out = RevocationDigest()
    for d in digests:
        out = merge_digest(out, d)
    return out
