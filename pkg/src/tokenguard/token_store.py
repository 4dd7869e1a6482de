"""By-reference tokens, introspection, and the phantom-token gateway.

Clients hold opaque ids; :class:`PhantomGateway` swaps them for signed JWTs
on the way into the internal network and caches the result for at most
``cache_max_ttl`` seconds (never past the token's own expiry).  Revocation
evicts matching cache entries synchronously via :meth:`PhantomGateway.on_revoke`.
"""

from __future__ import annotations

import logging
import re
import secrets
import threading
from dataclasses import dataclass
from typing import Callable

from .errors import StorageUnavailable, TokenInactive
from .keystore import KeyStore
from .persistence import MemoryBackend
from .revocation import RevocationEntry, RevocationKind
from .token_core import SignedToken, TokenClaims, sign_token

logger = logging.getLogger(__name__)

OPAQUE_ID_BYTES = 32
DEFAULT_CACHE_MAX_TTL = 30

_NS = "reference_tokens"
_OPAQUE_ID = re.compile(r"[A-Za-z0-9_-]{43}")


def valid_opaque_id(opaque_id: str) -> bool:
    return isinstance(opaque_id, str) and _OPAQUE_ID.fullmatch(opaque_id) is not None


@dataclass(frozen=True)
class ReferenceTokenRecord:
    opaque_id: str
    claims: TokenClaims
    active: bool = True


@dataclass(frozen=True)
class IntrospectionResult:
    active: bool
    claims: TokenClaims | None = None

    def to_dict(self) -> dict:
        if not self.active:
            return {"active": False}
        return {"active": True, **self.claims.to_dict()}


INACTIVE = IntrospectionResult(active=False)


@dataclass(frozen=True)
class GatewayCacheEntry:
    opaque_id: str
    signed: SignedToken
    cached_at: int
    ttl_seconds: int

    def fresh(self, now: int) -> bool:
        return now - self.cached_at < self.ttl_seconds


class ReferenceTokenStore:
    """Opaque ids carry 256 random bits and are never derived from claims."""

    def __init__(self, backend: MemoryBackend | None = None, *,
                 is_revoked: Callable[[TokenClaims], bool] | None = None) -> None:
        self.backend = backend if backend is not None else MemoryBackend()
        self.is_revoked = is_revoked or (lambda claims: False)

    def issue_reference(self, claims: TokenClaims) -> str:
        try:
            while True:
                opaque_id = secrets.token_urlsafe(OPAQUE_ID_BYTES)
                record = {"claims": claims.to_dict(), "active": True}
                if self.backend.compare_and_set(_NS, opaque_id, None, record):
                    return opaque_id
        except OSError as exc:
            raise StorageUnavailable(str(exc)) from exc

    def get(self, opaque_id: str) -> ReferenceTokenRecord | None:
        if not valid_opaque_id(opaque_id):
            return None
        try:
            rec = self.backend.get(_NS, opaque_id)
        except OSError as exc:
            raise StorageUnavailable(str(exc)) from exc
        if rec is None:
            return None
        return ReferenceTokenRecord(opaque_id, TokenClaims.from_dict(rec["claims"]), rec["active"])

    def introspect(self, opaque_id: str, now: int) -> IntrospectionResult:
        """Unknown, expired, deactivated and revoked ids all get the same answer."""
        record = self.get(opaque_id)
        if record is None or not record.active or now > record.claims.exp:
            return INACTIVE
        if self.is_revoked(record.claims):
            return INACTIVE
        return IntrospectionResult(True, record.claims)

    def deactivate(self, opaque_id: str) -> TokenClaims | None:
        """Permanently deactivate; returns the record's claims if it existed."""
        while True:
            rec = self.backend.get(_NS, opaque_id) if valid_opaque_id(opaque_id) else None
            if rec is None:
                return None
            if not rec["active"]:
                return TokenClaims.from_dict(rec["claims"])
            if self.backend.compare_and_set(_NS, opaque_id, rec, {**rec, "active": False}):
                return TokenClaims.from_dict(rec["claims"])

    def purge_client(self, client_id: str) -> int:
        """Delete every record issued to ``client_id`` (decommissioning)."""
        count = 0
        for opaque_id, rec in self.backend.items(_NS).items():
            if rec["claims"].get("app_id") == client_id:
                self.backend.delete(_NS, opaque_id)
                count += 1
        return count


class PhantomGateway:
    """Opaque-to-JWT translation with a revocation-aware cache."""

    def __init__(
        self,
        introspect: Callable[[str, int], IntrospectionResult],
        keystore: KeyStore,
        *,
        cache_max_ttl: int = DEFAULT_CACHE_MAX_TTL,
    ) -> None:
        if cache_max_ttl <= 0:
            raise ValueError("cache_max_ttl must be positive")
        self.introspect = introspect
        self.keystore = keystore
        self.cache_max_ttl = cache_max_ttl
        self._cache: dict[str, GatewayCacheEntry] = {}
        self._lock = threading.Lock()
        # bumped by every invalidation; a translate that raced one must not cache
        self._generation = 0

    def phantom_translate(self, opaque_id: str, now: int) -> SignedToken:
        with self._lock:
            entry = self._cache.get(opaque_id)
        if entry is not None:
            if entry.fresh(now):
                return entry.signed
            with self._lock:
                if self._cache.get(opaque_id) is entry:
                    del self._cache[opaque_id]
        generation = self._generation
        result = self.introspect(opaque_id, now)
        if not result.active:
            raise TokenInactive()
        signed = sign_token(result.claims, self.keystore.active_key())
        ttl = min(result.claims.exp - now, self.cache_max_ttl)
        if ttl > 0:
            with self._lock:
                if generation == self._generation:
                    self._cache[opaque_id] = GatewayCacheEntry(opaque_id, signed, now, ttl)
        return signed

    def invalidate_cache(self, *, opaque_id: str | None = None, token_id: str | None = None,
                         user_id: str | None = None, client_id: str | None = None,
                         all: bool = False) -> int:
        """Evict entries matching any given selector; returns the count."""
        with self._lock:
            self._generation += 1
            doomed = [
                oid for oid, e in self._cache.items()
                if all
                or oid == opaque_id
                or (token_id is not None and e.signed.claims.jti == token_id)
                or (user_id is not None and e.signed.claims.sub == user_id)
                or (client_id is not None and e.signed.claims.app_id == client_id)
            ]
            for oid in doomed:
                del self._cache[oid]
        return len(doomed)

    def on_revoke(self, entry: RevocationEntry) -> None:
        if entry.kind is RevocationKind.TOKEN:
            self.invalidate_cache(opaque_id=entry.subject, token_id=entry.subject)
        elif entry.kind is RevocationKind.USER:
            self.invalidate_cache(user_id=entry.subject)
        elif entry.kind is RevocationKind.APP:
            self.invalidate_cache(client_id=entry.subject)
        else:
            self.invalidate_cache(all=True)

    def __len__(self) -> int:
        return len(self._cache)
