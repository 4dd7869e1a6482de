"""Composition root: one object owning every component of a running server.

:class:`TokenPlatform` builds the backend, key store, scope graph,
revocation registry, audit log, reference-token store, phantom gateway,
authorization server and rate limiters from a :class:`ServerConfig`, and
wires the cross-module hooks (revocation evicts gateway cache entries,
deprecated scopes are audited, anomaly flags feed the rate limiter).
"""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path
from typing import Callable, Iterable, Mapping

from .audit import AnomalyFlag, AuditLog, EventType, JsonlSink, MemorySink
from .authz import AppState, AuthorizationServer, TrustTier
from .config import ServerConfig
from .errors import InsufficientScope, TokenError, TokenGuardError, TokenInactive
from .keystore import KeyStore
from .persistence import FileBackend, MemoryBackend
from .rate_limit import Decision, RateLimiter
from .revocation import RevocationDigest, RevocationKind, RevocationRegistry
from .scopes import ScopeGraph
from .token_core import TokenClaims, VerificationPolicy, parse_token, verify_token
from .token_store import IntrospectionResult, PhantomGateway, ReferenceTokenStore, valid_opaque_id

logger = logging.getLogger(__name__)

_NS_SCOPES = "scopes"
_STEP = {
    AppState.REGISTERED: AppState.UNDER_REVIEW,
    AppState.UNDER_REVIEW: AppState.APPROVED,
    AppState.APPROVED: AppState.ACTIVE,
}

Authenticator = Callable[[str], "str | None"]


class TokenPlatform:
    def __init__(
        self,
        config: ServerConfig | None = None,
        *,
        clock: Callable[[], float] | None = None,
        backend: MemoryBackend | None = None,
        audit_sink=None,
        authenticate: Authenticator | None = None,
    ) -> None:
        self.config = (config or ServerConfig()).validate()
        self.clock = clock or time.time
        cfg = self.config
        if backend is None:
            backend = FileBackend(cfg.data_dir, fsync=cfg.fsync) if cfg.persistence == "file" else MemoryBackend()
        self.backend = backend
        if audit_sink is None:
            audit_sink = (JsonlSink(Path(cfg.data_dir) / "audit.jsonl", fsync=cfg.fsync)
                          if cfg.persistence == "file" else MemorySink())
        self.audit = AuditLog(audit_sink, auto_revoke=cfg.anomaly_auto_revoke)
        self.keystore = KeyStore(backend, rollover_window=cfg.rollover_window,
                                 accept_pending=cfg.accept_pending_keys,
                                 signing_algorithm=cfg.signing_algorithm)
        self.scopes = ScopeGraph(on_deprecated=self._deprecated_scope_requested)
        self._load_scopes()
        self.revocation = RevocationRegistry(backend, audit=self.audit, clock=self.clock)
        self.reference_store = ReferenceTokenStore(backend, is_revoked=self.revocation.is_revoked)
        self.gateway = PhantomGateway(self.reference_store.introspect, self.keystore,
                                      cache_max_ttl=cfg.cache_max_ttl)
        self.revocation.add_hook(self.gateway.on_revoke)
        self.authz = AuthorizationServer(
            keystore=self.keystore, scopes=self.scopes, revocation=self.revocation, audit=self.audit,
            issuer=cfg.issuer, audience=cfg.audience, backend=backend,
            reference_store=self.reference_store, code_lifetime=cfg.code_lifetime,
            access_lifetime=cfg.access_token_lifetime, refresh_lifetime=cfg.refresh_token_lifetime,
            unique_names=cfg.unique_client_names,
        )
        self.limiter = RateLimiter(cfg.tier_policy("rate_limit"))
        self.token_limiter = RateLimiter(cfg.tier_policy("token_endpoint_rate_limit"))
        users = dict(cfg.users)
        self.authenticate: Authenticator = authenticate or users.get
        self._handled_flags: set[tuple] = set()
        self.keystore.ensure_signing_key(self.now())

    # -- time / policy ------------------------------------------------------

    def now(self) -> int:
        return int(self.clock())

    def policy(self) -> VerificationPolicy:
        return VerificationPolicy(self.config.audience, self.config.issuer, self.config.leeway_seconds)

    # -- clients ------------------------------------------------------------

    def activate_client(self, client_id: str, now: int | None = None):
        """Walk a freshly registered client through review and approval to active."""
        now = self.now() if now is None else int(now)
        client = self.authz.get_client(client_id)
        for target in (AppState.UNDER_REVIEW, AppState.APPROVED, AppState.ACTIVE):
            if client.lifecycle_state is AppState.ACTIVE:
                break
            if _STEP.get(client.lifecycle_state) is target:
                client = self.authz.transition_app_state(client_id, target, now)
        return client

    # -- scopes -------------------------------------------------------------

    def _load_scopes(self) -> None:
        saved = self.backend.get(_NS_SCOPES, "graph")
        if saved is not None:
            self.scopes.load(saved)
        elif self.config.scope_config:
            with open(self.config.scope_config, encoding="utf-8") as fh:
                self.load_scopes(json.load(fh))

    def load_scopes(self, entries: Iterable[Mapping]) -> list[dict]:
        """Define scopes (in any order) and persist the resulting graph."""
        self.scopes.load(entries)
        return self._save_scopes()

    def deprecate_scope(self, name: str) -> list[dict]:
        self.scopes.deprecate_scope(name)
        self.audit.record_event(EventType.ADMIN, timestamp=self.now(), reason="scope_deprecated",
                                detail={"scope": name})
        return self._save_scopes()

    def _save_scopes(self) -> list[dict]:
        doc = self.scopes.to_config()
        self.backend.put(_NS_SCOPES, "graph", doc)
        return doc

    def _deprecated_scope_requested(self, name: str) -> None:
        self.audit.record_event(EventType.ADMIN, timestamp=self.now(), reason="deprecated_scope_requested",
                                detail={"scope": name})

    # -- verification -------------------------------------------------------

    def verify_access(
        self,
        token: str,
        *,
        now: int | None = None,
        observed: Mapping[str, str | None] | None = None,
        required_scopes: Iterable[str] = (),
    ) -> TokenClaims:
        """Resource-server check for a presented access token.

        JWTs are verified locally against the authoritative revocation
        state; opaque ids are introspected.  Every outcome is audited.
        """
        now = self.now() if now is None else int(now)
        try:
            if isinstance(token, str) and valid_opaque_id(token):
                result = self.reference_store.introspect(token, now)
                if not result.active:
                    raise TokenInactive()
                claims = result.claims
            else:
                claims = verify_token(token, self.keystore.resolver(now), self.policy(),
                                      self.revocation.is_revoked, now)
            required = list(required_scopes)
            if required and not self.scopes.is_satisfied(required, claims.scopes):
                raise InsufficientScope(" ".join(sorted(required)))
        except TokenGuardError as exc:
            self._record_failure(token, exc, now, observed)
            raise
        if observed:
            self.audit.check_fingerprint(claims, observed, now)
        self.audit.record_event(EventType.USE, timestamp=now, token_id=claims.jti, user_id=claims.sub,
                                client_id=claims.app_id, fingerprint=observed)
        return claims

    def _record_failure(self, token, exc: TokenGuardError, now: int, observed) -> None:
        user_id = client_id = token_id = None
        try:
            _, claims, _ = parse_token(token)
            user_id, client_id, token_id = claims.sub, claims.app_id, claims.jti
        except (TokenError, TypeError):
            pass
        self.audit.record_event(EventType.VERIFY_FAIL, timestamp=now, token_id=token_id, user_id=user_id,
                                client_id=client_id, fingerprint=observed, outcome="failure",
                                reason=type(exc).__name__)

    def introspect(self, token: str, now: int | None = None) -> IntrospectionResult:
        """Introspection for either token form; failures collapse to inactive."""
        now = self.now() if now is None else int(now)
        if isinstance(token, str) and valid_opaque_id(token):
            return self.reference_store.introspect(token, now)
        try:
            claims = verify_token(token, self.keystore.resolver(now), self.policy(),
                                  self.revocation.is_revoked, now)
        except TokenGuardError:
            return IntrospectionResult(False)
        return IntrospectionResult(True, claims)

    def translate(self, opaque_id: str, now: int | None = None):
        now = self.now() if now is None else int(now)
        return self.gateway.phantom_translate(opaque_id, now)

    # -- revocation ---------------------------------------------------------

    def revoke_token(self, token: str, *, client_id: str | None = None, now: int | None = None) -> bool:
        """Revocation-endpoint semantics: refresh, opaque or JWT; unknown tokens are a no-op."""
        now = self.now() if now is None else int(now)
        if self.authz.revoke_refresh_token(token, now, client_id):
            return True
        if isinstance(token, str) and valid_opaque_id(token):
            claims = self.reference_store.deactivate(token)
            if claims is None or (client_id is not None and claims.app_id != client_id):
                return False
            self.revocation.revoke(RevocationKind.TOKEN, token, now, "token revoked", now)
            if claims.jti:
                self.revocation.revoke(RevocationKind.TOKEN, claims.jti, now, "token revoked", now)
            return True
        try:
            _, claims, _ = parse_token(token)
        except TokenError:
            return False
        if claims.jti is None or (client_id is not None and claims.app_id != client_id):
            return False
        self.revocation.revoke(RevocationKind.TOKEN, claims.jti, now, "token revoked", now)
        return True

    def revoke(self, kind: RevocationKind | str, subject: str, *, cutoff_iat: int | None = None,
               reason: str = "", now: int | None = None):
        now = self.now() if now is None else int(now)
        return self.revocation.revoke(kind, subject, cutoff_iat, reason, now)

    def digest(self, now: int | None = None) -> RevocationDigest:
        return self.revocation.build_digest(self.now() if now is None else now)

    # -- rate limiting ------------------------------------------------------

    def admit(self, client_id: str, *, endpoint: str = "api", now: float | None = None) -> Decision:
        limiter = self.token_limiter if endpoint == "token" else self.limiter
        now = self.clock() if now is None else now
        try:
            tier = self.authz.get_client(client_id).trust_tier
        except TokenGuardError:
            tier = TrustTier.UNKNOWN
        limiter.state(client_id, now, tier)
        decision = limiter.check_request(client_id, now)
        if not decision.allowed:
            limiter.record_outcome(client_id, "denied", now=now)
        return decision

    def record_outcome(self, client_id: str, ok: bool, *, endpoint: str = "api", now: float | None = None) -> None:
        limiter = self.token_limiter if endpoint == "token" else self.limiter
        limiter.record_outcome(client_id, "success" if ok else "error", now=self.clock() if now is None else now)

    # -- maintenance --------------------------------------------------------

    def maintenance(self, now: int | None = None, *, window: int = 60) -> list[AnomalyFlag]:
        """Periodic tick: key rotation, anomaly evaluation, tier reclassification.

        Revoke-grade flags revoke their user only when ``anomaly_auto_revoke``
        is configured; each flag is acted on once.
        """
        now = self.now() if now is None else int(now)
        self.keystore.rotate_keys(now)
        flags = self.audit.detect_anomalies(window, now) + list(self.audit.flags)
        self.audit.flags.clear()
        for flag in flags:
            key = (flag.rule, flag.subject, tuple(flag.evidence))
            if flag.recommended_action != "revoke" or key in self._handled_flags:
                continue
            self._handled_flags.add(key)
            self.revocation.revoke(RevocationKind.USER, flag.subject, now, f"anomaly:{flag.rule.value}", now)
        for client_id in self.limiter.clients():
            before = self.limiter.state(client_id, now).tier
            after = self.limiter.reclassify(client_id, now, flags)
            if after is not before:
                self.token_limiter.set_tier(client_id, after, now)
                try:
                    self.authz.set_trust_tier(client_id, after)
                except TokenGuardError:
                    pass
        return flags

    def close(self) -> None:
        self.backend.close()

