"""Authorization-code grant with mandatory PKCE, client lifecycle, and refresh rotation.

Only the authorization-code and refresh-token grants exist; implicit and
password grants are deliberately absent.  Code consumption and refresh
rotation are compare-and-set operations on the persistence backend, so
concurrent replays resolve to exactly one winner.

Client lifecycle::

    registered -> under_review -> approved -> active <-> suspended
    (any non-terminal state) -> decommissioned
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import logging
import re
import secrets
from dataclasses import dataclass, field
from types import SimpleNamespace
from typing import Iterable, Mapping
from urllib.parse import urlsplit

from .algorithms import b64url_encode
from .audit import AuditLog, EventType
from .errors import (
    ClientAuthFailed,
    ClientNotActive,
    CodeConsumed,
    CodeExpired,
    ConsentDenied,
    DuplicateName,
    InvalidRedirectUri,
    InvalidTransition,
    InvalidVerifier,
    PkceMismatch,
    RedirectMismatch,
    RefreshExpired,
    ReuseDetected,
    ScopeNotAllowed,
    UnknownClient,
    UnknownCode,
    UnknownRefreshToken,
    UnsupportedPkceMethod,
)
from .keystore import KeyStore
from .persistence import MemoryBackend
from .revocation import RevocationKind, RevocationRegistry
from .scopes import ScopeGraph
from .token_core import build_claims, sign_token
from .token_store import ReferenceTokenStore

logger = logging.getLogger(__name__)

CODE_LIFETIME = 60
MAX_CODE_LIFETIME = 120
ACCESS_LIFETIME = 600
REFRESH_LIFETIME = 30 * 24 * 3600

_NS_CLIENTS = "clients"
_NS_CODES = "codes"
_NS_REFRESH = "refresh"

_VERIFIER = re.compile(r"[A-Za-z0-9\-._~]{43,128}")
_CHALLENGE = re.compile(r"[A-Za-z0-9_-]{43}")


class AppState(str, enum.Enum):
    REGISTERED = "registered"
    UNDER_REVIEW = "under_review"
    APPROVED = "approved"
    ACTIVE = "active"
    SUSPENDED = "suspended"
    DECOMMISSIONED = "decommissioned"


class TrustTier(str, enum.Enum):
    UNKNOWN = "unknown"
    VERIFIED = "verified"
    TRUSTED = "trusted"


class TokenMode(str, enum.Enum):
    BY_VALUE = "by_value"
    BY_REFERENCE = "by_reference"
    PHANTOM = "phantom"


_TRANSITIONS = {
    AppState.REGISTERED: {AppState.UNDER_REVIEW},
    AppState.UNDER_REVIEW: {AppState.APPROVED},
    AppState.APPROVED: {AppState.ACTIVE},
    AppState.ACTIVE: {AppState.SUSPENDED},
    AppState.SUSPENDED: {AppState.ACTIVE},
    AppState.DECOMMISSIONED: set(),
}


def secret_digest(secret: str) -> str:
    return hashlib.sha256(secret.encode("utf-8")).hexdigest()


def compute_pkce_challenge(verifier: str) -> str:
    """S256 code challenge: unpadded base64url of SHA-256 over the verifier."""
    if not isinstance(verifier, str) or not _VERIFIER.fullmatch(verifier):
        raise InvalidVerifier("verifier must be 43-128 unreserved characters")
    return b64url_encode(hashlib.sha256(verifier.encode("ascii")).digest())


@dataclass(frozen=True)
class ClientApp:
    client_id: str
    name: str
    client_secret_digest: str
    redirect_uris: tuple[str, ...]
    allowed_scopes: frozenset[str]
    trust_tier: TrustTier = TrustTier.UNKNOWN
    lifecycle_state: AppState = AppState.REGISTERED
    public: bool = False
    token_mode: TokenMode = TokenMode.BY_VALUE
    created_at: int = 0

    def to_record(self) -> dict:
        return {
            "client_id": self.client_id,
            "name": self.name,
            "client_secret_digest": self.client_secret_digest,
            "redirect_uris": list(self.redirect_uris),
            "allowed_scopes": sorted(self.allowed_scopes),
            "trust_tier": self.trust_tier.value,
            "lifecycle_state": self.lifecycle_state.value,
            "public": self.public,
            "token_mode": self.token_mode.value,
            "created_at": self.created_at,
        }

    def to_public_dict(self) -> dict:
        rec = self.to_record()
        del rec["client_secret_digest"]
        return rec

    @classmethod
    def from_record(cls, rec: Mapping) -> "ClientApp":
        return cls(
            client_id=rec["client_id"],
            name=rec["name"],
            client_secret_digest=rec["client_secret_digest"],
            redirect_uris=tuple(rec["redirect_uris"]),
            allowed_scopes=frozenset(rec["allowed_scopes"]),
            trust_tier=TrustTier(rec["trust_tier"]),
            lifecycle_state=AppState(rec["lifecycle_state"]),
            public=rec["public"],
            token_mode=TokenMode(rec["token_mode"]),
            created_at=rec.get("created_at", 0),
        )


@dataclass(frozen=True)
class AuthorizationCode:
    code: str
    client_id: str
    user_id: str
    scopes: frozenset[str]
    pkce_challenge: str
    redirect_uri: str
    expires_at: int
    pkce_method: str = "S256"
    consumed: bool = False
    context: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class RefreshTokenRecord:
    token_id: str
    family_id: str
    client_id: str
    user_id: str
    scopes: frozenset[str]
    expires_at: int
    state: str
    created_at: int
    access_jti: str | None = None

    @classmethod
    def from_record(cls, rec: Mapping) -> "RefreshTokenRecord":
        return cls(rec["token_id"], rec["family_id"], rec["client_id"], rec["user_id"],
                   frozenset(rec["scopes"]), rec["expires_at"], rec["state"], rec["created_at"],
                   rec.get("access_jti"))


@dataclass(frozen=True)
class TokenPair:
    access: str
    refresh: str
    access_expires_in: int
    granted_scopes: frozenset[str]
    access_jti: str
    token_type: str = "Bearer"

    def to_response(self) -> dict:
        return {
            "access_token": self.access,
            "token_type": self.token_type,
            "expires_in": self.access_expires_in,
            "refresh_token": self.refresh,
            "scope": " ".join(sorted(self.granted_scopes)),
        }


def _check_redirect_uri(uri: str) -> None:
    if not isinstance(uri, str):
        raise InvalidRedirectUri(repr(uri))
    parts = urlsplit(uri)
    if not parts.scheme or not parts.netloc or parts.fragment:
        raise InvalidRedirectUri(uri)


class AuthorizationServer:
    def __init__(
        self,
        *,
        keystore: KeyStore,
        scopes: ScopeGraph,
        revocation: RevocationRegistry,
        audit: AuditLog,
        issuer: str,
        audience: str,
        backend: MemoryBackend | None = None,
        reference_store: ReferenceTokenStore | None = None,
        code_lifetime: int = CODE_LIFETIME,
        access_lifetime: int = ACCESS_LIFETIME,
        refresh_lifetime: int = REFRESH_LIFETIME,
        unique_names: bool = True,
    ) -> None:
        if not 0 < code_lifetime <= MAX_CODE_LIFETIME:
            raise ValueError(f"code_lifetime must be within (0, {MAX_CODE_LIFETIME}]")
        if access_lifetime <= 0 or refresh_lifetime <= 0:
            raise ValueError("token lifetimes must be positive")
        self.backend = backend if backend is not None else MemoryBackend()
        self.keystore = keystore
        self.scopes = scopes
        self.revocation = revocation
        self.audit = audit
        self.reference_store = reference_store or ReferenceTokenStore(self.backend, is_revoked=revocation.is_revoked)
        self.issuer = issuer
        self.audience = audience
        self.code_lifetime = code_lifetime
        self.access_lifetime = access_lifetime
        self.refresh_lifetime = refresh_lifetime
        self.unique_names = unique_names

    # -- clients ------------------------------------------------------------

    def register_client(
        self,
        name: str,
        redirect_uris: Iterable[str],
        requested_scopes: Iterable[str],
        *,
        now: int,
        public: bool = False,
        token_mode: TokenMode | str = TokenMode.BY_VALUE,
        trust_tier: TrustTier | str = TrustTier.UNKNOWN,
    ) -> tuple[ClientApp, str]:
        """Register a client; the plaintext secret is returned only here."""
        redirect_uris = tuple(redirect_uris)
        if not redirect_uris:
            raise InvalidRedirectUri("at least one redirect uri is required")
        for uri in redirect_uris:
            _check_redirect_uri(uri)
        if not isinstance(name, str) or not name.strip():
            raise ValueError("client name required")
        client_id = name if self.unique_names else f"{name}-{secrets.token_hex(4)}"
        secret = secrets.token_urlsafe(32)
        client = ClientApp(
            client_id=client_id,
            name=name,
            client_secret_digest=secret_digest(secret),
            redirect_uris=redirect_uris,
            allowed_scopes=frozenset(requested_scopes) & self.scopes.active_names(),
            trust_tier=TrustTier(trust_tier),
            public=public,
            token_mode=TokenMode(token_mode),
            created_at=int(now),
        )
        if not self.backend.compare_and_set(_NS_CLIENTS, client_id, None, client.to_record()):
            raise DuplicateName(name)
        self.audit.record_event(EventType.ADMIN, timestamp=now, client_id=client_id, reason="register")
        return client, secret

    def get_client(self, client_id: str) -> ClientApp:
        rec = self.backend.get(_NS_CLIENTS, client_id) if isinstance(client_id, str) else None
        if rec is None:
            raise UnknownClient(client_id)
        return ClientApp.from_record(rec)

    def clients(self) -> list[ClientApp]:
        return [ClientApp.from_record(r) for _, r in sorted(self.backend.items(_NS_CLIENTS).items())]

    def transition_app_state(self, client_id: str, new_state: AppState | str, now: int) -> ClientApp:
        new_state = AppState(new_state)
        while True:
            rec = self.backend.get(_NS_CLIENTS, client_id)
            if rec is None:
                raise UnknownClient(client_id)
            client = ClientApp.from_record(rec)
            current = client.lifecycle_state
            allowed = _TRANSITIONS[current]
            if current is not AppState.DECOMMISSIONED:
                allowed = allowed | {AppState.DECOMMISSIONED}
            if new_state not in allowed:
                raise InvalidTransition(f"{current.value} -> {new_state.value}")
            updated = {**rec, "lifecycle_state": new_state.value}
            if self.backend.compare_and_set(_NS_CLIENTS, client_id, rec, updated):
                break
        if new_state in (AppState.SUSPENDED, AppState.DECOMMISSIONED):
            self.revocation.revoke(RevocationKind.APP, client_id, now, f"client {new_state.value}", now)
        if new_state is AppState.DECOMMISSIONED:
            for token_id, r in self.backend.items(_NS_REFRESH).items():
                if r["client_id"] == client_id:
                    self.backend.delete(_NS_REFRESH, token_id)
            self.reference_store.purge_client(client_id)
        self.audit.record_event(EventType.ADMIN, timestamp=now, client_id=client_id,
                                reason=f"state:{new_state.value}", detail={"from": current.value})
        return ClientApp.from_record(updated)

    def set_trust_tier(self, client_id: str, tier: TrustTier | str) -> ClientApp:
        while True:
            rec = self.backend.get(_NS_CLIENTS, client_id)
            if rec is None:
                raise UnknownClient(client_id)
            updated = {**rec, "trust_tier": TrustTier(tier).value}
            if self.backend.compare_and_set(_NS_CLIENTS, client_id, rec, updated):
                return ClientApp.from_record(updated)

    def authenticate_client(self, client_id: str, client_secret: str | None) -> ClientApp:
        client = self.get_client(client_id)
        self._authenticate(client, client_secret)
        return client

    def _authenticate(self, client: ClientApp, client_secret: str | None) -> None:
        if client.public:
            return
        if not isinstance(client_secret, str) or not hmac.compare_digest(
            secret_digest(client_secret), client.client_secret_digest
        ):
            raise ClientAuthFailed(client.client_id)

    # -- authorization code -------------------------------------------------

    def begin_authorization(
        self,
        client_id: str,
        redirect_uri: str,
        requested_scopes: Iterable[str],
        pkce_challenge: str,
        pkce_method: str,
        user_id: str,
        consent: bool,
        now: int,
        *,
        context: Mapping[str, str | None] | None = None,
    ) -> AuthorizationCode:
        client = self.get_client(client_id)
        if client.lifecycle_state is not AppState.ACTIVE:
            raise ClientNotActive(client_id)
        if redirect_uri not in client.redirect_uris:
            raise RedirectMismatch(redirect_uri)
        if pkce_method != "S256":
            raise UnsupportedPkceMethod(pkce_method)
        if not isinstance(pkce_challenge, str) or not _CHALLENGE.fullmatch(pkce_challenge):
            raise InvalidVerifier("code challenge must be 43 base64url characters")
        if not consent:
            raise ConsentDenied(client_id)
        granted = self.scopes.minimize_grant(requested_scopes, client.allowed_scopes)
        if not granted:
            raise ScopeNotAllowed(" ".join(sorted(requested_scopes)))
        code = AuthorizationCode(
            code=secrets.token_urlsafe(32),
            client_id=client_id,
            user_id=user_id,
            scopes=granted,
            pkce_challenge=pkce_challenge,
            redirect_uri=redirect_uri,
            expires_at=int(now) + self.code_lifetime,
            context={k: v for k, v in (context or {}).items() if v is not None},
        )
        record = {
            "client_id": code.client_id, "user_id": code.user_id, "scopes": sorted(code.scopes),
            "pkce_challenge": code.pkce_challenge, "pkce_method": code.pkce_method,
            "redirect_uri": code.redirect_uri, "expires_at": code.expires_at, "consumed": False,
            "context": dict(code.context), "issued": None,
        }
        self.audit.record_event(EventType.ISSUE, timestamp=now, user_id=user_id, client_id=client_id,
                                detail={"artifact": "authorization_code"})
        self.backend.put(_NS_CODES, code.code, record)
        return code

    def exchange_code(
        self,
        code: str,
        client_id: str,
        client_secret: str | None,
        pkce_verifier: str,
        redirect_uri: str,
        now: int,
    ) -> TokenPair:
        rec = self.backend.get(_NS_CODES, code) if isinstance(code, str) else None
        if rec is None:
            raise UnknownCode()
        if rec["client_id"] != client_id:
            raise ClientAuthFailed(client_id)
        client = self.get_client(client_id)
        self._authenticate(client, client_secret)
        if rec["consumed"]:
            self._burn_replayed_code(rec, now)
            raise CodeConsumed()
        if now > rec["expires_at"]:
            raise CodeExpired()
        if redirect_uri != rec["redirect_uri"]:
            raise RedirectMismatch(redirect_uri)
        try:
            challenge = compute_pkce_challenge(pkce_verifier)
        except InvalidVerifier:
            raise PkceMismatch() from None
        if not hmac.compare_digest(challenge, rec["pkce_challenge"]):
            raise PkceMismatch()
        if client.lifecycle_state is not AppState.ACTIVE:
            raise ClientNotActive(client_id)

        jti = secrets.token_urlsafe(16)
        family_id = secrets.token_urlsafe(16)
        consumed = {**rec, "consumed": True, "issued": {"access_jti": jti, "family_id": family_id}}
        if not self.backend.compare_and_set(_NS_CODES, code, rec, consumed):
            current = self.backend.get(_NS_CODES, code)
            if current is not None:
                self._burn_replayed_code(current, now)
            raise CodeConsumed()
        pair = self._issue(client, rec["user_id"], rec["scopes"], rec["context"], now, jti, family_id)
        return pair

    def _burn_replayed_code(self, rec: Mapping, now: int) -> None:
        """A consumed code came back: assume theft and kill what it minted."""
        issued = rec.get("issued")
        logger.warning("authorization code replay for client %s", rec["client_id"])
        self.audit.record_event(EventType.VERIFY_FAIL, timestamp=now, user_id=rec["user_id"],
                                client_id=rec["client_id"], outcome="failure", reason="code_replay")
        if issued:
            jtis = self._revoke_family(issued["family_id"], now, "authorization code replay")
            if issued["access_jti"] not in jtis:
                self.revocation.revoke(RevocationKind.TOKEN, issued["access_jti"], now,
                                       "authorization code replay", now)

    # -- issuance -----------------------------------------------------------

    def _issue(self, client: ClientApp, user_id: str, scopes: Iterable[str], context: Mapping,
               now: int, jti: str, family_id: str, *, expires_at: int | None = None,
               event: EventType = EventType.ISSUE) -> TokenPair:
        scopes = frozenset(scopes)
        claims = build_claims(
            user_id, client, scopes, context, self.access_lifetime, now,
            issuer=self.issuer, audience=self.audience, scope_graph=self.scopes, jti=jti,
        )
        if client.token_mode is TokenMode.BY_VALUE:
            access = sign_token(claims, self.keystore.active_key()).compact
        else:
            access = self.reference_store.issue_reference(claims)
        refresh = secrets.token_urlsafe(32)
        token_id = secret_digest(refresh)
        record = {
            "token_id": token_id, "family_id": family_id, "client_id": client.client_id,
            "user_id": user_id, "scopes": sorted(scopes),
            "expires_at": expires_at if expires_at is not None else int(now) + self.refresh_lifetime,
            "state": "live", "created_at": int(now), "access_jti": jti, "context": dict(context),
        }
        # audit first: if the sink is down nothing usable leaves the server
        self.audit.record_event(event, timestamp=now, token_id=jti, user_id=user_id, client_id=client.client_id,
                                fingerprint=context, detail={"family_id": family_id, "mode": client.token_mode.value})
        self.backend.put(_NS_REFRESH, token_id, record)
        return TokenPair(access, refresh, self.access_lifetime, scopes, jti)

    # -- refresh ------------------------------------------------------------

    def refresh_tokens(self, refresh_token: str, client_id: str, now: int,
                       client_secret: str | None = None) -> TokenPair:
        token_id = secret_digest(refresh_token) if isinstance(refresh_token, str) else ""
        while True:
            rec = self.backend.get(_NS_REFRESH, token_id)
            if rec is None:
                raise UnknownRefreshToken()
            if rec["client_id"] != client_id:
                raise ClientAuthFailed(client_id)
            client = self.get_client(client_id)
            self._authenticate(client, client_secret)
            if rec["state"] == "rotated":
                self._on_reuse(rec, now)
                raise ReuseDetected()
            if rec["state"] == "revoked" or self._record_revoked(rec):
                raise UnknownRefreshToken("revoked")
            if now > rec["expires_at"]:
                raise RefreshExpired()
            if client.lifecycle_state is not AppState.ACTIVE:
                raise ClientNotActive(client_id)
            scopes = self.scopes.minimize_grant(
                [s for s in rec["scopes"] if s in self.scopes.names()], client.allowed_scopes
            )
            if not scopes:
                raise ScopeNotAllowed(" ".join(rec["scopes"]))
            if self.backend.compare_and_set(_NS_REFRESH, token_id, rec, {**rec, "state": "rotated"}):
                break
        return self._issue(client, rec["user_id"], scopes, rec.get("context", {}), now,
                           secrets.token_urlsafe(16), rec["family_id"], expires_at=rec["expires_at"],
                           event=EventType.REFRESH)

    def _record_revoked(self, rec: Mapping) -> bool:
        probe = SimpleNamespace(sub=rec["user_id"], app_id=rec["client_id"], iat=rec["created_at"], jti=None)
        return self.revocation.is_revoked(probe)

    def _on_reuse(self, rec: Mapping, now: int) -> None:
        logger.warning("refresh token reuse in family %s (user %s)", rec["family_id"], rec["user_id"])
        self.audit.record_event(EventType.REFRESH, timestamp=now, token_id=rec["token_id"],
                                user_id=rec["user_id"], client_id=rec["client_id"], outcome="failure",
                                reason="reuse_detected", detail={"family_id": rec["family_id"]})
        self._revoke_family(rec["family_id"], now, "refresh token reuse")

    def _revoke_family(self, family_id: str, now: int, reason: str) -> list[str]:
        """Mark every record of the family revoked and revoke the access tokens it minted."""
        jtis = []
        for token_id, rec in self.backend.items(_NS_REFRESH).items():
            if rec["family_id"] != family_id:
                continue
            while rec is not None and rec["state"] != "revoked":
                if self.backend.compare_and_set(_NS_REFRESH, token_id, rec, {**rec, "state": "revoked"}):
                    break
                rec = self.backend.get(_NS_REFRESH, token_id)
            if rec is not None and rec.get("access_jti"):
                jtis.append(rec["access_jti"])
        for jti in jtis:
            self.revocation.revoke(RevocationKind.TOKEN, jti, now, reason, now)
        return jtis

    def revoke_refresh_token(self, refresh_token: str, now: int, client_id: str | None = None) -> bool:
        """Revocation-endpoint path for refresh tokens; kills the whole family."""
        rec = self.backend.get(_NS_REFRESH, secret_digest(refresh_token)) if isinstance(refresh_token, str) else None
        if rec is None or (client_id is not None and rec["client_id"] != client_id):
            return False
        self._revoke_family(rec["family_id"], now, "refresh token revoked")
        return True

    def refresh_records(self, *, family_id: str | None = None, client_id: str | None = None) -> list[RefreshTokenRecord]:
        out = []
        for rec in self.backend.items(_NS_REFRESH).values():
            if family_id is not None and rec["family_id"] != family_id:
                continue
            if client_id is not None and rec["client_id"] != client_id:
                continue
            out.append(RefreshTokenRecord.from_record(rec))
        return sorted(out, key=lambda r: (r.created_at, r.token_id))

    def refresh_record(self, refresh_token: str) -> RefreshTokenRecord | None:
        rec = self.backend.get(_NS_REFRESH, secret_digest(refresh_token))
        return None if rec is None else RefreshTokenRecord.from_record(rec)
