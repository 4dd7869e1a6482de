"""Token-based authorization toolkit: signed and reference access tokens,
key rotation, authorization-code flow with PKCE, hierarchical scopes,
revocation digests, audit trail and adaptive rate limiting."""

from .audit import AuditLog, EventType
from .authz import AppState, AuthorizationServer, TokenMode, TrustTier, compute_pkce_challenge
from .config import ServerConfig, load_config
from .errors import TokenError, TokenGuardError
from .keystore import KeyStore, KeyState
from .revocation import RevocationDigest, RevocationKind, RevocationRegistry, merge_digest
from .runtime import TokenPlatform
from .scopes import ScopeGraph
from .token_core import TokenClaims, VerificationPolicy, build_claims, parse_token, sign_token, verify_token

__version__ = "0.1.0"

__all__ = [
    "AppState", "AuditLog", "AuthorizationServer", "EventType", "KeyState", "KeyStore",
    "RevocationDigest", "RevocationKind", "RevocationRegistry", "ScopeGraph", "ServerConfig",
    "TokenClaims", "TokenError", "TokenGuardError", "TokenMode", "TokenPlatform", "TrustTier",
    "VerificationPolicy", "build_claims", "compute_pkce_challenge", "load_config", "merge_digest",
    "parse_token", "sign_token", "verify_token",
]
