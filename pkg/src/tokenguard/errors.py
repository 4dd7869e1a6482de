"""Closed error taxonomy shared by every tokenguard module.

Each class carries an OAuth-style ``error`` code and an HTTP status so the
service layer can map any raised error to exactly one response shape.
"""

from __future__ import annotations


class TokenGuardError(Exception):
    error = "server_error"
    status = 500
    description = "internal error"


# -- token_core -------------------------------------------------------------

class TokenError(TokenGuardError):
    """Base for verification failures."""

    error = "invalid_token"
    status = 401
    description = "token rejected"


class Malformed(TokenError):
    description = "token is malformed"


class AlgorithmRejected(TokenError):
    description = "token algorithm not accepted"


class UnknownKey(TokenError):
    description = "signing key unknown"


class KeyRetired(TokenError):
    description = "signing key retired"


class InvalidSignature(TokenError):
    description = "signature invalid"


class Expired(TokenError):
    description = "token expired"


class NotYetValid(TokenError):
    description = "token not yet valid"


class AudienceMismatch(TokenError):
    description = "audience mismatch"


class IssuerMismatch(TokenError):
    description = "issuer mismatch"


class Revoked(TokenError):
    description = "token revoked"


class RevocationStale(Revoked):
    """Revocation state too old to trust; fail-safe rejection."""

    description = "revocation state stale"


class KeyNotActive(TokenGuardError):
    error = "key_not_active"
    status = 409
    description = "key is not active"


class ScopeNotAllowed(TokenGuardError):
    error = "invalid_scope"
    status = 400
    description = "scope not allowed for client"


class InsufficientScope(ScopeNotAllowed):
    """A presented token lacks a scope the resource requires."""

    error = "insufficient_scope"
    status = 403
    description = "token lacks a required scope"


# -- keystore ---------------------------------------------------------------

class UnsupportedAlgorithm(TokenGuardError):
    error = "unsupported_algorithm"
    status = 400
    description = "algorithm not in allow-list"


class NoPendingKey(TokenGuardError):
    error = "no_pending_key"
    status = 409
    description = "no pending key to activate"


class InvalidState(TokenGuardError):
    error = "invalid_state"
    status = 409
    description = "key is not pending"


# -- authz ------------------------------------------------------------------

class InvalidRedirectUri(TokenGuardError):
    error = "invalid_redirect_uri"
    status = 400
    description = "redirect uris must be absolute"


class DuplicateName(TokenGuardError):
    error = "invalid_client_metadata"
    status = 409
    description = "client name already registered"


class InvalidTransition(TokenGuardError):
    error = "invalid_transition"
    status = 409
    description = "lifecycle transition not allowed"


class UnknownClient(TokenGuardError):
    error = "invalid_client"
    status = 404
    description = "unknown client"


class ClientNotActive(TokenGuardError):
    error = "unauthorized_client"
    status = 403
    description = "client is not active"


class RedirectMismatch(TokenGuardError):
    error = "invalid_request"
    status = 400
    description = "redirect uri mismatch"


class ConsentDenied(TokenGuardError):
    error = "access_denied"
    status = 403
    description = "consent denied"


class UnsupportedPkceMethod(TokenGuardError):
    error = "invalid_request"
    status = 400
    description = "only S256 code challenges are accepted"


class InvalidVerifier(TokenGuardError):
    error = "invalid_request"
    status = 400
    description = "code verifier malformed"


class UnknownCode(TokenGuardError):
    error = "invalid_grant"
    status = 400
    description = "authorization code unknown"


class CodeConsumed(TokenGuardError):
    error = "invalid_grant"
    status = 400
    description = "authorization code already used"


class CodeExpired(TokenGuardError):
    error = "invalid_grant"
    status = 400
    description = "authorization code expired"


class PkceMismatch(TokenGuardError):
    error = "invalid_grant"
    status = 400
    description = "code verifier does not match challenge"


class ClientAuthFailed(TokenGuardError):
    error = "invalid_client"
    status = 401
    description = "client authentication failed"


class UnknownRefreshToken(TokenGuardError):
    error = "invalid_grant"
    status = 400
    description = "refresh token unknown"


class RefreshExpired(TokenGuardError):
    error = "invalid_grant"
    status = 400
    description = "refresh token expired"


class ReuseDetected(TokenGuardError):
    error = "invalid_grant"
    status = 400
    description = "refresh token reuse detected; session revoked"


# -- scopes -----------------------------------------------------------------

class DuplicateScope(TokenGuardError):
    error = "duplicate_scope"
    status = 409
    description = "scope already defined"


class UnknownImplied(TokenGuardError):
    error = "unknown_scope"
    status = 400
    description = "implied scope not defined"


class CycleDetected(TokenGuardError):
    error = "scope_cycle"
    status = 400
    description = "scope hierarchy would contain a cycle"


class UnknownScope(TokenGuardError):
    error = "invalid_scope"
    status = 400
    description = "unknown scope"


# -- token_store ------------------------------------------------------------

class StorageUnavailable(TokenGuardError):
    error = "temporarily_unavailable"
    status = 503
    description = "token storage unavailable"


class TokenInactive(TokenGuardError):
    error = "invalid_token"
    status = 401
    description = "token inactive"


# -- revocation / audit -----------------------------------------------------

class InvalidSubject(TokenGuardError):
    error = "invalid_request"
    status = 400
    description = "revocation subject malformed"


class SinkUnavailable(TokenGuardError):
    error = "temporarily_unavailable"
    status = 503
    description = "audit sink unavailable"


# -- service ----------------------------------------------------------------

class ConfigInvalid(TokenGuardError):
    error = "config_invalid"
    description = "configuration invalid"


class BindFailure(TokenGuardError):
    error = "bind_failure"
    description = "could not bind listen address"


class InvalidRequest(TokenGuardError):
    error = "invalid_request"
    status = 400
    description = "request malformed"


class UnsupportedGrantType(TokenGuardError):
    error = "unsupported_grant_type"
    status = 400
    description = "grant type not supported"


class UnsupportedResponseType(TokenGuardError):
    error = "unsupported_response_type"
    status = 400
    description = "only the code response type is supported"


class LoginRequired(TokenGuardError):
    error = "login_required"
    status = 401
    description = "user authentication failed"


class AdminAuthRequired(TokenGuardError):
    error = "unauthorized"
    status = 401
    description = "admin credentials required"


class RateLimited(TokenGuardError):
    error = "slow_down"
    status = 429
    description = "rate limit exceeded"

    def __init__(self, retry_after: float = 1.0) -> None:
        super().__init__(f"retry after {retry_after:.3f}s")
        self.retry_after = retry_after
