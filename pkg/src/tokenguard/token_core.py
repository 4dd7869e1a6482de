"""By-value tokens: claim construction, JWS compact signing, parsing, verification.

Compact form::

    base64url(header) "." base64url(claims) "." base64url(signature)

URL-safe alphabet, no padding, UTF-8 JSON documents.  Decoding is strict:
padding, foreign characters, and non-canonical trailing bits are all
rejected, so a compact token has exactly one accepted spelling.

:func:`verify_token` runs its checks in a fixed order so failures are
deterministic::

    structure -> algorithm -> key -> signature -> time -> audience
    -> issuer -> revocation
"""

from __future__ import annotations

import base64
import json
import re
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Callable, Iterable, Mapping

from . import algorithms
from .algorithms import b64url_encode
from .errors import (
    AlgorithmRejected,
    AudienceMismatch,
    Expired,
    InvalidSignature,
    IssuerMismatch,
    KeyNotActive,
    KeyRetired,
    Malformed,
    NotYetValid,
    Revoked,
    ScopeNotAllowed,
)
from .keystore import KeyState, SigningKey

if TYPE_CHECKING:
    from .scopes import ScopeGraph

SCHEMA_VERSION = "1.0"
DEFAULT_LEEWAY = 30
MAX_LEEWAY = 120

_B64URL = re.compile(r"[A-Za-z0-9_-]*")
_CLAIM_ORDER = ("sub", "aud", "iss", "exp", "iat", "scope", "app_id", "device_id", "ip", "ver", "jti")
_REQUIRED_STR = ("sub", "aud", "iss", "scope", "app_id", "ver")
_OPTIONAL_STR = ("device_id", "ip", "jti")


@dataclass(frozen=True)
class JwtHeader:
    alg: str
    kid: str
    typ: str = "JWT"
    extra: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict:
        return {"alg": self.alg, "typ": self.typ, "kid": self.kid, **self.extra}


@dataclass(frozen=True)
class TokenClaims:
    """Flat claim document.

    ``jti`` is the token identifier used for token-level revocation.
    Claims outside the known set survive a parse in ``extra`` but are
    never consulted by verification policy.
    """

    sub: str
    aud: str
    iss: str
    exp: int
    iat: int
    scope: str
    app_id: str
    ver: str = SCHEMA_VERSION
    device_id: str | None = None
    ip: str | None = None
    jti: str | None = None
    extra: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.exp <= self.iat:
            raise ValueError("exp must be strictly after iat")
        names = self.scope.split()
        if len(names) != len(set(names)):
            raise ValueError("duplicate scope names")

    @property
    def scopes(self) -> frozenset[str]:
        return frozenset(self.scope.split())

    def to_dict(self) -> dict:
        out = {}
        for name in _CLAIM_ORDER:
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        out.update(self.extra)
        return out

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "TokenClaims":
        if not isinstance(doc, Mapping):
            raise Malformed("claims must be an object")
        for name in _REQUIRED_STR:
            if not isinstance(doc.get(name), str):
                raise Malformed(f"claim {name!r} missing or not a string")
        for name in ("exp", "iat"):
            value = doc.get(name)
            if not isinstance(value, int) or isinstance(value, bool):
                raise Malformed(f"claim {name!r} missing or not an integer")
        for name in _OPTIONAL_STR:
            if name in doc and not isinstance(doc[name], str):
                raise Malformed(f"claim {name!r} not a string")
        extra = {k: v for k, v in doc.items() if k not in _CLAIM_ORDER}
        try:
            return cls(
                sub=doc["sub"], aud=doc["aud"], iss=doc["iss"], exp=doc["exp"], iat=doc["iat"],
                scope=doc["scope"], app_id=doc["app_id"], ver=doc["ver"],
                device_id=doc.get("device_id"), ip=doc.get("ip"), jti=doc.get("jti"),
                extra=extra,
            )
        except ValueError as exc:
            raise Malformed(str(exc)) from None


@dataclass(frozen=True)
class SignedToken:
    compact: str
    header: JwtHeader
    claims: TokenClaims

    def __str__(self) -> str:
        return self.compact


@dataclass(frozen=True)
class VerificationPolicy:
    expected_aud: str
    expected_iss: str
    leeway_seconds: int = DEFAULT_LEEWAY
    required_claims: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if not 0 <= self.leeway_seconds <= MAX_LEEWAY:
            raise ValueError(f"leeway_seconds must be within [0, {MAX_LEEWAY}]")


def build_claims(
    user_id: str,
    client,
    granted_scopes: Iterable[str],
    context: Mapping[str, str | None] | None,
    lifetime_seconds: int,
    now: int,
    *,
    issuer: str,
    audience: str,
    scope_graph: "ScopeGraph | None" = None,
    jti: str | None = None,
) -> TokenClaims:
    """Claims for ``user_id`` acting through ``client``.

    Granted scopes must lie inside the client's allowed set, or inside its
    hierarchical closure when ``scope_graph`` is given.
    """
    if lifetime_seconds <= 0:
        raise ValueError("lifetime_seconds must be positive")
    granted = set(granted_scopes)
    allowed = set(client.allowed_scopes)
    if scope_graph is not None:
        allowed = scope_graph.expand_scopes(allowed)
    outside = granted - allowed
    if outside:
        raise ScopeNotAllowed(" ".join(sorted(outside)))
    context = context or {}
    return TokenClaims(
        sub=user_id,
        aud=audience,
        iss=issuer,
        exp=int(now) + int(lifetime_seconds),
        iat=int(now),
        scope=" ".join(sorted(granted)),
        app_id=client.client_id,
        ver=SCHEMA_VERSION,
        device_id=context.get("device_id"),
        ip=context.get("ip"),
        jti=jti,
    )


def _encode_json(doc: Mapping[str, Any]) -> str:
    return b64url_encode(json.dumps(doc, separators=(",", ":"), ensure_ascii=False).encode("utf-8"))


def sign_token(claims: TokenClaims, key: SigningKey) -> SignedToken:
    if key.state is not KeyState.ACTIVE:
        raise KeyNotActive(f"{key.kid} is {key.state.value}")
    header = JwtHeader(alg=key.algorithm, kid=key.kid)
    signing_input = _encode_json(header.to_dict()) + "." + _encode_json(claims.to_dict())
    signature = key.sign(signing_input.encode("ascii"))
    return SignedToken(signing_input + "." + b64url_encode(signature), header, claims)


def b64url_decode_strict(segment: str) -> bytes:
    if not _B64URL.fullmatch(segment) or len(segment) % 4 == 1:
        raise Malformed("invalid base64url segment")
    data = base64.urlsafe_b64decode(segment + "=" * (-len(segment) % 4))
    if b64url_encode(data) != segment:
        raise Malformed("non-canonical base64url segment")
    return data


def _reject_duplicates(pairs):
    doc = {}
    for k, v in pairs:
        if k in doc:
            raise Malformed(f"duplicate member {k!r}")
        doc[k] = v
    return doc


def _decode_json(segment: str) -> dict:
    raw = b64url_decode_strict(segment)
    try:
        doc = json.loads(raw.decode("utf-8"), object_pairs_hook=_reject_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError, RecursionError):
        raise Malformed("segment is not a JSON document") from None
    if not isinstance(doc, dict):
        raise Malformed("segment is not a JSON object")
    return doc


def parse_token(compact: str) -> tuple[JwtHeader, TokenClaims, bytes]:
    """Structural decode only; no signature, time or policy checks."""
    if not isinstance(compact, str):
        raise Malformed("token must be text")
    parts = compact.split(".")
    if len(parts) != 3:
        raise Malformed("expected three segments")
    header_doc = _decode_json(parts[0])
    claims_doc = _decode_json(parts[1])
    signature = b64url_decode_strict(parts[2])
    alg, kid, typ = header_doc.get("alg"), header_doc.get("kid"), header_doc.get("typ")
    if not isinstance(alg, str):
        raise Malformed("header alg missing")
    if typ != "JWT":
        raise Malformed("header typ must be JWT")
    if not isinstance(kid, str) or not kid:
        raise Malformed("header kid missing")
    extra = {k: v for k, v in header_doc.items() if k not in ("alg", "kid", "typ")}
    header = JwtHeader(alg=alg, kid=kid, typ=typ, extra=extra)
    return header, TokenClaims.from_dict(claims_doc), signature


def verify_token(
    compact: str,
    keys: Callable[[str], SigningKey],
    policy: VerificationPolicy,
    revocation_check: Callable[[TokenClaims], bool] | None,
    now: int,
) -> TokenClaims:
    """Verify ``compact`` and return its claims, or raise the first failure.

    ``keys`` maps a ``kid`` to a key (raising ``UnknownKey`` or
    ``KeyRetired``).  ``revocation_check`` returns true for revoked claims
    and may itself raise a :class:`Revoked` subclass.  Nothing else is
    consulted.
    """
    header, claims, signature = parse_token(compact)
    doc = claims.to_dict()
    missing = [name for name in policy.required_claims if name not in doc]
    if missing:
        raise Malformed(f"missing required claims {sorted(missing)}")

    if header.alg not in algorithms.ALLOWED_ALGORITHMS:
        raise AlgorithmRejected(repr(header.alg)[:32])
    key = keys(header.kid)
    if key.state is KeyState.RETIRED:
        raise KeyRetired(header.kid)
    if key.algorithm != header.alg:
        raise AlgorithmRejected("algorithm does not match key")

    signing_input = compact.rsplit(".", 1)[0].encode("ascii")
    if not key.verify(signing_input, signature):
        raise InvalidSignature(header.kid)

    if now > claims.exp + policy.leeway_seconds:
        raise Expired(f"exp={claims.exp}")
    if now < claims.iat - policy.leeway_seconds:
        raise NotYetValid(f"iat={claims.iat}")
    if claims.aud != policy.expected_aud:
        raise AudienceMismatch(claims.aud)
    if claims.iss != policy.expected_iss:
        raise IssuerMismatch(claims.iss)
    if revocation_check is not None and revocation_check(claims):
        raise Revoked(claims.jti or claims.sub)
    return claims
