import base64
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import AUDIENCE, EXAMPLE_CLAIMS, ISSUER, T0, example_claims, fixed_hs_key, resolver_for
from tokenguard.errors import (
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
    UnknownKey,
)
from tokenguard.keystore import KeyState, KeyStore
from tokenguard.scopes import ScopeGraph
from tokenguard.token_core import (
    TokenClaims,
    VerificationPolicy,
    b64url_decode_strict,
    build_claims,
    parse_token,
    sign_token,
    verify_token,
)

# HS256 over the example payload with key bytes 00..1f and kid 0..01, computed
# with hmac/hashlib/base64 alone (no package code involved).
EXAMPLE_HS256 = (
    "eyJhbGciOiJIUzI1NiIsInR5cCI6IkpXVCIsImtpZCI6IjAwMDAwMDAwMDAwMDAwMDAwMDAwMDAwMDAwMDAwMDAxIn0."
    "eyJzdWIiOiIxMjM0NTY3ODkwIiwiYXVkIjoiYXBpLmV4YW1wbGUuY29tIiwiaXNzIjoiYXV0aC5leGFtcGxlLmNvbSIsImV4cCI6MTcxMjA0"
    "MDAwMCwiaWF0IjoxNzEyMDM2NDAwLCJzY29wZSI6InJlYWQ6Y3VzdG9tZXJzIHdyaXRlOm9yZGVycyIsImFwcF9pZCI6ImVjb21tZXJjZS1h"
    "cHAiLCJkZXZpY2VfaWQiOiJkZXZpY2UtODg3M2FiYyIsImlwIjoiMjAzLjAuMTEzLjQyIiwidmVyIjoiMS4wIn0."
    "gTJ5vNyQJ4R9MwUGRn1ALDfCbPP8THj8uOP-jTDOayg"
)
NOW = EXAMPLE_CLAIMS["iat"] + 60


def _b64(raw: bytes) -> str:
    return base64.urlsafe_b64encode(raw).rstrip(b"=").decode()


def _verify(compact, key=None, policy=None, check=None, now=NOW):
    key = key or fixed_hs_key()
    return verify_token(compact, resolver_for(key), policy or VerificationPolicy(AUDIENCE, ISSUER), check, now)


def test_hs256_signature_matches_independent_oracle():
    assert sign_token(example_claims(), fixed_hs_key()).compact == EXAMPLE_HS256
    assert _verify(EXAMPLE_HS256).to_dict() == EXAMPLE_CLAIMS


def test_parse_returns_header_claims_and_signature():
    header, claims, sig = parse_token(EXAMPLE_HS256)
    assert (header.alg, header.typ, header.kid) == ("HS256", "JWT", "0" * 31 + "1")
    assert claims.scopes == {"read:customers", "write:orders"}
    assert len(sig) == 32


@pytest.mark.parametrize("alg", ["HS256", "RS256", "ES256"])
def test_round_trip_each_algorithm(alg):
    ks = KeyStore(signing_algorithm=alg)
    key = ks.ensure_signing_key(T0)
    token = sign_token(example_claims(), key)
    assert _verify(token.compact, key) == example_claims()


_text = st.text(st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=30)
_scope_word = st.text(st.characters(blacklist_categories=("Cs", "Zs", "Zl", "Zp", "Cc")), min_size=1, max_size=10)


@settings(max_examples=200, deadline=None)
@given(sub=_text, app=_text, scopes=st.sets(_scope_word, min_size=1, max_size=5),
       lifetime=st.integers(1, 10**6), jti=st.one_of(st.none(), _text), device=st.one_of(st.none(), _text))
def test_round_trip_property(sub, app, scopes, lifetime, jti, device):
    scope = " ".join(sorted(scopes))
    if len(scope.split()) != len(scopes):
        return  # words containing whitespace-like separators are not valid scope names
    claims = TokenClaims(sub=sub, aud=AUDIENCE, iss=ISSUER, iat=T0, exp=T0 + lifetime, scope=scope, app_id=app,
                         jti=jti, device_id=device)
    compact = sign_token(claims, fixed_hs_key()).compact
    assert _verify(compact, now=T0) == claims


def test_check_order_time_audience_issuer_revocation():
    key = fixed_hs_key()
    policy = VerificationPolicy(AUDIENCE, ISSUER, leeway_seconds=30)
    compact = sign_token(example_claims(), key).compact
    exp, iat = EXAMPLE_CLAIMS["exp"], EXAMPLE_CLAIMS["iat"]
    assert _verify(compact, key, policy, now=exp + 30)  # leeway is inclusive
    with pytest.raises(Expired):
        _verify(compact, key, policy, now=exp + 31)
    assert _verify(compact, key, policy, now=iat - 30)
    with pytest.raises(NotYetValid):
        _verify(compact, key, policy, now=iat - 31)
    with pytest.raises(AudienceMismatch):
        _verify(compact, key, VerificationPolicy("other", ISSUER))
    with pytest.raises(IssuerMismatch):
        _verify(compact, key, VerificationPolicy(AUDIENCE, "other"))
    with pytest.raises(Revoked):
        _verify(compact, key, check=lambda c: True)
    # an expired token reports Expired before any revocation lookup happens
    with pytest.raises(Expired):
        _verify(compact, key, check=lambda c: pytest.fail("revocation consulted"), now=exp + 1000)


def test_signature_and_key_failures():
    other = fixed_hs_key(secret=b"\x01" * 32)
    with pytest.raises(InvalidSignature):
        _verify(EXAMPLE_HS256, other)
    with pytest.raises(UnknownKey):
        _verify(EXAMPLE_HS256, fixed_hs_key(kid="f" * 32))
    with pytest.raises(KeyRetired):
        _verify(EXAMPLE_HS256, fixed_hs_key(state=KeyState.RETIRED))
    es = KeyStore().ensure_signing_key(T0)
    head, body, _ = EXAMPLE_HS256.split(".")
    # HS256 header pointing at an ES key is algorithm confusion
    forged = _b64(json.dumps({"alg": "HS256", "typ": "JWT", "kid": es.kid}).encode()) + "." + body + ".AAAA"
    with pytest.raises(AlgorithmRejected):
        verify_token(forged, resolver_for(es), VerificationPolicy(AUDIENCE, ISSUER), None, NOW)


@pytest.mark.parametrize("compact", [
    "", "a", "a.b", "a.b.c.d", EXAMPLE_HS256 + "=", EXAMPLE_HS256.replace(".", "..", 1),
    EXAMPLE_HS256[:-1] + "h",  # non-canonical trailing bits
    "eyJhbGciOiJIUzI1NiJ9.e30.",
])
def test_malformed(compact):
    with pytest.raises(Malformed):
        _verify(compact)


def test_duplicate_members_and_header_shape_rejected():
    body = EXAMPLE_HS256.split(".")[1]
    dup = _b64(b'{"alg":"HS256","alg":"none","typ":"JWT","kid":"k"}')
    with pytest.raises(Malformed):
        parse_token(f"{dup}.{body}.")
    no_typ = _b64(b'{"alg":"HS256","kid":"k"}')
    with pytest.raises(Malformed):
        parse_token(f"{no_typ}.{body}.")
    array = _b64(b"[1,2]")
    with pytest.raises(Malformed):
        parse_token(f"{array}.{body}.")


def test_strict_base64():
    assert b64url_decode_strict("AQ") == b"\x01"
    for bad in ("AR", "AQ==", "A", "A+", "A/"):
        with pytest.raises(Malformed):
            b64url_decode_strict(bad)


def test_claim_types_enforced():
    for name, value in (("exp", "1712040000"), ("iat", True), ("sub", 5), ("scope", None), ("jti", 3)):
        doc = {**EXAMPLE_CLAIMS, name: value}
        with pytest.raises(Malformed):
            TokenClaims.from_dict(doc)
    with pytest.raises(Malformed):
        TokenClaims.from_dict({**EXAMPLE_CLAIMS, "exp": EXAMPLE_CLAIMS["iat"]})
    with pytest.raises(Malformed):
        TokenClaims.from_dict({**EXAMPLE_CLAIMS, "scope": "a a"})


def test_required_claims_policy():
    policy = VerificationPolicy(AUDIENCE, ISSUER, required_claims=frozenset({"jti"}))
    with pytest.raises(Malformed):
        _verify(EXAMPLE_HS256, policy=policy)
    policy = VerificationPolicy(AUDIENCE, ISSUER, required_claims=frozenset({"device_id", "ip"}))
    assert _verify(EXAMPLE_HS256, policy=policy).device_id == "device-8873abc"


def test_leeway_is_bounded():
    with pytest.raises(ValueError):
        VerificationPolicy(AUDIENCE, ISSUER, leeway_seconds=121)


def test_unknown_claims_survive_but_are_ignored():
    claims = TokenClaims.from_dict({**EXAMPLE_CLAIMS, "tenant": "acme"})
    compact = sign_token(claims, fixed_hs_key()).compact
    assert _verify(compact).extra == {"tenant": "acme"}


def test_sign_requires_active_key():
    with pytest.raises(KeyNotActive):
        sign_token(example_claims(), fixed_hs_key(state=KeyState.ROLLOVER))


class _Client:
    client_id = "ecommerce-app"
    allowed_scopes = frozenset({"orders:admin"})


def test_build_claims_scope_checks():
    graph = ScopeGraph.from_config([
        {"name": "orders:admin", "implies": ["write:orders"]},
        {"name": "write:orders", "implies": ["read:orders"]},
        {"name": "read:orders"},
    ])
    claims = build_claims("u1", _Client(), ["read:orders", "write:orders"], {"device_id": "d"}, 600, T0,
                          issuer=ISSUER, audience=AUDIENCE, scope_graph=graph, jti="j1")
    assert claims.scope == "read:orders write:orders"
    assert (claims.exp - claims.iat, claims.device_id, claims.ip, claims.jti) == (600, "d", None, "j1")
    with pytest.raises(ScopeNotAllowed):
        build_claims("u1", _Client(), ["read:orders"], None, 600, T0, issuer=ISSUER, audience=AUDIENCE)
    with pytest.raises(ValueError):
        build_claims("u1", _Client(), [], None, 0, T0, issuer=ISSUER, audience=AUDIENCE)
