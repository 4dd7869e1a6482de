from __future__ import annotations

import secrets

import pytest

from tokenguard.algorithms import ES256, HS256
from tokenguard.audit import AuditLog
from tokenguard.authz import AppState, AuthorizationServer, compute_pkce_challenge
from tokenguard.config import ServerConfig
from tokenguard.keystore import KeyState, KeyStore, SigningKey
from tokenguard.revocation import RevocationRegistry
from tokenguard.runtime import TokenPlatform
from tokenguard.scopes import ScopeGraph
from tokenguard.token_core import TokenClaims, VerificationPolicy

T0 = 1_712_036_400
ISSUER = "auth.example.com"
AUDIENCE = "api.example.com"

# The worked example payload used throughout the docs and tests.
EXAMPLE_CLAIMS = {
    "sub": "1234567890",
    "aud": "api.example.com",
    "iss": "auth.example.com",
    "exp": 1712040000,
    "iat": 1712036400,
    "scope": "read:customers write:orders",
    "app_id": "ecommerce-app",
    "device_id": "device-8873abc",
    "ip": "203.0.113.42",
    "ver": "1.0",
}


class Clock:
    def __init__(self, now: int = T0) -> None:
        self.now = now

    def __call__(self) -> float:
        return float(self.now)

    def advance(self, seconds: int) -> int:
        self.now += seconds
        return self.now


def fixed_hs_key(secret: bytes = bytes(range(32)), kid: str = "0" * 31 + "1",
                 state: KeyState = KeyState.ACTIVE) -> SigningKey:
    return SigningKey(kid=kid, algorithm=HS256, state=state, not_before=0, created_at=0, private=secret)


def resolver_for(*keys: SigningKey):
    table = {k.kid: k for k in keys}

    def resolve(kid):
        from tokenguard.errors import UnknownKey

        try:
            return table[kid]
        except KeyError:
            raise UnknownKey(kid) from None

    return resolve


def example_claims(**overrides) -> TokenClaims:
    return TokenClaims.from_dict({**EXAMPLE_CLAIMS, **overrides})


def new_verifier() -> str:
    return secrets.token_urlsafe(48)


@pytest.fixture
def clock() -> Clock:
    return Clock()


@pytest.fixture
def policy() -> VerificationPolicy:
    return VerificationPolicy(AUDIENCE, ISSUER)


@pytest.fixture
def hs_key() -> SigningKey:
    return fixed_hs_key()


@pytest.fixture
def keystore(clock) -> KeyStore:
    ks = KeyStore(signing_algorithm=ES256)
    ks.ensure_signing_key(clock.now)
    return ks


def make_server(clock: Clock, scopes: list[dict] | None = None, **kwargs):
    audit = AuditLog()
    keystore = KeyStore()
    keystore.ensure_signing_key(clock.now)
    graph = ScopeGraph.from_config(scopes or [
        {"name": "admin", "implies": ["read:customers", "write:orders"]},
        {"name": "read:customers"},
        {"name": "write:orders", "implies": ["read:orders"]},
        {"name": "read:orders"},
    ])
    revocation = RevocationRegistry(audit=audit, clock=clock)
    server = AuthorizationServer(keystore=keystore, scopes=graph, revocation=revocation, audit=audit,
                                 issuer=ISSUER, audience=AUDIENCE, **kwargs)
    return server


def activate(server: AuthorizationServer, client_id: str, now: int) -> None:
    for state in (AppState.UNDER_REVIEW, AppState.APPROVED, AppState.ACTIVE):
        server.transition_app_state(client_id, state, now)


def register_active(server: AuthorizationServer, now: int, name: str = "ecommerce-app",
                    scopes=("read:customers", "write:orders"), **kwargs):
    client, secret = server.register_client(name, ["https://app.example/cb"], scopes, now=now, **kwargs)
    activate(server, client.client_id, now)
    return server.get_client(client.client_id), secret


def authorize_and_exchange(server: AuthorizationServer, client, secret, now: int, *,
                           user_id: str = "1234567890", scopes=("read:customers",), context=None):
    verifier = new_verifier()
    code = server.begin_authorization(client.client_id, "https://app.example/cb", scopes,
                                      compute_pkce_challenge(verifier), "S256", user_id, True, now,
                                      context=context)
    return server.exchange_code(code.code, client.client_id, secret, verifier, "https://app.example/cb", now)


@pytest.fixture
def server(clock):
    return make_server(clock)


@pytest.fixture
def platform(clock):
    config = ServerConfig(users={"alice": "1234567890", "bob": "user-bob"})
    p = TokenPlatform(config, clock=clock)
    p.load_scopes([
        {"name": "read:customers"},
        {"name": "write:orders", "implies": ["read:orders"]},
        {"name": "read:orders"},
    ])
    yield p
    p.close()


# -- acceptance reporting -----------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        verdict = "PASS" if report.passed else "FAIL"
        previous = _ACCEPTANCE.get(number)
        if previous is None or previous[1] == "PASS":
            _ACCEPTANCE[number] = (title, verdict)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, verdict = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {title}")
