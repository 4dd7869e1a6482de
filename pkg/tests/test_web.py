import socket
import threading
from urllib.parse import parse_qs, urlsplit

import httpx
import pytest
from fastapi.testclient import TestClient

from conftest import new_verifier
from tokenguard.authz import compute_pkce_challenge
from tokenguard.config import ServerConfig
from tokenguard.errors import BindFailure, ConfigInvalid
from tokenguard.runtime import TokenPlatform
from tokenguard.web import create_app, serve

CB = "https://app.example/cb"
ADMIN = {"Authorization": "Bearer admin-secret"}


@pytest.fixture
def platform(clock):
    config = ServerConfig(users={"alice": "1234567890"}, admin_token="admin-secret")
    p = TokenPlatform(config, clock=clock)
    p.load_scopes([{"name": "read:customers"}, {"name": "write:orders", "implies": ["read:orders"]},
                   {"name": "read:orders"}])
    yield p
    p.close()


@pytest.fixture
def http(platform):
    return TestClient(create_app(platform), follow_redirects=False)


def register(http, **extra):
    body = {"name": "ecommerce-app", "redirect_uris": [CB], "scopes": ["read:customers", "write:orders"],
            "activate": True, **extra}
    resp = http.post("/admin/clients", json=body, headers=ADMIN)
    assert resp.status_code == 201, resp.text
    return resp.json()


def authorize(http, client, verifier, scope="read:customers", **extra):
    params = {"response_type": "code", "client_id": client["client_id"], "redirect_uri": CB, "scope": scope,
              "code_challenge": compute_pkce_challenge(verifier), "code_challenge_method": "S256",
              "username": "alice", "consent": "allow", "state": "xyz", **extra}
    resp = http.get("/authorize", params=params)
    assert resp.status_code == 302
    return {k: v[0] for k, v in parse_qs(urlsplit(resp.headers["location"]).query).items()}


def exchange(http, client, code, verifier):
    return http.post("/token", data={"grant_type": "authorization_code", "code": code, "redirect_uri": CB,
                                     "code_verifier": verifier, "client_id": client["client_id"],
                                     "client_secret": client["client_secret"]})


def test_full_flow(http, clock):
    client = register(http)
    verifier = new_verifier()
    q = authorize(http, client, verifier)
    assert q["state"] == "xyz"
    resp = exchange(http, client, q["code"], verifier)
    assert resp.status_code == 200 and resp.headers["cache-control"] == "no-store"
    tokens = resp.json()
    assert tokens["token_type"] == "Bearer" and tokens["scope"] == "read:customers"
    bearer = {"Authorization": f"Bearer {tokens['access_token']}"}
    assert http.get("/resource", headers=bearer).json()["sub"] == "1234567890"
    denied = http.get("/resource", params={"scope": "write:orders"}, headers=bearer)
    assert denied.status_code == 403 and denied.json()["error"] == "insufficient_scope"

    auth = (client["client_id"], client["client_secret"])
    assert http.post("/introspect", data={"token": tokens["access_token"]}, auth=auth).json()["active"]

    refreshed = http.post("/token", data={"grant_type": "refresh_token", "refresh_token": tokens["refresh_token"]},
                          auth=auth)
    assert refreshed.status_code == 200
    assert http.post("/revoke", data={"token": refreshed.json()["refresh_token"]}, auth=auth).json() == {}
    resp = http.get("/resource", headers={"Authorization": f"Bearer {refreshed.json()['access_token']}"})
    assert resp.status_code == 401 and 'error="invalid_token"' in resp.headers["www-authenticate"]
    # revoking the refresh token took down its whole family, first access token included
    assert http.post("/introspect", data={"token": tokens["access_token"]}, auth=auth).json() == {"active": False}

    kinds = {e["event_type"] for e in http.get("/audit/events", headers=ADMIN).json()["events"]}
    assert {"admin", "issue", "use", "refresh", "revoke"} <= kinds


def test_redirectable_errors_and_plain_errors(http):
    client = register(http)
    q = authorize(http, client, new_verifier(), consent="no")
    assert q["error"] == "access_denied" and q["state"] == "xyz"
    narrow = register(http, name="narrow", scopes=["read:customers"])
    q = authorize(http, narrow, new_verifier(), scope="write:orders")
    assert q["error"] == "invalid_scope"
    resp = http.get("/authorize", params={"response_type": "token", "client_id": "x", "redirect_uri": CB})
    assert resp.status_code == 400 and resp.json()["error"] == "unsupported_response_type"
    resp = http.get("/authorize", params={"response_type": "code", "client_id": client["client_id"],
                                          "redirect_uri": CB, "username": "mallory"})
    assert resp.status_code == 401 and resp.json()["error"] == "login_required"


def test_token_errors_do_not_leak_internals(http):
    client = register(http)
    verifier = new_verifier()
    code = authorize(http, client, verifier)["code"]
    assert exchange(http, client, code, verifier).status_code == 200
    again = exchange(http, client, code, verifier)
    assert again.status_code == 400 and again.json()["error"] == "invalid_grant"
    assert "Traceback" not in again.text and set(again.json()) == {"error", "error_description"}
    resp = http.post("/token", data={"grant_type": "password", "client_id": client["client_id"]})
    assert resp.json()["error"] == "unsupported_grant_type"
    resp = http.post("/token", data={"grant_type": "authorization_code"})
    assert resp.status_code == 400 and resp.json()["error"] == "invalid_request"


def test_admin_endpoints_require_token(http):
    assert http.post("/admin/clients", json={"name": "x"}).status_code == 401
    assert http.get("/audit/events").status_code == 401
    assert http.post("/revoke", json={"kind": "user", "subject": "u"}).status_code == 401
    resp = http.post("/revoke", json={"kind": "user", "subject": "u"}, headers=ADMIN)
    assert resp.status_code == 200 and resp.json()["kind"] == "user"
    assert http.get("/revocation/digest").json()["user_cutoffs"].keys() == {"u"}


def test_key_rotation_and_publication(http, clock):
    before = {k["kid"] for k in http.get("/keys").json()["keys"]}
    resp = http.post("/admin/keys/rotate", json={"generate": "ES256", "force": True}, headers=ADMIN).json()
    assert resp["activated"] == resp["generated"]
    after = {k["kid"] for k in http.get("/keys").json()["keys"]}
    assert after == before | {resp["generated"]}  # old key still published during rollover
    resp = http.post("/admin/keys/rotate", json={"generate": "none"}, headers=ADMIN)
    assert resp.status_code == 400


def test_rate_limit_returns_retry_after(clock):
    config = ServerConfig(token_endpoint_rate_limit={"base_rate": 1})
    p = TokenPlatform(config, clock=clock)
    http = TestClient(create_app(p))
    codes = [http.post("/token", data={"grant_type": "x", "client_id": "c"}).status_code for _ in range(2)]
    assert codes == [400, 429]
    resp = http.post("/token", data={"grant_type": "x", "client_id": "c"})
    assert resp.json()["error"] == "slow_down" and resp.headers["retry-after"] == "1"
    p.close()


def test_serve_real_socket_and_concurrent_code_exchange(tmp_path):
    config = ServerConfig(port=0, persistence="file", data_dir=str(tmp_path), fsync=False,
                          users={"alice": "1234567890"})
    with serve(config) as handle:
        handle.platform.load_scopes([{"name": "read:customers"}])
        with httpx.Client(base_url=handle.url, follow_redirects=False) as http:
            client = http.post("/admin/clients", json={"name": "app", "redirect_uris": [CB],
                                                       "scopes": ["read:customers"], "activate": True}).json()
            verifier = new_verifier()
            q = authorize(http, client, verifier)
            results = []

            def go():
                with httpx.Client(base_url=handle.url) as c:
                    results.append(exchange(c, client, q["code"], verifier).status_code)

            threads = [threading.Thread(target=go) for _ in range(2)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            assert sorted(results) == [200, 400]


def test_bind_failure_and_invalid_config():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        s.listen()
        with pytest.raises(BindFailure):
            serve(ServerConfig(port=s.getsockname()[1]))
    with pytest.raises(ConfigInvalid):
        serve(ServerConfig(port=0, leeway_seconds=500))


def test_unexpected_errors_become_500(platform):
    def boom(*args, **kwargs):
        raise RuntimeError("secret internals")

    platform.digest = boom
    resp = TestClient(create_app(platform), raise_server_exceptions=False).get("/revocation/digest")
    assert resp.status_code == 500 and "secret" not in resp.text
