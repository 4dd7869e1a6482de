import json

import pytest

from conftest import EXAMPLE_CLAIMS
from tokenguard.cli import main

NOW = EXAMPLE_CLAIMS["iat"] + 100


@pytest.fixture
def run(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("TOKENGUARD_DATA_DIR", raising=False)

    def invoke(*argv, now=NOW):
        code = main(["--data-dir", str(tmp_path), "--now", str(now), *argv])
        out, err = capsys.readouterr()
        return code, out, err

    return invoke


def test_sign_verify_revoke(run):
    code, compact, _ = run("token", "sign", json.dumps(EXAMPLE_CLAIMS))
    assert code == 0
    code, out, _ = run("token", "verify", compact)
    assert code == 0 and json.loads(out) == EXAMPLE_CLAIMS
    head, body, sig = compact.strip().split(".")
    tampered = f"{head}.{body}.{'A' if sig[0] != 'A' else 'B'}{sig[1:]}"
    code, _, err = run("token", "verify", tampered)
    assert code == 1 and "InvalidSignature" in err
    assert run("revoke", "user", "1234567890")[0] == 0
    code, _, err = run("token", "verify", compact)
    assert code == 1 and "Revoked" in err
    assert run("token", "verify", compact, now=EXAMPLE_CLAIMS["exp"] + 31)[2].startswith("error: Expired")


def test_client_scope_and_key_commands(run, tmp_path):
    scopes = tmp_path / "scopes.json"
    scopes.write_text(json.dumps({"scopes": [{"name": "read:orders"}, {"name": "write:orders",
                                                                        "implies": ["read:orders"]}]}))
    assert run("scope", "load", str(scopes))[0] == 0
    code, out, _ = run("client", "register", "shop", "--redirect-uri", "https://shop/cb", "--scope", "write:orders",
                       "--activate")
    doc = json.loads(out)
    assert code == 0 and doc["lifecycle_state"] == "active" and doc["client_secret"]
    assert json.loads(run("client", "set-state", "shop", "suspended")[1])["lifecycle_state"] == "suspended"
    code, _, err = run("client", "set-state", "shop", "approved")
    assert code == 1 and "InvalidTransition" in err
    assert [s["name"] for s in json.loads(run("scope", "deprecate", "read:orders")[1])] == ["read:orders",
                                                                                           "write:orders"]

    keys = json.loads(run("key", "list")[1])
    assert [k["state"] for k in keys] == ["active"]
    new = json.loads(run("key", "generate", "--alg", "HS256")[1])
    assert "k" not in new  # symmetric material is never published
    # forced rotation acts on the issuing family only
    assert "NoPendingKey" in run("key", "rotate", "--force")[2]
    new = json.loads(run("key", "generate")[1])
    assert new["alg"] == "ES256" and new["state"] == "pending"
    rotated = json.loads(run("key", "rotate", "--force")[1])
    assert rotated["rolled"] == keys[0]["kid"]
    states = {k["kid"]: k["state"] for k in json.loads(run("key", "list")[1])}
    assert states[keys[0]["kid"]] == "rollover"


def test_audit_query(run):
    run("revoke", "app", "shop", "--reason", "test")
    lines = run("audit", "query", "--type", "revoke")[1].splitlines()
    assert [json.loads(line)["client_id"] for line in lines] == ["shop"]


def test_harness_command(run):
    code, out, _ = run("harness", "replicas", "--replicas", "3", "--scenario", "steady")
    report = json.loads(out)
    assert code == 0 and report["issued"] == report["accepted"]


def test_usage_errors_exit_2(run):
    with pytest.raises(SystemExit) as info:
        run("frobnicate")
    assert info.value.code == 2
