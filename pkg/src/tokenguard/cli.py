"""``tokenguard`` command line.

Offline subcommands operate directly on the file-backed state in
``--data-dir``; ``serve`` runs the HTTP server over the same state.
``--now`` pins the clock (Unix seconds) for reproducible runs.  Exit
status is 0 on success, 1 on any token or policy error (the error class
is printed to stderr) and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Sequence

from .authz import AppState
from .config import load_config
from .errors import TokenGuardError
from .harness import SCENARIOS, run_replica_sync_harness
from .revocation import RevocationKind
from .token_core import TokenClaims, sign_token, verify_token

log = logging.getLogger("tokenguard.cli")

DEFAULT_DATA_DIR = ".tokenguard"


def _emit(doc) -> None:
    print(json.dumps(doc, indent=2, sort_keys=False))


def _platform(args):
    from .runtime import TokenPlatform

    config = _config(args)
    clock = (lambda: float(args.now)) if args.now is not None else time.time
    return TokenPlatform(config, clock=clock)


def _config(args, **extra):
    data_dir = args.data_dir or os.environ.get("TOKENGUARD_DATA_DIR") or DEFAULT_DATA_DIR
    return load_config(args.config, persistence="file", data_dir=data_dir, **extra)


def _read_json_arg(value: str):
    """Inline JSON, ``@path`` or a plain path."""
    if value.startswith("@"):
        value = value[1:]
    elif value.lstrip().startswith(("{", "[")):
        return json.loads(value)
    return json.loads(Path(value).read_text(encoding="utf-8"))


# -- handlers ---------------------------------------------------------------

def cmd_serve(args) -> int:
    from .web import serve

    config = _config(args, host=args.host, port=args.port)
    handle = serve(config)
    print(f"listening on {handle.url}", flush=True)
    try:
        while handle.thread.is_alive():
            handle.thread.join(0.5)
    except KeyboardInterrupt:
        pass
    finally:
        handle.stop()
    return 0


def cmd_client_register(args, p) -> int:
    client, secret = p.authz.register_client(args.name, args.redirect_uri, args.scope, now=p.now(),
                                             public=args.public, token_mode=args.token_mode,
                                             trust_tier=args.tier)
    if args.activate:
        client = p.activate_client(client.client_id)
    _emit({**client.to_public_dict(), "client_secret": secret})
    return 0


def cmd_client_set_state(args, p) -> int:
    _emit(p.authz.transition_app_state(args.client_id, args.state, p.now()).to_public_dict())
    return 0


def cmd_key_generate(args, p) -> int:
    not_before = args.not_before if args.not_before is not None else p.now()
    key = p.keystore.generate_key(args.alg, not_before, now=p.now())
    _emit(key.public_entry())
    return 0


def cmd_key_rotate(args, p) -> int:
    report = p.keystore.rotate_keys(p.now(), force=args.force)
    _emit({"activated": report.activated, "rolled": report.rolled, "retired": list(report.retired),
           "version": p.keystore.version})
    return 0


def cmd_key_list(args, p) -> int:
    _emit([{"kid": k.kid, "alg": k.algorithm, "state": k.state.value, "not_before": k.not_before,
            "rollover_until": k.rollover_until} for k in p.keystore.keys()])
    return 0


def cmd_scope_load(args, p) -> int:
    doc = _read_json_arg(args.source)
    _emit(p.load_scopes(doc["scopes"] if isinstance(doc, dict) else doc))
    return 0


def cmd_scope_list(args, p) -> int:
    _emit(p.scopes.to_config())
    return 0


def cmd_scope_deprecate(args, p) -> int:
    _emit(p.deprecate_scope(args.name))
    return 0


def cmd_token_sign(args, p) -> int:
    doc = dict(_read_json_arg(args.claims))
    now = p.now()
    doc.setdefault("iat", now)
    doc.setdefault("exp", doc["iat"] + p.config.access_token_lifetime)
    doc.setdefault("iss", p.config.issuer)
    doc.setdefault("aud", p.config.audience)
    doc.setdefault("ver", "1.0")
    claims = TokenClaims.from_dict(doc)
    print(sign_token(claims, p.keystore.active_key()).compact)
    return 0


def cmd_token_verify(args, p) -> int:
    now = p.now()
    claims = verify_token(args.compact.strip(), p.keystore.resolver(now), p.policy(),
                          p.revocation.is_revoked, now)
    _emit(claims.to_dict())
    return 0


def cmd_token_introspect(args, p) -> int:
    result = p.introspect(args.token.strip())
    _emit(result.to_dict())
    return 0 if result.active else 1


def cmd_revoke(args, p) -> int:
    entry = p.revoke(args.kind, args.subject, cutoff_iat=args.cutoff, reason=args.reason)
    _emit(entry.to_dict())
    return 0


def cmd_audit_query(args, p) -> int:
    events = p.audit.query_events(user_id=args.user, client_id=args.client, token_id=args.token,
                                  since=args.since, until=args.until, event_type=args.type)
    for ev in events:
        print(json.dumps(ev.to_dict(), sort_keys=True))
    return 0


def cmd_harness(args) -> int:
    builder = SCENARIOS[args.scenario]
    kwargs = {"seed": args.seed} if args.scenario != "partition" else {}
    if args.scenario == "steady":
        kwargs["n_replicas"] = args.replicas
    report = run_replica_sync_harness(args.replicas, args.interval, builder(**kwargs),
                                      max_staleness=args.max_staleness)
    _emit(report.to_dict())
    return 0 if report.within_bound else 1


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tokenguard", description="Token authorization server toolkit")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--data-dir", help=f"state directory (default: $TOKENGUARD_DATA_DIR or {DEFAULT_DATA_DIR})")
    parser.add_argument("--now", type=int, help="pin the clock to this Unix time")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serve", help="run the HTTP server")
    s.add_argument("--host")
    s.add_argument("--port", type=int)
    s.set_defaults(handler=cmd_serve, offline=False)

    client = sub.add_parser("client", help="client registry").add_subparsers(dest="action", required=True)
    c = client.add_parser("register")
    c.add_argument("name")
    c.add_argument("--redirect-uri", action="append", required=True)
    c.add_argument("--scope", action="append", default=[])
    c.add_argument("--public", action="store_true")
    c.add_argument("--token-mode", default="by_value", choices=["by_value", "by_reference", "phantom"])
    c.add_argument("--tier", default="unknown", choices=["unknown", "verified", "trusted"])
    c.add_argument("--activate", action="store_true", help="walk the new client through review to active")
    c.set_defaults(handler=cmd_client_register)
    c = client.add_parser("set-state")
    c.add_argument("client_id")
    c.add_argument("state", choices=[s.value for s in AppState])
    c.set_defaults(handler=cmd_client_set_state)

    key = sub.add_parser("key", help="signing keys").add_subparsers(dest="action", required=True)
    k = key.add_parser("generate")
    k.add_argument("--alg", default=None)
    k.add_argument("--not-before", type=int)
    k.set_defaults(handler=cmd_key_generate)
    k = key.add_parser("rotate")
    k.add_argument("--force", action="store_true")
    k.set_defaults(handler=cmd_key_rotate)
    key.add_parser("list").set_defaults(handler=cmd_key_list)

    scope = sub.add_parser("scope", help="scope hierarchy").add_subparsers(dest="action", required=True)
    sc = scope.add_parser("load")
    sc.add_argument("source", help="JSON file, @file or inline JSON")
    sc.set_defaults(handler=cmd_scope_load)
    scope.add_parser("list").set_defaults(handler=cmd_scope_list)
    sc = scope.add_parser("deprecate")
    sc.add_argument("name")
    sc.set_defaults(handler=cmd_scope_deprecate)

    token = sub.add_parser("token", help="sign, verify, introspect").add_subparsers(dest="action", required=True)
    t = token.add_parser("sign")
    t.add_argument("claims", help="claims as inline JSON, @file or a path")
    t.set_defaults(handler=cmd_token_sign)
    t = token.add_parser("verify")
    t.add_argument("compact")
    t.set_defaults(handler=cmd_token_verify)
    t = token.add_parser("introspect")
    t.add_argument("token")
    t.set_defaults(handler=cmd_token_introspect)

    r = sub.add_parser("revoke", help="revoke a token, user, app or everything ('system *')")
    r.add_argument("kind", choices=[k.value for k in RevocationKind])
    r.add_argument("subject")
    r.add_argument("--cutoff", type=int)
    r.add_argument("--reason", default="")
    r.set_defaults(handler=cmd_revoke)

    audit = sub.add_parser("audit", help="audit log").add_subparsers(dest="action", required=True)
    a = audit.add_parser("query")
    a.add_argument("--user")
    a.add_argument("--client")
    a.add_argument("--token")
    a.add_argument("--since", type=int)
    a.add_argument("--until", type=int)
    a.add_argument("--type", choices=["issue", "use", "refresh", "revoke", "verify_fail", "admin"])
    a.set_defaults(handler=cmd_audit_query)

    harness = sub.add_parser("harness", help="simulations").add_subparsers(dest="action", required=True)
    h = harness.add_parser("replicas")
    h.add_argument("--replicas", type=int, default=5)
    h.add_argument("--interval", type=int, default=10)
    h.add_argument("--max-staleness", type=int, default=60)
    h.add_argument("--scenario", choices=sorted(SCENARIOS), default="mass-revocation")
    h.add_argument("--seed", type=int, default=0)
    h.set_defaults(handler=cmd_harness, offline=False)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if not getattr(args, "offline", True):
            return args.handler(args)
        platform = _platform(args)
        try:
            if getattr(args, "alg", "") is None:
                args.alg = platform.config.signing_algorithm
            return args.handler(args, platform)
        finally:
            platform.close()
    except TokenGuardError as exc:
        print(f"error: {type(exc).__name__}: {type(exc).description}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
