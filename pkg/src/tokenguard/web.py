"""HTTP surface (FastAPI) and a threaded server runner.

Transport security is expected to terminate at a reverse proxy in front
of this process.  Responses never carry stack traces: every
:class:`TokenGuardError` maps to its own ``error``/``status`` pair with a
fixed description, and anything else becomes a bare ``server_error``.
"""

from __future__ import annotations

import base64
import hmac
import json
import logging
import math
import socket
import threading
import time
from dataclasses import dataclass
from typing import Any
from urllib.parse import parse_qs, urlencode

import uvicorn
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, RedirectResponse
from starlette.concurrency import run_in_threadpool

from .authz import AppState
from .config import ServerConfig
from .errors import (
    AdminAuthRequired,
    BindFailure,
    ConsentDenied,
    InvalidRequest,
    InvalidVerifier,
    LoginRequired,
    RateLimited,
    ScopeNotAllowed,
    TokenError,
    TokenGuardError,
    UnsupportedGrantType,
    UnsupportedPkceMethod,
    UnsupportedResponseType,
)
from .runtime import TokenPlatform

logger = logging.getLogger(__name__)

_NO_STORE = {"Cache-Control": "no-store", "Pragma": "no-cache"}
# failures reported back to the client's redirect uri rather than as JSON
_REDIRECTABLE = (ConsentDenied, ScopeNotAllowed, UnsupportedPkceMethod, InvalidVerifier)


def error_response(exc: TokenGuardError) -> JSONResponse:
    body = {"error": exc.error, "error_description": type(exc).description}
    headers = {}
    if isinstance(exc, TokenError):
        headers["WWW-Authenticate"] = f'Bearer error="{exc.error}"'
    if isinstance(exc, RateLimited):
        headers["Retry-After"] = str(max(1, math.ceil(exc.retry_after)))
    return JSONResponse(body, status_code=exc.status, headers=headers)


async def _form(request: Request) -> dict[str, str]:
    try:
        raw = parse_qs((await request.body()).decode("utf-8"), keep_blank_values=True, strict_parsing=False)
    except UnicodeDecodeError:
        raise InvalidRequest("body is not utf-8") from None
    if any(len(v) > 1 for v in raw.values()):
        raise InvalidRequest("repeated parameter")
    return {k: v[0] for k, v in raw.items()}


async def _json(request: Request) -> dict[str, Any]:
    try:
        doc = json.loads(await request.body() or b"{}")
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise InvalidRequest("body is not JSON") from None
    if not isinstance(doc, dict):
        raise InvalidRequest("body must be a JSON object")
    return doc


def _require(params: dict, *names: str) -> list[str]:
    values = []
    for name in names:
        value = params.get(name)
        if not isinstance(value, str) or not value:
            raise InvalidRequest(f"missing {name}")
        values.append(value)
    return values


def _client_credentials(request: Request, form: dict) -> tuple[str | None, str | None]:
    """HTTP Basic wins over form fields, as usual for the token endpoint."""
    auth = request.headers.get("authorization", "")
    if auth.lower().startswith("basic "):
        try:
            client_id, _, secret = base64.b64decode(auth[6:]).decode("utf-8").partition(":")
        except (ValueError, UnicodeDecodeError):
            raise InvalidRequest("malformed basic credentials") from None
        return client_id, secret
    return form.get("client_id"), form.get("client_secret")


def _bearer(request: Request) -> str | None:
    auth = request.headers.get("authorization", "")
    return auth[7:].strip() if auth.lower().startswith("bearer ") else None


def _context(request: Request) -> dict[str, str | None]:
    return {"device_id": request.headers.get("x-device-id"), "ip": request.headers.get("x-client-ip")}


def create_app(platform: TokenPlatform) -> FastAPI:
    app = FastAPI(title="tokenguard", docs_url=None, redoc_url=None, openapi_url=None)
    app.state.platform = platform
    config = platform.config

    @app.exception_handler(TokenGuardError)
    async def _handle_known(request: Request, exc: TokenGuardError):
        return error_response(exc)

    @app.exception_handler(Exception)
    async def _handle_unknown(request: Request, exc: Exception):
        logger.exception("unhandled error on %s", request.url.path)
        return JSONResponse({"error": "server_error", "error_description": "internal error"}, status_code=500)

    def require_admin(request: Request) -> None:
        if config.admin_token is None:
            return
        presented = _bearer(request) or ""
        if not hmac.compare_digest(presented.encode(), config.admin_token.encode()):
            raise AdminAuthRequired()

    def admit(client_id: str, endpoint: str) -> None:
        decision = platform.admit(client_id, endpoint=endpoint)
        if not decision.allowed:
            raise RateLimited(decision.retry_after)

    # -- OAuth endpoints ------------------------------------------------------

    @app.get("/authorize")
    async def authorize(request: Request):
        q = dict(request.query_params)
        response_type, client_id, redirect_uri = _require(q, "response_type", "client_id", "redirect_uri")
        if response_type != "code":
            raise UnsupportedResponseType(response_type)
        user_id = platform.authenticate(q.get("username", ""))
        if not user_id:
            raise LoginRequired()
        consent = q.get("consent", "").lower() in ("1", "true", "yes", "allow")
        state = q.get("state")
        try:
            code = await run_in_threadpool(
                platform.authz.begin_authorization,
                client_id, redirect_uri, q.get("scope", "").split(),
                q.get("code_challenge", ""), q.get("code_challenge_method", ""),
                user_id, consent, platform.now(), context=_context(request),
            )
        except _REDIRECTABLE as exc:
            params = {"error": exc.error, "error_description": type(exc).description}
            if state is not None:
                params["state"] = state
            return RedirectResponse(f"{redirect_uri}?{urlencode(params)}", status_code=302)
        params = {"code": code.code}
        if state is not None:
            params["state"] = state
        return RedirectResponse(f"{redirect_uri}?{urlencode(params)}", status_code=302)

    @app.post("/token")
    async def token(request: Request):
        form = await _form(request)
        client_id, client_secret = _client_credentials(request, form)
        if not client_id:
            raise InvalidRequest("missing client_id")
        admit(client_id, "token")
        grant_type = form.get("grant_type")
        now = platform.now()
        try:
            if grant_type == "authorization_code":
                code, redirect_uri, verifier = _require(form, "code", "redirect_uri", "code_verifier")
                pair = await run_in_threadpool(platform.authz.exchange_code, code, client_id, client_secret,
                                               verifier, redirect_uri, now)
            elif grant_type == "refresh_token":
                (refresh,) = _require(form, "refresh_token")
                pair = await run_in_threadpool(platform.authz.refresh_tokens, refresh, client_id, now,
                                               client_secret)
            else:
                raise UnsupportedGrantType(str(grant_type))
        except TokenGuardError:
            platform.record_outcome(client_id, False, endpoint="token")
            raise
        platform.record_outcome(client_id, True, endpoint="token")
        return JSONResponse(pair.to_response(), headers=_NO_STORE)

    @app.post("/introspect")
    async def introspect(request: Request):
        form = await _form(request)
        client_id, client_secret = _client_credentials(request, form)
        (token_value,) = _require(form, "token")
        if not client_id:
            raise InvalidRequest("missing client_id")
        admit(client_id, "api")
        platform.authz.authenticate_client(client_id, client_secret)
        result = await run_in_threadpool(platform.introspect, token_value)
        return JSONResponse(result.to_dict(), headers=_NO_STORE)

    @app.post("/revoke")
    async def revoke(request: Request):
        if request.headers.get("content-type", "").startswith("application/json"):
            # administrative revocation by kind
            require_admin(request)
            doc = await _json(request)
            kind, subject = _require(doc, "kind", "subject")
            entry = await run_in_threadpool(platform.revoke, kind, subject,
                                            cutoff_iat=doc.get("cutoff_iat"), reason=doc.get("reason", ""))
            return JSONResponse(entry.to_dict())
        form = await _form(request)
        client_id, client_secret = _client_credentials(request, form)
        (token_value,) = _require(form, "token")
        if client_id:
            platform.authz.authenticate_client(client_id, client_secret)
        await run_in_threadpool(platform.revoke_token, token_value, client_id=client_id)
        # unknown tokens get the same answer as revoked ones
        return JSONResponse({}, status_code=200)

    @app.get("/keys")
    async def keys():
        return JSONResponse(platform.keystore.publish_key_set().to_dict())

    @app.get("/revocation/digest")
    async def digest():
        return JSONResponse(platform.digest().to_dict())

    @app.get("/resource")
    async def resource(request: Request):
        """Sample protected resource: verifies the bearer token and echoes its subject."""
        presented = _bearer(request)
        if not presented:
            raise LoginRequired()
        required = request.query_params.get("scope", "").split()
        claims = await run_in_threadpool(platform.verify_access, presented, observed=_context(request),
                                         required_scopes=required)
        admit(claims.app_id, "api")
        return JSONResponse({"sub": claims.sub, "app_id": claims.app_id, "scope": claims.scope})

    # -- administration -------------------------------------------------------

    @app.post("/admin/clients", status_code=201)
    async def register_client(request: Request):
        require_admin(request)
        doc = await _json(request)
        (name,) = _require(doc, "name")
        client, secret = await run_in_threadpool(
            platform.authz.register_client, name, doc.get("redirect_uris", []), doc.get("scopes", []),
            now=platform.now(), public=bool(doc.get("public", False)),
            token_mode=doc.get("token_mode", "by_value"), trust_tier=doc.get("trust_tier", "unknown"),
        )
        if doc.get("activate"):
            client = await run_in_threadpool(platform.activate_client, client.client_id)
        return JSONResponse({**client.to_public_dict(), "client_secret": secret}, status_code=201,
                            headers=_NO_STORE)

    @app.post("/admin/clients/{client_id}/state")
    async def client_state(client_id: str, request: Request):
        require_admin(request)
        doc = await _json(request)
        (state,) = _require(doc, "state")
        try:
            target = AppState(state)
        except ValueError:
            raise InvalidRequest("unknown state") from None
        client = await run_in_threadpool(platform.authz.transition_app_state, client_id, target, platform.now())
        return JSONResponse(client.to_public_dict())

    @app.post("/admin/keys/rotate")
    async def rotate_keys(request: Request):
        require_admin(request)
        doc = await _json(request)
        now = platform.now()
        generated = None
        if doc.get("generate"):
            key = platform.keystore.generate_key(doc["generate"], int(doc.get("not_before", now)), now=now)
            generated = key.kid
        report = platform.keystore.rotate_keys(now, force=bool(doc.get("force", False)))
        return JSONResponse({"generated": generated, "activated": report.activated, "rolled": report.rolled,
                             "retired": list(report.retired), "version": platform.keystore.version})

    @app.get("/admin/scopes")
    async def list_scopes(request: Request):
        require_admin(request)
        return JSONResponse({"scopes": platform.scopes.to_config()})

    @app.post("/admin/scopes")
    async def update_scopes(request: Request):
        require_admin(request)
        doc = await _json(request)
        if "scopes" in doc:
            platform.load_scopes(doc["scopes"])
        if "deprecate" in doc:
            platform.deprecate_scope(doc["deprecate"])
        return JSONResponse({"scopes": platform.scopes.to_config()})

    @app.get("/audit/events")
    async def audit_events(request: Request):
        require_admin(request)
        q = request.query_params
        try:
            since = int(q["since"]) if "since" in q else None
            until = int(q["until"]) if "until" in q else None
        except ValueError:
            raise InvalidRequest("since/until must be integers") from None
        events = platform.audit.query_events(user_id=q.get("user_id"), client_id=q.get("client_id"),
                                             token_id=q.get("token_id"), since=since, until=until,
                                             event_type=q.get("event_type"))
        return JSONResponse({"events": [e.to_dict() for e in events]})

    return app


@dataclass
class ServerHandle:
    url: str
    platform: TokenPlatform
    server: uvicorn.Server
    thread: threading.Thread

    def stop(self, timeout: float = 10.0) -> None:
        """Stop accepting connections, let in-flight requests finish, then close storage."""
        self.server.should_exit = True
        self.thread.join(timeout)
        self.platform.close()

    def __enter__(self) -> "ServerHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


def serve(config: ServerConfig, *, platform: TokenPlatform | None = None, startup_timeout: float = 10.0,
          **platform_kwargs) -> ServerHandle:
    """Start the server on a background thread and return once it is listening."""
    config.validate()
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        sock.bind((config.host, config.port))
    except OSError as exc:
        sock.close()
        raise BindFailure(f"{config.host}:{config.port}: {exc}") from exc
    platform = platform or TokenPlatform(config, **platform_kwargs)
    app = create_app(platform)
    server = uvicorn.Server(uvicorn.Config(app, log_level="warning", lifespan="off",
                                           timeout_graceful_shutdown=5))
    thread = threading.Thread(target=server.run, kwargs={"sockets": [sock]}, daemon=True,
                              name="tokenguard-http")
    thread.start()
    deadline = time.monotonic() + startup_timeout
    while not server.started:
        if not thread.is_alive() or time.monotonic() > deadline:
            server.should_exit = True
            raise BindFailure("server failed to start")
        time.sleep(0.01)
    host, port = sock.getsockname()[:2]
    return ServerHandle(f"http://{host}:{port}", platform, server, thread)
