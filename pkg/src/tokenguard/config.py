"""Server configuration: JSON file plus ``TOKENGUARD_*`` environment overrides.

Every key of :class:`ServerConfig` may appear in the JSON file; the same
key upper-cased with the ``TOKENGUARD_`` prefix overrides it from the
environment (``TOKENGUARD_ACCESS_TOKEN_LIFETIME=300``).  Nested values
(``rate_limit``, ``token_endpoint_rate_limit``, ``users``) take JSON text
in the environment.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Any, Mapping

from .algorithms import ALLOWED_ALGORITHMS, DEFAULT_ALGORITHM
from .authz import MAX_CODE_LIFETIME
from .errors import ConfigInvalid
from .rate_limit import TierPolicy
from .token_core import MAX_LEEWAY

ENV_PREFIX = "TOKENGUARD_"


@dataclass
class ServerConfig:
    issuer: str = "auth.example.com"
    audience: str = "api.example.com"
    access_token_lifetime: int = 600
    refresh_token_lifetime: int = 30 * 24 * 3600
    code_lifetime: int = 60
    rollover_window: int = 24 * 3600
    signing_algorithm: str = DEFAULT_ALGORITHM
    accept_pending_keys: bool = False
    leeway_seconds: int = 30
    cache_max_ttl: int = 30
    max_staleness: int = 60
    fail_safe: bool = True
    rate_limit: dict = field(default_factory=dict)
    token_endpoint_rate_limit: dict = field(default_factory=dict)
    scope_config: str | None = None
    persistence: str = "memory"
    data_dir: str | None = None
    host: str = "127.0.0.1"
    port: int = 8080
    admin_token: str | None = None
    users: dict = field(default_factory=dict)
    anomaly_auto_revoke: bool = False
    unique_client_names: bool = True
    fsync: bool = True

    def validate(self) -> "ServerConfig":
        problems = []
        for name in ("access_token_lifetime", "refresh_token_lifetime", "code_lifetime",
                     "rollover_window", "cache_max_ttl", "max_staleness"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                problems.append(f"{name} must be a positive integer")
        if not self.issuer or not self.audience:
            problems.append("issuer and audience must be non-empty")
        if isinstance(self.code_lifetime, int) and self.code_lifetime > MAX_CODE_LIFETIME:
            problems.append(f"code_lifetime may not exceed {MAX_CODE_LIFETIME}")
        if (isinstance(self.rollover_window, int) and isinstance(self.access_token_lifetime, int)
                and self.rollover_window < self.access_token_lifetime):
            problems.append("rollover_window must cover the access token lifetime")
        if not isinstance(self.leeway_seconds, int) or not 0 <= self.leeway_seconds <= MAX_LEEWAY:
            problems.append(f"leeway_seconds must be within [0, {MAX_LEEWAY}]")
        if self.signing_algorithm not in ALLOWED_ALGORITHMS:
            problems.append(f"signing_algorithm must be one of {ALLOWED_ALGORITHMS}")
        if self.persistence not in ("memory", "file"):
            problems.append("persistence must be 'memory' or 'file'")
        if self.persistence == "file" and not self.data_dir:
            problems.append("file persistence requires data_dir")
        if not isinstance(self.port, int) or not 0 <= self.port <= 65535:
            problems.append("port out of range")
        for name in ("rate_limit", "token_endpoint_rate_limit"):
            try:
                TierPolicy.from_dict(getattr(self, name))
            except (TypeError, ValueError, KeyError) as exc:
                problems.append(f"{name}: {exc}")
        if problems:
            raise ConfigInvalid("; ".join(problems))
        return self

    def tier_policy(self, name: str = "rate_limit") -> TierPolicy:
        return TierPolicy.from_dict(getattr(self, name))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(name: str, raw: str, default: Any) -> Any:
    kind = {f.name: f.type for f in dataclasses.fields(ServerConfig)}[name]
    if kind == "bool":
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if kind == "int":
        return int(raw)
    if kind == "dict":
        return json.loads(raw)
    if raw == "" and default is None:
        return None
    return raw


def load_config(path: str | os.PathLike | None = None, env: Mapping[str, str] | None = None,
                **overrides: Any) -> ServerConfig:
    """Defaults < JSON file < environment < keyword overrides; validated."""
    env = os.environ if env is None else env
    values: dict[str, Any] = {}
    known = {f.name for f in dataclasses.fields(ServerConfig)}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigInvalid(f"cannot read {path}: {exc}") from exc
        unknown = set(doc) - known
        if unknown:
            raise ConfigInvalid(f"unknown config keys: {sorted(unknown)}")
        values.update(doc)
    defaults = ServerConfig()
    for name in known:
        raw = env.get(ENV_PREFIX + name.upper())
        if raw is not None:
            try:
                values[name] = _coerce(name, raw, getattr(defaults, name))
            except ValueError as exc:
                raise ConfigInvalid(f"{ENV_PREFIX}{name.upper()}: {exc}") from exc
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        config = ServerConfig(**values)
    except TypeError as exc:
        raise ConfigInvalid(str(exc)) from exc
    return config.validate()
