"""Versioned signing keys with publish-ahead rotation and rollover windows.

Key lifecycle::

    pending --> active --> rollover --> retired

New keys are generated ``pending`` and appear in the published key set
immediately, so verifiers learn them before they ever sign.  Rotation
moves the eligible pending key to ``active`` and the previous active key
to ``rollover``; a rollover key keeps verifying until ``rollover_until``
and is then retired (its secret material is dropped).
"""

from __future__ import annotations

import enum
import logging
import secrets
import threading
from dataclasses import dataclass, field
from typing import Any, Callable

from . import algorithms
from .errors import InvalidState, KeyRetired, NoPendingKey, UnknownKey
from .persistence import MemoryBackend

logger = logging.getLogger(__name__)

DEFAULT_ROLLOVER_WINDOW = 24 * 3600

_NS_KEYS = "keys"
_NS_META = "keystore"


class KeyState(str, enum.Enum):
    PENDING = "pending"
    ACTIVE = "active"
    ROLLOVER = "rollover"
    RETIRED = "retired"


@dataclass
class SigningKey:
    kid: str
    algorithm: str
    state: KeyState
    not_before: int
    created_at: int
    private: Any = field(default=None, repr=False)
    public: Any = field(default=None, repr=False)
    rollover_until: int | None = None

    @property
    def family(self) -> str:
        return algorithms.FAMILY[self.algorithm]

    def sign(self, data: bytes) -> bytes:
        return algorithms.sign(self.algorithm, self.private, data)

    def verify(self, data: bytes, signature: bytes) -> bool:
        return algorithms.verify(self.algorithm, self.private, self.public, data, signature)

    def public_entry(self) -> dict:
        return {
            "kid": self.kid,
            "alg": self.algorithm,
            "state": self.state.value,
            "pub": algorithms.public_jwk(self.algorithm, self.public),
        }

    def to_record(self) -> dict:
        return {
            "kid": self.kid,
            "alg": self.algorithm,
            "state": self.state.value,
            "not_before": self.not_before,
            "created_at": self.created_at,
            "rollover_until": self.rollover_until,
            "secret": None if self.private is None else algorithms.export_private(self.algorithm, self.private),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SigningKey":
        private = public = None
        if rec.get("secret") is not None:
            private, public = algorithms.import_private(rec["alg"], rec["secret"])
        return cls(
            kid=rec["kid"],
            algorithm=rec["alg"],
            state=KeyState(rec["state"]),
            not_before=rec["not_before"],
            created_at=rec["created_at"],
            private=private,
            public=public,
            rollover_until=rec.get("rollover_until"),
        )


@dataclass(frozen=True)
class KeySetDocument:
    version: int
    keys: tuple[dict, ...]

    def to_dict(self) -> dict:
        return {"version": self.version, "keys": [dict(k) for k in self.keys]}

    def kids(self) -> set[str]:
        return {k["kid"] for k in self.keys}


@dataclass(frozen=True)
class RotationReport:
    activated: str | None = None
    rolled: str | None = None
    retired: tuple[str, ...] = ()

    @property
    def changed(self) -> bool:
        return bool(self.activated or self.rolled or self.retired)


class KeyStore:
    """Single-writer key store; all reads see a consistent snapshot."""

    def __init__(
        self,
        backend: MemoryBackend | None = None,
        *,
        rollover_window: int = DEFAULT_ROLLOVER_WINDOW,
        accept_pending: bool = False,
        signing_algorithm: str = algorithms.DEFAULT_ALGORITHM,
    ) -> None:
        if rollover_window <= 0:
            raise ValueError("rollover_window must be positive")
        self.backend = backend if backend is not None else MemoryBackend()
        self.rollover_window = rollover_window
        self.accept_pending = accept_pending
        self.signing_algorithm = algorithms.check_algorithm(signing_algorithm)
        self._lock = threading.RLock()
        self._keys: dict[str, SigningKey] = {
            kid: SigningKey.from_record(rec) for kid, rec in self.backend.items(_NS_KEYS).items()
        }
        self._version = (self.backend.get(_NS_META, "version") or {}).get("value", 0)

    # -- writers ------------------------------------------------------------

    def generate_key(self, algorithm: str, not_before: int, *, now: int | None = None,
                     secret: bytes | None = None) -> SigningKey:
        algorithms.check_algorithm(algorithm)
        private, public = algorithms.generate_material(algorithm, secret)
        with self._lock:
            kid = secrets.token_hex(16)
            while kid in self._keys:
                kid = secrets.token_hex(16)
            key = SigningKey(
                kid=kid,
                algorithm=algorithm,
                state=KeyState.PENDING,
                not_before=int(not_before),
                created_at=int(not_before if now is None else now),
                private=private,
                public=public,
            )
            self._store(key)
            self._bump()
            logger.info("generated %s key %s (not_before=%s)", algorithm, kid, not_before)
            return key

    def rotate_keys(self, now: int, *, force: bool = False) -> RotationReport:
        """Activate eligible pending keys and retire expired rollover keys.

        With ``force`` the earliest pending key of the issuing family is
        activated regardless of ``not_before``.
        """
        with self._lock:
            activated = rolled = None
            if force:
                pending = self._pending_in(algorithms.FAMILY[self.signing_algorithm])
                if not pending:
                    raise NoPendingKey(self.signing_algorithm)
                activated, rolled = self._activate(pending[0], now)
            else:
                for family in sorted({k.family for k in self._keys.values()}):
                    eligible = [k for k in self._pending_in(family) if k.not_before <= now]
                    if eligible:
                        a, r = self._activate(eligible[0], now)
                        # report the issuing family when several rotate at once
                        if activated is None or family == algorithms.FAMILY[self.signing_algorithm]:
                            activated, rolled = a, r
            retired = self._retire_expired(now)
            report = RotationReport(activated=activated, rolled=rolled, retired=tuple(retired))
            if report.changed:
                self._bump()
            return report

    def activate_key(self, kid: str, now: int) -> RotationReport:
        with self._lock:
            key = self._keys.get(kid)
            if key is None:
                raise UnknownKey(kid)
            if key.state is not KeyState.PENDING:
                raise InvalidState(f"{kid} is {key.state.value}")
            activated, rolled = self._activate(key, now)
            retired = self._retire_expired(now)
            self._bump()
            return RotationReport(activated=activated, rolled=rolled, retired=tuple(retired))

    # -- readers ------------------------------------------------------------

    def resolve_key(self, kid: str, now: int | None = None) -> SigningKey:
        """Key for verification.

        Passing ``now`` also treats a rollover key past its window as
        retired, even if no rotation tick has run yet.
        """
        with self._lock:
            key = self._keys.get(kid)
            if key is None:
                raise UnknownKey(kid)
            if key.state is KeyState.RETIRED:
                raise KeyRetired(kid)
            if key.state is KeyState.ROLLOVER and now is not None and now > key.rollover_until:
                raise KeyRetired(kid)
            if key.state is KeyState.PENDING and not self.accept_pending:
                raise UnknownKey(kid)
            return key

    def resolver(self, now: int | None = None) -> Callable[[str], SigningKey]:
        return lambda kid: self.resolve_key(kid, now)

    def active_key(self, algorithm: str | None = None) -> SigningKey:
        family = algorithms.FAMILY[algorithm or self.signing_algorithm]
        with self._lock:
            for key in self._keys.values():
                if key.state is KeyState.ACTIVE and key.family == family:
                    return key
        raise UnknownKey(f"no active {family} key")

    def get(self, kid: str) -> SigningKey:
        with self._lock:
            try:
                return self._keys[kid]
            except KeyError:
                raise UnknownKey(kid) from None

    def keys(self) -> list[SigningKey]:
        with self._lock:
            return sorted(self._keys.values(), key=lambda k: (k.created_at, k.kid))

    def publish_key_set(self) -> KeySetDocument:
        with self._lock:
            entries = tuple(
                k.public_entry() for k in self.keys() if k.state is not KeyState.RETIRED
            )
            return KeySetDocument(version=self._version, keys=entries)

    @property
    def version(self) -> int:
        return self._version

    def ensure_signing_key(self, now: int) -> SigningKey:
        """Bootstrap helper: make sure the issuing family has an active key."""
        with self._lock:
            try:
                return self.active_key()
            except UnknownKey:
                key = self.generate_key(self.signing_algorithm, now, now=now)
                self.activate_key(key.kid, now)
                return key

    # -- internals ----------------------------------------------------------

    def _pending_in(self, family: str) -> list[SigningKey]:
        pending = [k for k in self._keys.values() if k.state is KeyState.PENDING and k.family == family]
        return sorted(pending, key=lambda k: (k.not_before, k.created_at, k.kid))

    def _activate(self, key: SigningKey, now: int) -> tuple[str, str | None]:
        rolled = None
        for other in self._keys.values():
            if other.state is KeyState.ACTIVE and other.family == key.family:
                other.state = KeyState.ROLLOVER
                other.rollover_until = int(now) + self.rollover_window
                self._store(other)
                rolled = other.kid
        key.state = KeyState.ACTIVE
        self._store(key)
        logger.info("activated key %s, rolled %s", key.kid, rolled)
        return key.kid, rolled

    def _retire_expired(self, now: int) -> list[str]:
        retired = []
        for key in self.keys():
            if key.state is KeyState.ROLLOVER and now > key.rollover_until:
                key.state = KeyState.RETIRED
                key.private = None
                key.public = None
                self._store(key)
                retired.append(key.kid)
        return retired

    def _store(self, key: SigningKey) -> None:
        self._keys[key.kid] = key
        self.backend.put(_NS_KEYS, key.kid, key.to_record())

    def _bump(self) -> None:
        self._version += 1
        self.backend.put(_NS_META, "version", {"value": self._version})


def resolver_from_key_set(document: KeySetDocument | dict) -> Callable[[str], SigningKey]:
    """Verification-only resolver built from a published key set.

    Lets a resource server verify asymmetric tokens using nothing but the
    key-set document.  Symmetric keys are never published, so HS256
    tokens always resolve to :class:`UnknownKey` here.
    """
    doc = document.to_dict() if isinstance(document, KeySetDocument) else document
    keys: dict[str, SigningKey] = {}
    for entry in doc["keys"]:
        state = KeyState(entry["state"])
        if entry.get("pub") is None or state not in (KeyState.ACTIVE, KeyState.ROLLOVER):
            continue
        keys[entry["kid"]] = SigningKey(
            kid=entry["kid"],
            algorithm=entry["alg"],
            state=state,
            not_before=0,
            created_at=0,
            public=algorithms.public_from_jwk(entry["alg"], entry["pub"]),
        )

    def resolve(kid: str) -> SigningKey:
        try:
            return keys[kid]
        except KeyError:
            raise UnknownKey(kid) from None

    return resolve
