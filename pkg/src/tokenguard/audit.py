"""Append-only audit trail, fingerprint binding checks, and rule-based anomaly flags.

The log is fail-closed: if the sink cannot take a record, the caller's
operation fails with :class:`SinkUnavailable`.  Records are written to the
sink before they become visible in memory.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import threading
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import SinkUnavailable

logger = logging.getLogger(__name__)

# detector defaults
FAILED_AUTH_THRESHOLD = 5
SPIKE_MULTIPLIER = 5.0
BASELINE_SECONDS = 600


class EventType(str, enum.Enum):
    ISSUE = "issue"
    USE = "use"
    REFRESH = "refresh"
    REVOKE = "revoke"
    VERIFY_FAIL = "verify_fail"
    ADMIN = "admin"


class Rule(str, enum.Enum):
    FAILED_AUTH_BURST = "failed_auth_burst"
    FINGERPRINT_MISMATCH = "fingerprint_mismatch"
    GEO_OR_IP_CHANGE = "geo_or_ip_change"
    VOLUME_SPIKE = "volume_spike"


@dataclass(frozen=True)
class AuditEvent:
    seq: int
    event_type: EventType
    timestamp: int
    token_id: str | None = None
    user_id: str | None = None
    client_id: str | None = None
    fingerprint: Mapping[str, str] = field(default_factory=dict)
    outcome: str = "success"
    reason: str | None = None
    detail: Mapping[str, Any] = field(default_factory=dict)

    @property
    def failed(self) -> bool:
        return self.outcome == "failure"

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["event_type"] = self.event_type.value
        doc["fingerprint"] = dict(self.fingerprint)
        doc["detail"] = dict(self.detail)
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "AuditEvent":
        doc = dict(doc)
        doc["event_type"] = EventType(doc["event_type"])
        return cls(**doc)


@dataclass(frozen=True)
class AnomalyFlag:
    rule: Rule
    subject: str
    evidence: tuple[int, int]
    severity: str
    recommended_action: str = "flag"
    detail: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class FingerprintResult:
    mismatched: tuple[str, ...] = ()

    @property
    def match(self) -> bool:
        return not self.mismatched


# -- sinks ------------------------------------------------------------------

class MemorySink:
    def __init__(self) -> None:
        self.records: list[dict] = []

    def write(self, record: dict) -> None:
        self.records.append(record)

    def read(self) -> list[dict]:
        return list(self.records)


class JsonlSink:
    """Newline-delimited JSON file; each write is flushed (and fsynced)."""

    def __init__(self, path: str | os.PathLike, *, fsync: bool = True) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fsync = fsync

    def write(self, record: dict) -> None:
        try:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, separators=(",", ":")) + "\n")
                fh.flush()
                if self._fsync:
                    os.fsync(fh.fileno())
        except OSError as exc:
            raise SinkUnavailable(str(exc)) from exc

    def read(self) -> list[dict]:
        if not self.path.exists():
            return []
        with self.path.open(encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]


# -- log --------------------------------------------------------------------

class AuditLog:
    def __init__(self, sink=None, *, auto_revoke: bool = False) -> None:
        self.sink = sink if sink is not None else MemorySink()
        self.auto_revoke = auto_revoke
        self._lock = threading.Lock()
        self._events: list[AuditEvent] = [AuditEvent.from_dict(r) for r in self.sink.read()]
        self.flags: list[AnomalyFlag] = []

    def __len__(self) -> int:
        return len(self._events)

    def record_event(
        self,
        event_type: EventType | str,
        *,
        timestamp: int,
        token_id: str | None = None,
        user_id: str | None = None,
        client_id: str | None = None,
        fingerprint: Mapping[str, str | None] | None = None,
        outcome: str = "success",
        reason: str | None = None,
        detail: Mapping[str, Any] | None = None,
    ) -> int:
        if outcome not in ("success", "failure"):
            raise ValueError("outcome must be 'success' or 'failure'")
        fp = {k: v for k, v in (fingerprint or {}).items() if v is not None}
        with self._lock:
            event = AuditEvent(
                seq=len(self._events) + 1,
                event_type=EventType(event_type),
                timestamp=int(timestamp),
                token_id=token_id,
                user_id=user_id,
                client_id=client_id,
                fingerprint=fp,
                outcome=outcome,
                reason=reason,
                detail=dict(detail or {}),
            )
            try:
                self.sink.write(event.to_dict())
            except SinkUnavailable:
                raise
            except Exception as exc:
                raise SinkUnavailable(str(exc)) from exc
            self._events.append(event)
            return event.seq

    def events(self) -> list[AuditEvent]:
        with self._lock:
            return list(self._events)

    def query_events(
        self,
        *,
        user_id: str | None = None,
        client_id: str | None = None,
        token_id: str | None = None,
        since: int | None = None,
        until: int | None = None,
        event_type: EventType | str | None = None,
    ) -> list[AuditEvent]:
        """Matching events in sequence order; the time range is inclusive."""
        etype = EventType(event_type) if event_type is not None else None
        out = []
        for ev in self.events():
            if user_id is not None and ev.user_id != user_id:
                continue
            if client_id is not None and ev.client_id != client_id:
                continue
            if token_id is not None and ev.token_id != token_id:
                continue
            if since is not None and ev.timestamp < since:
                continue
            if until is not None and ev.timestamp > until:
                continue
            if etype is not None and ev.event_type is not etype:
                continue
            out.append(ev)
        return out

    def check_fingerprint(self, claims, observed: Mapping[str, str | None], now: int) -> FingerprintResult:
        """Compare the context bound into ``claims`` with what was observed.

        Only fields present in the claims can mismatch.  A mismatch is logged
        as a ``verify_fail`` event and raises one flag per rule hit.
        """
        mismatched = tuple(
            name for name in ("device_id", "ip")
            if getattr(claims, name) is not None and observed.get(name) != getattr(claims, name)
        )
        if not mismatched:
            return FingerprintResult()
        seq = self.record_event(
            EventType.VERIFY_FAIL,
            timestamp=now,
            token_id=claims.jti,
            user_id=claims.sub,
            client_id=claims.app_id,
            fingerprint=observed,
            outcome="failure",
            reason="fingerprint_mismatch",
            detail={"fields": list(mismatched)},
        )
        action = "revoke" if self.auto_revoke else "flag"
        for rule in _fingerprint_rules(mismatched):
            self.flags.append(AnomalyFlag(rule, claims.sub, (seq, seq), "high", action,
                                          {"fields": list(mismatched)}))
        return FingerprintResult(mismatched)

    def detect_anomalies(
        self,
        duration: int,
        now: int,
        *,
        failure_threshold: int = FAILED_AUTH_THRESHOLD,
        spike_multiplier: float = SPIKE_MULTIPLIER,
        baseline_seconds: int = BASELINE_SECONDS,
    ) -> list[AnomalyFlag]:
        return detect_anomalies(
            self.events(), duration, now,
            failure_threshold=failure_threshold,
            spike_multiplier=spike_multiplier,
            baseline_seconds=baseline_seconds,
            auto_revoke=self.auto_revoke,
        )


def _fingerprint_rules(fields: Iterable[str]) -> list[Rule]:
    rules = []
    if "device_id" in fields:
        rules.append(Rule.FINGERPRINT_MISMATCH)
    if "ip" in fields:
        rules.append(Rule.GEO_OR_IP_CHANGE)
    return rules


def detect_anomalies(
    events: Iterable[AuditEvent],
    duration: int,
    now: int,
    *,
    failure_threshold: int = FAILED_AUTH_THRESHOLD,
    spike_multiplier: float = SPIKE_MULTIPLIER,
    baseline_seconds: int = BASELINE_SECONDS,
    auto_revoke: bool = False,
) -> list[AnomalyFlag]:
    """Evaluate every rule over events with timestamps in ``[now - duration, now]``.

    ``volume_spike`` compares a client's ``use`` count in the window against
    the mean count per window-length over the preceding ``baseline_seconds``;
    clients with no baseline traffic are never flagged.
    """
    events = list(events)
    start = now - duration
    window = [e for e in events if start <= e.timestamp <= now]
    action = "revoke" if auto_revoke else "flag"
    flags: list[AnomalyFlag] = []

    failures: dict[str, list[int]] = defaultdict(list)
    for e in window:
        if e.failed:
            subject = e.user_id or e.client_id
            if subject is not None:
                failures[subject].append(e.seq)
    for subject in sorted(failures):
        seqs = failures[subject]
        if len(seqs) >= failure_threshold:
            flags.append(AnomalyFlag(Rule.FAILED_AUTH_BURST, subject, (seqs[0], seqs[-1]), "medium", action,
                                     {"count": len(seqs)}))

    grouped: dict[tuple[Rule, str], list[int]] = defaultdict(list)
    for e in window:
        if e.event_type is EventType.VERIFY_FAIL and e.reason == "fingerprint_mismatch" and e.user_id:
            for rule in _fingerprint_rules(e.detail.get("fields", ())):
                grouped[(rule, e.user_id)].append(e.seq)
    for (rule, subject) in sorted(grouped):
        seqs = grouped[(rule, subject)]
        flags.append(AnomalyFlag(rule, subject, (seqs[0], seqs[-1]), "high", action, {"count": len(seqs)}))

    current = Counter()
    current_seqs: dict[str, list[int]] = defaultdict(list)
    baseline = Counter()
    base_start = start - baseline_seconds
    for e in events:
        if e.event_type is not EventType.USE or e.client_id is None:
            continue
        if start <= e.timestamp <= now:
            current[e.client_id] += 1
            current_seqs[e.client_id].append(e.seq)
        elif base_start <= e.timestamp < start:
            baseline[e.client_id] += 1
    periods = baseline_seconds / duration if duration > 0 else 0
    for client in sorted(current):
        if not baseline[client] or not periods:
            continue
        mean = baseline[client] / periods
        if current[client] > spike_multiplier * mean:
            seqs = current_seqs[client]
            flags.append(AnomalyFlag(Rule.VOLUME_SPIKE, client, (seqs[0], seqs[-1]), "medium", "flag",
                                     {"count": current[client], "baseline_mean": mean}))
    return flags
