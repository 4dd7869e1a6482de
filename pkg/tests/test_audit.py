import dataclasses

import pytest

from conftest import T0, example_claims
from tokenguard.audit import AuditLog, EventType, JsonlSink, Rule, detect_anomalies
from tokenguard.errors import SinkUnavailable


def test_sequence_and_query_ranges():
    log = AuditLog()
    for i, kind in enumerate(["issue", "use", "use", "revoke"]):
        log.record_event(kind, timestamp=T0 + i * 10, user_id="u1" if i % 2 == 0 else "u2", client_id="c")
    assert [e.seq for e in log.events()] == [1, 2, 3, 4]
    assert [e.seq for e in log.query_events(since=T0 + 10, until=T0 + 20)] == [2, 3]  # inclusive
    assert [e.seq for e in log.query_events(user_id="u1")] == [1, 3]
    assert [e.seq for e in log.query_events(event_type=EventType.USE, user_id="u2")] == [2]
    assert log.query_events(client_id="other") == []
    with pytest.raises(ValueError):
        log.record_event("issue", timestamp=T0, outcome="maybe")


def test_fingerprint_fields_without_values_are_dropped():
    log = AuditLog()
    log.record_event("use", timestamp=T0, fingerprint={"device_id": "d", "ip": None})
    assert log.events()[0].fingerprint == {"device_id": "d"}


def test_fingerprint_check():
    log = AuditLog()
    c = example_claims()
    assert log.check_fingerprint(c, {"device_id": "device-8873abc", "ip": "203.0.113.42"}, T0).match
    result = log.check_fingerprint(c, {"device_id": "device-8873abc", "ip": "198.51.100.7"}, T0)
    assert result.mismatched == ("ip",)
    (flag,) = log.flags
    assert (flag.rule, flag.subject, flag.recommended_action) == (Rule.GEO_OR_IP_CHANGE, "1234567890", "flag")
    (ev,) = log.events()
    assert ev.event_type is EventType.VERIFY_FAIL and ev.reason == "fingerprint_mismatch"
    # unbound fields cannot mismatch
    unbound = dataclasses.replace(example_claims(), device_id=None, ip=None)
    assert log.check_fingerprint(unbound, {}, T0).match


def test_auto_revoke_changes_recommended_action():
    log = AuditLog(auto_revoke=True)
    log.check_fingerprint(example_claims(), {"device_id": "other", "ip": "other"}, T0)
    assert {f.rule for f in log.flags} == {Rule.FINGERPRINT_MISMATCH, Rule.GEO_OR_IP_CHANGE}
    assert all(f.recommended_action == "revoke" for f in log.flags)


def test_failed_auth_burst_threshold():
    log = AuditLog()
    for i in range(4):
        log.record_event("verify_fail", timestamp=T0 + i, user_id="u", outcome="failure")
    assert log.detect_anomalies(60, T0 + 10) == []
    log.record_event("verify_fail", timestamp=T0 + 5, user_id="u", outcome="failure")
    (flag,) = log.detect_anomalies(60, T0 + 10)
    assert (flag.rule, flag.subject, flag.evidence) == (Rule.FAILED_AUTH_BURST, "u", (1, 5))
    assert log.detect_anomalies(60, T0 + 100) == []  # outside the window


def test_volume_spike():
    log = AuditLog()
    # baseline: 2 uses per 60 s over the preceding 600 s
    for i in range(20):
        log.record_event("use", timestamp=T0 + i * 30, client_id="c")
    now = T0 + 600 + 59
    for _ in range(10):  # 10 == 5 x mean: not strictly above
        log.record_event("use", timestamp=now, client_id="c")
    assert log.detect_anomalies(60, now) == []
    log.record_event("use", timestamp=now, client_id="c")
    flags = log.detect_anomalies(60, now)
    assert [f.rule for f in flags] == [Rule.VOLUME_SPIKE]


def test_no_baseline_no_spike():
    events = AuditLog()
    for _ in range(1000):
        events.record_event("use", timestamp=T0, client_id="new")
    assert detect_anomalies(events.events(), 60, T0) == []


def test_jsonl_sink_round_trip(tmp_path):
    path = tmp_path / "audit.jsonl"
    log = AuditLog(JsonlSink(path, fsync=False))
    log.record_event("issue", timestamp=T0, token_id="j", detail={"scope": "r"})
    log.record_event("revoke", timestamp=T0 + 1, reason="test")
    again = AuditLog(JsonlSink(path, fsync=False))
    assert again.events() == log.events()
    assert again.record_event("use", timestamp=T0 + 2) == 3


class BrokenSink:
    def read(self):
        return []

    def write(self, record):
        raise RuntimeError("disk gone")


def test_fail_closed():
    log = AuditLog(BrokenSink())
    with pytest.raises(SinkUnavailable):
        log.record_event("issue", timestamp=T0)
    assert len(log) == 0


def test_unwritable_jsonl_path(tmp_path):
    (tmp_path / "dir").mkdir()
    with pytest.raises(SinkUnavailable):
        JsonlSink(tmp_path / "dir", fsync=False).write({"x": 1})
