import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tokenguard.audit import AnomalyFlag, Rule
from tokenguard.authz import TrustTier
from tokenguard.rate_limit import RateLimiter, TierPolicy


def burst(limiter, client, now):
    n = 0
    while limiter.check_request(client, now):
        n += 1
    return n


def test_capacity_follows_tier():
    limiter = RateLimiter()
    assert burst(limiter, "u", 0) == 10
    limiter.set_tier("v", "verified")
    assert burst(limiter, "v", 0) == 100
    limiter.state("t", 0, TrustTier.TRUSTED)
    assert burst(limiter, "t", 0) == 1000


def test_refill_and_retry_after():
    limiter = RateLimiter()
    burst(limiter, "u", 0)
    decision = limiter.check_request("u", 0)
    assert not decision and decision.retry_after == pytest.approx(0.1)
    assert limiter.check_request("u", 0.1)
    assert burst(limiter, "u", 100) == 10  # never above capacity


def clean_window(limiter, client, start, n=20, errors=0):
    # windows are anchored at the first time the limiter sees the client
    for i in range(n):
        limiter.record_outcome(client, "error" if i < errors else "success", now=start)


def test_promotion_needs_three_clean_non_empty_windows():
    limiter = RateLimiter()
    for w in range(3):
        clean_window(limiter, "c", w * 60)
        assert limiter.reclassify("c", w * 60 + 30) is TrustTier.UNKNOWN  # current window not complete
    assert limiter.reclassify("c", 180) is TrustTier.VERIFIED
    assert burst(limiter, "c", 1000) == 100
    # history cleared: another promotion needs three fresh windows
    assert limiter.reclassify("c", 181) is TrustTier.VERIFIED


def test_empty_window_blocks_promotion():
    limiter = RateLimiter()
    clean_window(limiter, "c", 0)
    clean_window(limiter, "c", 120)  # 60..120 stays empty
    clean_window(limiter, "c", 180)
    assert limiter.reclassify("c", 240) is TrustTier.UNKNOWN


def test_error_ratio_thresholds():
    limiter = RateLimiter()
    limiter.set_tier("c", "trusted")
    clean_window(limiter, "c", 0, n=20, errors=4)  # 0.2 is not above the demotion threshold
    assert limiter.reclassify("c", 60) is TrustTier.TRUSTED
    clean_window(limiter, "c", 60, n=20, errors=5)  # 0.25
    assert limiter.reclassify("c", 120) is TrustTier.VERIFIED
    clean_window(limiter, "c", 120, n=20, errors=5)
    assert limiter.reclassify("c", 180) is TrustTier.UNKNOWN
    clean_window(limiter, "c", 180, n=20, errors=20)
    assert limiter.reclassify("c", 240) is TrustTier.UNKNOWN  # floor


def test_flags_affect_only_their_subject():
    limiter = RateLimiter()
    limiter.set_tier("c", "verified")
    limiter.set_tier("d", "verified")
    soft = AnomalyFlag(Rule.VOLUME_SPIKE, "c", (1, 1), "medium", "flag")
    hard = AnomalyFlag(Rule.FINGERPRINT_MISMATCH, "c", (2, 2), "high", "revoke")
    assert limiter.reclassify("c", 0, [soft]) is TrustTier.VERIFIED
    assert limiter.reclassify("d", 0, [hard]) is TrustTier.VERIFIED
    assert limiter.reclassify("c", 0, [hard]) is TrustTier.UNKNOWN
    # a soft flag still blocks promotion
    for w in range(3):
        clean_window(limiter, "d", w * 60)
    assert limiter.reclassify("d", 180, [AnomalyFlag(Rule.VOLUME_SPIKE, "d", (3, 3), "medium")]) is TrustTier.VERIFIED


def test_policy_validation_and_round_trip():
    with pytest.raises(ValueError):
        TierPolicy(multipliers={TrustTier.UNKNOWN: 5, TrustTier.VERIFIED: 1, TrustTier.TRUSTED: 100})
    with pytest.raises(ValueError):
        TierPolicy(base_rate=0)
    policy = TierPolicy(base_rate=2, window_seconds=30)
    assert TierPolicy.from_dict(policy.to_dict()) == policy
    with pytest.raises(ValueError):
        RateLimiter().record_outcome("c", "meh", now=0)


@settings(max_examples=100, deadline=None)
@given(times=st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=200))
def test_admissions_never_exceed_bucket_bound(times):
    limiter = RateLimiter()
    times = sorted(times)
    admitted = sum(bool(limiter.check_request("c", t)) for t in times)
    assert admitted <= 10 + 10 * (times[-1] - times[0]) + 1e-9
