"""Per-client token buckets whose rate follows an adaptive trust tier.

Each client refills at ``base_rate * multiplier[tier]`` tokens per second
with a one-second burst capacity.  Outcomes are tallied in fixed windows;
:meth:`RateLimiter.reclassify` promotes a client one tier after a run of
clean windows and demotes it one tier on a bad window or a revoke-grade
anomaly flag.
"""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

from .authz import TrustTier

TIER_ORDER = (TrustTier.UNKNOWN, TrustTier.VERIFIED, TrustTier.TRUSTED)


@dataclass(frozen=True)
class TierPolicy:
    base_rate: float = 10.0
    multipliers: dict = field(default_factory=lambda: {
        TrustTier.UNKNOWN: 1.0, TrustTier.VERIFIED: 10.0, TrustTier.TRUSTED: 100.0,
    })
    burst_seconds: float = 1.0
    window_seconds: int = 60
    promotion_windows: int = 3
    promote_error_max: float = 0.05
    demote_error_min: float = 0.2

    def __post_init__(self) -> None:
        m = [self.multipliers[t] for t in TIER_ORDER]
        if not (0 < m[0] <= m[1] <= m[2]):
            raise ValueError("tier multipliers must be positive and non-decreasing")
        if self.base_rate <= 0 or self.burst_seconds <= 0 or self.window_seconds <= 0:
            raise ValueError("rates and durations must be positive")
        if self.promotion_windows < 1:
            raise ValueError("promotion_windows must be >= 1")

    def rate(self, tier: TrustTier) -> float:
        return self.base_rate * self.multipliers[tier]

    def to_dict(self) -> dict:
        return {
            "base_rate": self.base_rate,
            "multipliers": {t.value: v for t, v in self.multipliers.items()},
            "burst_seconds": self.burst_seconds,
            "window_seconds": self.window_seconds,
            "promotion_windows": self.promotion_windows,
            "promote_error_max": self.promote_error_max,
            "demote_error_min": self.demote_error_min,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TierPolicy":
        doc = dict(doc)
        if "multipliers" in doc:
            doc["multipliers"] = {TrustTier(k): float(v) for k, v in doc["multipliers"].items()}
        return cls(**doc)


@dataclass
class WindowStats:
    window_start: float
    success_count: int = 0
    error_count: int = 0
    denied_count: int = 0

    @property
    def total(self) -> int:
        return self.success_count + self.error_count

    @property
    def error_ratio(self) -> float:
        return self.error_count / self.total if self.total else 0.0


@dataclass(frozen=True)
class Decision:
    allowed: bool
    retry_after: float = 0.0

    def __bool__(self) -> bool:
        return self.allowed


@dataclass
class RateLimitState:
    client_id: str
    tier: TrustTier
    capacity: float
    level: float
    refill_rate: float
    last_refill: float
    window: WindowStats
    history: deque = field(default_factory=deque)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)


class RateLimiter:
    def __init__(self, policy: TierPolicy | None = None) -> None:
        self.policy = policy or TierPolicy()
        self._states: dict[str, RateLimitState] = {}
        self._lock = threading.Lock()

    def state(self, client_id: str, now: float = 0.0, tier: TrustTier | str | None = None) -> RateLimitState:
        with self._lock:
            st = self._states.get(client_id)
            if st is None:
                tier = TrustTier(tier) if tier is not None else TrustTier.UNKNOWN
                rate = self.policy.rate(tier)
                cap = rate * self.policy.burst_seconds
                st = RateLimitState(client_id, tier, cap, cap, rate, now, WindowStats(now))
                self._states[client_id] = st
            return st

    def clients(self) -> list[str]:
        with self._lock:
            return sorted(self._states)

    def set_tier(self, client_id: str, tier: TrustTier | str, now: float = 0.0) -> None:
        st = self.state(client_id, now, tier)
        with st.lock:
            self._apply_tier(st, TrustTier(tier))

    def check_request(self, client_id: str, now: float) -> Decision:
        st = self.state(client_id, now)
        with st.lock:
            self._refill(st, now)
            if st.level >= 1.0:
                st.level -= 1.0
                return Decision(True)
            return Decision(False, (1.0 - st.level) / st.refill_rate)

    def record_outcome(self, client_id: str, outcome: str, latency: float = 0.0, *, now: float) -> WindowStats:
        if outcome not in ("success", "error", "denied"):
            raise ValueError(f"unknown outcome {outcome!r}")
        st = self.state(client_id, now)
        with st.lock:
            self._roll(st, now)
            setattr(st.window, f"{outcome}_count", getattr(st.window, f"{outcome}_count") + 1)
            return WindowStats(**vars(st.window))

    def reclassify(self, client_id: str, now: float, flags: Iterable = ()) -> TrustTier:
        """Apply the promotion/demotion rules to completed windows.

        ``flags`` are anomaly flags; only those whose subject is this client
        count.  One step per call, never past the ends of the tier order.
        """
        st = self.state(client_id, now)
        mine = [f for f in flags if getattr(f, "subject", None) == client_id]
        with st.lock:
            self._roll(st, now)
            idx = TIER_ORDER.index(st.tier)
            last = st.history[-1] if st.history else None
            bad_window = last is not None and last.error_ratio > self.policy.demote_error_min
            revoke_flag = any(getattr(f, "recommended_action", "flag") == "revoke" for f in mine)
            if bad_window or revoke_flag:
                if idx > 0:
                    self._apply_tier(st, TIER_ORDER[idx - 1])
                st.history.clear()
                return st.tier
            n = self.policy.promotion_windows
            recent = list(st.history)[-n:]
            clean = (
                len(recent) == n
                and not mine
                and all(w.total > 0 and w.error_ratio < self.policy.promote_error_max for w in recent)
            )
            if clean and idx < len(TIER_ORDER) - 1:
                self._apply_tier(st, TIER_ORDER[idx + 1])
                st.history.clear()
            return st.tier

    def _refill(self, st: RateLimitState, now: float) -> None:
        elapsed = max(0.0, now - st.last_refill)
        st.level = min(st.capacity, st.level + elapsed * st.refill_rate)
        st.last_refill = max(st.last_refill, now)

    def _roll(self, st: RateLimitState, now: float) -> None:
        length = self.policy.window_seconds
        elapsed = int((now - st.window.window_start) // length)
        if elapsed <= 0:
            return
        keep = self.policy.promotion_windows + 1
        start = st.window.window_start
        st.history.append(st.window)
        # idle windows count as empty; only the most recent few matter
        for i in range(max(1, elapsed - keep), elapsed):
            st.history.append(WindowStats(start + i * length))
        st.window = WindowStats(start + elapsed * length)
        while len(st.history) > keep:
            st.history.popleft()

    def _apply_tier(self, st: RateLimitState, tier: TrustTier) -> None:
        st.tier = tier
        st.refill_rate = self.policy.rate(tier)
        st.capacity = st.refill_rate * self.policy.burst_seconds
        st.level = min(st.level, st.capacity)
