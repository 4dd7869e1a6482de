"""Deterministic replica-sync simulation on a virtual clock.

One authoritative revocation registry issues and revokes tokens; ``n``
verifier replicas each pull a digest every ``sync_interval`` seconds
(replica ``i`` is phase-shifted by ``i * interval / n``) and verify
presented tokens against their local copy, in fail-safe mode.  The
report says whether any replica accepted a revoked token later than
``sync_interval + max_staleness`` after its revocation.
"""

from __future__ import annotations

import heapq
import logging
import random
from dataclasses import dataclass, field
from typing import Iterable, Union

from .algorithms import HS256
from .errors import RevocationStale, TokenError
from .keystore import KeyStore
from .revocation import (
    DEFAULT_MAX_STALENESS,
    RevocationDigest,
    RevocationRegistry,
    digest_check,
    merge_digest,
)
from .token_core import TokenClaims, VerificationPolicy, sign_token, verify_token

logger = logging.getLogger(__name__)

ISSUER = "harness-issuer"
AUDIENCE = "harness-api"


@dataclass(frozen=True)
class Issue:
    at: int
    token: str
    user: str
    app: str


@dataclass(frozen=True)
class Revoke:
    at: int
    kind: str
    subject: str


@dataclass(frozen=True)
class Present:
    at: int
    token: str
    replica: int | None = None  # None: every replica


@dataclass(frozen=True)
class Partition:
    """Cut ``replica`` off from syncing during ``[at, until)`` (forever when ``until`` is None)."""

    at: int
    replica: int
    until: int | None = None


Event = Union[Issue, Revoke, Present, Partition]


@dataclass
class ReplicaStats:
    accepted: int = 0
    rejected: int = 0
    stale_rejections: int = 0
    syncs: int = 0
    max_staleness: int = 0


@dataclass
class HarnessReport:
    n_replicas: int
    sync_interval: int
    max_staleness: int
    issued: int = 0
    accepted: int = 0
    rejected: int = 0
    max_staleness_observed: int = 0
    convergence_rounds: int = 0
    late_acceptances: list = field(default_factory=list)
    # accepts by a replica whose digest was already past max_staleness (must stay empty in fail-safe mode)
    stale_acceptances: list = field(default_factory=list)
    replicas: list = field(default_factory=list)

    @property
    def bound(self) -> int:
        return self.sync_interval + self.max_staleness

    @property
    def within_bound(self) -> bool:
        return not self.late_acceptances and not self.stale_acceptances

    def to_dict(self) -> dict:
        return {
            "n_replicas": self.n_replicas,
            "sync_interval": self.sync_interval,
            "max_staleness": self.max_staleness,
            "bound": self.bound,
            "issued": self.issued,
            "accepted": self.accepted,
            "rejected": self.rejected,
            "max_staleness_observed": self.max_staleness_observed,
            "convergence_rounds": self.convergence_rounds,
            "late_acceptances": [list(x) for x in self.late_acceptances],
            "stale_acceptances": [list(x) for x in self.stale_acceptances],
            "within_bound": self.within_bound,
            "replicas": [vars(r) for r in self.replicas],
        }


class _Replica:
    def __init__(self, index: int, digest: RevocationDigest) -> None:
        self.index = index
        self.digest = digest
        self.partitions: list[tuple[int, int | None]] = []
        self.stats = ReplicaStats()

    def partitioned(self, now: int) -> bool:
        return any(start <= now and (end is None or now < end) for start, end in self.partitions)


def run_replica_sync_harness(
    n_replicas: int,
    sync_interval: int,
    scenario: Iterable[Event],
    *,
    max_staleness: int = DEFAULT_MAX_STALENESS,
    token_lifetime: int = 3600,
) -> HarnessReport:
    if n_replicas < 2:
        raise ValueError("n_replicas must be >= 2")
    if sync_interval <= 0:
        raise ValueError("sync_interval must be positive")
    events = sorted(scenario, key=lambda e: e.at)
    end = events[-1].at if events else 0

    clock = [0]
    registry = RevocationRegistry(clock=lambda: clock[0])
    keystore = KeyStore(signing_algorithm=HS256)
    key = keystore.ensure_signing_key(0)
    policy = VerificationPolicy(AUDIENCE, ISSUER, leeway_seconds=0)
    replicas = [_Replica(i, registry.build_digest(0)) for i in range(n_replicas)]
    report = HarnessReport(n_replicas, sync_interval, max_staleness)

    tokens: dict[str, str] = {}
    claims_of: dict[str, TokenClaims] = {}
    revoked_at: dict[str, int] = {}

    # priority at equal times: state changes, then syncs, then presentations
    queue: list[tuple[int, int, int, object]] = []
    seq = 0
    for ev in events:
        prio = 2 if isinstance(ev, Present) else 0
        queue.append((ev.at, prio, seq, ev))
        seq += 1
    for r in replicas:
        t = (r.index * sync_interval) // n_replicas
        while t <= end:
            queue.append((t, 1, seq, r))
            seq += 1
            t += sync_interval
    heapq.heapify(queue)

    last_revoke_at: int | None = None
    target_version = 0
    converged_at: int | None = None

    while queue:
        now, _, _, item = heapq.heappop(queue)
        clock[0] = now
        if isinstance(item, _Replica):
            if item.partitioned(now):
                continue
            item.digest = merge_digest(item.digest, registry.build_digest(now))
            item.stats.syncs += 1
            if last_revoke_at is not None and converged_at is None:
                live = [r for r in replicas if not r.partitioned(now)]
                if all(r.digest.version >= target_version for r in live):
                    converged_at = now
        elif isinstance(item, Issue):
            claims = TokenClaims(sub=item.user, aud=AUDIENCE, iss=ISSUER, exp=now + token_lifetime, iat=now,
                                 scope="read", app_id=item.app, jti=item.token)
            tokens[item.token] = sign_token(claims, key).compact
            claims_of[item.token] = claims
            report.issued += 1
        elif isinstance(item, Revoke):
            registry.revoke(item.kind, item.subject, now=now)
            last_revoke_at, target_version, converged_at = now, registry.version, None
            for name, claims in claims_of.items():
                if name not in revoked_at and registry.is_revoked(claims):
                    revoked_at[name] = now
        elif isinstance(item, Partition):
            replicas[item.replica].partitions.append((item.at, item.until))
        elif isinstance(item, Present):
            targets = replicas if item.replica is None else [replicas[item.replica]]
            for r in targets:
                _present(r, item.token, tokens[item.token], now, keystore, policy, max_staleness,
                         revoked_at, report)

    if last_revoke_at is not None and converged_at is not None:
        elapsed = converged_at - last_revoke_at
        report.convergence_rounds = max(1, -(-elapsed // sync_interval))
    elif last_revoke_at is not None:
        report.convergence_rounds = -1  # never converged within the scenario
    report.replicas = [r.stats for r in replicas]
    logger.info("harness: %s", {k: v for k, v in report.to_dict().items() if k != "replicas"})
    return report


def _present(replica: _Replica, name: str, compact: str, now: int, keystore: KeyStore,
             policy: VerificationPolicy, max_staleness: int, revoked_at: dict, report: HarnessReport) -> None:
    staleness = now - replica.digest.produced_at
    replica.stats.max_staleness = max(replica.stats.max_staleness, staleness)
    report.max_staleness_observed = max(report.max_staleness_observed, staleness)
    check = digest_check(replica.digest, now, max_staleness, fail_safe=True)
    try:
        verify_token(compact, keystore.resolver(now), policy, check, now)
    except RevocationStale:
        replica.stats.rejected += 1
        replica.stats.stale_rejections += 1
        report.rejected += 1
        return
    except TokenError:
        replica.stats.rejected += 1
        report.rejected += 1
        return
    replica.stats.accepted += 1
    report.accepted += 1
    if staleness > max_staleness:
        report.stale_acceptances.append((replica.index, name, now))
    if name in revoked_at:
        lateness = now - revoked_at[name]
        if lateness > report.bound:
            report.late_acceptances.append((replica.index, name, now, lateness))


# -- scenario builders ------------------------------------------------------

def steady_scenario(n_tokens: int = 20, n_replicas: int = 2, *, seed: int = 0) -> list[Event]:
    """Issue tokens and present each exactly once to one replica; no revocations."""
    rng = random.Random(seed)
    events: list[Event] = []
    for i in range(n_tokens):
        events.append(Issue(i, f"t{i}", f"user{i % 5}", f"app{i % 3}"))
        events.append(Present(i + 1, f"t{i}", rng.randrange(n_replicas)))
    return events


def mass_revocation_scenario(
    *,
    n_users: int = 20,
    tokens_per_user: int = 5,
    n_apps: int = 4,
    revoke_at: int = 50,
    duration: int = 300,
    present_every: int = 5,
    seed: int = 0,
) -> list[Event]:
    """Many tokens, then half the users, one app and a few single tokens revoked at once.

    Every token is presented to every replica every ``present_every``
    seconds for the whole run, so the last acceptance of each revoked
    token pins down its acceptance delay.
    """
    rng = random.Random(seed)
    events: list[Event] = []
    names = []
    for u in range(n_users):
        for k in range(tokens_per_user):
            name = f"u{u}-t{k}"
            names.append(name)
            events.append(Issue(rng.randrange(0, max(1, revoke_at // 2)), name, f"user{u}", f"app{rng.randrange(n_apps)}"))
    for u in rng.sample(range(n_users), n_users // 2):
        events.append(Revoke(revoke_at, "user", f"user{u}"))
    events.append(Revoke(revoke_at, "app", f"app{rng.randrange(n_apps)}"))
    for name in rng.sample(names, min(5, len(names))):
        events.append(Revoke(revoke_at, "token", name))
    start = max(1, revoke_at // 2)
    for t in range(start, duration + 1, present_every):
        for name in names:
            events.append(Present(t, name))
    return events


def partition_scenario(
    *,
    replica: int = 0,
    partition_at: int = 20,
    n_tokens: int = 10,
    duration: int = 200,
    present_every: int = 5,
) -> list[Event]:
    """One replica stops syncing at ``partition_at``; nothing is revoked."""
    events: list[Event] = [Issue(0, f"t{i}", f"user{i}", "app0") for i in range(n_tokens)]
    events.append(Partition(partition_at, replica))
    for t in range(1, duration + 1, present_every):
        for i in range(n_tokens):
            events.append(Present(t, f"t{i}"))
    return events


SCENARIOS = {
    "steady": steady_scenario,
    "mass-revocation": mass_revocation_scenario,
    "partition": partition_scenario,
}
