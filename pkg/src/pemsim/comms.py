"""Machine-type communication layer: lossy delaying channels with URLLC and
mMTC profiles, retransmission, latency-budget auditing, and report
aggregation.

Delays follow a shifted exponential (offset + Exp(mean - offset)): two
parameters, a closed-form tail for tests, and a deterministic limit when
mean == offset. Message size is carried but does not affect delay.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence, Union

from .core import MalformedRequest


class ChannelClass(Enum):
    URLLC = "urllc"
    MMTC = "mmtc"


class MessageKind(Enum):
    PACKET_REQUEST = "packet_request"
    GRANT = "grant"
    REJECT = "reject"
    METER_REPORT = "meter_report"
    TRIP_SIGNAL = "trip_signal"


@dataclass(frozen=True)
class ChannelProfile:
    cls: ChannelClass
    offset_ms: float
    mean_ms: float
    loss_prob: float
    retransmit_timeout_ms: float
    max_attempts: int

    def __post_init__(self) -> None:
        if self.offset_ms < 0:
            raise MalformedRequest("delay offset must be non-negative")
        if self.mean_ms < self.offset_ms:
            raise MalformedRequest("mean delay cannot undercut the offset")
        if not 0 <= self.loss_prob < 1:
            raise MalformedRequest("loss probability must lie in [0, 1)")
        if self.max_attempts < 1:
            raise MalformedRequest("need at least one transmission attempt")
        if self.retransmit_timeout_ms < 0:
            raise MalformedRequest("retransmit timeout must be non-negative")


# Default profiles; the trip-signal numbers are the ones audited against the
# 100 ms protection budget.
URLLC_DEFAULT = ChannelProfile(
    cls=ChannelClass.URLLC,
    offset_ms=1.0,
    mean_ms=5.0,
    loss_prob=0.001,
    retransmit_timeout_ms=20.0,
    max_attempts=7,
)
MMTC_DEFAULT = ChannelProfile(
    cls=ChannelClass.MMTC,
    offset_ms=10.0,
    mean_ms=50.0,
    loss_prob=0.01,
    retransmit_timeout_ms=200.0,
    max_attempts=3,
)


@dataclass(frozen=True)
class MessageEnvelope:
    kind: MessageKind
    sent_at_ms: float
    size: int = 1
    payload: object = None


@dataclass(frozen=True)
class Delivered:
    at_ms: float
    attempts: int


@dataclass(frozen=True)
class Dropped:
    attempts: int


TransmitOutcome = Union[Delivered, Dropped]


def sample_delay(profile: ChannelProfile, rng: random.Random) -> float:
    """One propagation delay draw; always >= offset."""
    scale = profile.mean_ms - profile.offset_ms
    if scale <= 0:
        return profile.offset_ms
    return profile.offset_ms + rng.expovariate(1.0 / scale)


def transmit(
    message: MessageEnvelope, profile: ChannelProfile, rng: random.Random
) -> TransmitOutcome:
    """Send with per-attempt loss and fixed retransmit timeout.

    Delivery time is the send time plus one timeout per lost attempt plus the
    final propagation delay.
    """
    elapsed = 0.0
    for attempt in range(1, profile.max_attempts + 1):
        if rng.random() < profile.loss_prob:
            elapsed += profile.retransmit_timeout_ms
            continue
        return Delivered(
            at_ms=message.sent_at_ms + elapsed + sample_delay(profile, rng),
            attempts=attempt,
        )
    return Dropped(attempts=profile.max_attempts)


@dataclass(frozen=True)
class MessageRecord:
    """One channel traversal as logged by the simulation."""

    msg_id: int
    kind: MessageKind
    cls: ChannelClass
    sent_at_ms: float
    delivered_at_ms: float | None
    attempts: int

    @property
    def dropped(self) -> bool:
        return self.delivered_at_ms is None

    @property
    def e2e_ms(self) -> float | None:
        if self.delivered_at_ms is None:
            return None
        return self.delivered_at_ms - self.sent_at_ms


@dataclass(frozen=True)
class LatencyBudget:
    """End-to-end budgets per message kind in milliseconds. Trip signals get
    the protection-class 100 ms budget; control messages the 10 ms
    machine-to-machine target. Kinds without a budget are not audited."""

    budgets_ms: dict[MessageKind, float] = field(
        default_factory=lambda: {
            MessageKind.TRIP_SIGNAL: 100.0,
            MessageKind.PACKET_REQUEST: 10.0,
            MessageKind.GRANT: 10.0,
            MessageKind.REJECT: 10.0,
        }
    )

    def __post_init__(self) -> None:
        if any(b <= 0 for b in self.budgets_ms.values()):
            raise MalformedRequest("latency budgets must be positive")


def audit_budget(
    records: Iterable[MessageRecord], budget: LatencyBudget
) -> dict[MessageKind, float]:
    """Fraction of delivered messages exceeding their budget, per kind.

    Kinds with no delivered traffic (or no budget) report 0.
    """
    totals: dict[MessageKind, int] = {}
    violations: dict[MessageKind, int] = {}
    for record in records:
        if record.dropped or record.kind not in budget.budgets_ms:
            continue
        totals[record.kind] = totals.get(record.kind, 0) + 1
        if record.e2e_ms > budget.budgets_ms[record.kind]:
            violations[record.kind] = violations.get(record.kind, 0) + 1
    return {
        kind: violations.get(kind, 0) / count for kind, count in totals.items()
    }


@dataclass(frozen=True)
class AggregationWindow:
    """Edge aggregation policy: either periodic windows of `window_ms`, or
    event-based emission when the observed value moves at least `threshold`
    away from the last emitted one."""

    window_ms: float
    policy: str = "periodic"  # "periodic" | "event"
    threshold: float = 0.0

    def __post_init__(self) -> None:
        if self.window_ms <= 0:
            raise MalformedRequest("aggregation window must be positive")
        if self.policy not in ("periodic", "event"):
            raise MalformedRequest(f"unknown aggregation policy {self.policy!r}")
        if self.policy == "event" and self.threshold <= 0:
            raise MalformedRequest("event policy needs a positive threshold")


@dataclass(frozen=True)
class AggregatedReport:
    start_ms: float
    end_ms: float
    count: int
    sum_value: float
    min_value: float
    max_value: float


def _summarize(batch: Sequence[tuple[float, float]]) -> AggregatedReport:
    values = [v for _, v in batch]
    return AggregatedReport(
        start_ms=batch[0][0],
        end_ms=batch[-1][0],
        count=len(batch),
        sum_value=math.fsum(values),
        min_value=min(values),
        max_value=max(values),
    )


def aggregate_reports(
    reports: Sequence[tuple[float, float]], window: AggregationWindow
) -> list[AggregatedReport]:
    """Collapse (timestamp_ms, value) reports into aggregate envelopes.

    Periodic: one envelope per non-empty window. Event: an envelope is
    emitted whenever the current value differs from the last emitted value by
    at least the threshold (the first report always emits); a trailing
    envelope flushes any remainder so sums are conserved either way.
    """
    if not reports:
        return []
    ordered = sorted(reports, key=lambda r: r[0])
    out: list[AggregatedReport] = []
    if window.policy == "periodic":
        batch: list[tuple[float, float]] = []
        batch_index: int | None = None
        for t, v in ordered:
            index = int(t // window.window_ms)
            if batch and index != batch_index:
                out.append(_summarize(batch))
                batch = []
            batch_index = index
            batch.append((t, v))
        out.append(_summarize(batch))
        return out
    last_emitted: float | None = None
    batch = []
    for t, v in ordered:
        batch.append((t, v))
        if last_emitted is None or abs(v - last_emitted) >= window.threshold:
            out.append(_summarize(batch))
            last_emitted = v
            batch = []
    if batch:
        out.append(_summarize(batch))
    return out
