"""Deterministic slot-driven simulation loop.

Each slot runs a fixed phase order: (1) deliver due messages, (2) devices
emit requests and retries, (3) the server admits, (4) the server allocates
the slot, (5) supply capability check with emergency shedding, (6) device
physics, (7) metrics. Admission before allocation lets a request issued at
slot t start at slot t when the channel is instantaneous. Identical seeds
give bit-identical results; all randomness flows through per-purpose
substreams of the scenario seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .comms import (
    AggregatedReport,
    AggregationWindow,
    Dropped,
    LatencyBudget,
    MessageEnvelope,
    MessageKind,
    MessageRecord,
    aggregate_reports,
    audit_budget,
    transmit,
)
from .core import (
    Accept,
    COMPLETION_TOL_WH,
    FixedProfileRequest,
    FlexibleTotalRequest,
    GrantDecision,
    LoadRequest,
    MalformedRequest,
    RejectReason,
    ThermalTargetRequest,
    TimeGrid,
    quantize,
    substream,
)
from .devices import (
    BatteryLoadState,
    FixedCycleState,
    OverrideState,
    ThermalLoadState,
    fleet_request_probability,
    local_override,
    step_battery,
    step_cycle,
    step_storage,
    step_thermal,
)
from .scenario import (
    BatteryConfig,
    CycleConfig,
    DeviceConfig,
    HeaterFleetConfig,
    Scenario,
    ThermalConfig,
)
from .server import (
    CAP_TOL_W,
    CommitmentLedger,
    SlotNeed,
    SupplyView,
    UnderSupply,
    dispatch_supply,
    handle_rejection_retry,
    needed_full_slots,
    allocate_slot,
    thermal_forced_need,
    track_reference,
)

# Tolerance the conservation auditor enforces, relative per slot and on the
# whole-run integral.
AUDIT_REL_TOL = 1e-6


@dataclass
class SlotRecord:
    slot: int
    clock: str
    granted_w: dict[str, float]
    consumed_w: dict[str, float]
    renewable_available_w: float
    renewable_used_w: float
    storage_soc_wh: float
    storage_flow_w: float
    imported_w: float
    curtailed_w: float
    emergency: bool = False


@dataclass
class RequestOutcome:
    """Life of one request: decision, retries, service and completion."""

    device_id: str
    kind: str
    issued_slot: int
    deadline_slot: int | None = None
    decided_slot: int | None = None
    accepted: bool | None = None
    reject_reason: str | None = None
    retries: int = 0
    forced_start: int | None = None
    first_service_slot: int | None = None
    completion_slot: int | None = None
    deadline_met: bool | None = None
    service_failed: bool = False
    shed: bool = False

    @property
    def waiting_slots(self) -> int | None:
        if self.first_service_slot is None:
            return None
        return self.first_service_slot - self.issued_slot


@dataclass
class ShedEvent:
    slot: int
    device_id: str
    watts: float
    forced: bool


@dataclass
class FleetEpochRecord:
    epoch: int
    reference_w: float
    aggregate_w: float
    requests: int
    accepted: int
    force_on: int
    force_off: int
    temp_min_c: float
    temp_max_c: float
    temp_mean_c: float


@dataclass
class RunResult:
    seed: int
    grid: TimeGrid
    slots: list[SlotRecord]
    requests: list[RequestOutcome]
    channel: list[MessageRecord]
    aggregated: list[AggregatedReport]
    shed_events: list[ShedEvent]
    device_traces: dict[str, tuple[float, ...]]
    final_states: dict[str, dict]
    fleet: list[FleetEpochRecord] | None = None


_KIND_KEY = {
    MessageKind.PACKET_REQUEST: "request",
    MessageKind.GRANT: "grant",
    MessageKind.REJECT: "grant",
    MessageKind.METER_REPORT: "meter",
    MessageKind.TRIP_SIGNAL: "trip",
}


class _ChannelLayer:
    """Routes protocol messages through their configured channel profile.

    Per-message RNG substreams are derived from (seed, message id), so one
    message's outcome never perturbs any other draw in the run. With channels
    disabled, messages pass through instantaneously and unlogged.
    """

    def __init__(self, profiles, grid: TimeGrid, seed: int):
        self.profiles = profiles
        self.grid = grid
        self.seed = seed
        self.records: list[MessageRecord] = []
        self._next_id = 0

    @property
    def enabled(self) -> bool:
        return self.profiles is not None

    def send_at(self, kind: MessageKind, sent_ms: float) -> float | None:
        """Transmit now; returns delivery time in ms, or None when dropped."""
        if self.profiles is None:
            return sent_ms
        profile = self.profiles[_KIND_KEY[kind]]
        msg_id = self._next_id
        self._next_id += 1
        rng = substream(self.seed, "msg", msg_id)
        outcome = transmit(MessageEnvelope(kind=kind, sent_at_ms=sent_ms), profile, rng)
        if isinstance(outcome, Dropped):
            self.records.append(
                MessageRecord(msg_id, kind, profile.cls, sent_ms, None, outcome.attempts)
            )
            return None
        self.records.append(
            MessageRecord(msg_id, kind, profile.cls, sent_ms, outcome.at_ms, outcome.attempts)
        )
        return outcome.at_ms

    def send_slot(self, kind: MessageKind, slot: int) -> int | None:
        """Transmit at a slot boundary; returns the first slot boundary at or
        after delivery (the same slot only for zero end-to-end time)."""
        sent_ms = slot * self.grid.slot_ms
        delivered_ms = self.send_at(kind, sent_ms)
        if delivered_ms is None:
            return None
        return slot + math.ceil((delivered_ms - sent_ms) / self.grid.slot_ms)


# ---------------------------------------------------------------------------
# Household device runtimes
# ---------------------------------------------------------------------------

class _HouseholdJob:
    """Shared request/retry/decision plumbing for household devices."""

    kind_name = "job"

    def __init__(self, device_id: str, priority: int, grid: TimeGrid, seed: int, backoff_max: int):
        self.device_id = device_id
        self.priority = priority
        self.grid = grid
        self.backoff_max = backoff_max
        self.retry_rng = substream(seed, "device", device_id, "retry")
        self.request_due: int | None = None
        self.await_since: int | None = None
        self.active_from: int | None = None
        self.grant: Accept | None = None
        self.done = False
        self.failed = False
        self.outcome: RequestOutcome | None = None

    # subclass hooks -------------------------------------------------------
    def build_request(self, now: int) -> LoadRequest:
        raise NotImplementedError

    def window_closed(self, now: int) -> bool:
        raise NotImplementedError

    def deadline_slot(self) -> int:
        raise NotImplementedError

    def slot_need(self, now: int) -> SlotNeed | None:
        raise NotImplementedError

    def apply(self, granted_w: float, now: int, ledger: CommitmentLedger) -> float:
        raise NotImplementedError

    def trace_value(self) -> float:
        raise NotImplementedError

    def final_state(self) -> dict:
        return {}

    def finalize(self, trace: tuple[float, ...]) -> None:
        if self.outcome is not None and self.outcome.accepted and self.outcome.deadline_met is None:
            self.outcome.deadline_met = False

    # protocol plumbing ------------------------------------------------------
    def maybe_emit(self, now: int) -> LoadRequest | None:
        if self.done or self.failed or self.active_from is not None:
            return None
        if self.await_since is not None:
            if now - self.await_since <= self.backoff_max:
                return None  # response may still be in flight
        elif self.request_due is None or now < self.request_due:
            return None
        if self.window_closed(now):
            self._fail(now)
            return None
        request = self.build_request(now)
        if self.outcome is None:
            self.outcome = RequestOutcome(
                device_id=self.device_id,
                kind=self.kind_name,
                issued_slot=now,
                deadline_slot=self.deadline_slot(),
            )
        else:
            self.outcome.retries += 1
        self.await_since = now
        self.request_due = None
        return request

    def on_decision(self, decision: GrantDecision, slot: int) -> None:
        if self.done or self.failed:
            return
        self.await_since = None
        if self.outcome is not None and self.outcome.decided_slot is None:
            self.outcome.decided_slot = slot
        if isinstance(decision, Accept):
            if self.active_from is None:
                self.active_from = slot
                self.grant = decision
                self.outcome.accepted = True
                self.outcome.forced_start = decision.forced_start
            return
        self.outcome.accepted = False
        self.outcome.reject_reason = decision.reason.value
        if decision.reason is RejectReason.CAPACITY_EXCEEDED:
            self.request_due = handle_rejection_retry(slot, self.backoff_max, self.retry_rng)
        else:
            self._fail(slot)

    def on_forced_shed(self, slot: int, ledger: CommitmentLedger) -> None:
        if self.outcome is not None:
            self.outcome.shed = True

    def _fail(self, slot: int) -> None:
        self.failed = True
        if self.outcome is None:
            self.outcome = RequestOutcome(
                device_id=self.device_id, kind=self.kind_name, issued_slot=slot,
                deadline_slot=self.deadline_slot(),
            )
        self.outcome.service_failed = True

    def _mark_service(self, now: int, consumed_w: float) -> None:
        if consumed_w > 0 and self.outcome.first_service_slot is None:
            self.outcome.first_service_slot = now


class _BatteryJob(_HouseholdJob):
    kind_name = "battery"

    def __init__(self, cfg: BatteryConfig, grid: TimeGrid, seed: int, backoff_max: int):
        super().__init__(cfg.device_id, cfg.priority, grid, seed, backoff_max)
        self.cfg = cfg
        if cfg.initial_soc_wh is not None:
            soc0 = cfg.initial_soc_wh
        else:
            init_rng = substream(seed, "device", cfg.device_id, "init")
            soc0 = init_rng.uniform(0.0, cfg.capacity_wh / 2.0)
        self.state = BatteryLoadState(
            soc_wh=soc0, capacity_wh=cfg.capacity_wh, p_max_w=cfg.p_max_w,
            arrival_slot=cfg.arrival,
        )
        self.request_due = cfg.arrival

    def deadline_slot(self) -> int:
        return self.cfg.deadline

    def window_closed(self, now: int) -> bool:
        remaining = self.state.remaining_wh
        if remaining <= COMPLETION_TOL_WH:
            return False
        window_h = (self.cfg.deadline - max(now, self.cfg.arrival)) * self.grid.slot_hours
        return remaining > self.cfg.p_max_w * window_h * (1 + 1e-9)

    def build_request(self, now: int) -> LoadRequest:
        return FlexibleTotalRequest(
            device_id=self.device_id,
            energy_needed_wh=self.state.remaining_wh,
            p_max_w=self.cfg.p_max_w,
            available_from=max(now, self.cfg.arrival),
            deadline=self.cfg.deadline,
            packet_w=self.cfg.packet_w,
            priority=self.priority,
            issued_at=now,
        )

    def slot_need(self, now: int) -> SlotNeed | None:
        if self.active_from is None or self.done or self.failed:
            return None
        if now < self.active_from or now >= self.cfg.deadline:
            return None
        remaining = self.state.remaining_wh
        if remaining <= COMPLETION_TOL_WH:
            return None
        want_w = min(self.cfg.p_max_w, remaining / self.grid.slot_hours)
        slots_needed = needed_full_slots(remaining, self.cfg.p_max_w, self.grid.slot_hours)
        if self.cfg.deadline - now <= slots_needed:
            return SlotNeed(self.device_id, self.priority, forced_w=want_w)
        return SlotNeed(
            self.device_id, self.priority, willing_w=want_w, packet_w=self.cfg.packet_w
        )

    def apply(self, granted_w: float, now: int, ledger: CommitmentLedger) -> float:
        if self.done or self.failed:
            return 0.0
        self.state, absorbed_wh = step_battery(self.state, granted_w, self.grid.slot_min)
        consumed_w = absorbed_wh / self.grid.slot_hours
        self._mark_service(now, consumed_w)
        if self.state.remaining_wh <= COMPLETION_TOL_WH and not self.done:
            self.done = True
            self.outcome.completion_slot = now
            self.outcome.deadline_met = now < self.cfg.deadline
            ledger.release(self.device_id, now + 1)
        return consumed_w

    def trace_value(self) -> float:
        return self.state.soc_wh

    def final_state(self) -> dict:
        return {"soc_wh": self.state.soc_wh}


class _ThermalJob(_HouseholdJob):
    kind_name = "thermal"

    def __init__(self, cfg: ThermalConfig, grid: TimeGrid, seed: int, backoff_max: int):
        super().__init__(cfg.device_id, cfg.priority, grid, seed, backoff_max)
        self.cfg = cfg
        self.state = ThermalLoadState(
            temp_c=cfg.initial_c,
            ambient_c=cfg.ambient_c,
            capacitance_wh_per_c=cfg.capacitance_wh_per_c,
            loss_w_per_c=cfg.loss_w_per_c,
            rated_w=cfg.rated_w,
            efficiency=cfg.efficiency,
        )
        self.request_due = cfg.preheat_from
        self.accepted_request: ThermalTargetRequest | None = None
        self.temp_at_service_start: float | None = None
        self.service_min_c: float | None = None

    def deadline_slot(self) -> int:
        return self.cfg.service_start

    def window_closed(self, now: int) -> bool:
        return now >= self.cfg.service_end

    def build_request(self, now: int) -> LoadRequest:
        return ThermalTargetRequest(
            device_id=self.device_id,
            target_c=self.cfg.target_c,
            service_start=self.cfg.service_start,
            service_end=self.cfg.service_end,
            preheat_from=self.cfg.preheat_from,
            force_check_at=self.cfg.force_check_at,
            rated_w=self.cfg.rated_w,
            priority=self.priority,
            issued_at=now,
            temp_c=self.state.temp_c,
            ambient_c=self.cfg.ambient_c,
            capacitance_wh_per_c=self.cfg.capacitance_wh_per_c,
            loss_w_per_c=self.cfg.loss_w_per_c,
            efficiency=self.cfg.efficiency,
        )

    def on_decision(self, decision: GrantDecision, slot: int) -> None:
        fresh = self.active_from is None and isinstance(decision, Accept)
        super().on_decision(decision, slot)
        if fresh:
            self.accepted_request = self.build_request(slot)

    def slot_need(self, now: int) -> SlotNeed | None:
        if self.active_from is None or self.done or self.failed:
            return None
        request = self.accepted_request
        forced = thermal_forced_need(self.state.temp_c, request, now, self.grid)
        if forced > 0:
            return SlotNeed(self.device_id, self.priority, forced_w=forced)
        if (
            self.cfg.preheat_from <= now < self.cfg.service_start
            and self.state.temp_c < self.cfg.target_c
        ):
            return SlotNeed(
                self.device_id,
                self.priority,
                willing_w=self.cfg.rated_w,
                packet_w=self.cfg.quantum_w,
            )
        return None

    def apply(self, granted_w: float, now: int, ledger: CommitmentLedger) -> float:
        if self.failed:
            granted_w = 0.0  # the node still cools even when the job died
        self.state = step_thermal(self.state, granted_w, self.grid.slot_min)
        if self.failed:
            return 0.0
        consumed_w = min(max(granted_w, 0.0), self.cfg.rated_w)
        self._mark_service(now, consumed_w)
        # post-step temperature is the boundary value at slot now+1
        if now + 1 == self.cfg.service_start:
            self.temp_at_service_start = self.state.temp_c
        if self.cfg.service_start <= now + 1 <= self.cfg.service_end:
            if self.service_min_c is None or self.state.temp_c < self.service_min_c:
                self.service_min_c = self.state.temp_c
        if now + 1 == self.cfg.service_end and not self.done:
            self.done = True
            if self.outcome is not None and self.outcome.accepted:
                self.outcome.completion_slot = self.cfg.service_end
                reached = self.temp_at_service_start
                if reached is None:  # service started at slot 0
                    reached = self.cfg.initial_c
                self.outcome.deadline_met = reached >= self.cfg.target_c - 0.5
            ledger.release(self.device_id, self.cfg.service_end)
        return consumed_w

    def trace_value(self) -> float:
        return self.state.temp_c

    def final_state(self) -> dict:
        return {
            "temp_c": self.state.temp_c,
            "temp_at_service_start_c": self.temp_at_service_start,
            "service_min_c": self.service_min_c,
        }


class _CycleJob(_HouseholdJob):
    kind_name = "cycle"

    def __init__(self, cfg: CycleConfig, grid: TimeGrid, seed: int, backoff_max: int):
        super().__init__(cfg.device_id, cfg.priority, grid, seed, backoff_max)
        self.cfg = cfg
        self.state = FixedCycleState(profile_w=cfg.profile_w)
        self.request_due = cfg.earliest_start

    def deadline_slot(self) -> int:
        return self.cfg.deadline

    def window_closed(self, now: int) -> bool:
        return self.state.started_at is None and now > self.cfg.latest_start

    def build_request(self, now: int) -> LoadRequest:
        return FixedProfileRequest(
            device_id=self.device_id,
            profile_w=self.cfg.profile_w,
            earliest_start=self.cfg.earliest_start,
            latest_start=self.cfg.latest_start,
            priority=self.priority,
            issued_at=now,
        )

    def slot_need(self, now: int) -> SlotNeed | None:
        if self.active_from is None or self.done or self.failed:
            return None
        if self.state.finished:
            return None
        if self.state.running:
            return SlotNeed(
                self.device_id, self.priority, forced_w=self.state.profile_w[self.state.progress]
            )
        if now > self.cfg.latest_start:
            return None
        if now == self.cfg.latest_start:
            return SlotNeed(self.device_id, self.priority, forced_w=self.cfg.profile_w[0])
        if now >= self.cfg.earliest_start:
            return SlotNeed(
                self.device_id,
                self.priority,
                willing_w=self.cfg.profile_w[0],
                packet_w=self.cfg.profile_w[0],
                cycle_start=True,
            )
        return None

    def apply(self, granted_w: float, now: int, ledger: CommitmentLedger) -> float:
        if self.done or self.failed or self.state.finished:
            return 0.0
        granted = granted_w > CAP_TOL_W
        if self.state.started_at is None and not granted:
            return 0.0
        self.state, consumed_w = step_cycle(self.state, granted, now)
        self._mark_service(now, consumed_w)
        if self.state.finished and not self.done:
            self.done = True
            self.outcome.completion_slot = now
            self.outcome.deadline_met = now < self.cfg.deadline
            ledger.release(self.device_id, now + 1)
        return consumed_w

    def on_forced_shed(self, slot: int, ledger: CommitmentLedger) -> None:
        super().on_forced_shed(slot, ledger)
        # a broken cycle cannot resume; the job dies with its commitment
        self.failed = True
        self.outcome.service_failed = True
        ledger.release(self.device_id, slot)

    def trace_value(self) -> float:
        return float(self.state.progress)

    def final_state(self) -> dict:
        return {"progress": self.state.progress, "started_at": self.state.started_at}


def _make_job(cfg: DeviceConfig, grid: TimeGrid, seed: int, backoff_max: int) -> _HouseholdJob:
    if isinstance(cfg, BatteryConfig):
        return _BatteryJob(cfg, grid, seed, backoff_max)
    if isinstance(cfg, ThermalConfig):
        return _ThermalJob(cfg, grid, seed, backoff_max)
    if isinstance(cfg, CycleConfig):
        return _CycleJob(cfg, grid, seed, backoff_max)
    raise MalformedRequest(f"unsupported household device {type(cfg).__name__}")


# ---------------------------------------------------------------------------
# Household run
# ---------------------------------------------------------------------------

def _shed_grants(
    grants: dict[str, float],
    needs: list[SlotNeed],
    capability_w: float,
    ledger: CommitmentLedger,
    jobs_by_id: dict[str, _HouseholdJob],
    slot: int,
    shed_events: list[ShedEvent],
) -> None:
    """Emergency mode: trim grants until local supply covers them. Sheds
    opportunistic grants first (least important first), then whole forced
    grants, logging every cut."""
    total = math.fsum(grants.values())
    forced_w = {n.job_id: n.forced_w for n in needs}
    cycle_starts = {
        n.job_id for n in needs if n.cycle_start and grants.get(n.job_id, 0.0) > 0
    }
    priority = {n.job_id: n.priority for n in needs}

    opportunistic = [
        job_id
        for job_id in grants
        if job_id not in cycle_starts
        and grants[job_id] - forced_w.get(job_id, 0.0) > CAP_TOL_W
    ]
    for job_id in sorted(opportunistic, key=lambda j: (-priority[j], j)):
        if total <= capability_w + CAP_TOL_W:
            return
        cut = grants[job_id] - forced_w.get(job_id, 0.0)
        grants[job_id] -= cut
        total -= cut
        shed_events.append(ShedEvent(slot, job_id, cut, forced=False))

    for job_id in sorted(cycle_starts, key=lambda j: (-priority[j], j)):
        if total <= capability_w + CAP_TOL_W:
            return
        cut = grants.pop(job_id)
        total -= cut
        job = jobs_by_id[job_id]
        assert isinstance(job, _CycleJob)
        ledger.reanchor_cycle(job_id, job.cfg.latest_start)
        shed_events.append(ShedEvent(slot, job_id, cut, forced=False))

    still_granted = [j for j in grants if grants[j] > CAP_TOL_W]
    for job_id in sorted(still_granted, key=lambda j: (-priority.get(j, 0), j)):
        if total <= capability_w + CAP_TOL_W:
            return
        cut = grants.pop(job_id)
        total -= cut
        jobs_by_id[job_id].on_forced_shed(slot, ledger)
        shed_events.append(ShedEvent(slot, job_id, cut, forced=True))


def _emit_trip_traffic(channels: _ChannelLayer, rate_per_hour: float, grid: TimeGrid, seed: int) -> None:
    """Synthetic protection-class traffic: Poisson arrivals, log-only."""
    rng = substream(seed, "trip")
    rate_per_ms = rate_per_hour / 3_600_000.0
    horizon_ms = grid.horizon * grid.slot_ms
    t_ms = rng.expovariate(rate_per_ms)
    while t_ms < horizon_ms:
        channels.send_at(MessageKind.TRIP_SIGNAL, t_ms)
        t_ms += rng.expovariate(rate_per_ms)


def _run_household(scenario: Scenario) -> RunResult:
    grid = scenario.grid
    policy = scenario.policy
    trace = scenario.renewable_trace()
    storage = scenario.storage
    ledger = CommitmentLedger(grid, scenario.feeder_capacity_w)
    channels = _ChannelLayer(scenario.channels, grid, scenario.seed)
    server_rng = substream(scenario.seed, "server")
    jobs = [
        _make_job(cfg, grid, scenario.seed, policy.backoff_max)
        for cfg in scenario.devices
    ]
    jobs_by_id = {job.device_id: job for job in jobs}
    device_ids = [job.device_id for job in jobs]

    request_inbox: dict[int, list[tuple[_HouseholdJob, LoadRequest]]] = {}
    decision_outbox: dict[int, list[tuple[_HouseholdJob, GrantDecision]]] = {}
    delivered_meters: list[tuple[float, float]] = []
    slots: list[SlotRecord] = []
    shed_events: list[ShedEvent] = []
    traces: dict[str, list[float]] = {i: [] for i in device_ids}

    for t in range(grid.horizon):
        # (1) deliver messages due at this boundary
        for job, decision in decision_outbox.pop(t, ()):
            job.on_decision(decision, t)
        server_inbox = list(request_inbox.pop(t, ()))

        # (2) devices emit requests, retries, and lost-response re-asks
        for job in jobs:
            request = job.maybe_emit(t)
            if request is None:
                continue
            delivery = channels.send_slot(MessageKind.PACKET_REQUEST, t)
            if delivery is None:
                continue  # dropped; device asks again after its wait
            if delivery == t:
                server_inbox.append((job, request))
            else:
                request_inbox.setdefault(delivery, []).append((job, request))

        # (3) server admits
        for job, request in server_inbox:
            decision = ledger.admit(request, now=t)
            kind = MessageKind.GRANT if isinstance(decision, Accept) else MessageKind.REJECT
            delivery = channels.send_slot(kind, t)
            if delivery is None:
                continue  # dropped decision; the ledger answer is idempotent
            if delivery == t:
                job.on_decision(decision, t)
            else:
                decision_outbox.setdefault(delivery, []).append((job, decision))

        # (4) per-slot allocation
        needs = [n for n in (job.slot_need(t) for job in jobs) if n is not None]
        supply = SupplyView(
            renewable_w=trace.at(t),
            storage=storage,
            import_allowed=scenario.import_allowed,
            feeder_capacity_w=scenario.feeder_capacity_w,
        )
        grants = allocate_slot(
            ledger, needs, supply, server_rng, now=t,
            renewable_first=policy.renewable_first,
        )

        # (5) capability check; emergency shedding when imports are barred
        emergency = False
        if not scenario.import_allowed:
            capability = supply.renewable_w + (
                storage.max_discharge_w(grid.slot_min) if storage is not None else 0.0
            )
            if math.fsum(grants.values()) > capability + CAP_TOL_W:
                if not policy.emergency_shedding:
                    raise UnderSupply(math.fsum(grants.values()) - capability)
                emergency = True
                _shed_grants(grants, needs, capability, ledger, jobs_by_id, t, shed_events)

        # (6) device physics
        consumed: dict[str, float] = {}
        for job in jobs:
            consumed[job.device_id] = job.apply(grants.get(job.device_id, 0.0), t, ledger)
        total_consumed = math.fsum(consumed.values())
        plan = dispatch_supply(total_consumed, supply, grid.slot_min)
        if storage is not None and plan.storage_flow_w != 0.0:
            storage, _ = step_storage(storage, plan.storage_flow_w, grid.slot_min)

        # (7) metrics
        slots.append(
            SlotRecord(
                slot=t,
                clock=grid.clock_of(t),
                granted_w={i: grants.get(i, 0.0) for i in device_ids},
                consumed_w=consumed,
                renewable_available_w=trace.at(t),
                renewable_used_w=plan.renewable_used_w,
                storage_soc_wh=storage.soc_wh if storage is not None else 0.0,
                storage_flow_w=plan.storage_flow_w,
                imported_w=plan.imported_w,
                curtailed_w=plan.curtailed_w,
                emergency=emergency,
            )
        )
        for job in jobs:
            traces[job.device_id].append(job.trace_value())
        if channels.enabled:
            for job in jobs:
                delivered = channels.send_at(MessageKind.METER_REPORT, (t + 1) * grid.slot_ms)
                if delivered is not None:
                    delivered_meters.append((delivered, consumed[job.device_id]))

    if channels.enabled and scenario.trip_rate_per_hour > 0:
        _emit_trip_traffic(channels, scenario.trip_rate_per_hour, grid, scenario.seed)

    outcomes: list[RequestOutcome] = []
    final_states: dict[str, dict] = {}
    frozen_traces: dict[str, tuple[float, ...]] = {}
    for job in jobs:
        frozen = tuple(traces[job.device_id])
        job.finalize(frozen)
        frozen_traces[job.device_id] = frozen
        final_states[job.device_id] = job.final_state()
        if job.outcome is not None:
            outcomes.append(job.outcome)

    aggregated = (
        aggregate_reports(delivered_meters, AggregationWindow(window_ms=grid.slot_ms))
        if delivered_meters
        else []
    )
    return RunResult(
        seed=scenario.seed,
        grid=grid,
        slots=slots,
        requests=outcomes,
        channel=channels.records,
        aggregated=aggregated,
        shed_events=shed_events,
        device_traces=frozen_traces,
        final_states=final_states,
    )


# ---------------------------------------------------------------------------
# Fleet run
# ---------------------------------------------------------------------------

def _run_fleet(scenario: Scenario) -> RunResult:
    grid = scenario.grid
    cfg = next(d for d in scenario.devices if isinstance(d, HeaterFleetConfig))
    params = cfg.params
    n = cfg.count
    reference = scenario.reference
    packet = quantize(params.rated_w, grid.slot_min)
    trace = scenario.renewable_trace()
    storage = scenario.storage

    init_rng = substream(scenario.seed, "fleet", "init")
    temps = [init_rng.uniform(params.t_low_c, params.t_high_c) for _ in range(n)]
    request_rng = substream(scenario.seed, "fleet", "requests")
    draw_rng = substream(scenario.seed, "fleet", "draws")
    server_rng = substream(scenario.seed, "server")
    packets_left = [0] * n

    dt_h = grid.slot_min / 60.0
    heat_gain = dt_h * params.efficiency * params.rated_w / params.capacitance_wh_per_c
    loss_rate = dt_h * params.loss_w_per_c / params.capacitance_wh_per_c

    slots: list[SlotRecord] = []
    epochs: list[FleetEpochRecord] = []
    aggregate_trace: list[float] = []

    for e in range(grid.horizon):
        force_on: list[int] = []
        force_off = 0
        for i in range(n):
            state = local_override(temps[i], params)
            if state is OverrideState.FORCE_ON:
                force_on.append(i)
            elif state is OverrideState.FORCE_OFF:
                force_off += 1
                packets_left[i] = 0  # abort any running packet

        carrying = {i for i in range(n) if packets_left[i] > 0}
        on_ids = set(force_on) | carrying
        on_power = params.rated_w * len(on_ids)

        requesters = [
            i
            for i in range(n)
            if i not in on_ids
            and local_override(temps[i], params) is OverrideState.NORMAL
            and request_rng.random() < fleet_request_probability(temps[i], params)
        ]
        accepted = track_reference(
            requesters, reference.at(e), on_power, packet, server_rng
        )
        for i in accepted:
            packets_left[i] = cfg.packet_epochs
        heating = on_ids | set(accepted)
        aggregate_w = params.rated_w * len(heating)

        # physics: inline Euler step (identical arithmetic to step_thermal)
        # plus stochastic draw events, for the n*epochs inner loop
        for i in range(n):
            temp = temps[i]
            temp += (heat_gain if i in heating else 0.0) - loss_rate * (temp - params.ambient_c)
            if draw_rng.random() < params.draw_prob:
                temp -= draw_rng.uniform(params.draw_min_c, params.draw_max_c)
            temps[i] = temp
        for i in range(n):
            if packets_left[i] > 0:
                packets_left[i] -= 1

        supply = SupplyView(
            renewable_w=trace.at(e),
            storage=storage,
            import_allowed=scenario.import_allowed,
            feeder_capacity_w=scenario.feeder_capacity_w,
        )
        plan = dispatch_supply(aggregate_w, supply, grid.slot_min)
        if storage is not None and plan.storage_flow_w != 0.0:
            storage, _ = step_storage(storage, plan.storage_flow_w, grid.slot_min)

        slots.append(
            SlotRecord(
                slot=e,
                clock=grid.clock_of(e),
                granted_w={cfg.device_id: aggregate_w},
                consumed_w={cfg.device_id: aggregate_w},
                renewable_available_w=trace.at(e),
                renewable_used_w=plan.renewable_used_w,
                storage_soc_wh=storage.soc_wh if storage is not None else 0.0,
                storage_flow_w=plan.storage_flow_w,
                imported_w=plan.imported_w,
                curtailed_w=plan.curtailed_w,
            )
        )
        epochs.append(
            FleetEpochRecord(
                epoch=e,
                reference_w=reference.at(e),
                aggregate_w=aggregate_w,
                requests=len(requesters),
                accepted=len(accepted),
                force_on=len(force_on),
                force_off=force_off,
                temp_min_c=min(temps),
                temp_max_c=max(temps),
                temp_mean_c=math.fsum(temps) / n,
            )
        )
        aggregate_trace.append(aggregate_w)

    final_states = {
        cfg.device_id: {
            "temp_min_c": min(temps),
            "temp_max_c": max(temps),
            "temp_mean_c": math.fsum(temps) / n,
        }
    }
    return RunResult(
        seed=scenario.seed,
        grid=grid,
        slots=slots,
        requests=[],
        channel=[],
        aggregated=[],
        shed_events=[],
        device_traces={cfg.device_id: tuple(aggregate_trace)},
        final_states=final_states,
        fleet=epochs,
    )


# ---------------------------------------------------------------------------
# Public entry points
# ---------------------------------------------------------------------------

def run_scenario(scenario: Scenario) -> RunResult:
    """Execute one scenario end to end. A pure function of the scenario,
    seed included."""
    scenario.validate()
    if scenario.is_fleet:
        return _run_fleet(scenario)
    return _run_household(scenario)


def audit_conservation(result: RunResult) -> int | None:
    """Verify the per-slot supply identity and the whole-run integral.

    renewable_used + storage discharge + imported must equal total consumed
    in every slot (relative 1e-6), and the same must hold for the compensated
    whole-run sums. Returns None when clean, else the first violating slot.
    """
    slot_h = result.grid.slot_hours
    consumed_terms = []
    supplied_terms = []
    for record in result.slots:
        consumed_wh = math.fsum(record.consumed_w.values()) * slot_h
        discharge_w = max(0.0, -record.storage_flow_w)
        supplied_wh = (
            record.renewable_used_w + discharge_w + record.imported_w
        ) * slot_h
        scale = max(1.0, abs(consumed_wh))
        if abs(consumed_wh - supplied_wh) > AUDIT_REL_TOL * scale:
            return record.slot
        if record.curtailed_w < -CAP_TOL_W:
            return record.slot
        consumed_terms.append(consumed_wh)
        supplied_terms.append(supplied_wh)
    total_consumed = math.fsum(consumed_terms)
    total_supplied = math.fsum(supplied_terms)
    if abs(total_consumed - total_supplied) > AUDIT_REL_TOL * max(1.0, abs(total_consumed)):
        return result.slots[-1].slot if result.slots else 0
    return None


def summarize_run(result: RunResult) -> dict:
    """Roll a run up into the summary the CLI writes: accounting integrals,
    request outcomes, channel audit."""
    slot_h = result.grid.slot_hours
    consumed_wh = math.fsum(
        math.fsum(r.consumed_w.values()) for r in result.slots
    ) * slot_h
    renewable_wh = math.fsum(r.renewable_used_w for r in result.slots) * slot_h
    imported_wh = math.fsum(r.imported_w for r in result.slots) * slot_h
    curtailed_wh = math.fsum(r.curtailed_w for r in result.slots) * slot_h
    discharge_wh = math.fsum(
        max(0.0, -r.storage_flow_w) for r in result.slots
    ) * slot_h
    charge_wh = math.fsum(max(0.0, r.storage_flow_w) for r in result.slots) * slot_h

    accepted = sum(1 for o in result.requests if o.accepted)
    rejected = sum(1 for o in result.requests if o.accepted is False and o.service_failed)
    failed = sum(1 for o in result.requests if o.service_failed)
    misses = sum(1 for o in result.requests if o.accepted and o.deadline_met is False)
    waits = [o.waiting_slots for o in result.requests if o.waiting_slots is not None]
    violation_rates = audit_budget(result.channel, LatencyBudget())

    summary = {
        "seed": result.seed,
        "slots": len(result.slots),
        "accepted": accepted,
        "rejected_final": rejected,
        "service_failed": failed,
        "deadline_misses": misses,
        "mean_waiting_slots": (sum(waits) / len(waits)) if waits else None,
        "total_consumed_wh": consumed_wh,
        "renewable_used_wh": renewable_wh,
        "imported_wh": imported_wh,
        "curtailed_wh": curtailed_wh,
        "storage_discharge_wh": discharge_wh,
        "storage_charge_wh": charge_wh,
        "emergency_slots": sum(1 for r in result.slots if r.emergency),
        "shed_events": len(result.shed_events),
        "messages_sent": len(result.channel),
        "messages_dropped": sum(1 for m in result.channel if m.dropped),
        "budget_violation_rates": {k.value: v for k, v in violation_rates.items()},
    }
    if result.fleet is not None:
        errors = [abs(r.aggregate_w - r.reference_w) for r in result.fleet]
        summary["fleet"] = {
            "epochs": len(result.fleet),
            "mean_abs_tracking_error_w": sum(errors) / len(errors) if errors else 0.0,
            "force_on_epoch_count": sum(r.force_on for r in result.fleet),
        }
    return summary


def run_batch(scenario: Scenario, seeds: list[int]) -> list[dict]:
    """Independent runs of one scenario across seeds. Results depend only on
    each seed, never on execution order; failures are reported per seed."""
    from dataclasses import replace

    entries = []
    for seed in seeds:
        try:
            result = run_scenario(replace(scenario, seed=seed))
            entries.append({"seed": seed, "summary": summarize_run(result), "error": None})
        except Exception as exc:  # noqa: BLE001 - per-seed isolation is the point
            entries.append({"seed": seed, "summary": None, "error": str(exc)})
    return entries
