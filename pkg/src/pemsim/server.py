"""The energy server: admission control, forced-regime scheduling, per-slot
packet allocation under feeder capacity, supply dispatch, and fleet
reference tracking.

Admission rule ("latest-start feasibility"): a job is admitted iff its
forced profile, superposed on every already-committed forced profile, never
exceeds the feeder capacity. The forced profile is the full-power schedule
the job would follow if it received nothing opportunistically:

  - flexible-total jobs run at p_max from their latest feasible start;
  - fixed cycles run anchored at their latest admissible start;
  - thermal jobs run at rated power from the earlier of the configured
    force-check slot and the latest slot from which worst-case (unheated)
    temperature can still reach the target, through the end of service.

Because imports cover any renewable shortfall, capacity is the only hard
constraint, which makes the deadline guarantee provable and gives the
admission check a brute-force oracle. The rule is sufficient, not
necessary: it can reject sets a clairvoyant packer would fit.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, replace
from typing import Sequence

from .core import (
    Accept,
    COMPLETION_TOL_WH,
    ENERGY_REL_TOL,
    FixedProfileRequest,
    FlexibleTotalRequest,
    GrantDecision,
    InfeasibleDeadline,
    LoadRequest,
    MalformedRequest,
    PacketSpec,
    Reject,
    RejectReason,
    ThermalTargetRequest,
    TimeGrid,
    WindowInfeasible,
    validate_request,
)
from .devices import (
    StorageAsset,
    ThermalLoadState,
    decay_temp,
    min_heating_slots,
)

# Absolute watt-level tolerance for capacity comparisons.
CAP_TOL_W = 1e-6


class CapacityViolation(RuntimeError):
    """Total granted or committed power exceeded feeder capacity. Impossible
    while the admission invariant holds; raised as an internal failure."""


class UnderSupply(RuntimeError):
    """Local supply cannot cover committed power and imports are disallowed."""

    def __init__(self, deficit_w: float):
        super().__init__(f"supply short by {deficit_w:.1f} W")
        self.deficit_w = deficit_w


def needed_full_slots(remaining_wh: float, p_max_w: float, slot_hours: float) -> int:
    """Whole slots of full-power service needed to finish `remaining_wh`."""
    if remaining_wh <= COMPLETION_TOL_WH:
        return 0
    return math.ceil(remaining_wh * (1.0 - ENERGY_REL_TOL) / (p_max_w * slot_hours))


def compute_forced_start(
    remaining_wh: float,
    p_max_w: float,
    deadline: int,
    grid: TimeGrid,
    now: int = 0,
) -> int:
    """Latest slot from which full-power service still finishes by `deadline`.

    Rounds the start earlier, never later, apart from the sub-watt-hour
    slack of ENERGY_REL_TOL which absorbs decimal-rounded inputs.
    """
    if remaining_wh < 0 or p_max_w <= 0:
        raise MalformedRequest("forced start needs remaining >= 0 and p_max > 0")
    start = deadline - needed_full_slots(remaining_wh, p_max_w, grid.slot_hours)
    if start < now:
        raise InfeasibleDeadline(
            f"{remaining_wh:.1f} Wh cannot finish by slot {deadline} from slot {now}"
        )
    return start


def thermal_state_of(request: ThermalTargetRequest) -> ThermalLoadState:
    return ThermalLoadState(
        temp_c=request.temp_c,
        ambient_c=request.ambient_c,
        capacitance_wh_per_c=request.capacitance_wh_per_c,
        loss_w_per_c=request.loss_w_per_c,
        rated_w=request.rated_w,
        efficiency=request.efficiency,
    )


def plan_thermal_forced_start(request: ThermalTargetRequest, grid: TimeGrid) -> int:
    """First slot of the guaranteed heating window for a thermal job.

    Worst case assumes the job receives nothing before the window, so its
    temperature decays freely from the issue-time snapshot. The window opens
    at the configured force-check slot or at the latest still-feasible start
    under that worst case, whichever comes first.
    """
    snapshot = thermal_state_of(request)
    latest_feasible = None
    for t in range(request.preheat_from, request.service_start + 1):
        cold = replace(
            snapshot,
            temp_c=decay_temp(snapshot, max(0, t - request.issued_at), grid.slot_min),
        )
        need = min_heating_slots(cold, request.target_c, grid.slot_min)
        if need is not None and need <= request.service_start - t:
            latest_feasible = t
    if latest_feasible is None:
        raise WindowInfeasible(
            f"target {request.target_c:.1f} C unreachable by slot {request.service_start}"
        )
    return min(request.force_check_at, latest_feasible)


def thermal_forced_need(
    temp_c: float, request: ThermalTargetRequest, now: int, grid: TimeGrid
) -> float:
    """Forced heating power for a thermal job this slot, re-evaluated against
    the actual temperature.

    Inside [force_check, service_end): heat at rated iff coasting from here
    would drop below target at the next checkpoint (service start before
    service, the next slot during it). Before the force check: heat at rated
    iff the remaining slots only just suffice to reach target (the safety
    net that keeps the admission guarantee honest when preheating was
    starved).
    """
    if now < request.preheat_from or now >= request.service_end:
        return 0.0
    state = replace(thermal_state_of(request), temp_c=temp_c)
    if now >= request.service_start:
        horizon = 1
    elif now >= request.force_check_at:
        horizon = request.service_start - now
    else:
        need = min_heating_slots(state, request.target_c, grid.slot_min)
        if need is not None and need >= request.service_start - now:
            return request.rated_w
        return 0.0
    if decay_temp(state, horizon, grid.slot_min) < request.target_c:
        return request.rated_w
    return 0.0


def forced_profile(
    request: LoadRequest, grid: TimeGrid, now: int = 0
) -> tuple[int, list[float]]:
    """(forced start, per-slot committed watts over the horizon) for a job."""
    profile = [0.0] * grid.horizon
    if isinstance(request, FlexibleTotalRequest):
        start = compute_forced_start(
            request.energy_needed_wh,
            request.p_max_w,
            request.deadline,
            grid,
            now=max(now, request.available_from),
        )
        for t in range(start, request.deadline):
            profile[t] = request.p_max_w
        return start, profile
    if isinstance(request, FixedProfileRequest):
        start = request.latest_start
        if start < now:
            raise InfeasibleDeadline(f"latest start {start} already passed")
        for i, watts in enumerate(request.profile_w):
            profile[start + i] = watts
        return start, profile
    if isinstance(request, ThermalTargetRequest):
        start = plan_thermal_forced_start(request, grid)
        if start < now:
            raise InfeasibleDeadline(f"forced heating window {start} already passed")
        for t in range(start, request.service_end):
            profile[t] = request.rated_w
        return start, profile
    raise MalformedRequest(f"unknown request type {type(request).__name__}")


def _envelope(request: LoadRequest, grid: TimeGrid) -> tuple[float, ...]:
    """Per-slot max-power schedule the device may draw under this grant."""
    env = [0.0] * grid.horizon
    if isinstance(request, FlexibleTotalRequest):
        for t in range(request.available_from, request.deadline):
            env[t] = request.p_max_w
    elif isinstance(request, FixedProfileRequest):
        peak = max(request.profile_w)
        for t in range(request.earliest_start, request.deadline):
            env[t] = peak
    else:
        for t in range(request.preheat_from, request.service_end):
            env[t] = request.rated_w
    return tuple(env)


@dataclass
class JobCommitment:
    request: LoadRequest
    decision: Accept
    forced_start: int
    deadline: int
    profile_w: list[float]
    admitted_at: int
    released: bool = False


class CommitmentLedger:
    """The server's record of admitted jobs and their committed forced power.

    Invariants: the committed superposition never exceeds feeder capacity,
    and every admitted job's committed profile finishes it by its deadline.
    """

    def __init__(self, grid: TimeGrid, feeder_capacity_w: float):
        if feeder_capacity_w <= 0:
            raise MalformedRequest("feeder capacity must be positive")
        self.grid = grid
        self.feeder_capacity_w = feeder_capacity_w
        self.jobs: dict[str, JobCommitment] = {}
        self.committed_w = [0.0] * grid.horizon

    def committed_at(self, slot: int) -> float:
        return self.committed_w[slot]

    def admit(self, request: LoadRequest, now: int = 0) -> GrantDecision:
        """Admission decision; extends the ledger on acceptance.

        Re-requests from a device whose job is already admitted return the
        original acceptance (grant delivery may have been lost).
        """
        existing = self.jobs.get(request.device_id)
        if existing is not None and not existing.released:
            return existing.decision
        try:
            validate_request(request, self.grid)
            start, profile = forced_profile(request, self.grid, now=now)
        except MalformedRequest:
            return Reject(RejectReason.MALFORMED_REQUEST)
        except WindowInfeasible:
            return Reject(RejectReason.WINDOW_INFEASIBLE)
        for t in range(self.grid.horizon):
            if profile[t] > 0 and self.committed_w[t] + profile[t] > self.feeder_capacity_w + CAP_TOL_W:
                return Reject(RejectReason.CAPACITY_EXCEEDED, at_slot=t)
        for t in range(self.grid.horizon):
            self.committed_w[t] += profile[t]
        from .core import request_deadline

        decision = Accept(envelope_w=_envelope(request, self.grid), forced_start=start)
        self.jobs[request.device_id] = JobCommitment(
            request=request,
            decision=decision,
            forced_start=start,
            deadline=request_deadline(request),
            profile_w=profile,
            admitted_at=now,
        )
        return decision

    def release(self, device_id: str, from_slot: int) -> None:
        """Free a finished (or failed) job's future commitments."""
        job = self.jobs.get(device_id)
        if job is None or job.released:
            return
        for t in range(max(from_slot, 0), self.grid.horizon):
            self.committed_w[t] -= job.profile_w[t]
            job.profile_w[t] = 0.0
        job.released = True

    def can_reanchor_cycle(self, device_id: str, start_slot: int) -> bool:
        """Check whether a pending cycle can start at `start_slot` without the
        re-anchored run breaking any committed slot."""
        job = self.jobs.get(device_id)
        if job is None or job.released:
            return False
        request = job.request
        if not isinstance(request, FixedProfileRequest):
            return False
        if not request.earliest_start <= start_slot <= request.latest_start:
            return False
        for i, watts in enumerate(request.profile_w):
            t = start_slot + i
            others = self.committed_w[t] - job.profile_w[t]
            if others + watts > self.feeder_capacity_w + CAP_TOL_W:
                return False
        return True

    def reanchor_cycle(self, device_id: str, start_slot: int) -> None:
        """Move a pending cycle's commitment from its latest start to an
        earlier actual start. Callers must have checked can_reanchor_cycle."""
        job = self.jobs[device_id]
        request = job.request
        assert isinstance(request, FixedProfileRequest)
        for t in range(self.grid.horizon):
            self.committed_w[t] -= job.profile_w[t]
            job.profile_w[t] = 0.0
        for i, watts in enumerate(request.profile_w):
            job.profile_w[start_slot + i] = watts
            self.committed_w[start_slot + i] += watts


def admit(request: LoadRequest, ledger: CommitmentLedger, now: int = 0) -> GrantDecision:
    """Admission against the ledger's committed forced profiles."""
    return ledger.admit(request, now=now)


@dataclass(frozen=True)
class SlotNeed:
    """One job's appetite in a single slot, as collected by the engine.

    forced_w must be served in full; willing_w may be served opportunistically
    in whole multiples of packet_w. Pending cycles set cycle_start: their
    grant is all-or-nothing and re-anchors the ledger commitment.
    """

    job_id: str
    priority: int
    forced_w: float = 0.0
    willing_w: float = 0.0
    packet_w: float = 1.0
    cycle_start: bool = False


@dataclass(frozen=True)
class SupplyView:
    """What the server can see about this slot's supply side."""

    renewable_w: float
    storage: StorageAsset | None
    import_allowed: bool
    feeder_capacity_w: float


def allocate_slot(
    ledger: CommitmentLedger,
    needs: Sequence[SlotNeed],
    supply: SupplyView,
    rng: random.Random,
    now: int = 0,
    renewable_first: bool = True,
) -> dict[str, float]:
    """Grant watts to jobs for one slot.

    Forced needs are served first and in full. Remaining capacity is offered
    in priority order with a seeded uniform shuffle among equal priorities;
    each opportunistic grant is a whole number of the job's packets. With
    renewable_first, opportunistic power is only handed out up to the
    renewable surplus left after forced commitments, which concentrates
    flexible consumption under renewable availability.
    """
    cap = supply.feeder_capacity_w
    forced_total = sum(n.forced_w for n in needs)
    if forced_total > cap + CAP_TOL_W:
        raise CapacityViolation(
            f"forced needs {forced_total:.1f} W exceed capacity {cap:.1f} W at slot {now}"
        )
    grants = {n.job_id: n.forced_w for n in needs if n.forced_w > 0}
    spare = cap - forced_total
    if renewable_first:
        spare = min(spare, max(0.0, supply.renewable_w - forced_total))
    willing = [n for n in needs if n.willing_w > 0 and n.forced_w <= 0]
    rng.shuffle(willing)
    willing.sort(key=lambda n: n.priority)  # stable sort keeps the shuffle within ties
    for need in willing:
        if spare < need.packet_w:
            continue
        if need.cycle_start:
            if spare + CAP_TOL_W < need.packet_w:
                continue
            if not ledger.can_reanchor_cycle(need.job_id, now):
                continue
            ledger.reanchor_cycle(need.job_id, now)
            grants[need.job_id] = grants.get(need.job_id, 0.0) + need.packet_w
            spare -= need.packet_w
            continue
        packets = math.floor(min(need.willing_w, spare) / need.packet_w + 1e-9)
        if packets <= 0:
            continue
        amount = packets * need.packet_w
        grants[need.job_id] = grants.get(need.job_id, 0.0) + amount
        spare -= amount
    total = sum(grants.values())
    if total > cap + CAP_TOL_W:
        raise CapacityViolation(f"granted {total:.1f} W over capacity {cap:.1f} W")
    return grants


@dataclass(frozen=True)
class DispatchPlan:
    """Supply-side split for one slot. renewable_used_w is renewable power
    serving load; storage_flow_w is signed (positive charges). The identity
    renewable_used + storage discharge + imported == total served holds
    exactly."""

    renewable_used_w: float
    storage_flow_w: float
    imported_w: float
    curtailed_w: float


def dispatch_supply(
    total_granted_w: float, supply: SupplyView, slot_min: float
) -> DispatchPlan:
    """Merit order renewable -> storage discharge -> import. Surplus renewable
    charges storage, the rest is curtailed.

    Raises UnderSupply when imports are disallowed and a deficit remains; the
    engine then sheds grants and retries (emergency mode).
    """
    if total_granted_w > supply.feeder_capacity_w + CAP_TOL_W:
        raise CapacityViolation("dispatch asked to serve more than feeder capacity")
    renewable_used = min(total_granted_w, supply.renewable_w)
    deficit = total_granted_w - renewable_used
    discharge = 0.0
    if deficit > 0 and supply.storage is not None:
        discharge = min(deficit, supply.storage.max_discharge_w(slot_min))
    deficit -= discharge
    imported = 0.0
    if deficit > CAP_TOL_W:
        if not supply.import_allowed:
            raise UnderSupply(deficit)
        imported = deficit
    else:
        renewable_used += deficit  # absorb watt-level epsilon into renewables
        deficit = 0.0
    surplus = supply.renewable_w - renewable_used
    charge = 0.0
    if surplus > 0 and discharge == 0 and supply.storage is not None:
        charge = min(surplus, supply.storage.max_charge_w(slot_min))
    curtailed = surplus - charge
    return DispatchPlan(
        renewable_used_w=renewable_used,
        storage_flow_w=charge - discharge,
        imported_w=imported,
        curtailed_w=curtailed,
    )


@dataclass(frozen=True)
class ReferenceSignal:
    """Per-epoch target aggregate power for the fleet mode."""

    values_w: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.values_w:
            raise MalformedRequest("reference signal must be non-empty")
        if any(v < 0 for v in self.values_w):
            raise MalformedRequest("reference power must be non-negative")

    def at(self, epoch: int) -> float:
        return self.values_w[min(epoch, len(self.values_w) - 1)]

    @classmethod
    def constant(cls, watts: float, epochs: int = 1) -> "ReferenceSignal":
        return cls(values_w=(watts,) * max(epochs, 1))


def track_reference(
    request_ids: Sequence[str],
    reference_w: float,
    currently_on_w: float,
    packet: PacketSpec,
    rng: random.Random,
) -> list[str]:
    """Accept a uniformly random subset of fleet requests sized to close the
    gap to the reference without overshooting it from below.

    Force-on devices are part of currently_on_w and are never rejected;
    force-off devices never request in the first place.
    """
    if not request_ids:
        return []
    budget = reference_w - currently_on_w
    if budget <= 0:
        return []
    count = min(len(request_ids), math.floor(budget / packet.power_w + 1e-9))
    if count <= 0:
        return []
    return rng.sample(list(request_ids), count)


def handle_rejection_retry(now: int, backoff_max: int, rng: random.Random) -> int:
    """Slot at which a rejected device asks again: uniform backoff in
    [1, backoff_max] avoids synchronized retry storms."""
    if backoff_max < 1:
        raise MalformedRequest("backoff bound must be at least 1")
    return now + rng.randint(1, backoff_max)
