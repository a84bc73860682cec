"""Time grid, energy packet quantization, and the request/grant vocabulary.

Conventions shared across the package: power in watts (W), energy in
watt-hours (Wh), temperature in degrees Celsius, durations in minutes, and
all schedule times as integer slot indices on a :class:`TimeGrid`. Lower
priority numbers mean more important loads.

All types here are immutable values; they can be shared freely across
concurrent scenario runs.
"""

from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass
from enum import Enum
from typing import Union

# Relative slack used when an energy requirement is converted into a whole
# number of full-power slots. Scenario energies often arrive rounded to a few
# decimals; without the slack, an input rounded up by a fraction of a
# watt-hour would force a whole extra slot of reserved capacity.
ENERGY_REL_TOL = 1e-4

# A job whose remaining need falls below this is considered complete. Bounds
# the bookkeeping slack introduced by ENERGY_REL_TOL (sub-watt-hour at the
# power levels this simulator targets).
COMPLETION_TOL_WH = 1.0


class MalformedRequest(ValueError):
    """A request field is structurally invalid (negative power, empty profile, ...)."""


class WindowInfeasible(ValueError):
    """The service window cannot accommodate the requested work."""


class InfeasibleDeadline(WindowInfeasible):
    """No remaining start slot can complete the job by its deadline."""


def parse_hhmm(text: str) -> int:
    """Parse a wall-clock "HH:MM" string into minutes. "24:00" is allowed and
    denotes the end-of-day boundary (1440)."""
    parts = text.strip().split(":")
    if len(parts) != 2:
        raise MalformedRequest(f"bad clock string {text!r}, expected HH:MM")
    try:
        hours, minutes = int(parts[0]), int(parts[1])
    except ValueError as exc:
        raise MalformedRequest(f"bad clock string {text!r}") from exc
    if hours < 0 or not 0 <= minutes < 60:
        raise MalformedRequest(f"bad clock string {text!r}")
    return hours * 60 + minutes


def format_hhmm(minutes: int) -> str:
    """Render minutes as "HH:MM". 1440 renders as "24:00", not "00:00"."""
    return f"{minutes // 60:02d}:{minutes % 60:02d}"


@dataclass(frozen=True)
class TimeGrid:
    """Discrete time axis: `horizon` slots of `slot_min` minutes starting at
    wall-clock minute `epoch_start_min`. Slot i covers the half-open interval
    [start + i*slot_min, start + (i+1)*slot_min)."""

    epoch_start_min: int
    slot_min: int
    horizon: int

    def __post_init__(self) -> None:
        if self.slot_min <= 0:
            raise MalformedRequest("slot length must be positive")
        if self.horizon < 1:
            raise MalformedRequest("horizon must be at least one slot")
        if self.epoch_start_min < 0:
            raise MalformedRequest("epoch start must be non-negative")

    @property
    def slot_hours(self) -> float:
        return self.slot_min / 60.0

    @property
    def slot_ms(self) -> float:
        return self.slot_min * 60_000.0

    def slot_of(self, clock: str | int) -> int:
        """Map a wall-clock time ("HH:MM" or minutes) onto a slot boundary.

        The time must be an exact multiple of the slot length.
        """
        minutes = parse_hhmm(clock) if isinstance(clock, str) else clock
        offset = minutes - self.epoch_start_min
        if offset % self.slot_min != 0:
            raise MalformedRequest(
                f"time {format_hhmm(minutes)} is not on the {self.slot_min}-minute grid"
            )
        return offset // self.slot_min

    def clock_of(self, slot: int) -> str:
        return format_hhmm(self.epoch_start_min + slot * self.slot_min)

    def contains(self, slot: int) -> bool:
        return 0 <= slot < self.horizon


@dataclass(frozen=True)
class PacketSpec:
    """The energy quantum: a right to draw `power_w` for `duration_slots`
    slots, i.e. a fixed number of watt-hours in a fixed number of minutes."""

    power_w: float
    duration_slots: int
    slot_min: int

    def __post_init__(self) -> None:
        if self.power_w <= 0:
            raise MalformedRequest("packet power must be positive")
        if self.duration_slots < 1:
            raise MalformedRequest("packet duration must be at least one slot")
        if self.slot_min <= 0:
            raise MalformedRequest("slot length must be positive")

    @property
    def energy_wh(self) -> float:
        return self.power_w * self.duration_slots * self.slot_min / 60.0


def quantize(power_w: float, slot_min: int) -> PacketSpec:
    """Build the one-slot packet for a device rated at `power_w`."""
    if power_w <= 0 or slot_min <= 0:
        raise MalformedRequest("quantize needs positive power and slot length")
    return PacketSpec(power_w=power_w, duration_slots=1, slot_min=slot_min)


# Priority levels are small ordinals; ties between equal levels are broken
# only by the server's seeded randomness.
Priority = int


@dataclass(frozen=True)
class FixedProfileRequest:
    """All-or-nothing job with a fixed per-slot consumption profile that must
    run contiguously, starting somewhere in [earliest_start, latest_start]."""

    device_id: str
    profile_w: tuple[float, ...]
    earliest_start: int
    latest_start: int
    priority: Priority
    issued_at: int

    @property
    def deadline(self) -> int:
        """Completion boundary: the slot after the latest admissible run."""
        return self.latest_start + len(self.profile_w)

    @property
    def energy_wh_per_slot_hour(self) -> float:
        return sum(self.profile_w)


@dataclass(frozen=True)
class FlexibleTotalRequest:
    """Job needing a total amount of energy anywhere inside its window, drawn
    at up to `p_max_w`, granted in multiples of `packet_w`."""

    device_id: str
    energy_needed_wh: float
    p_max_w: float
    available_from: int
    deadline: int
    packet_w: float
    priority: Priority
    issued_at: int


@dataclass(frozen=True)
class ThermalTargetRequest:
    """Job that must hold a temperature at or above `target_c` throughout
    [service_start, service_end). Heating may run from `preheat_from`; at
    `force_check_at` the server verifies the temperature is on track and
    forces heating if it is not.

    The thermal snapshot fields describe the load at issue time so the
    server can plan the guaranteed heating window without querying the
    device.
    """

    device_id: str
    target_c: float
    service_start: int
    service_end: int
    preheat_from: int
    force_check_at: int
    rated_w: float
    priority: Priority
    issued_at: int
    # thermal snapshot
    temp_c: float
    ambient_c: float
    capacitance_wh_per_c: float
    loss_w_per_c: float
    efficiency: float = 1.0


LoadRequest = Union[FixedProfileRequest, FlexibleTotalRequest, ThermalTargetRequest]


class RejectReason(Enum):
    CAPACITY_EXCEEDED = "capacity_exceeded"
    WINDOW_INFEASIBLE = "window_infeasible"
    MALFORMED_REQUEST = "malformed_request"


@dataclass(frozen=True)
class Accept:
    """Admission: a per-slot max-power envelope plus the slot from which the
    job will run under the forced regime if still unfinished."""

    envelope_w: tuple[float, ...]
    forced_start: int


@dataclass(frozen=True)
class Reject:
    reason: RejectReason
    at_slot: int | None = None


GrantDecision = Union[Accept, Reject]


def validate_request(request: LoadRequest, grid: TimeGrid) -> None:
    """Structural validation: field invariants plus horizon containment.

    Raises MalformedRequest or WindowInfeasible. Capacity feasibility is the
    server's job, not validation's.
    """
    if isinstance(request, FixedProfileRequest):
        if not request.profile_w:
            raise MalformedRequest("profile must be non-empty")
        if any(w < 0 for w in request.profile_w):
            raise MalformedRequest("profile power must be non-negative")
        if request.latest_start < request.earliest_start:
            raise WindowInfeasible("latest start precedes earliest start")
        if request.earliest_start < 0 or request.deadline > grid.horizon:
            raise WindowInfeasible("profile window leaves the horizon")
    elif isinstance(request, FlexibleTotalRequest):
        if request.energy_needed_wh < 0:
            raise MalformedRequest("energy needed must be non-negative")
        if request.p_max_w < 0 or request.packet_w <= 0:
            raise MalformedRequest("power limits must be positive")
        if request.energy_needed_wh > 0 and request.deadline <= request.available_from:
            raise WindowInfeasible("deadline does not follow availability")
        if request.available_from < 0 or request.deadline > grid.horizon:
            raise WindowInfeasible("window leaves the horizon")
        window_h = (request.deadline - request.available_from) * grid.slot_hours
        if request.energy_needed_wh > request.p_max_w * window_h * (1 + 1e-9):
            raise WindowInfeasible(
                f"{request.energy_needed_wh:.1f} Wh cannot fit in "
                f"{window_h:.2f} h at {request.p_max_w:.0f} W"
            )
    elif isinstance(request, ThermalTargetRequest):
        if request.rated_w <= 0:
            raise MalformedRequest("rated power must be positive")
        if request.capacitance_wh_per_c <= 0 or request.loss_w_per_c < 0:
            raise MalformedRequest("bad thermal parameters")
        if not 0 < request.efficiency <= 1:
            raise MalformedRequest("efficiency must lie in (0, 1]")
        if not math.isfinite(request.temp_c) or not math.isfinite(request.target_c):
            raise MalformedRequest("temperatures must be finite")
        if not (
            request.preheat_from
            <= request.force_check_at
            <= request.service_start
            < request.service_end
        ):
            raise WindowInfeasible("thermal schedule out of order")
        if request.preheat_from < 0 or request.service_end > grid.horizon:
            raise WindowInfeasible("service window leaves the horizon")
    else:
        raise MalformedRequest(f"unknown request type {type(request).__name__}")
    if request.priority < 0:
        raise MalformedRequest("priority level must be non-negative")


def request_deadline(request: LoadRequest) -> int:
    """Completion boundary used for deadline accounting, per request kind."""
    if isinstance(request, FixedProfileRequest):
        return request.deadline
    if isinstance(request, FlexibleTotalRequest):
        return request.deadline
    return request.service_start


def substream(seed: int, *labels: object) -> random.Random:
    """Derive an independent, reproducible RNG from a run seed and a label
    path. Stable across processes and platforms (unlike hash())."""
    key = ":".join([str(seed), *map(str, labels)]).encode()
    return random.Random(int.from_bytes(hashlib.sha256(key).digest()[:8], "big"))
