"""Load and supply state machines: thermal nodes, batteries, fixed cycles,
water-heater fleet parameters, renewable traces, and storage.

Every transition is a pure function (state, input) -> state, so devices can
be stepped independently within a slot. The thermal model is a first-order
lumped node integrated with one explicit Euler step per slot:

    T' = T + (dt/60) * (eta * P - U * (T - T_ambient)) / C

which converges to T_ambient + eta*P/U and admits the closed-form solution
used as the test oracle.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, replace
from enum import Enum

from .core import MalformedRequest


class ContiguityViolation(RuntimeError):
    """An in-progress fixed cycle was denied power. Signals a server bug,
    never a device decision."""


@dataclass(frozen=True)
class ThermalLoadState:
    """Lumped thermal node with its parameters."""

    temp_c: float
    ambient_c: float
    capacitance_wh_per_c: float  # C
    loss_w_per_c: float          # U
    rated_w: float
    efficiency: float = 1.0

    def __post_init__(self) -> None:
        if self.capacitance_wh_per_c <= 0:
            raise MalformedRequest("thermal capacitance must be positive")
        if self.loss_w_per_c < 0:
            raise MalformedRequest("loss coefficient must be non-negative")
        if self.rated_w <= 0:
            raise MalformedRequest("rated power must be positive")
        if not 0 < self.efficiency <= 1:
            raise MalformedRequest("efficiency must lie in (0, 1]")


def step_thermal(state: ThermalLoadState, applied_w: float, dt_min: float) -> ThermalLoadState:
    """One Euler step with `applied_w` heating power (clamped to [0, rated])."""
    power = min(max(applied_w, 0.0), state.rated_w)
    dt_h = dt_min / 60.0
    delta = dt_h * (
        state.efficiency * power
        - state.loss_w_per_c * (state.temp_c - state.ambient_c)
    ) / state.capacitance_wh_per_c
    return replace(state, temp_c=state.temp_c + delta)


def decay_temp(state: ThermalLoadState, steps: int, dt_min: float) -> float:
    """Temperature after `steps` zero-power slots (closed form of the Euler
    recursion, exact w.r.t. step_thermal)."""
    a = 1.0 - (dt_min / 60.0) * state.loss_w_per_c / state.capacitance_wh_per_c
    return state.ambient_c + (state.temp_c - state.ambient_c) * a**steps


def min_heating_slots(
    state: ThermalLoadState, target_c: float, dt_min: float, max_steps: int = 10_000
) -> int | None:
    """Fewest consecutive rated-power slots that lift the node to `target_c`.

    None when the target is unreachable (steady state below target).
    """
    if state.temp_c >= target_c:
        return 0
    current = state
    for n in range(1, max_steps + 1):
        nxt = step_thermal(current, current.rated_w, dt_min)
        if nxt.temp_c <= current.temp_c:
            return None
        current = nxt
        if current.temp_c >= target_c:
            return n
    return None


@dataclass(frozen=True)
class BatteryLoadState:
    soc_wh: float
    capacity_wh: float
    p_max_w: float
    arrival_slot: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.soc_wh <= self.capacity_wh:
            raise MalformedRequest("state of charge out of [0, capacity]")
        if self.p_max_w < 0:
            raise MalformedRequest("charge power limit must be non-negative")

    @property
    def remaining_wh(self) -> float:
        return self.capacity_wh - self.soc_wh


def step_battery(
    state: BatteryLoadState, applied_w: float, dt_min: float
) -> tuple[BatteryLoadState, float]:
    """Charge for one slot; returns (new state, energy actually absorbed in Wh).

    Absorption saturates at capacity, so the absorbed energy can be less than
    applied_w * dt.
    """
    power = min(max(applied_w, 0.0), state.p_max_w)
    offered = power * dt_min / 60.0
    absorbed = min(offered, state.capacity_wh - state.soc_wh)
    return replace(state, soc_wh=state.soc_wh + absorbed), absorbed


@dataclass(frozen=True)
class FixedCycleState:
    """A profile that, once started, advances exactly one slot per slot."""

    profile_w: tuple[float, ...]
    started_at: int | None = None
    progress: int = 0

    @property
    def finished(self) -> bool:
        return self.progress >= len(self.profile_w)

    @property
    def running(self) -> bool:
        return self.started_at is not None and not self.finished


def step_cycle(
    state: FixedCycleState, granted: bool, now: int
) -> tuple[FixedCycleState, float]:
    """Advance the cycle one slot. Starting is triggered by the first grant;
    afterwards a missing grant is a contract violation."""
    if state.finished:
        return state, 0.0
    if state.started_at is None:
        if not granted:
            return state, 0.0
        consumed = state.profile_w[0]
        return replace(state, started_at=now, progress=1), consumed
    if not granted:
        raise ContiguityViolation(
            f"cycle started at {state.started_at} denied power at slot {now}"
        )
    consumed = state.profile_w[state.progress]
    return replace(state, progress=state.progress + 1), consumed


class OverrideState(Enum):
    FORCE_ON = "force_on"
    FORCE_OFF = "force_off"
    NORMAL = "normal"


@dataclass(frozen=True)
class WaterHeaterParams:
    """Deadband heater with local overrides and stochastic draw events.

    A draw removes a random number of degrees in [draw_min_c, draw_max_c]
    with probability draw_prob per epoch. Local overrides guarantee the
    comfort band regardless of what the server grants.
    """

    t_low_c: float = 50.0
    t_high_c: float = 60.0
    override_margin_c: float = 2.0
    mu_max: float = 0.3
    rated_w: float = 4500.0
    capacitance_wh_per_c: float = 300.0
    loss_w_per_c: float = 5.0
    ambient_c: float = 20.0
    efficiency: float = 1.0
    draw_prob: float = 0.7
    draw_min_c: float = 0.2
    draw_max_c: float = 0.45

    def __post_init__(self) -> None:
        if self.t_low_c >= self.t_high_c:
            raise MalformedRequest("deadband must have t_low < t_high")
        if not 0 < self.mu_max <= 1:
            raise MalformedRequest("request rate cap must lie in (0, 1]")
        if self.override_margin_c < 0:
            raise MalformedRequest("override margin must be non-negative")
        if not 0 <= self.draw_prob <= 1:
            raise MalformedRequest("draw probability must lie in [0, 1]")
        if not 0 <= self.draw_min_c <= self.draw_max_c:
            raise MalformedRequest("draw magnitudes out of order")

    def thermal_state(self, temp_c: float) -> ThermalLoadState:
        return ThermalLoadState(
            temp_c=temp_c,
            ambient_c=self.ambient_c,
            capacitance_wh_per_c=self.capacitance_wh_per_c,
            loss_w_per_c=self.loss_w_per_c,
            rated_w=self.rated_w,
            efficiency=self.efficiency,
        )


def fleet_request_probability(temp_c: float, params: WaterHeaterParams) -> float:
    """Packet-request probability, linear in deadband position: zero at the
    top of the band, mu_max at (or below) the bottom."""
    span = params.t_high_c - params.t_low_c
    urgency = (params.t_high_c - temp_c) / span
    return params.mu_max * min(max(urgency, 0.0), 1.0)


def local_override(temp_c: float, params: WaterHeaterParams) -> OverrideState:
    """Comfort-band override, evaluated locally each epoch."""
    if temp_c < params.t_low_c - params.override_margin_c:
        return OverrideState.FORCE_ON
    if temp_c > params.t_high_c:
        return OverrideState.FORCE_OFF
    return OverrideState.NORMAL


@dataclass(frozen=True)
class RenewableTrace:
    values_w: tuple[float, ...]

    def __post_init__(self) -> None:
        if any(v < 0 for v in self.values_w):
            raise MalformedRequest("renewable power must be non-negative")

    def at(self, slot: int) -> float:
        return self.values_w[slot]


def random_walk_trace(
    n_slots: int, mean_w: float, volatility_w: float, rng: random.Random
) -> RenewableTrace:
    """Clipped random walk in [0, 2*mean] starting at the mean. Equal seeds
    give bit-identical traces."""
    if mean_w < 0 or volatility_w < 0:
        raise MalformedRequest("trace parameters must be non-negative")
    ceiling = 2.0 * mean_w
    values = []
    level = mean_w
    for _ in range(n_slots):
        level = min(max(level + rng.gauss(0.0, volatility_w), 0.0), ceiling)
        values.append(level)
    return RenewableTrace(values_w=tuple(values))


@dataclass(frozen=True)
class StorageAsset:
    """Micro-grid battery. Sign convention for commands and flows: positive
    charges, negative discharges. Round-trip losses are applied on the way in
    so the conservation identity stays linear on the discharge side."""

    soc_wh: float
    capacity_wh: float
    p_charge_max_w: float
    p_discharge_max_w: float
    efficiency: float = 1.0

    def __post_init__(self) -> None:
        if not 0 <= self.soc_wh <= self.capacity_wh:
            raise MalformedRequest("storage soc out of [0, capacity]")
        if self.p_charge_max_w < 0 or self.p_discharge_max_w < 0:
            raise MalformedRequest("storage power limits must be non-negative")
        if not 0 < self.efficiency <= 1:
            raise MalformedRequest("storage efficiency must lie in (0, 1]")

    def max_discharge_w(self, dt_min: float) -> float:
        """Power the asset can actually deliver for a whole slot."""
        return min(self.p_discharge_max_w, self.soc_wh / (dt_min / 60.0))

    def max_charge_w(self, dt_min: float) -> float:
        """Grid-side power the asset can absorb for a whole slot."""
        headroom = (self.capacity_wh - self.soc_wh) / self.efficiency
        return min(self.p_charge_max_w, headroom / (dt_min / 60.0))


def step_storage(
    state: StorageAsset, command_w: float, dt_min: float
) -> tuple[StorageAsset, float]:
    """Apply a signed power command for one slot; returns (state, actual watts).

    The actual flow reflects clamping at the soc bounds and power limits;
    charge and discharge never happen in the same slot by construction.
    """
    dt_h = dt_min / 60.0
    if command_w >= 0:
        power = min(command_w, state.max_charge_w(dt_min))
        stored = power * dt_h * state.efficiency
        new_soc = min(state.capacity_wh, state.soc_wh + stored)
        return replace(state, soc_wh=new_soc), power
    power = min(-command_w, state.max_discharge_w(dt_min))
    new_soc = max(0.0, state.soc_wh - power * dt_h)
    return replace(state, soc_wh=new_soc), -power
