"""Scenario configuration: device descriptors, supply, channels, server
policy, and JSON (de)serialization.

Scenario files are JSON documents with top-level keys `grid`,
`feeder_capacity_w`, `devices`, `renewable`, `storage`, `channels`,
`server`, `seed` (plus `reference` for fleet runs). Times are "HH:MM"
strings and must land exactly on the configured grid.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

from .comms import ChannelClass, ChannelProfile, MMTC_DEFAULT, URLLC_DEFAULT
from .core import MalformedRequest, TimeGrid, parse_hhmm, substream
from .devices import (
    RenewableTrace,
    StorageAsset,
    WaterHeaterParams,
    random_walk_trace,
)
from .server import ReferenceSignal


@dataclass(frozen=True)
class ThermalConfig:
    """A temperature-target load (e.g. a sauna): must sit at or above
    target_c throughout the service window."""

    device_id: str
    rated_w: float
    target_c: float
    service_start: int
    service_end: int
    preheat_from: int
    force_check_at: int
    priority: int = 2
    capacitance_wh_per_c: float = 60.0
    loss_w_per_c: float = 10.0
    ambient_c: float = 20.0
    initial_c: float = 20.0
    efficiency: float = 1.0
    packet_w: float | None = None  # grant quantum; defaults to rated power

    @property
    def quantum_w(self) -> float:
        return self.packet_w if self.packet_w is not None else self.rated_w


@dataclass(frozen=True)
class BatteryConfig:
    """A deadline-bound charging load (e.g. an EV battery)."""

    device_id: str
    capacity_wh: float
    p_max_w: float
    arrival: int
    deadline: int
    priority: int = 3
    packet_w: float = 1000.0
    initial_soc_wh: float | None = None  # None: seeded uniform on [0, capacity/2]


@dataclass(frozen=True)
class CycleConfig:
    """A fixed, contiguous consumption profile with a start window."""

    device_id: str
    profile_w: tuple[float, ...]
    earliest_start: int
    deadline: int  # completion boundary; latest start is deadline - len(profile)
    priority: int = 1

    @property
    def latest_start(self) -> int:
        return self.deadline - len(self.profile_w)


@dataclass(frozen=True)
class HeaterFleetConfig:
    """A population of deadband water heaters tracked against a reference."""

    device_id: str
    count: int
    params: WaterHeaterParams = field(default_factory=WaterHeaterParams)
    packet_epochs: int = 8  # epochs one accepted packet keeps a heater on


DeviceConfig = Union[ThermalConfig, BatteryConfig, CycleConfig, HeaterFleetConfig]


@dataclass(frozen=True)
class RenewableConfig:
    """Either a fixed per-slot trace or a seeded clipped random walk."""

    kind: str = "random_walk"  # "random_walk" | "trace"
    mean_w: float = 3000.0
    volatility_w: float = 600.0
    values_w: tuple[float, ...] | None = None

    def build(self, n_slots: int, rng: random.Random) -> RenewableTrace:
        if self.kind == "trace":
            if self.values_w is None:
                raise MalformedRequest("fixed renewable trace needs values_w")
            values = list(self.values_w)
            if len(values) < n_slots:
                values += [values[-1] if values else 0.0] * (n_slots - len(values))
            return RenewableTrace(values_w=tuple(values[:n_slots]))
        if self.kind == "random_walk":
            return random_walk_trace(n_slots, self.mean_w, self.volatility_w, rng)
        raise MalformedRequest(f"unknown renewable kind {self.kind!r}")


@dataclass(frozen=True)
class ServerPolicy:
    backoff_max: int = 3
    renewable_first: bool = True
    emergency_shedding: bool = True


@dataclass(frozen=True)
class Scenario:
    grid: TimeGrid
    feeder_capacity_w: float
    devices: tuple[DeviceConfig, ...]
    renewable: RenewableConfig = field(default_factory=RenewableConfig)
    storage: StorageAsset | None = None
    import_allowed: bool = True
    channels: dict[str, ChannelProfile] | None = None
    policy: ServerPolicy = field(default_factory=ServerPolicy)
    reference: ReferenceSignal | None = None
    trip_rate_per_hour: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.feeder_capacity_w <= 0:
            raise MalformedRequest("feeder capacity must be positive")
        ids = [d.device_id for d in self.devices]
        if len(set(ids)) != len(ids):
            raise MalformedRequest("device ids must be unique")
        fleet = [d for d in self.devices if isinstance(d, HeaterFleetConfig)]
        household = [d for d in self.devices if not isinstance(d, HeaterFleetConfig)]
        if fleet and household:
            raise MalformedRequest(
                "fleet and household devices run on different clocks; use separate scenarios"
            )
        if len(fleet) > 1:
            raise MalformedRequest("at most one heater fleet per scenario")
        if fleet and self.reference is None:
            raise MalformedRequest("fleet scenarios need a reference signal")
        if self.channels is not None:
            missing = {"request", "grant", "meter", "trip"} - set(self.channels)
            if missing:
                raise MalformedRequest(f"channel block missing kinds: {sorted(missing)}")
        for device in household:
            for slot_attr in _TIME_FIELDS[type(device)]:
                slot = getattr(device, slot_attr)
                if not 0 <= slot <= self.grid.horizon:
                    raise MalformedRequest(
                        f"{device.device_id}.{slot_attr} outside the horizon"
                    )

    @property
    def is_fleet(self) -> bool:
        return any(isinstance(d, HeaterFleetConfig) for d in self.devices)

    def renewable_trace(self) -> RenewableTrace:
        return self.renewable.build(
            self.grid.horizon, substream(self.seed, "renewable")
        )


_TIME_FIELDS: dict[type, tuple[str, ...]] = {
    ThermalConfig: ("preheat_from", "force_check_at", "service_start", "service_end"),
    BatteryConfig: ("arrival", "deadline"),
    CycleConfig: ("earliest_start", "deadline"),
}


def default_channels() -> dict[str, ChannelProfile]:
    """Request/grant on the low-latency class, metering on the massive class,
    trip signals on the low-latency class."""
    return {
        "request": URLLC_DEFAULT,
        "grant": URLLC_DEFAULT,
        "meter": MMTC_DEFAULT,
        "trip": URLLC_DEFAULT,
    }


def null_channels() -> dict[str, ChannelProfile]:
    """Lossless zero-delay channels; messages are logged but never perturb
    slot timing. Useful for reproduction runs."""
    zero = dict(offset_ms=0.0, mean_ms=0.0, loss_prob=0.0,
                retransmit_timeout_ms=0.0, max_attempts=1)
    return {
        "request": ChannelProfile(cls=ChannelClass.URLLC, **zero),
        "grant": ChannelProfile(cls=ChannelClass.URLLC, **zero),
        "meter": ChannelProfile(cls=ChannelClass.MMTC, **zero),
        "trip": ChannelProfile(cls=ChannelClass.URLLC, **zero),
    }


# ---------------------------------------------------------------------------
# JSON serialization
# ---------------------------------------------------------------------------

def _profile_to_dict(p: ChannelProfile) -> dict:
    return {
        "class": p.cls.value,
        "offset_ms": p.offset_ms,
        "mean_ms": p.mean_ms,
        "loss": p.loss_prob,
        "timeout_ms": p.retransmit_timeout_ms,
        "max_attempts": p.max_attempts,
    }


def _profile_from_dict(d: dict) -> ChannelProfile:
    return ChannelProfile(
        cls=ChannelClass(d["class"]),
        offset_ms=float(d["offset_ms"]),
        mean_ms=float(d["mean_ms"]),
        loss_prob=float(d["loss"]),
        retransmit_timeout_ms=float(d["timeout_ms"]),
        max_attempts=int(d["max_attempts"]),
    )


def scenario_to_dict(scenario: Scenario) -> dict:
    grid = scenario.grid
    clock = grid.clock_of

    def device_dict(device: DeviceConfig) -> dict:
        if isinstance(device, ThermalConfig):
            return {
                "type": "thermal",
                "id": device.device_id,
                "rated_w": device.rated_w,
                "target_c": device.target_c,
                "service_start": clock(device.service_start),
                "service_end": clock(device.service_end),
                "preheat_from": clock(device.preheat_from),
                "force_check_at": clock(device.force_check_at),
                "priority": device.priority,
                "capacitance_wh_per_c": device.capacitance_wh_per_c,
                "loss_w_per_c": device.loss_w_per_c,
                "ambient_c": device.ambient_c,
                "initial_c": device.initial_c,
                "efficiency": device.efficiency,
                "packet_w": device.packet_w,
            }
        if isinstance(device, BatteryConfig):
            return {
                "type": "battery",
                "id": device.device_id,
                "capacity_wh": device.capacity_wh,
                "p_max_w": device.p_max_w,
                "arrive": clock(device.arrival),
                "deadline": clock(device.deadline),
                "priority": device.priority,
                "packet_w": device.packet_w,
                "initial_soc_wh": device.initial_soc_wh,
            }
        if isinstance(device, CycleConfig):
            return {
                "type": "cycle",
                "id": device.device_id,
                "profile_w": list(device.profile_w),
                "earliest_start": clock(device.earliest_start),
                "deadline": clock(device.deadline),
                "priority": device.priority,
            }
        if isinstance(device, HeaterFleetConfig):
            p = device.params
            return {
                "type": "heater_fleet",
                "id": device.device_id,
                "count": device.count,
                "packet_epochs": device.packet_epochs,
                "t_low_c": p.t_low_c,
                "t_high_c": p.t_high_c,
                "override_margin_c": p.override_margin_c,
                "mu_max": p.mu_max,
                "rated_w": p.rated_w,
                "capacitance_wh_per_c": p.capacitance_wh_per_c,
                "loss_w_per_c": p.loss_w_per_c,
                "ambient_c": p.ambient_c,
                "efficiency": p.efficiency,
                "draw_prob": p.draw_prob,
                "draw_min_c": p.draw_min_c,
                "draw_max_c": p.draw_max_c,
            }
        raise MalformedRequest(f"unknown device config {type(device).__name__}")

    doc: dict = {
        "grid": {
            "start": clock(0),
            "slot_min": grid.slot_min,
            "horizon": grid.horizon,
        },
        "feeder_capacity_w": scenario.feeder_capacity_w,
        "devices": [device_dict(d) for d in scenario.devices],
        "renewable": {
            "kind": scenario.renewable.kind,
            "mean_w": scenario.renewable.mean_w,
            "volatility_w": scenario.renewable.volatility_w,
            "values_w": (
                list(scenario.renewable.values_w)
                if scenario.renewable.values_w is not None
                else None
            ),
        },
        "storage": (
            None
            if scenario.storage is None
            else {
                "soc_wh": scenario.storage.soc_wh,
                "capacity_wh": scenario.storage.capacity_wh,
                "p_charge_max_w": scenario.storage.p_charge_max_w,
                "p_discharge_max_w": scenario.storage.p_discharge_max_w,
                "efficiency": scenario.storage.efficiency,
            }
        ),
        "import_allowed": scenario.import_allowed,
        "channels": (
            None
            if scenario.channels is None
            else {k: _profile_to_dict(v) for k, v in scenario.channels.items()}
        ),
        "server": {
            "backoff_max": scenario.policy.backoff_max,
            "renewable_first": scenario.policy.renewable_first,
            "emergency_shedding": scenario.policy.emergency_shedding,
        },
        "trip_rate_per_hour": scenario.trip_rate_per_hour,
        "seed": scenario.seed,
    }
    if scenario.reference is not None:
        doc["reference"] = {"values_w": list(scenario.reference.values_w)}
    return doc


def scenario_from_dict(doc: dict) -> Scenario:
    start = doc["grid"]["start"]
    grid = TimeGrid(
        epoch_start_min=start if isinstance(start, int) else parse_hhmm(start),
        slot_min=int(doc["grid"]["slot_min"]),
        horizon=int(doc["grid"]["horizon"]),
    )
    slot = grid.slot_of

    def device_from(d: dict) -> DeviceConfig:
        kind = d.get("type")
        if kind == "thermal":
            return ThermalConfig(
                device_id=d["id"],
                rated_w=float(d["rated_w"]),
                target_c=float(d["target_c"]),
                service_start=slot(d["service_start"]),
                service_end=slot(d["service_end"]),
                preheat_from=slot(d["preheat_from"]),
                force_check_at=slot(d["force_check_at"]),
                priority=int(d.get("priority", 2)),
                capacitance_wh_per_c=float(d.get("capacitance_wh_per_c", 60.0)),
                loss_w_per_c=float(d.get("loss_w_per_c", 10.0)),
                ambient_c=float(d.get("ambient_c", 20.0)),
                initial_c=float(d.get("initial_c", 20.0)),
                efficiency=float(d.get("efficiency", 1.0)),
                packet_w=(None if d.get("packet_w") is None else float(d["packet_w"])),
            )
        if kind == "battery":
            return BatteryConfig(
                device_id=d["id"],
                capacity_wh=float(d["capacity_wh"]),
                p_max_w=float(d["p_max_w"]),
                arrival=slot(d["arrive"]),
                deadline=slot(d["deadline"]),
                priority=int(d.get("priority", 3)),
                packet_w=float(d.get("packet_w", 1000.0)),
                initial_soc_wh=(
                    None if d.get("initial_soc_wh") is None else float(d["initial_soc_wh"])
                ),
            )
        if kind == "cycle":
            if "profile_w" in d:
                profile = tuple(float(w) for w in d["profile_w"])
            else:
                profile = (float(d["power_w"]),) * int(d["duration_slots"])
            return CycleConfig(
                device_id=d["id"],
                profile_w=profile,
                earliest_start=slot(d["earliest_start"]),
                deadline=slot(d["deadline"]),
                priority=int(d.get("priority", 1)),
            )
        if kind == "heater_fleet":
            params = WaterHeaterParams(
                t_low_c=float(d.get("t_low_c", 50.0)),
                t_high_c=float(d.get("t_high_c", 60.0)),
                override_margin_c=float(d.get("override_margin_c", 2.0)),
                mu_max=float(d.get("mu_max", 0.3)),
                rated_w=float(d.get("rated_w", 4500.0)),
                capacitance_wh_per_c=float(d.get("capacitance_wh_per_c", 300.0)),
                loss_w_per_c=float(d.get("loss_w_per_c", 5.0)),
                ambient_c=float(d.get("ambient_c", 20.0)),
                efficiency=float(d.get("efficiency", 1.0)),
                draw_prob=float(d.get("draw_prob", 0.7)),
                draw_min_c=float(d.get("draw_min_c", 0.2)),
                draw_max_c=float(d.get("draw_max_c", 0.45)),
            )
            return HeaterFleetConfig(
                device_id=d["id"],
                count=int(d["count"]),
                params=params,
                packet_epochs=int(d.get("packet_epochs", 8)),
            )
        raise MalformedRequest(f"unknown device type {kind!r}")

    renewable_doc = doc.get("renewable", {}) or {}
    renewable = RenewableConfig(
        kind=renewable_doc.get("kind", "random_walk"),
        mean_w=float(renewable_doc.get("mean_w", 3000.0)),
        volatility_w=float(renewable_doc.get("volatility_w", 600.0)),
        values_w=(
            None
            if renewable_doc.get("values_w") is None
            else tuple(float(v) for v in renewable_doc["values_w"])
        ),
    )
    storage_doc = doc.get("storage")
    storage = (
        None
        if storage_doc is None
        else StorageAsset(
            soc_wh=float(storage_doc["soc_wh"]),
            capacity_wh=float(storage_doc["capacity_wh"]),
            p_charge_max_w=float(storage_doc["p_charge_max_w"]),
            p_discharge_max_w=float(storage_doc["p_discharge_max_w"]),
            efficiency=float(storage_doc.get("efficiency", 1.0)),
        )
    )
    channels_doc = doc.get("channels")
    channels = (
        None
        if channels_doc is None
        else {k: _profile_from_dict(v) for k, v in channels_doc.items()}
    )
    server_doc = doc.get("server", {}) or {}
    policy = ServerPolicy(
        backoff_max=int(server_doc.get("backoff_max", 3)),
        renewable_first=bool(server_doc.get("renewable_first", True)),
        emergency_shedding=bool(server_doc.get("emergency_shedding", True)),
    )
    reference_doc = doc.get("reference")
    reference = (
        None
        if reference_doc is None
        else ReferenceSignal(values_w=tuple(float(v) for v in reference_doc["values_w"]))
    )
    scenario = Scenario(
        grid=grid,
        feeder_capacity_w=float(doc["feeder_capacity_w"]),
        devices=tuple(device_from(d) for d in doc.get("devices", [])),
        renewable=renewable,
        storage=storage,
        import_allowed=bool(doc.get("import_allowed", True)),
        channels=channels,
        policy=policy,
        reference=reference,
        trip_rate_per_hour=float(doc.get("trip_rate_per_hour", 0.0)),
        seed=int(doc.get("seed", 0)),
    )
    scenario.validate()
    return scenario


def save_scenario(scenario: Scenario, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(scenario_to_dict(scenario), indent=2, sort_keys=True) + "\n"
    )


def load_scenario(path: str | Path) -> Scenario:
    text = Path(path).read_text()
    return scenario_from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# Built-in scenarios
# ---------------------------------------------------------------------------

def three_household_scenario(seed: int = 1, *, with_channels: bool = True) -> Scenario:
    """The built-in three-household evening: a sauna that must reach 70 C by
    19:00, an EV that must be full by midnight, and a one-hour dishwasher
    cycle that must finish by midnight, on a 10 kW feeder with a random
    renewable trace and imports allowed."""
    grid = TimeGrid(epoch_start_min=16 * 60, slot_min=10, horizon=48)
    sauna = ThermalConfig(
        device_id="sauna",
        rated_w=3600.0,
        target_c=70.0,
        service_start=grid.slot_of("19:00"),
        service_end=grid.slot_of("20:00"),
        preheat_from=grid.slot_of("16:30"),
        force_check_at=grid.slot_of("18:20"),
        priority=2,
    )
    ev = BatteryConfig(
        device_id="ev",
        capacity_wh=30_000.0,
        p_max_w=5000.0,
        arrival=grid.slot_of("16:00"),
        deadline=grid.slot_of("24:00"),
        priority=3,
        packet_w=1000.0,
    )
    dishwasher = CycleConfig(
        device_id="dishwasher",
        profile_w=(2000.0,) * 6,
        earliest_start=grid.slot_of("20:00"),
        deadline=grid.slot_of("24:00"),
        priority=1,
    )
    return Scenario(
        grid=grid,
        feeder_capacity_w=10_000.0,
        devices=(sauna, ev, dishwasher),
        renewable=RenewableConfig(kind="random_walk", mean_w=3000.0, volatility_w=600.0),
        channels=default_channels() if with_channels else None,
        trip_rate_per_hour=2.0 if with_channels else 0.0,
        seed=seed,
    )


# The three-household case is the package's reference scenario; the CLI
# exposes it under the `fig3` subcommand name.
fig3_scenario = three_household_scenario


def fleet_scenario(
    count: int = 1000,
    reference_w: float | ReferenceSignal = 1_500_000.0,
    hours: float = 8.0,
    seed: int = 1,
    epoch_min: int = 3,
) -> Scenario:
    """A water-heater fleet tracking an aggregate reference on its own
    (shorter) epoch grid."""
    horizon = int(round(hours * 60 / epoch_min))
    grid = TimeGrid(epoch_start_min=0, slot_min=epoch_min, horizon=horizon)
    if isinstance(reference_w, ReferenceSignal):
        reference = reference_w
    else:
        reference = ReferenceSignal.constant(float(reference_w), horizon)
    fleet = HeaterFleetConfig(device_id="fleet", count=count)
    return Scenario(
        grid=grid,
        feeder_capacity_w=max(1.0, count * fleet.params.rated_w),
        devices=(fleet,),
        renewable=RenewableConfig(kind="trace", values_w=(0.0,)),
        reference=reference,
        seed=seed,
    )
