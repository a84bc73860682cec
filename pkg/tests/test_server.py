"""Server logic: forced-start arithmetic, admission against the brute-force
superposition oracle, per-slot allocation fairness, supply dispatch, fleet
reference tracking, and retry backoff."""

import random

import pytest

from scenario_gen import random_admission_instance

from pemsim.core import (
    Accept,
    COMPLETION_TOL_WH,
    ENERGY_REL_TOL,
    FixedProfileRequest,
    FlexibleTotalRequest,
    InfeasibleDeadline,
    Reject,
    RejectReason,
    ThermalTargetRequest,
    TimeGrid,
    quantize,
    validate_request,
)
from pemsim.devices import StorageAsset
from pemsim.server import (
    CapacityViolation,
    CommitmentLedger,
    SlotNeed,
    SupplyView,
    UnderSupply,
    admit,
    allocate_slot,
    compute_forced_start,
    dispatch_supply,
    handle_rejection_retry,
    track_reference,
)

GRID = TimeGrid(epoch_start_min=16 * 60, slot_min=10, horizon=48)


def flexible(device_id, energy, p_max, available, deadline, priority=2, packet=500.0):
    return FlexibleTotalRequest(
        device_id=device_id, energy_needed_wh=energy, p_max_w=p_max,
        available_from=available, deadline=deadline, packet_w=packet,
        priority=priority, issued_at=0,
    )


class TestComputeForcedStart:
    def test_ev_forced_charge_time(self):
        # 9166.7 Wh at 5 kW needs 110 min: forced start lands on 22:10
        start = compute_forced_start(9166.7, 5000.0, GRID.slot_of("24:00"), GRID)
        assert GRID.clock_of(start) == "22:10"

    def test_nothing_left_starts_at_deadline(self):
        assert compute_forced_start(0.0, 5000.0, 30, GRID) == 30

    def test_full_battery_six_hours(self):
        start = compute_forced_start(30_000.0, 5000.0, GRID.slot_of("24:00"), GRID)
        assert GRID.clock_of(start) == "18:00"

    def test_infeasible_deadline(self):
        with pytest.raises(InfeasibleDeadline):
            compute_forced_start(10_000.0, 5000.0, 10, GRID, now=0)

    def test_one_hour_cycle_latest_start(self):
        # a one-hour fixed cycle due at 24:00 must start by 23:00
        ledger = CommitmentLedger(GRID, 10_000.0)
        request = FixedProfileRequest(
            device_id="dw", profile_w=(2000.0,) * 6,
            earliest_start=GRID.slot_of("20:00"),
            latest_start=GRID.slot_of("24:00") - 6,
            priority=1, issued_at=0,
        )
        decision = admit(request, ledger)
        assert isinstance(decision, Accept)
        assert GRID.clock_of(decision.forced_start) == "23:00"


# ---------------------------------------------------------------------------
# Brute-force admission oracle: rebuild every forced profile from the raw
# request fields with independent arithmetic and scan every slot.
# ---------------------------------------------------------------------------

def _oracle_heat_steps(temp, target, rated, eta, loss, cap_c, amb, dt_h, limit=2000):
    steps = 0
    while temp < target and steps < limit:
        nxt = temp + dt_h * (eta * rated - loss * (temp - amb)) / cap_c
        if nxt <= temp:
            return None
        temp = nxt
        steps += 1
    return steps if temp >= target else None


def oracle_forced_profile(request, grid):
    """Per-slot committed watts, or None when no feasible forced schedule."""
    slot_h = grid.slot_min / 60.0
    profile = [0.0] * grid.horizon
    if isinstance(request, FlexibleTotalRequest):
        remaining = request.energy_needed_wh
        if remaining <= COMPLETION_TOL_WH:
            return profile
        start = None
        for t in range(request.deadline, -1, -1):
            covered = request.p_max_w * (request.deadline - t) * slot_h
            if covered >= remaining * (1.0 - ENERGY_REL_TOL):
                start = t
                break
        if start is None:
            return None
        for t in range(start, request.deadline):
            profile[t] = request.p_max_w
        return profile
    if isinstance(request, FixedProfileRequest):
        for i, watts in enumerate(request.profile_w):
            profile[request.latest_start + i] = watts
        return profile
    if isinstance(request, ThermalTargetRequest):
        dt_h = slot_h
        best = None
        for t in range(request.preheat_from, request.service_start + 1):
            temp = request.temp_c
            for _ in range(max(0, t - request.issued_at)):
                temp += dt_h * (-request.loss_w_per_c * (temp - request.ambient_c)) / request.capacitance_wh_per_c
            need = _oracle_heat_steps(
                temp, request.target_c, request.rated_w, request.efficiency,
                request.loss_w_per_c, request.capacitance_wh_per_c,
                request.ambient_c, dt_h,
            )
            if need is not None and need <= request.service_start - t:
                best = t
        if best is None:
            return None
        start = min(request.force_check_at, best)
        for t in range(start, request.service_end):
            profile[t] = request.rated_w
        return profile
    raise AssertionError(f"unexpected request {request!r}")


def oracle_admit_sequence(requests, capacity, grid):
    """Sequential accept/reject verdicts by exhaustive slot scanning."""
    accepted_profiles = []
    verdicts = []
    for request in requests:
        profile = oracle_forced_profile(request, grid)
        if profile is None:
            verdicts.append(False)
            continue
        ok = all(
            sum(p[t] for p in accepted_profiles) + profile[t] <= capacity + 1e-6
            for t in range(grid.horizon)
        )
        verdicts.append(ok)
        if ok:
            accepted_profiles.append(profile)
    return verdicts


class TestAdmission:
    def test_single_job_under_capacity(self):
        ledger = CommitmentLedger(GRID, 8000.0)
        decision = admit(flexible("ev", 30_000.0, 5000.0, 0, 48), ledger)
        assert isinstance(decision, Accept)

    def test_capacity_clash_reports_first_violating_slot(self):
        # 5 kW forced over 22:00-24:00 plus 5 kW forced over 23:00-24:00
        # exceeds an 8 kW feeder exactly at 23:00
        ledger = CommitmentLedger(GRID, 8000.0)
        first = flexible("a", 10_000.0, 5000.0, 0, GRID.slot_of("24:00"))
        assert isinstance(admit(first, ledger), Accept)
        second = flexible("b", 5000.0, 5000.0, 0, GRID.slot_of("24:00"))
        decision = admit(second, ledger)
        assert isinstance(decision, Reject)
        assert decision.reason is RejectReason.CAPACITY_EXCEEDED
        assert GRID.clock_of(decision.at_slot) == "23:00"

    def test_reference_triple_fits_ten_kilowatts(self):
        ledger = CommitmentLedger(GRID, 10_000.0)
        sauna = ThermalTargetRequest(
            device_id="sauna", target_c=70.0,
            service_start=GRID.slot_of("19:00"), service_end=GRID.slot_of("20:00"),
            preheat_from=GRID.slot_of("16:30"), force_check_at=GRID.slot_of("18:20"),
            rated_w=3600.0, priority=2, issued_at=GRID.slot_of("16:30"),
            temp_c=20.0, ambient_c=20.0, capacitance_wh_per_c=60.0, loss_w_per_c=10.0,
        )
        ev = flexible("ev", 30_000.0, 5000.0, 0, GRID.slot_of("24:00"), priority=3)
        dishwasher = FixedProfileRequest(
            device_id="dw", profile_w=(2000.0,) * 6,
            earliest_start=GRID.slot_of("20:00"), latest_start=GRID.slot_of("23:00"),
            priority=1, issued_at=0,
        )
        decisions = [admit(r, ledger) for r in (sauna, ev, dishwasher)]
        assert all(isinstance(d, Accept) for d in decisions)
        # worst superposed forced power is EV + dishwasher late in the evening
        assert max(ledger.committed_w) <= 10_000.0
        assert ledger.committed_at(GRID.slot_of("23:00")) == pytest.approx(7000.0)

    def test_readmission_is_idempotent(self):
        ledger = CommitmentLedger(GRID, 8000.0)
        request = flexible("ev", 20_000.0, 5000.0, 0, 48)
        first = admit(request, ledger)
        committed = list(ledger.committed_w)
        again = admit(request, ledger)
        assert first == again
        assert ledger.committed_w == committed

    def test_release_frees_capacity(self):
        ledger = CommitmentLedger(GRID, 5000.0)
        assert isinstance(admit(flexible("a", 20_000.0, 5000.0, 0, 48), ledger), Accept)
        blocked = flexible("b", 20_000.0, 5000.0, 0, 48)
        assert isinstance(admit(blocked, ledger), Reject)
        ledger.release("a", 0)
        assert isinstance(admit(blocked, ledger), Accept)

    def test_oracle_equivalence_sample(self):
        for seed in range(200):
            grid, capacity, requests = random_admission_instance(seed)
            expected = oracle_admit_sequence(requests, capacity, grid)
            ledger = CommitmentLedger(grid, capacity)
            got = [isinstance(admit(r, ledger), Accept) for r in requests]
            assert got == expected, f"instance {seed} disagrees"

    def test_scheduled_requests_always_validate(self):
        # validation is a necessary condition for admission
        for seed in range(100):
            grid, capacity, requests = random_admission_instance(seed)
            ledger = CommitmentLedger(grid, capacity)
            for request in requests:
                if isinstance(admit(request, ledger), Accept):
                    validate_request(request, grid)

    def test_ledger_commitment_invariants(self):
        # committed superposition never tops capacity, and every admitted
        # job's committed profile can finish it by its deadline
        slot_h = 10 / 60.0
        for seed in range(150):
            grid, capacity, requests = random_admission_instance(seed)
            ledger = CommitmentLedger(grid, capacity)
            for request in requests:
                admit(request, ledger)
            assert max(ledger.committed_w, default=0.0) <= capacity + 1e-6
            for job in ledger.jobs.values():
                request = job.request
                if isinstance(request, FlexibleTotalRequest):
                    committed_wh = sum(job.profile_w[: request.deadline]) * slot_h
                    need = request.energy_needed_wh
                    assert committed_wh >= need * (1 - ENERGY_REL_TOL) - COMPLETION_TOL_WH
                    assert all(w == 0.0 for w in job.profile_w[request.deadline:])
                elif isinstance(request, FixedProfileRequest):
                    anchored = job.profile_w[request.latest_start:request.deadline]
                    assert tuple(anchored) == request.profile_w
                    assert all(w == 0.0 for w in job.profile_w[request.deadline:])
                else:
                    assert all(w == 0.0 for w in job.profile_w[request.service_end:])

    def test_admission_monotone_in_capacity(self):
        rng = random.Random(2024)
        checked = 0
        for seed in range(400):
            grid, capacity, requests = random_admission_instance(seed)
            ledger = CommitmentLedger(grid, capacity)
            verdicts = [isinstance(admit(r, ledger), Accept) for r in requests]
            if not all(verdicts):
                continue
            bigger = CommitmentLedger(grid, capacity * rng.uniform(1.01, 3.0))
            assert all(isinstance(admit(r, bigger), Accept) for r in requests)
            checked += 1
        assert checked > 50


def _supply(cap=10_000.0, renewable=None, storage=None, import_allowed=True):
    return SupplyView(
        renewable_w=cap if renewable is None else renewable,
        storage=storage, import_allowed=import_allowed, feeder_capacity_w=cap,
    )


class TestAllocateSlot:
    def _ledger(self, cap=10_000.0):
        return CommitmentLedger(GRID, cap)

    def test_forced_preempts_flexible(self):
        needs = [
            SlotNeed("forced", 1, forced_w=5000.0),
            SlotNeed("f1", 1, willing_w=2000.0, packet_w=500.0),
            SlotNeed("f2", 2, willing_w=2000.0, packet_w=500.0),
            SlotNeed("f3", 3, willing_w=2000.0, packet_w=500.0),
        ]
        grants = allocate_slot(self._ledger(5000.0), needs, _supply(5000.0), random.Random(1))
        assert grants == {"forced": 5000.0}

    def test_equal_priority_uniform_tiebreak(self):
        wins = {"a": 0, "b": 0}
        for trial in range(1000):
            needs = [
                SlotNeed("a", 2, willing_w=3000.0, packet_w=3000.0),
                SlotNeed("b", 2, willing_w=3000.0, packet_w=3000.0),
            ]
            grants = allocate_slot(
                self._ledger(3000.0), needs, _supply(3000.0), random.Random(trial)
            )
            winner = [k for k, v in grants.items() if v > 0]
            assert winner in (["a"], ["b"])
            wins[winner[0]] += 1
        assert 450 <= wins["a"] <= 550

    def test_priority_served_first(self):
        # the more important job takes the whole 2 kW of spare every time
        for trial in range(200):
            needs = [
                SlotNeed("ev", 2, willing_w=2000.0, packet_w=1000.0),
                SlotNeed("dishwasher", 1, willing_w=2000.0, packet_w=2000.0),
            ]
            grants = allocate_slot(
                self._ledger(2000.0), needs, _supply(2000.0), random.Random(trial)
            )
            assert grants.get("dishwasher", 0.0) == 2000.0
            assert grants.get("ev", 0.0) == 0.0

    def test_grants_are_whole_packets(self):
        needs = [SlotNeed("j", 1, willing_w=3500.0, packet_w=1000.0)]
        grants = allocate_slot(self._ledger(), needs, _supply(), random.Random(0))
        assert grants["j"] == 3000.0

    def test_renewable_first_limits_opportunistic_power(self):
        needs = [SlotNeed("j", 1, willing_w=4000.0, packet_w=1000.0)]
        grants = allocate_slot(
            self._ledger(), needs, _supply(renewable=2500.0), random.Random(0),
            renewable_first=True,
        )
        assert grants.get("j", 0.0) == 2000.0
        grants = allocate_slot(
            self._ledger(), needs, _supply(renewable=2500.0), random.Random(0),
            renewable_first=False,
        )
        assert grants["j"] == 4000.0

    def test_forced_always_backed_by_import(self):
        needs = [SlotNeed("j", 1, forced_w=4000.0)]
        grants = allocate_slot(
            self._ledger(), needs, _supply(renewable=0.0), random.Random(0),
            renewable_first=True,
        )
        assert grants["j"] == 4000.0

    def test_overcommitted_forced_raises(self):
        needs = [SlotNeed("a", 1, forced_w=6000.0), SlotNeed("b", 1, forced_w=6000.0)]
        with pytest.raises(CapacityViolation):
            allocate_slot(self._ledger(10_000.0), needs, _supply(), random.Random(0))

    def test_priority_dominance_randomized(self):
        # a lower-priority job never receives spare while a higher-priority
        # job that could still fit one of its packets got nothing
        rng = random.Random(555)
        for _ in range(300):
            cap = rng.uniform(2000.0, 9000.0)
            needs = [
                SlotNeed(
                    f"j{i}", rng.randint(1, 3),
                    willing_w=rng.uniform(500.0, 4000.0),
                    packet_w=rng.choice([250.0, 500.0, 1000.0]),
                )
                for i in range(rng.randint(2, 5))
            ]
            grants = allocate_slot(
                self._ledger(cap), needs, _supply(cap), random.Random(rng.random())
            )
            total = sum(grants.values())
            assert total <= cap + 1e-6
            spare_left = cap - total
            for high in needs:
                if grants.get(high.job_id, 0.0) > 0:
                    continue
                if high.willing_w < high.packet_w:
                    continue  # cannot absorb even one of its own packets
                for low in needs:
                    if low.priority > high.priority and grants.get(low.job_id, 0.0) > 0:
                        # high got nothing although it wanted a whole packet,
                        # so no packet can fit in what is left
                        assert high.packet_w > spare_left + 1e-9


class TestDispatchSupply:
    STORAGE = StorageAsset(soc_wh=500.0, capacity_wh=5000.0,
                           p_charge_max_w=2000.0, p_discharge_max_w=3000.0)

    def test_pure_surplus_charges_storage(self):
        plan = dispatch_supply(0.0, _supply(renewable=2000.0, storage=self.STORAGE), 10)
        assert plan.storage_flow_w == pytest.approx(2000.0)
        assert plan.renewable_used_w == 0.0 and plan.imported_w == 0.0

    def test_merit_order_reaches_import(self):
        plan = dispatch_supply(4000.0, _supply(renewable=1000.0), 10)
        assert plan.renewable_used_w == pytest.approx(1000.0)
        assert plan.imported_w == pytest.approx(3000.0)

    def test_storage_energy_bound(self):
        # 500 Wh covers 3 kW for a 10-minute slot exactly
        plan = dispatch_supply(4000.0, _supply(renewable=1000.0, storage=self.STORAGE), 10)
        assert plan.storage_flow_w == pytest.approx(-3000.0)
        assert plan.imported_w == pytest.approx(0.0)

    def test_identity_exact(self):
        rng = random.Random(99)
        for _ in range(500):
            total = rng.uniform(0.0, 9000.0)
            supply = _supply(renewable=rng.uniform(0.0, 6000.0), storage=self.STORAGE)
            plan = dispatch_supply(total, supply, 10)
            discharge = max(0.0, -plan.storage_flow_w)
            assert plan.renewable_used_w + discharge + plan.imported_w == pytest.approx(total, abs=1e-9)
            assert plan.curtailed_w >= -1e-9

    def test_undersupply_raises_when_imports_barred(self):
        with pytest.raises(UnderSupply):
            dispatch_supply(4000.0, _supply(renewable=500.0, import_allowed=False), 10)


class TestTrackReference:
    PACKET = quantize(4500.0, 3)

    def test_zero_reference_accepts_none(self):
        assert track_reference(["a", "b"], 0.0, 0.0, self.PACKET, random.Random(1)) == []

    def test_slack_accepts_all(self):
        ids = [f"h{i}" for i in range(10)]
        accepted = track_reference(ids, 1e9, 0.0, self.PACKET, random.Random(1))
        assert sorted(accepted) == sorted(ids)

    def test_floor_of_fractional_budget(self):
        ids = [f"h{i}" for i in range(7)]
        budget = 2.5 * 4500.0
        counts = {i: 0 for i in ids}
        trials = 10_000
        for seed in range(trials):
            accepted = track_reference(ids, budget, 0.0, self.PACKET, random.Random(seed))
            assert len(accepted) == 2
            for i in accepted:
                counts[i] += 1
        for i in ids:  # uniform subsets pick each id with probability 2/7
            assert counts[i] / trials == pytest.approx(2 / 7, abs=0.02)

    def test_on_power_reduces_budget(self):
        ids = [f"h{i}" for i in range(7)]
        accepted = track_reference(ids, 10 * 4500.0, 8.2 * 4500.0, self.PACKET, random.Random(5))
        assert len(accepted) == 1


class TestRetry:
    def test_backoff_within_bounds(self):
        rng = random.Random(0)
        draws = {handle_rejection_retry(10, 3, rng) for _ in range(1000)}
        assert draws == {11, 12, 13}

    def test_retry_count_bounded_by_window(self):
        # with one-slot backoff a persistent block yields at most window retries
        rng = random.Random(1)
        now, window_end, retries = 0, 20, 0
        while True:
            now = handle_rejection_retry(now, 1, rng)
            if now >= window_end:
                break
            retries += 1
        assert retries <= 20
