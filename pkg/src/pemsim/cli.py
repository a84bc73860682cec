"""Command-line front end: run scenarios, batch over seeds, validate files,
and emit the output bundle (slots.csv, requests.csv, channel.csv,
summary.json, plus fleet.csv for fleet runs).

The CLI is a thin shell over the library API; everything it does is
reachable programmatically with identical results.

Exit codes: 0 success, 1 validation/usage error, 2 invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .core import MalformedRequest, WindowInfeasible
from .devices import ContiguityViolation
from .engine import (
    RunResult,
    audit_conservation,
    run_scenario,
    summarize_run,
)
from .scenario import (
    Scenario,
    fleet_scenario,
    load_scenario,
    save_scenario,
    three_household_scenario,
)
from .server import CapacityViolation, ReferenceSignal, UnderSupply

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_INVARIANT = 2


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_bundle(result: RunResult, out_dir: str | Path) -> dict:
    """Write the output bundle for one run; returns the summary dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = result.grid
    device_ids = sorted(result.slots[0].granted_w) if result.slots else []

    with open(out / "slots.csv", "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = (
            ["slot", "clock"]
            + [f"granted_{i}_w" for i in device_ids]
            + [f"consumed_{i}_w" for i in device_ids]
            + [
                "renewable_available_w",
                "renewable_used_w",
                "storage_soc_wh",
                "storage_flow_w",
                "imported_w",
                "curtailed_w",
                "emergency",
            ]
        )
        writer.writerow(header)
        for rec in result.slots:
            writer.writerow(
                [rec.slot, rec.clock]
                + [_fmt(rec.granted_w.get(i, 0.0)) for i in device_ids]
                + [_fmt(rec.consumed_w.get(i, 0.0)) for i in device_ids]
                + [
                    _fmt(rec.renewable_available_w),
                    _fmt(rec.renewable_used_w),
                    _fmt(rec.storage_soc_wh),
                    _fmt(rec.storage_flow_w),
                    _fmt(rec.imported_w),
                    _fmt(rec.curtailed_w),
                    _fmt(rec.emergency),
                ]
            )

    with open(out / "requests.csv", "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            [
                "device_id",
                "kind",
                "issued_clock",
                "decided_clock",
                "outcome",
                "reason",
                "retries",
                "forced_start_clock",
                "first_service_clock",
                "completion_clock",
                "waiting_slots",
                "deadline_clock",
                "deadline_met",
                "service_failed",
            ]
        )
        clock = lambda s: "" if s is None else grid.clock_of(s)  # noqa: E731
        for o in result.requests:
            outcome = "pending"
            if o.accepted:
                outcome = "accepted"
            elif o.accepted is False:
                outcome = "rejected"
            writer.writerow(
                [
                    o.device_id,
                    o.kind,
                    clock(o.issued_slot),
                    clock(o.decided_slot),
                    outcome,
                    o.reject_reason or "",
                    o.retries,
                    clock(o.forced_start),
                    clock(o.first_service_slot),
                    clock(o.completion_slot),
                    _fmt(o.waiting_slots),
                    clock(o.deadline_slot),
                    _fmt(o.deadline_met),
                    _fmt(o.service_failed),
                ]
            )

    with open(out / "channel.csv", "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["msg_id", "kind", "class", "sent_ms", "delivered_ms", "attempts", "e2e_ms", "status"]
        )
        for m in result.channel:
            writer.writerow(
                [
                    m.msg_id,
                    m.kind.value,
                    m.cls.value,
                    _fmt(m.sent_at_ms),
                    _fmt(m.delivered_at_ms),
                    m.attempts,
                    _fmt(m.e2e_ms),
                    "dropped" if m.dropped else "delivered",
                ]
            )

    if result.fleet is not None:
        with open(out / "fleet.csv", "w", newline="\n") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(
                [
                    "epoch",
                    "clock",
                    "reference_w",
                    "aggregate_w",
                    "requests",
                    "accepted",
                    "force_on",
                    "force_off",
                    "temp_min_c",
                    "temp_max_c",
                    "temp_mean_c",
                ]
            )
            for rec in result.fleet:
                writer.writerow(
                    [
                        rec.epoch,
                        grid.clock_of(rec.epoch),
                        _fmt(rec.reference_w),
                        _fmt(rec.aggregate_w),
                        rec.requests,
                        rec.accepted,
                        rec.force_on,
                        rec.force_off,
                        _fmt(rec.temp_min_c),
                        _fmt(rec.temp_max_c),
                        _fmt(rec.temp_mean_c),
                    ]
                )

    summary = summarize_run(result)
    with open(out / "summary.json", "w", newline="\n") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def _run_and_write(scenario: Scenario, out_dir: str | Path) -> int:
    result = run_scenario(scenario)
    bad_slot = audit_conservation(result)
    summary = write_bundle(result, out_dir)
    if bad_slot is not None:
        print(f"conservation violated at slot {bad_slot}", file=sys.stderr)
        return EXIT_INVARIANT
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def _parse_seed_range(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(text)]


def _load(path: str) -> Scenario:
    try:
        return load_scenario(path)
    except FileNotFoundError:
        print(f"scenario file not found: {path}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)
    except json.JSONDecodeError as exc:
        print(
            f"malformed JSON in {path}: line {exc.lineno}, column {exc.colno}: {exc.msg}",
            file=sys.stderr,
        )
        raise SystemExit(EXIT_VALIDATION)
    except (MalformedRequest, WindowInfeasible, KeyError, ValueError) as exc:
        print(f"invalid scenario {path}: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)


def _load_reference(path: str) -> ReferenceSignal:
    values = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        values.append(float(line))
    if not values:
        print(f"reference file {path} holds no values", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)
    return ReferenceSignal(values_w=tuple(values))


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)


def _build_parser() -> _Parser:
    parser = _Parser(prog="pemsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario and write its bundle")
    run.add_argument("--scenario", required=True)
    run.add_argument("--seed", type=int, default=None, help="override the file's seed")
    run.add_argument("--out", required=True)

    batch = sub.add_parser("batch", help="run a scenario across a seed range")
    batch.add_argument("--scenario", required=True)
    batch.add_argument("--seeds", required=True, help="range A..B or single seed")
    batch.add_argument("--out", required=True)

    val = sub.add_parser("validate", help="check a scenario file")
    val.add_argument("--scenario", required=True)

    fig3 = sub.add_parser(
        "fig3", help="run the built-in three-household evening scenario"
    )
    fig3.add_argument("--out", required=True)
    fig3.add_argument("--seed", type=int, default=1)
    fig3.add_argument(
        "--save-scenario", default=None, help="also write the scenario JSON here"
    )

    fleet = sub.add_parser("fleet", help="run a water-heater fleet against a reference")
    fleet.add_argument("--count", type=int, default=1000)
    fleet.add_argument("--ref", default=None, help="file with one reference watts per line")
    fleet.add_argument("--ref-watts", type=float, default=1_500_000.0)
    fleet.add_argument("--hours", type=float, default=8.0)
    fleet.add_argument("--seed", type=int, default=1)
    fleet.add_argument("--out", required=True)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_VALIDATION

    try:
        if args.command == "validate":
            scenario = _load(args.scenario)
            scenario.validate()
            print(f"ok: {args.scenario}")
            return EXIT_OK

        if args.command == "run":
            scenario = _load(args.scenario)
            if args.seed is not None:
                from dataclasses import replace

                scenario = replace(scenario, seed=args.seed)
            return _run_and_write(scenario, args.out)

        if args.command == "batch":
            scenario = _load(args.scenario)
            seeds = _parse_seed_range(args.seeds)
            from dataclasses import replace

            entries = []
            code = EXIT_OK
            for seed in seeds:
                run_dir = Path(args.out) / f"seed_{seed}"
                try:
                    result = run_scenario(replace(scenario, seed=seed))
                    bad = audit_conservation(result)
                    summary = write_bundle(result, run_dir)
                    if bad is not None:
                        code = EXIT_INVARIANT
                    entries.append({"seed": seed, "summary": summary, "error": None})
                except Exception as exc:  # per-seed isolation
                    entries.append({"seed": seed, "summary": None, "error": str(exc)})
            Path(args.out).mkdir(parents=True, exist_ok=True)
            with open(Path(args.out) / "batch.json", "w", newline="\n") as fh:
                json.dump(entries, fh, indent=2, sort_keys=True)
                fh.write("\n")
            print(f"wrote {len(entries)} runs under {args.out}")
            return code

        if args.command == "fig3":
            scenario = three_household_scenario(seed=args.seed)
            if args.save_scenario:
                save_scenario(scenario, args.save_scenario)
            return _run_and_write(scenario, args.out)

        if args.command == "fleet":
            if args.ref is not None:
                reference = _load_reference(args.ref)
            else:
                reference = args.ref_watts
            scenario = fleet_scenario(
                count=args.count, reference_w=reference, hours=args.hours, seed=args.seed
            )
            return _run_and_write(scenario, args.out)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_VALIDATION
    except (MalformedRequest, WindowInfeasible) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (CapacityViolation, ContiguityViolation, UnderSupply) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_VALIDATION


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
