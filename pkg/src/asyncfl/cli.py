"""Command line entry point.

Subcommands: ``run``, ``plan``, ``check-schedule``, ``compare`` and ``audit``.
Exit status is 0 on success, 1 for usage or validation errors and 2 when an
audit finds a violation.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Sequence

from . import protocol as P
from .config import ConfigError, build_sim_config, parse_config, write_plan_file
from .privacy import PrivacyError, plan_parameters
from .schedules import SampleSchedule, check_eq4
from .simulator import AuditViolation, SimulationError, compare_runs, format_comparison, \
    replay_audit, run

EXIT_OK, EXIT_INVALID, EXIT_AUDIT = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # exit 1 instead of argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_INVALID)


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.15g}"
    return str(v)


def _print_records(pairs: Sequence[tuple[str, Any]], out) -> None:
    width = max(len(k) for k, _ in pairs)
    for k, v in pairs:
        print(f"  {k.ljust(width)}  {_fmt(v)}", file=out)
    print(file=out)
    for k, v in pairs:
        print(f"{k}={_fmt(v)}", file=out)


def _build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="asyncfl", description="Asynchronous federated learning simulator "
                 "and differential-privacy planner.")
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="simulate one configuration")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--csv", help="write metrics CSV here (default: [output] csv or stdout)")
    r.add_argument("--log-events", help="write newline-delimited event records here")
    r.add_argument("--no-audit", action="store_true", help="skip the inline audits")

    p = sub.add_parser("plan", help="choose an increasing DP sample schedule")
    p.add_argument("--s0c", type=int, required=True, help="first-round sample size per client")
    p.add_argument("--nc", type=int, required=True, help="examples per client")
    p.add_argument("--p", type=float, required=True, help="schedule exponent in (0, 1]")
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--k", type=int, required=True, help="gradient computations per client")
    p.add_argument("--case", type=int, choices=(1, 2), default=1)
    p.add_argument("--r0", default="fixed-point", help="number, 1/e or fixed-point")
    p.add_argument("--k-factor", type=float, default=1.5)
    p.add_argument("--delta-target", type=float)
    p.add_argument("--out", help="write the plan (with its schedule) to this file")

    c = sub.add_parser("check-schedule", help="check schedule/delay compatibility")
    c.add_argument("--config", required=True)
    c.add_argument("--i-max", type=int)

    m = sub.add_parser("compare", help="run several configurations at equal budget")
    m.add_argument("--config", action="append", required=True)
    m.add_argument("--seed", type=int)

    a = sub.add_parser("audit", help="consistency audit and server log replay")
    a.add_argument("--config", required=True)
    a.add_argument("--seed", type=int)
    a.add_argument("--events", help="audit this event log instead of a fresh run")
    return ap


def _cmd_run(ns: argparse.Namespace, out, err) -> int:
    exp = parse_config(ns.config, seed=ns.seed)
    cfg = build_sim_config(exp, audit=False if ns.no_audit else None)
    try:
        trace = run(cfg)
    except AuditViolation as exc:
        print(f"audit violation: {exc}", file=err)
        print(json.dumps(exc.context, sort_keys=True), file=err)
        return EXIT_AUDIT
    csv_path = ns.csv or exp.csv
    if csv_path:
        trace.write_csv(csv_path)
    else:
        out.write(trace.to_csv())
    ev_path = ns.log_events or exp.events
    if ev_path:
        trace.write_events(ev_path)
    if csv_path:
        _print_records(sorted(trace.summary.items()), out)
    return EXIT_OK


def _cmd_plan(ns: argparse.Namespace, out, err) -> int:
    plan = plan_parameters(ns.s0c, ns.nc, ns.p, ns.eps, ns.sigma, ns.k, ns.case, ns.r0,
                           k_factor=ns.k_factor, delta_target=ns.delta_target)
    _print_records(plan.records(), out)
    print("schedule_head=" + ",".join(str(s) for s in plan.schedule[:10]), file=out)
    if not plan.cap_ok:
        print(f"warning: largest sampling rate {plan.max_sampling_rate:.6g} exceeds "
              f"r0/sigma = {plan.alpha:.6g}", file=err)
    if ns.out:
        write_plan_file(plan, ns.out)
    return EXIT_OK


def _cmd_check(ns: argparse.Namespace, out, err) -> int:
    exp = parse_config(ns.config)
    sizes = exp.round_sizes()
    i_max = ns.i_max if ns.i_max is not None else len(sizes) - 1
    if i_max < exp.d + 1:
        print(f"nothing to check: {len(sizes)} rounds, d={exp.d}", file=out)
        return EXIT_OK
    sched = SampleSchedule.from_sizes(sizes) if ns.i_max is None else \
        (exp.sample_schedule or SampleSchedule.from_sizes(sizes))
    rep = check_eq4(sched, exp.delay, exp.d, i_max)
    print(str(rep), file=out)
    return EXIT_OK if rep.ok else EXIT_INVALID


def _cmd_compare(ns: argparse.Namespace, out, err) -> int:
    cfgs = [build_sim_config(parse_config(p, seed=ns.seed)) for p in ns.config]
    table = compare_runs(cfgs)
    print(format_comparison(table), file=out)
    return EXIT_OK


def _cmd_audit(ns: argparse.Namespace, out, err) -> int:
    exp = parse_config(ns.config, seed=ns.seed)
    cfg = build_sim_config(exp, audit=False)
    if ns.events:
        # rebuild the assignment exactly as the run did
        sizes, rows = cfg.round_sizes()
        mode = "fixed" if rows is not None else cfg.assignment
        assignment = P.Assignment(len(cfg.clients), sizes, cfg.probs, cfg.seed, mode, rows)
        recs = []
        with open(ns.events, encoding="utf-8") as fh:
            for line in fh:
                obj = json.loads(line)
                if obj.get("ev") == "step":
                    recs.append(P.step_record_from_dict(obj, assignment))
        rep = P.audit_consistency(recs, exp.delay, gate=exp.gate, d=exp.d)
        print(str(rep), file=out)
        return EXIT_OK if rep.ok else EXIT_AUDIT
    trace = run(cfg)
    full = replay_audit(trace)
    print(str(full), file=out)
    return EXIT_OK if full.ok else EXIT_AUDIT


def main(argv: Sequence[str] | None = None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = _build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handlers = {"run": _cmd_run, "plan": _cmd_plan, "check-schedule": _cmd_check,
                "compare": _cmd_compare, "audit": _cmd_audit}
    try:
        return handlers[ns.cmd](ns, out, err)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=err)
        return EXIT_INVALID
    except (PrivacyError, SimulationError, ValueError) as exc:
        print(f"error: {exc}", file=err)
        return EXIT_INVALID


if __name__ == "__main__":
    raise SystemExit(main())
