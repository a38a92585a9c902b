"""Experiment configuration files.

Plain text with ``[section]`` headers and ``key = value`` lines (read with
:mod:`configparser`).  Relative paths resolve against the file's directory.
A privacy plan written by ``asyncfl plan`` uses the same format and is
pulled in with ``plan = <file>`` in the ``[dp]`` section.

Recognised sections and keys (defaults in parentheses)::

    [data]      path, test_path, test_fraction (0.2), dimension, biased (false),
                split_seed (the run seed)
    [clients]   n (1), probs, assignment (iid | balanced)
    [objective] lambda (0; "1/N" uses the pooled training size), bias (true)
    [schedule]  kind (constant | linear | power-law | theorem5 | table),
                a, b, c, d, m, p, sizes
    [step]      kind (constant | iteration-diminishing | round-diminishing),
                eta0, beta, power, a0, q, E0
    [delay]     kind (affine | sqrt-log | theorem5 | unbounded), M0, M1, g, slope
    [gate]      mode (round-lag | exact), d (1)
    [dp]        enabled (false), C, sigma, noise_sign (as_printed), plan
    [network]   up (0), down (0), seed (the run seed)
    [run]       K, seed (0), audit (true)
    [output]    csv, events
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from .objective import Dataset, Objective, ObjectiveError, load_libsvm
from .protocol import DPConfig
from .schedules import (DelayFunction, ScheduleError, SampleSchedule, StepSchedule,
                        check_eq4, theorem5_pairing)
from .simulator import LatencyLaw, NetworkModel, SimConfig, SimulationError, partition, \
    split_dataset

__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "read_plan_file",
           "write_plan_file", "build_sim_config"]

SECTIONS = ("data", "clients", "objective", "schedule", "step", "delay", "gate", "dp",
            "network", "run", "output")


class ConfigError(ValueError):
    """All problems found in a configuration file."""

    def __init__(self, errors: Sequence[str]) -> None:
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class ExperimentConfig:
    source: Path
    sections: dict[str, dict[str, str]]
    train: Dataset
    test: Dataset | None
    clients: list[Dataset]
    objective: Objective
    sample_schedule: SampleSchedule | None
    client_schedule: list[int] | None
    step: StepSchedule
    delay: DelayFunction
    gate: str
    d: int
    dp: DPConfig | None
    network: NetworkModel
    probs: list[float] | None
    assignment: str
    K: int
    seed: int
    audit: bool
    csv: Path | None
    events: Path | None
    plan: dict[str, str] = field(default_factory=dict)

    def round_sizes(self) -> list[int]:
        if self.client_schedule is not None:
            return [s * len(self.clients) for s in self.client_schedule]
        assert self.sample_schedule is not None
        return self.sample_schedule.rounds_for_budget(self.K)


def _read(path: Path) -> dict[str, dict[str, str]]:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep M0/M1 case
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError([f"{path}: {exc}"]) from None
    return {s: dict(cp.items(s)) for s in cp.sections()}


class _Get:
    """Typed lookups that record errors instead of raising."""

    def __init__(self, sections: dict[str, dict[str, str]], errors: list[str]) -> None:
        self.s = sections
        self.errors = errors

    def raw(self, sec: str, key: str, default: str | None = None) -> str | None:
        return self.s.get(sec, {}).get(key, default)

    def num(self, sec: str, key: str, default: float | None = None) -> float | None:
        v = self.raw(sec, key)
        if v is None:
            return default
        try:
            return _number(v)
        except ValueError:
            self.errors.append(f"[{sec}] {key}: not a number: {v!r}")
            return default

    def int(self, sec: str, key: str, default: int | None = None) -> int | None:
        v = self.num(sec, key, None)
        if v is None:
            return default
        if v != int(v):
            self.errors.append(f"[{sec}] {key}: expected an integer, got {v}")
            return default
        return int(v)

    def flag(self, sec: str, key: str, default: bool) -> bool:
        v = self.raw(sec, key)
        if v is None:
            return default
        low = v.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        self.errors.append(f"[{sec}] {key}: expected true/false, got {v!r}")
        return default

    def nums(self, sec: str, key: str) -> list[float] | None:
        v = self.raw(sec, key)
        if v is None:
            return None
        try:
            return [_number(x) for x in v.replace(";", ",").split(",") if x.strip()]
        except ValueError:
            self.errors.append(f"[{sec}] {key}: bad number list {v!r}")
            return None


def _number(text: str) -> float:
    t = text.strip().lower()
    if t in ("inf", "infinity"):
        return math.inf
    if t == "1/e":
        return 1 / math.e
    if "/" in t:
        a, b = t.split("/", 1)
        return float(a) / float(b)
    return float(t)


def read_plan_file(path: str | Path) -> dict[str, str]:
    secs = _read(Path(path))
    if "plan" not in secs:
        raise ConfigError([f"{path}: missing [plan] section"])
    return secs["plan"]


def write_plan_file(plan: Any, path: str | Path) -> None:
    """Write a :class:`~asyncfl.privacy.PrivacyPlan` as a ``[plan]`` section."""
    lines = ["[plan]"]
    for key, val in plan.records():
        lines.append(f"{key} = {_fmt(val)}")
    lines.append("schedule = " + ",".join(str(s) for s in plan.schedule))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.15g}"
    return str(v)


def parse_config(path: str | Path, *, seed: int | None = None) -> ExperimentConfig:
    """Read, resolve and validate a configuration; raise :class:`ConfigError` listing every problem."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"{path}: no such file"])
    secs = _read(path)
    errors: list[str] = []
    for s in secs:
        if s not in SECTIONS:
            errors.append(f"unknown section [{s}]")
    g = _Get(secs, errors)
    base = path.parent

    def resolve(p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else base / q

    run_seed = (g.int("run", "seed", 0) or 0) if seed is None else seed
    split_seed = g.int("data", "split_seed", run_seed)

    # data
    dim = g.int("data", "dimension")
    train = test = None
    dpath = g.raw("data", "path")
    if dpath is None:
        errors.append("[data] path is required")
    elif not resolve(dpath).is_file():
        errors.append(f"[data] path: file not found: {resolve(dpath)}")
    else:
        try:
            full = load_libsvm(resolve(dpath), dim)
            tpath = g.raw("data", "test_path")
            if tpath is not None:
                if not resolve(tpath).is_file():
                    errors.append(f"[data] test_path: file not found: {resolve(tpath)}")
                else:
                    test = load_libsvm(resolve(tpath), max(full.dimension, dim or 0))
                    if test.dimension > full.dimension:
                        full = load_libsvm(resolve(dpath), test.dimension)
                train = full
            else:
                frac = g.num("data", "test_fraction", 0.2)
                train, test = split_dataset(full, frac, split_seed)
        except (ObjectiveError, SimulationError) as exc:
            errors.append(f"[data] {exc}")

    n = g.int("clients", "n", 1) or 1
    probs = g.nums("clients", "probs")
    if probs is not None:
        if len(probs) != n:
            errors.append(f"[clients] probs has {len(probs)} entries for n={n}")
        elif abs(sum(probs) - 1) > 1e-12 or min(probs) < 0:
            errors.append(f"[clients] probs must be non-negative and sum to 1 (sum={sum(probs):.15g})")
    assignment = g.raw("clients", "assignment", "iid") or "iid"
    if assignment not in ("iid", "balanced"):
        errors.append(f"[clients] assignment must be iid or balanced, got {assignment!r}")
    clients: list[Dataset] = []
    if train is not None:
        try:
            clients = partition(train, n, split_seed,
                                g.flag("data", "biased", False))
        except SimulationError as exc:
            errors.append(f"[clients] {exc}")

    lam_raw = (g.raw("objective", "lambda", "0") or "0").strip().lower()
    if lam_raw == "1/n":
        lam = 1.0 / train.size if train is not None else 0.0
    else:
        lam = g.num("objective", "lambda", 0.0) or 0.0
    objective = Objective(lam=max(lam, 0.0), includes_bias=g.flag("objective", "bias", True))
    if lam < 0:
        errors.append("[objective] lambda must be >= 0")

    # privacy plan
    plan: dict[str, str] = {}
    client_schedule = None
    ppath = g.raw("dp", "plan")
    if ppath is not None:
        if not resolve(ppath).is_file():
            errors.append(f"[dp] plan: file not found: {resolve(ppath)}")
        else:
            try:
                plan = read_plan_file(resolve(ppath))
                client_schedule = [int(x) for x in plan["schedule"].split(",") if x.strip()]
            except (ConfigError, KeyError, ValueError) as exc:
                errors.append(f"[dp] plan: {exc}")

    # schedules
    kind = g.raw("schedule", "kind", "constant") or "constant"
    sample = None
    d = g.int("gate", "d", 1)
    if d is None or d < 0:
        errors.append("[gate] d must be a non-negative integer")
        d = 1
    try:
        if client_schedule is None:
            if kind == "table":
                sample = SampleSchedule.from_sizes([int(x) for x in g.nums("schedule", "sizes") or []])
            else:
                sample = SampleSchedule(
                    kind=kind, d=g.int("schedule", "d", d) or 0, m=g.num("schedule", "m", 0.0) or 0.0,
                    p=g.num("schedule", "p", 1.0), a=g.num("schedule", "a", 0.0) or 0.0,
                    b=g.num("schedule", "b", 1.0), c=g.num("schedule", "c", 1.0))
    except ScheduleError as exc:
        errors.append(f"[schedule] {exc}")

    skind = g.raw("step", "kind", "constant") or "constant"
    try:
        step = StepSchedule(kind=skind, eta0=g.num("step", "eta0", 0.1), beta=g.num("step", "beta", 0.0),
                            power=g.num("step", "power", 1.0), a0=g.num("step", "a0", 1.0),
                            q=g.num("step", "q", 1.0), E0=g.num("step", "E0", 1.0), mu=objective.mu)
    except ScheduleError as exc:
        errors.append(f"[step] {exc}")
        step = StepSchedule()

    dkind = g.raw("delay", "kind", "unbounded") or "unbounded"
    delay = DelayFunction.unbounded()
    try:
        if dkind == "unbounded":
            delay = DelayFunction.unbounded()
        elif dkind == "theorem5":
            _, delay = theorem5_pairing(g.int("schedule", "d", d) or 0, g.num("schedule", "m", 0.0) or 0.0)
        elif dkind in ("affine", "sqrt-log"):
            delay = DelayFunction(kind=dkind, M0=g.num("delay", "M0", 0.0), M1=g.num("delay", "M1", 0.0),
                                  g=g.num("delay", "g", 2.0), slope=g.num("delay", "slope", 0.0))
        else:
            errors.append(f"[delay] unknown kind {dkind!r}")
    except ScheduleError as exc:
        errors.append(f"[delay] {exc}")

    gate = g.raw("gate", "mode", "round-lag") or "round-lag"
    if gate not in ("round-lag", "exact"):
        errors.append(f"[gate] mode must be round-lag or exact, got {gate!r}")

    dp = None
    if g.flag("dp", "enabled", bool(plan)):
        sigma = g.num("dp", "sigma", _number(plan["sigma"]) if "sigma" in plan else None)
        C = g.num("dp", "C", None)
        if sigma is None or C is None:
            errors.append("[dp] enabled runs need C and sigma (or a plan)")
        else:
            try:
                dp = DPConfig(C=C, sigma=sigma, noise_sign=g.raw("dp", "noise_sign", "as_printed"))
            except Exception as exc:  # ProtocolError
                errors.append(f"[dp] {exc}")

    try:
        net = NetworkModel(LatencyLaw.parse(g.raw("network", "up", "0") or "0"),
                           LatencyLaw.parse(g.raw("network", "down", "0") or "0"),
                           g.int("network", "seed"))
    except (SimulationError, ValueError) as exc:
        errors.append(f"[network] {exc}")
        net = NetworkModel()

    K = g.int("run", "K", None)
    if client_schedule is not None:
        K = sum(client_schedule) * n
    elif K is None or K < 1:
        errors.append("[run] K must be a positive integer")
        K = 1
    out_csv = g.raw("output", "csv")
    out_ev = g.raw("output", "events")

    if errors:
        raise ConfigError(errors)

    exp = ExperimentConfig(
        source=path, sections=secs, train=train, test=test, clients=clients,
        objective=objective, sample_schedule=sample, client_schedule=client_schedule, step=step,
        delay=delay, gate=gate, d=d, dp=dp, network=net, probs=probs, assignment=assignment,
        K=K, seed=run_seed, audit=g.flag("run", "audit", True),
        csv=resolve(out_csv) if out_csv else None, events=resolve(out_ev) if out_ev else None,
        plan=plan)
    sizes = exp.round_sizes()
    # the round-lag gate relies on this compatibility; the exact gate is
    # rejected too so that it cannot stall on an unsatisfiable delay
    if len(sizes) > d + 1:
        rep = check_eq4(SampleSchedule.from_sizes(sizes), delay, d, len(sizes) - 1)
        if not rep.ok:
            raise ConfigError([f"schedule incompatible with the delay function ({gate} gate): "
                               f"first bad round {rep.first_violation}; {rep}"])
    return exp


def build_sim_config(exp: ExperimentConfig, *, audit: bool | None = None,
                     record_steps: bool = True) -> SimConfig:
    return SimConfig(
        clients=exp.clients, objective=exp.objective, step=exp.step, delay=exp.delay, K=exp.K,
        sample_schedule=exp.sample_schedule, client_schedule=exp.client_schedule, test=exp.test,
        gate=exp.gate, d=exp.d, dp=exp.dp, network=exp.network, probs=exp.probs,
        assignment=exp.assignment, seed=exp.seed, audit=exp.audit if audit is None else audit,
        record_steps=record_steps, label=exp.source.stem)
