"""Deterministic discrete-event driver for the protocol state machines.

Virtual time: one local gradient step costs one unit, network latencies use
the same unit, server work is free.  Events at equal time run in the order
deliveries, server processing, client steps; within a class they are ordered
by sender id (server is -1) and then by send sequence.  A blocked client
consumes no time and is woken by the next broadcast delivered to it.
"""

from __future__ import annotations

import heapq
import io
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import protocol as P
from .objective import Dataset, Objective, accuracy, loss
from .schedules import DelayFunction, SampleSchedule, StepSchedule

__all__ = [
    "SimulationError",
    "AuditViolation",
    "LatencyLaw",
    "NetworkModel",
    "SimConfig",
    "MetricsRow",
    "MetricsTrace",
    "ReplayAuditReport",
    "run",
    "replay_audit",
    "compare_runs",
    "format_comparison",
    "split_dataset",
    "partition",
    "concat",
    "CSV_HEADER",
]

CSV_HEADER = "round,time,train_loss,test_loss,accuracy,model_norm,messages,scalars_sent,noise_draws"


class SimulationError(RuntimeError):
    """Invalid configuration or a run that cannot finish."""


class AuditViolation(SimulationError):
    """An inline audit failed; ``context`` holds the offending event."""

    def __init__(self, message: str, context: dict[str, Any]) -> None:
        super().__init__(message)
        self.context = context


# --------------------------------------------------------------------------
# network


@dataclass(frozen=True)
class LatencyLaw:
    """``fixed`` (``value``), ``uniform`` on ``[lo, hi]`` or per-client ``table``."""

    kind: str = "fixed"
    value: float = 0.0
    lo: float = 0.0
    hi: float = 0.0
    table: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in ("fixed", "uniform", "table"):
            raise SimulationError(f"unknown latency law {self.kind!r}")
        if self.kind == "fixed" and self.value < 0:
            raise SimulationError("latency must be >= 0")
        if self.kind == "uniform" and not 0 <= self.lo <= self.hi:
            raise SimulationError("uniform latency needs 0 <= lo <= hi")
        if self.kind == "table" and (not self.table or min(self.table) < 0):
            raise SimulationError("latency table needs non-negative entries")

    @classmethod
    def parse(cls, text: str) -> "LatencyLaw":
        """``"2"``, ``"fixed:2"``, ``"uniform:0.5,3"`` or ``"table:1,2,3"``."""
        kind, _, rest = text.strip().partition(":")
        if not rest:
            return cls("fixed", value=float(kind))
        nums = [float(x) for x in rest.split(",") if x.strip()]
        if kind == "fixed" and len(nums) == 1:
            return cls("fixed", value=nums[0])
        if kind == "uniform" and len(nums) == 2:
            return cls("uniform", lo=nums[0], hi=nums[1])
        if kind == "table":
            return cls("table", table=tuple(nums))
        raise SimulationError(f"cannot parse latency {text!r}")

    def draw(self, rng: np.random.Generator, c: int) -> float:
        if self.kind == "fixed":
            return self.value
        if self.kind == "uniform":
            return float(rng.uniform(self.lo, self.hi))
        return self.table[c % len(self.table)]


@dataclass(frozen=True)
class NetworkModel:
    """Latency per direction; messages are never lost, order follows arrival time."""

    up: LatencyLaw = LatencyLaw()
    down: LatencyLaw = LatencyLaw()
    seed: int | None = None


# --------------------------------------------------------------------------
# data helpers


def concat(parts: Sequence[Dataset]) -> Dataset:
    dim = max(p.dimension for p in parts)
    indptr = [np.zeros(1, dtype=np.int64)]
    off = 0
    for p in parts:
        indptr.append(p.indptr[1:] + off)
        off += int(p.indptr[-1])
    return Dataset(np.concatenate(indptr), np.concatenate([p.indices for p in parts]),
                   np.concatenate([p.values for p in parts]),
                   np.concatenate([p.labels for p in parts]), dim)


def split_dataset(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle split into (train, test)."""
    if not 0 <= test_fraction < 1:
        raise SimulationError("test fraction must lie in [0, 1)")
    perm = P.stream(seed, P.SPLIT).permutation(ds.size)
    n_test = int(round(test_fraction * ds.size))
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


def partition(ds: Dataset, n: int, seed: int, biased: bool = False) -> list[Dataset]:
    """Split ``ds`` over ``n`` clients, randomly or sorted by label when ``biased``."""
    if n < 1 or n > ds.size:
        raise SimulationError("need 1 <= clients <= examples")
    if biased:
        order = np.lexsort((np.arange(ds.size), ds.labels))
    else:
        order = P.stream(seed, P.SPLIT, 1).permutation(ds.size)
    return [ds.subset(np.sort(chunk)) for chunk in np.array_split(order, n)]


# --------------------------------------------------------------------------
# configuration and trace


@dataclass
class SimConfig:
    """One simulated training run.

    Round sizes come either from ``sample_schedule`` (global ``s_i``, spent
    until ``K`` steps in total) or from ``client_schedule`` (the same
    per-client sizes for every client, e.g. a privacy plan).
    """

    clients: list[Dataset]
    objective: Objective
    step: StepSchedule
    delay: DelayFunction
    K: int = 0
    sample_schedule: SampleSchedule | None = None
    client_schedule: Sequence[int] | None = None
    test: Dataset | None = None
    gate: str = "round-lag"
    d: int = 1
    dp: P.DPConfig | None = None
    network: NetworkModel = field(default_factory=NetworkModel)
    probs: Sequence[float] | None = None
    assignment: str = "iid"
    seed: int = 0
    audit: bool = True
    record_steps: bool = True
    keep_models: bool = False
    v0: np.ndarray | None = None
    label: str = ""

    def round_sizes(self) -> tuple[list[int], list[list[int]] | None]:
        n = len(self.clients)
        if self.client_schedule is not None:
            rows = [[int(s)] * n for s in self.client_schedule]
            return [sum(r) for r in rows], rows
        if self.sample_schedule is None:
            raise SimulationError("need a sample schedule or a per-client schedule")
        if self.K < 1:
            raise SimulationError("budget K must be positive")
        return self.sample_schedule.rounds_for_budget(self.K), None

    def validate(self) -> None:
        if not self.clients:
            raise SimulationError("no client datasets")
        dims = {ds.dimension for ds in self.clients}
        if len(dims) != 1:
            raise SimulationError(f"client datasets disagree on dimension: {sorted(dims)}")
        if self.test is not None and self.test.dimension not in dims:
            raise SimulationError("test set dimension differs from the training sets")
        if self.gate not in ("exact", "round-lag"):
            raise SimulationError(f"unknown gate {self.gate!r}")


@dataclass(frozen=True)
class MetricsRow:
    round: int
    time: float
    train_loss: float
    test_loss: float
    accuracy: float
    model_norm: float
    messages: int
    scalars_sent: int
    noise_draws: int

    def csv(self) -> str:
        f = _fmt
        return ",".join([str(self.round), f(self.time), f(self.train_loss), f(self.test_loss),
                         f(self.accuracy), f(self.model_norm), str(self.messages),
                         str(self.scalars_sent), str(self.noise_draws)])


def _fmt(x: float) -> str:
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return f"{x:.15g}"


@dataclass
class MetricsTrace:
    rows: list[MetricsRow]
    summary: dict[str, Any]
    records: list[P.StepRecord] = field(default_factory=list)
    processed: list[P.UpdateMessage] = field(default_factory=list)
    server_models: list[np.ndarray] = field(default_factory=list)
    broadcast_models: list[np.ndarray] = field(default_factory=list)
    events: list[dict[str, Any]] = field(default_factory=list)
    final_model: np.ndarray | None = None
    protocol: P.ProtocolConfig | None = None
    v0: np.ndarray | None = None

    @property
    def T(self) -> int:
        return int(self.summary["T"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        for row in self.rows:
            buf.write(row.csv() + "\n")
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    def write_events(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for ev in self.events:
                fh.write(json.dumps(ev, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# the event loop

_DELIVER, _SERVE, _STEP = 0, 1, 2
_SERVER = -1


def run(cfg: SimConfig) -> MetricsTrace:
    """Execute one configuration to completion and return its trace."""
    cfg.validate()
    n = len(cfg.clients)
    sizes, client_rows = cfg.round_sizes()
    if client_rows is not None:
        eta_sched = SampleSchedule.from_sizes(sizes)
    else:
        assert cfg.sample_schedule is not None
        eta_sched = cfg.sample_schedule
    eta_bar = [cfg.step.round_step(eta_sched, i) for i in range(len(sizes))]
    v0 = cfg.v0 if cfg.v0 is not None else cfg.objective.zeros(cfg.clients[0])
    mode = "fixed" if client_rows is not None else cfg.assignment
    pcfg, server, clients = P.setup(n, cfg.probs, sizes, eta_bar, cfg.delay, cfg.objective,
                                    v0, cfg.seed, gate=cfg.gate, d=cfg.d, dp=cfg.dp,
                                    mode=mode, client_sizes=client_rows)
    R = pcfg.rounds
    dim = int(v0.size)
    net_seed = cfg.seed if cfg.network.seed is None else cfg.network.seed
    sample_rng = [P.stream(cfg.seed, P.SAMPLE, c) for c in range(n)]
    noise_rng = [P.stream(cfg.seed, P.NOISE, c) for c in range(n)]
    up_rng = [P.stream(net_seed, P.LATENCY, 2 * c) for c in range(n)]
    down_rng = [P.stream(net_seed, P.LATENCY, 2 * c + 1) for c in range(n)]

    train_all = concat(cfg.clients)
    test = cfg.test

    heap: list[tuple] = []
    seq = itertools.count()

    def push(time: float, cls: int, sender: int, kind: str, target: int, payload: Any) -> None:
        heapq.heappush(heap, (time, cls, sender, next(seq), kind, target, payload))

    messages = 0
    scalars = 0
    blocked = [False] * n
    blocked_steps = 0
    serving = False
    rows: list[MetricsRow] = []
    records: list[P.StepRecord] = []
    processed: list[P.UpdateMessage] = []
    server_models: list[np.ndarray] = []
    broadcast_models: list[np.ndarray] = []
    events: list[dict[str, Any]] = []

    def metrics(k: int, time: float, w: np.ndarray) -> MetricsRow:
        tl = loss(cfg.objective, w, train_all)
        if test is not None and test.size:
            te = loss(cfg.objective, w, test)
            acc = accuracy(cfg.objective, w, test)
        else:
            te = float("nan")
            acc = accuracy(cfg.objective, w, train_all)
        draws = sum(cl.noise_draws for cl in clients)
        return MetricsRow(k, float(time), tl, te, acc, float(np.linalg.norm(w)), messages,
                          scalars, draws)

    rows.append(metrics(0, 0.0, server.v_hat))
    for c in range(n):
        push(0.0, _STEP, c, "step", c, None)

    while heap:
        time, _cls, _sender, _seq, kind, target, payload = heapq.heappop(heap)
        if kind == "step":
            c = target
            st = clients[c]
            if st.done:
                continue
            res = P.client_step(st, cfg.clients[c], sample_rng[c], pcfg, noise_rng[c])
            if res is P.BLOCKED:
                blocked[c] = True
                blocked_steps += 1
                continue
            st, msg, rec = res  # type: ignore[misc]
            clients[c] = st
            cost = 1.0 if rec is not None else 0.0
            if rec is not None:
                if cfg.audit:
                    _inline_audit(rec, pcfg, time)
                if cfg.record_steps:
                    records.append(rec)
                    events.append({**P.step_record_to_dict(rec), "time": time})
            if msg is not None:
                messages += 1
                scalars += dim
                arrive = time + cost + cfg.network.up.draw(up_rng[c], c)
                events.append({"ev": "send", "c": c, "i": msg.i, "time": time + cost,
                               "arrive": arrive})
                push(arrive, _DELIVER, c, "to_server", _SERVER, msg)
            if not st.done:
                push(time + cost, _STEP, c, "step", c, None)
        elif kind == "to_server":
            server = P.server_on_receive(server, payload)
            events.append({"ev": "receive", "c": payload.c, "i": payload.i, "time": time})
            if not serving:
                serving = True
                push(time, _SERVE, _SERVER, "serve", _SERVER, None)
        elif kind == "serve":
            old_k = server.k
            server, bc, msg = P.server_step(server, eta_bar)
            if msg is not None:
                processed.append(msg)
                server_models.append(server.v_hat)
            if bc is not None:
                for k in range(old_k + 1, bc.k + 1):
                    rows.append(metrics(k, time, bc.v_hat))
                    events.append({"ev": "broadcast", "k": k, "time": time})
                if cfg.keep_models:
                    broadcast_models.append(bc.v_hat)
                for c in range(n):
                    messages += 1
                    scalars += dim
                    push(time + cfg.network.down.draw(down_rng[c], c), _DELIVER, _SERVER,
                         "to_client", c, bc)
            if server.Q:
                push(time, _SERVE, _SERVER, "serve", _SERVER, None)
            else:
                serving = False
        elif kind == "to_client":
            c = target
            before = clients[c].k
            clients[c] = P.client_isr_receive(clients[c], payload, pcfg)
            events.append({"ev": "deliver", "c": c, "k": payload.k, "time": time,
                           "accepted": clients[c].k != before})
            if blocked[c] and not clients[c].done:
                blocked[c] = False
                push(time, _STEP, c, "step", c, None)

    unfinished = [c for c in range(n) if not clients[c].done]
    if unfinished or server.k != R:
        raise SimulationError(
            f"deadlock: clients {unfinished} unfinished, server at round {server.k} of {R}")

    T = server.k
    sigma = cfg.dp.sigma_at(0) if cfg.dp is not None else 0.0
    summary = {
        "label": cfg.label,
        "T": T,
        "K": int(sum(sizes)),
        "steps": int(sum(cl.steps for cl in clients)),
        "blocked_steps": blocked_steps,
        "messages": messages,
        "noise_draws": int(sum(cl.noise_draws for cl in clients)),
        "aggregated_noise": math.sqrt(T) * sigma * (cfg.dp.C if cfg.dp else 0.0),
        "final_train_loss": rows[-1].train_loss,
        "final_test_loss": rows[-1].test_loss,
        "final_accuracy": rows[-1].accuracy,
        "time": rows[-1].time,
    }
    return MetricsTrace(rows, summary, records, processed, server_models, broadcast_models,
                        events, server.v_hat, pcfg, np.asarray(v0, dtype=float))


def _inline_audit(rec: P.StepRecord, pcfg: P.ProtocolConfig, time: float) -> None:
    rep = P.audit_consistency([rec], pcfg.delay, gate=pcfg.gate, d=pcfg.d)
    if not rep.ok:
        ctx = {**P.step_record_to_dict(rec), "time": time}
        raise AuditViolation(str(rep), ctx)


# --------------------------------------------------------------------------
# audits and comparisons


@dataclass(frozen=True)
class ReplayAuditReport:
    consistency: P.AuditReport
    replay: P.ReplayReport

    @property
    def ok(self) -> bool:
        return self.consistency.ok and self.replay.ok

    def __str__(self) -> str:
        head = "PASS" if self.ok else "FAIL"
        return f"{head}\n  {self.consistency}\n  {self.replay}"


def replay_audit(trace: MetricsTrace, df: DelayFunction | None = None,
                 records: Sequence[P.StepRecord] | None = None) -> ReplayAuditReport:
    """Consistency audit of the step log plus the server log replay."""
    pcfg = trace.protocol
    if pcfg is None or trace.v0 is None:
        raise SimulationError("trace carries no protocol configuration")
    df = df if df is not None else pcfg.delay
    recs = trace.records if records is None else records
    cons = P.audit_consistency(recs, df, gate=pcfg.gate, d=pcfg.d)
    rep = P.replay_server_log(trace.v0, trace.processed, trace.server_models, pcfg.eta_bar,
                              pcfg.assignment.n)
    return ReplayAuditReport(cons, rep)


def compare_runs(configs: Sequence[SimConfig]) -> list[dict[str, Any]]:
    """Run every configuration and tabulate the outcome; budgets must agree."""
    budgets = set()
    for cfg in configs:
        sizes, _ = cfg.round_sizes()
        budgets.add(sum(sizes))
    if len(budgets) > 1:
        raise SimulationError(f"configurations use different budgets K: {sorted(budgets)}")
    out = []
    for j, cfg in enumerate(configs):
        tr = run(cfg)
        s = tr.summary
        out.append({"label": cfg.label or f"run{j}", "T": s["T"], "K": s["K"],
                    "final_accuracy": s["final_accuracy"], "final_loss": s["final_train_loss"],
                    "messages": s["messages"], "aggregated_noise": s["aggregated_noise"]})
    return out


def format_comparison(table: Sequence[dict[str, Any]]) -> str:
    cols = ["label", "T", "K", "final_accuracy", "final_loss", "messages", "aggregated_noise"]
    cells = [[str(r[c]) if not isinstance(r[c], float) else _fmt(r[c]) for c in cols]
             for r in table]
    widths = [max(len(c), *(len(row[j]) for row in cells)) for j, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)
