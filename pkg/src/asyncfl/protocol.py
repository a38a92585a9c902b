"""Client and server state machines of the asynchronous protocol.

Global round ``i`` consists of ``s_i`` gradient steps.  The assignment table
``a(i, t)`` decides which client performs slot ``t`` of round ``i``; client
``c`` therefore runs ``s_{i,c} = |{t : a(i,t) = c}|`` local steps in round
``i`` and then sends the summed update ``U`` to the server.  The server
subtracts ``eta_bar_i U`` from its model and broadcasts a fresh model every
time all clients have delivered round ``k``.

Clients may run ahead of the newest broadcast.  Two gates bound how far:

* ``exact``: block while ``tau(t_glob) <= t_delay``;
* ``round-lag``: block while ``i - k > d``.

Transitions are functions ``(state, event) -> (state, emissions)``; states
are frozen dataclasses and numpy arrays inside them are never mutated in
place.  The only mutable piece is each client's random generator, which the
driver owns together with the state.

Every gradient step gets a global index ``t = rho(c, i, h)``.  The set of
step indices whose gradients are already folded into the model used at step
``t`` is tracked as an :class:`UpdateSet`; :func:`audit_consistency` checks
that it contains ``{0, ..., t - tau(t) - 1}``.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, replace
from typing import Any, Container, Iterable, Sequence

import numpy as np

from .objective import Dataset, Objective, clip, grad
from .schedules import DelayFunction, eval_delay

__all__ = [
    "ProtocolError",
    "Assignment",
    "UpdateMessage",
    "BroadcastMessage",
    "UpdateSet",
    "DPConfig",
    "ProtocolConfig",
    "ClientState",
    "ServerState",
    "Blocked",
    "StepRecord",
    "AuditReport",
    "ReplayReport",
    "setup",
    "client_isr_receive",
    "client_step",
    "server_on_receive",
    "server_step",
    "rho_map",
    "rho_inverse",
    "gate_open",
    "audit_consistency",
    "replay_server_log",
    "stream",
]

# stream identifiers for the per-purpose random generators
ASSIGN, SAMPLE, NOISE, LATENCY, SPLIT = 1, 2, 3, 4, 5


class ProtocolError(RuntimeError):
    """A message or state transition that the protocol forbids."""


def stream(seed: int, purpose: int, who: int = 0) -> np.random.Generator:
    """Independent generator for one (purpose, client) pair of a master seed."""
    return np.random.default_rng([int(seed), purpose, who])


# --------------------------------------------------------------------------
# assignment and the rho mapping


class Assignment:
    """Slot-to-client tables for a finite run of ``len(round_sizes)`` rounds.

    modes:
      * ``iid``: every slot draws its client independently with ``probs``.
      * ``balanced``: slot ``t`` of round ``i`` goes to client ``(t + i) mod n``.
      * ``fixed``: per-client sizes ``client_sizes[i][c]`` are given; slots
        interleave the clients round robin.
    """

    def __init__(self, n: int, round_sizes: Sequence[int] | None = None,
                 probs: Sequence[float] | None = None, seed: int = 0, mode: str = "iid",
                 client_sizes: Sequence[Sequence[int]] | None = None) -> None:
        if n < 1:
            raise ProtocolError("need at least one client")
        probs = tuple(float(x) for x in (probs if probs is not None else [1.0 / n] * n))
        if len(probs) != n or min(probs) < 0 or abs(sum(probs) - 1.0) > 1e-12:
            raise ProtocolError(f"invalid probability vector {probs} (sum {sum(probs)!r})")
        if mode not in ("iid", "balanced", "fixed"):
            raise ProtocolError(f"unknown assignment mode {mode!r}")
        self.n, self.probs, self.seed, self.mode = n, probs, int(seed), mode
        slots: list[np.ndarray] = []
        if mode == "fixed":
            if client_sizes is None:
                raise ProtocolError("fixed assignment needs client_sizes")
            for i, row in enumerate(client_sizes):
                row = [int(x) for x in row]
                if len(row) != n or min(row) < 0 or sum(row) < 1:
                    raise ProtocolError(f"bad per-client sizes in round {i}: {row}")
                who = np.repeat(np.arange(n), row)
                rank = np.concatenate([np.arange(x) for x in row])
                slots.append(who[np.lexsort((who, rank))])
        else:
            if round_sizes is None:
                raise ProtocolError("round_sizes are required")
            for i, s in enumerate(round_sizes):
                if s < 1:
                    raise ProtocolError(f"round {i} has size {s} < 1")
                if mode == "iid":
                    slots.append(stream(self.seed, ASSIGN, i).choice(n, size=int(s), p=probs))
                else:
                    slots.append((np.arange(int(s)) + i) % n)
        self._slots = [a.astype(np.int32) for a in slots]
        for a in self._slots:
            a.setflags(write=False)
        self._counts = np.array([np.bincount(a, minlength=n) for a in self._slots],
                                dtype=np.int64).reshape(len(slots), n)
        self._prefix = [0]
        for a in self._slots:
            self._prefix.append(self._prefix[-1] + int(a.size))
        # rank of each slot among its client's slots in the same round
        self._rank: list[np.ndarray] = []
        self._where: list[list[np.ndarray]] = []
        for a in self._slots:
            rank = np.empty(a.size, dtype=np.int64)
            where = []
            for c in range(n):
                pos = np.flatnonzero(a == c)
                rank[pos] = np.arange(pos.size)
                where.append(pos)
            self._rank.append(rank)
            self._where.append(where)

    @property
    def rounds(self) -> int:
        return len(self._slots)

    @property
    def total(self) -> int:
        return self._prefix[-1]

    def slots(self, i: int) -> np.ndarray:
        return self._slots[i]

    def round_size(self, i: int) -> int:
        return int(self._slots[i].size)

    def size(self, i: int, c: int) -> int:
        """``s_{i,c}``."""
        return int(self._counts[i, c])

    def prefix(self, i: int) -> int:
        """``s_0 + ... + s_{i-1}``."""
        return self._prefix[i]

    def round_of(self, t: int) -> int:
        return bisect.bisect_right(self._prefix, t) - 1

    def counts(self) -> np.ndarray:
        return self._counts.copy()


def rho_map(assignment: Assignment, c: int, i: int, h: int) -> int:
    """Global index of client ``c``'s ``h``-th step (0-based) in round ``i``.

    The step sits at the slot of the ``(h+1)``-st occurrence of ``c`` in
    ``a(i, .)``.
    """
    if not 0 <= i < assignment.rounds:
        raise ProtocolError(f"round {i} out of range")
    if not 0 <= h < assignment.size(i, c):
        raise ProtocolError(f"h={h} out of range for s_(i,c)={assignment.size(i, c)}")
    return assignment.prefix(i) + int(assignment._where[i][c][h])


def rho_inverse(assignment: Assignment, t: int) -> tuple[int, int, int]:
    """``(c, i, h)`` with ``rho_map(c, i, h) == t``."""
    if not 0 <= t < assignment.total:
        raise ProtocolError(f"global index {t} out of range [0, {assignment.total})")
    i = assignment.round_of(t)
    off = t - assignment.prefix(i)
    return int(assignment.slots(i)[off]), i, int(assignment._rank[i][off])


# --------------------------------------------------------------------------
# messages and update sets


@dataclass(frozen=True)
class UpdateMessage:
    i: int
    c: int
    U: np.ndarray


@dataclass(frozen=True)
class BroadcastMessage:
    """Server model after ``k`` complete rounds.

    ``pending`` lists the ``(i, c)`` updates already applied to ``v_hat`` but
    belonging to rounds ``>= k``; it is bookkeeping for the audit only.
    """

    v_hat: np.ndarray
    k: int
    pending: frozenset[tuple[int, int]] = frozenset()


@dataclass(frozen=True)
class UpdateSet:
    """Step indices whose gradients are contained in a local model.

    All ``t < prefix_end``, every step of the rounds ``(i, c)`` listed in
    ``rounds`` and the first ``own_h`` steps of client ``own_c`` in round
    ``own_i``.
    """

    assignment: Assignment
    prefix_end: int
    rounds: frozenset[tuple[int, int]]
    own_c: int
    own_i: int
    own_h: int

    def __contains__(self, u: object) -> bool:
        if not isinstance(u, (int, np.integer)) or u < 0:
            return False
        if u < self.prefix_end:
            return True
        if u >= self.assignment.total:
            return False
        c, i, h = rho_inverse(self.assignment, int(u))
        if (i, c) in self.rounds:
            return True
        return c == self.own_c and i == self.own_i and h < self.own_h

    def first_missing(self, limit: int | None = None) -> int:
        """Smallest index not in the set (scanning stops at ``limit``)."""
        a = self.assignment
        u = self.prefix_end
        stop = a.total if limit is None else min(limit, a.total)
        while u < stop:
            i = a.round_of(u)
            done = {c for (r, c) in self.rounds if r == i}
            if len(done) == a.n:
                u = a.prefix(i + 1)
                continue
            slots = a.slots(i)
            rank = a._rank[i]
            for off in range(u - a.prefix(i), slots.size):
                c = int(slots[off])
                if c in done or (c == self.own_c and i == self.own_i and rank[off] < self.own_h):
                    continue
                return a.prefix(i) + off
            u = a.prefix(i + 1)
        return max(u, self.prefix_end)


# --------------------------------------------------------------------------
# states


@dataclass(frozen=True)
class DPConfig:
    """Clipping norm ``C`` and noise multipliers ``sigma_i`` (one per round)."""

    C: float
    sigma: float | Sequence[float]
    noise_sign: str = "as_printed"

    def __post_init__(self) -> None:
        if not self.C > 0:
            raise ProtocolError("clipping norm must be positive")
        if self.noise_sign not in ("as_printed", "symmetric"):
            raise ProtocolError("noise_sign must be as_printed or symmetric")

    def sigma_at(self, i: int) -> float:
        if isinstance(self.sigma, (int, float)):
            return float(self.sigma)
        return float(self.sigma[i])


@dataclass(frozen=True)
class ProtocolConfig:
    """Everything the clients and the server share after setup."""

    assignment: Assignment
    eta_bar: tuple[float, ...]
    delay: DelayFunction
    objective: Objective
    gate: str = "round-lag"
    d: int = 1
    dp: DPConfig | None = None

    def __post_init__(self) -> None:
        if self.gate not in ("exact", "round-lag"):
            raise ProtocolError(f"unknown gate {self.gate!r}")
        if len(self.eta_bar) < self.assignment.rounds:
            raise ProtocolError("need one round step size per round")
        if self.d < 0:
            raise ProtocolError("round lag d must be >= 0")

    @property
    def rounds(self) -> int:
        return self.assignment.rounds


@dataclass(frozen=True)
class ClientState:
    c: int
    i: int
    h: int
    k: int
    w_hat: np.ndarray
    U: np.ndarray
    rounds: frozenset[tuple[int, int]] = frozenset()
    done: bool = False
    steps: int = 0
    noise_draws: int = 0

    def t_glob(self, cfg: ProtocolConfig) -> int:
        a = cfg.assignment
        return a.prefix(self.i + 1) - (a.size(self.i, self.c) - self.h) - 1

    def t_delay(self, cfg: ProtocolConfig) -> int:
        a = cfg.assignment
        return a.prefix(self.i + 1) - a.prefix(self.k) - (a.size(self.i, self.c) - self.h)

    def included(self, cfg: ProtocolConfig) -> UpdateSet:
        return UpdateSet(cfg.assignment, cfg.assignment.prefix(self.k), self.rounds,
                         self.c, self.i, self.h)


@dataclass(frozen=True)
class ServerState:
    v_hat: np.ndarray
    k: int = 0
    Q: tuple[UpdateMessage, ...] = ()
    H: frozenset[tuple[int, int]] = frozenset()
    seen: frozenset[tuple[int, int]] = frozenset()
    n: int = 1


class Blocked:
    """Returned by :func:`client_step` when the gate is closed."""

    _inst: "Blocked | None" = None

    def __new__(cls) -> "Blocked":
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self) -> str:
        return "Blocked"


BLOCKED = Blocked()


@dataclass(frozen=True)
class StepRecord:
    """One executed gradient step, as written to the execution log."""

    t: int
    c: int
    i: int
    h: int
    k: int
    t_glob: int
    t_delay: int
    included: Container[int]


def setup(n: int, probs: Sequence[float] | None, round_sizes: Sequence[int],
          eta_bar: Sequence[float], delay: DelayFunction, objective: Objective,
          v0: np.ndarray, seed: int = 0, *, gate: str = "round-lag", d: int = 1,
          dp: DPConfig | None = None, mode: str = "iid",
          client_sizes: Sequence[Sequence[int]] | None = None
          ) -> tuple[ProtocolConfig, ServerState, list[ClientState]]:
    """Build the shared configuration and the initial server and client states."""
    assignment = Assignment(n, round_sizes, probs, seed, mode, client_sizes)
    cfg = ProtocolConfig(assignment, tuple(float(x) for x in eta_bar), delay, objective,
                         gate, d, dp)
    v0 = np.array(v0, dtype=float)
    v0.setflags(write=False)
    server = ServerState(v_hat=v0, n=n)
    zero = np.zeros_like(v0)
    clients = [ClientState(c=c, i=0, h=0, k=0, w_hat=v0, U=zero) for c in range(n)]
    return cfg, server, clients


# --------------------------------------------------------------------------
# client transitions


def client_isr_receive(state: ClientState, msg: BroadcastMessage, cfg: ProtocolConfig
                       ) -> ClientState:
    """Accept a strictly fresher model, keeping the in-flight round's updates."""
    if msg.k <= state.k:
        return state
    if state.done:
        return replace(state, k=msg.k)
    w_hat = msg.v_hat - cfg.eta_bar[state.i] * state.U
    return replace(state, k=msg.k, w_hat=w_hat, rounds=msg.pending)


def gate_open(state: ClientState, cfg: ProtocolConfig) -> bool:
    if cfg.gate == "round-lag":
        return state.i - state.k <= cfg.d
    t_glob = state.t_glob(cfg)
    # t_glob = -1 only before the very first step: nothing earlier to wait for
    return t_glob < 0 or eval_delay(cfg.delay, t_glob) > state.t_delay(cfg)


def client_step(state: ClientState, dataset: Dataset, rng: np.random.Generator,
                cfg: ProtocolConfig, noise_rng: np.random.Generator | None = None
                ) -> tuple[ClientState, UpdateMessage | None, StepRecord | None] | Blocked:
    """Run one local iteration, or finish an empty round.

    Returns ``BLOCKED`` without touching the state when the gate is closed.
    Otherwise returns the new state, the update message if the round ended
    and the :class:`StepRecord` of the gradient step (``None`` when the round
    had no steps for this client).
    """
    if state.done:
        raise ProtocolError(f"client {state.c} already finished")
    a = cfg.assignment
    s_ic = a.size(state.i, state.c)
    record = None
    if state.h < s_ic:
        if not gate_open(state, cfg):
            return BLOCKED
        t = rho_map(a, state.c, state.i, state.h)
        record = StepRecord(t, state.c, state.i, state.h, state.k, state.t_glob(cfg),
                            state.t_delay(cfg), state.included(cfg))
        j = int(rng.integers(dataset.size))
        g = grad(cfg.objective, state.w_hat, dataset, j)
        if cfg.dp is not None:
            g = clip(g, cfg.dp.C)
        eta = cfg.eta_bar[state.i]
        state = replace(state, U=state.U + g, w_hat=state.w_hat - eta * g,
                        h=state.h + 1, steps=state.steps + 1)
    if state.h < s_ic:
        return state, None, record
    # round complete
    U, w_hat, draws = state.U, state.w_hat, state.noise_draws
    if cfg.dp is not None:
        gen = noise_rng if noise_rng is not None else rng
        sigma = cfg.dp.sigma_at(state.i)
        # sigma = 0 means no noise even with an infinite clipping norm
        noise = gen.normal(0.0, cfg.dp.C * sigma if sigma else 0.0, size=U.shape)
        eta = cfg.eta_bar[state.i]
        w_hat = w_hat + eta * noise if cfg.dp.noise_sign == "as_printed" else w_hat - eta * noise
        U = U + noise
        draws += 1
    msg = UpdateMessage(state.i, state.c, U)
    nxt = state.i + 1
    state = replace(state, i=nxt, h=0, U=np.zeros_like(U), w_hat=w_hat,
                    rounds=state.rounds | {(state.i, state.c)}, done=nxt >= cfg.rounds,
                    noise_draws=draws)
    return state, msg, record


# --------------------------------------------------------------------------
# server transitions


def server_on_receive(state: ServerState, msg: UpdateMessage) -> ServerState:
    key = (msg.i, msg.c)
    if key in state.seen:
        raise ProtocolError(f"duplicate update for round {msg.i} from client {msg.c}")
    return replace(state, Q=state.Q + (msg,), seen=state.seen | {key})


def server_step(state: ServerState, eta_bar: Sequence[float]
                ) -> tuple[ServerState, BroadcastMessage | None, UpdateMessage | None]:
    """Process the oldest queued update; broadcast once round ``k`` is complete.

    Returns ``(state, broadcast or None, processed message or None)``.  If
    later rounds were already complete too, ``k`` advances past all of them
    and a single broadcast carries the final counter.
    """
    if not state.Q:
        return state, None, None
    msg, rest = state.Q[0], state.Q[1:]
    v_hat = state.v_hat - eta_bar[msg.i] * msg.U
    H = state.H | {(msg.i, msg.c)}
    k = state.k
    out = None
    # several rounds can complete at once when updates arrived early
    while all((k, c) in H for c in range(state.n)):
        H = H - {(k, c) for c in range(state.n)}
        k += 1
        out = BroadcastMessage(v_hat, k, H)
    return replace(state, v_hat=v_hat, Q=rest, H=H, k=k), out, msg


# --------------------------------------------------------------------------
# audits


@dataclass(frozen=True)
class AuditReport:
    ok: bool
    checked: int
    t: int | None = None
    reason: str = ""

    def __str__(self) -> str:
        if self.ok:
            return f"consistency audit passed ({self.checked} steps)"
        return f"consistency audit FAILED at t={self.t}: {self.reason}"


def _required(df: DelayFunction, t: int) -> int:
    tau = eval_delay(df, t)
    if math.isinf(tau):
        return 0
    return max(0, math.ceil(t - tau))


def audit_consistency(execution_log: Iterable[StepRecord], df: DelayFunction, *,
                      gate: str | None = None, d: int | None = None) -> AuditReport:
    """Check ``{0, ..., t - tau(t) - 1}`` is included in every step's model.

    With ``gate`` set, the recorded gate state is checked too:
    ``t_delay <= tau(t_glob)`` for ``exact`` and ``i - k <= d`` for
    ``round-lag``.  Records are examined in increasing ``t``; the first
    failure is reported.
    """
    records = sorted(execution_log, key=lambda r: r.t)
    for n, rec in enumerate(records):
        if gate == "exact" and rec.t_glob >= 0 and rec.t_delay > eval_delay(df, rec.t_glob):
            return AuditReport(False, n, rec.t, f"t_delay={rec.t_delay} exceeds "
                               f"tau(t_glob)={eval_delay(df, rec.t_glob):.15g}")
        if gate == "round-lag" and d is not None and rec.i - rec.k > d:
            return AuditReport(False, n, rec.t, f"round lag {rec.i - rec.k} exceeds d={d}")
        need = _required(df, rec.t)
        inc = rec.included
        first = getattr(inc, "first_missing", None)
        if first is not None:
            miss = first(need)
            if miss < need:
                return AuditReport(False, n, rec.t, f"update {miss} missing (need all < {need})")
        else:
            for u in range(need):
                if u not in inc:
                    return AuditReport(False, n, rec.t, f"update {u} missing (need all < {need})")
    return AuditReport(True, len(records))


@dataclass(frozen=True)
class ReplayReport:
    ok: bool
    checked: int
    max_invariant_error: float = 0.0
    step: int | None = None
    reason: str = ""

    def __str__(self) -> str:
        if self.ok:
            return (f"server replay passed ({self.checked} updates, invariant error "
                    f"{self.max_invariant_error:.3g})")
        return f"server replay FAILED at processed update {self.step}: {self.reason}"


def replay_server_log(v0: np.ndarray, processed: Sequence[UpdateMessage],
                      states: Sequence[np.ndarray], eta_bar: Sequence[float], n: int,
                      *, tol: float = 1e-12) -> ReplayReport:
    """Recompute the server model from its processed updates.

    ``states[j]`` is the server model after the ``j``-th processed update.
    Sequential replay must match exactly; the regrouped form
    ``v0 - sum_(i<k) sum_c eta_i U_ic - sum_H eta_i U_ic`` must match within
    ``tol`` relative to the largest term.
    """
    if len(states) != len(processed):
        return ReplayReport(False, 0, step=0, reason="state and update logs differ in length")
    v = np.array(v0, dtype=float)
    applied = np.zeros_like(v)
    largest = 0.0
    worst = 0.0
    for j, msg in enumerate(processed):
        step = eta_bar[msg.i] * msg.U
        v = v - step
        if not np.array_equal(v, states[j]):
            return ReplayReport(False, j, worst, j, "sequential replay differs from server model")
        # every processed update is either in a broadcast round (< k) or in H,
        # so the regrouped invariant is v0 minus the sum of all of them
        applied = applied + step
        largest = max(largest, float(np.max(np.abs(step))) if step.size else 0.0)
        scale = max(1.0, largest * (j + 1))
        err = float(np.max(np.abs((np.asarray(v0) - applied) - v))) / scale
        worst = max(worst, err)
        if err > tol:
            return ReplayReport(False, j, worst, j, f"invariant error {err:.3g} > {tol}")
    return ReplayReport(True, len(processed), worst)


def step_record_to_dict(rec: StepRecord) -> dict[str, Any]:
    inc = rec.included
    out: dict[str, Any] = {"ev": "step", "t": rec.t, "c": rec.c, "i": rec.i, "h": rec.h,
                           "k": rec.k, "t_glob": rec.t_glob, "t_delay": rec.t_delay}
    if isinstance(inc, UpdateSet):
        out["prefix_end"] = inc.prefix_end
        out["rounds"] = sorted([list(p) for p in inc.rounds])
    return out


def step_record_from_dict(obj: dict[str, Any], assignment: Assignment) -> StepRecord:
    inc = UpdateSet(assignment, int(obj["prefix_end"]),
                    frozenset((int(i), int(c)) for i, c in obj.get("rounds", [])),
                    int(obj["c"]), int(obj["i"]), int(obj["h"]))
    return StepRecord(int(obj["t"]), int(obj["c"]), int(obj["i"]), int(obj["h"]),
                      int(obj["k"]), int(obj["t_glob"]), int(obj["t_delay"]), inc)
