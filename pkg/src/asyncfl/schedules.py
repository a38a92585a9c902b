"""Delay functions, sample-size sequences and round step sizes.

A *round* ``i`` bundles ``s_i`` gradient steps (summed over all clients).
The delay function ``tau(t)`` bounds the staleness of the model used for the
gradient at global iteration ``t``.  Sample-size sequences are compatible with
a delay function when, for a round-lag threshold ``d``::

    tau(s_0 + ... + s_i) >= s_{i-d} + ... + s_i      for all i >= d + 1

which is what :func:`check_eq4` verifies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ScheduleError",
    "DelayFunction",
    "SampleSchedule",
    "StepSchedule",
    "Eq4Report",
    "log_gamma",
    "eval_delay",
    "theorem5_sample_sequence",
    "theorem5_pairing",
    "lemma4_sample_sequence",
    "lemma4_delay",
    "lemma5_round_steps",
    "theorem5_round_step",
    "check_eq4",
    "constant_step_sample_cap",
]


class ScheduleError(ValueError):
    """Raised for domain errors and violated schedule preconditions."""


def log_gamma(z: float) -> float:
    """``gamma(z) = 4 ln z``, the strongly convex instantiation."""
    return 4.0 * math.log(z)


# --------------------------------------------------------------------------
# delay functions


@dataclass(frozen=True)
class DelayFunction:
    """Permissible staleness ``tau(t)``.

    kinds:
      * ``sqrt-log``: ``M1 + ((t + M0) / gamma(t + M0)) ** (1/g)``; ``gamma``
        defaults to ``4 ln z``.
      * ``affine``: ``M1 + slope * t`` (``slope`` in [0, 1]; ``M1`` may be
        ``inf`` for an unbounded delay).
      * ``custom``: ``fn(t)`` for callables, or a lookup ``table[t]``.
    """

    kind: str = "affine"
    M0: float = 0.0
    M1: float = 0.0
    g: float = 2.0
    slope: float = 0.0
    gamma: Callable[[float], float] = log_gamma
    fn: Callable[[float], float] | None = None
    table: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("sqrt-log", "affine", "custom"):
            raise ScheduleError(f"unknown delay kind {self.kind!r}")
        if self.M0 < 0 or self.M1 < 0:
            raise ScheduleError("M0 and M1 must be non-negative")
        if self.kind == "sqrt-log" and not self.g > 1:
            raise ScheduleError("g must be > 1")
        if self.kind == "affine" and not 0.0 <= self.slope <= 1.0:
            # t - tau(t) must stay non-decreasing
            raise ScheduleError("affine slope must lie in [0, 1]")
        if self.kind == "custom" and self.fn is None and self.table is None:
            raise ScheduleError("custom delay needs fn or table")

    def __call__(self, t: float) -> float:
        return eval_delay(self, t)

    @classmethod
    def constant(cls, value: float) -> "DelayFunction":
        return cls(kind="affine", M1=value)

    @classmethod
    def unbounded(cls) -> "DelayFunction":
        return cls(kind="affine", M1=math.inf)


def eval_delay(df: DelayFunction, t: float) -> float:
    """Evaluate ``tau(t)``.

    The log form is undefined when ``t + M0 <= 1``; that is reported as an
    error rather than clamped so a mis-specified ``M0`` surfaces early.
    """
    if t < 0:
        raise ScheduleError(f"iteration index must be >= 0, got {t}")
    if df.kind == "affine":
        return df.M1 + df.slope * t
    if df.kind == "custom":
        if df.fn is not None:
            return float(df.fn(t))
        assert df.table is not None
        idx = int(t)
        if idx >= len(df.table):
            raise ScheduleError(f"delay table has no entry for t={idx}")
        return float(df.table[idx])
    z = t + df.M0
    if z <= 1:
        raise ScheduleError(f"log-form delay needs t + M0 > 1 (got {z})")
    gz = df.gamma(z)
    if gz <= 0:
        raise ScheduleError(f"gamma({z}) = {gz} is not positive")
    return df.M1 + (z / gz) ** (1.0 / df.g)


# --------------------------------------------------------------------------
# sample-size sequences


def theorem5_sample_sequence(d: int, m: float, i: int) -> int:
    """``s_i = ceil((m+i+1) / (16 (d+1)^2) / ln((m+i+1) / (2(d+1))))``."""
    if d < 0 or i < 0:
        raise ScheduleError("d and i must be non-negative")
    x = m + i + 1
    arg = x / (2 * (d + 1))
    if arg <= 1:
        raise ScheduleError(f"log argument {arg} <= 1 at round {i}")
    return max(1, math.ceil(x / (16 * (d + 1) ** 2) / math.log(arg)))


def theorem5_m1(d: int, m: float, two_l_alpha_over_mu: float = 0.0) -> float:
    """The ``M1`` of the strongly convex pairing, evaluated as printed."""
    x = m + 1
    half_ceil = 0.5 * math.ceil(x / (16 * (d + 1) ** 2) / math.log(x / (2 * (d + 1))))
    return max(d + 1.0, two_l_alpha_over_mu, half_ceil)


def theorem5_pairing(d: int, m: float, two_l_alpha_over_mu: float = 0.0
                     ) -> tuple["SampleSchedule", DelayFunction]:
    """Sample schedule and matching ``tau`` for the strongly convex case."""
    sched = SampleSchedule(kind="theorem5", d=d, m=m)
    df = DelayFunction(kind="sqrt-log", M0=(m + 1) ** 2 / 4.0,
                       M1=theorem5_m1(d, m, two_l_alpha_over_mu), g=2.0)
    return sched, df


def _check_gamma(gamma: Callable[[float], float], g: float,
                 points: Sequence[float]) -> None:
    # gamma >= 1, increasing, gamma(z) >= z gamma'(z) g/(g-1), checked on a grid
    for z in points:
        h = max(1e-6, 1e-6 * z)
        gz = gamma(z)
        deriv = (gamma(z + h) - gamma(max(z - h, 0.0))) / (z + h - max(z - h, 0.0))
        if gz < 1:
            raise ScheduleError(f"gamma({z:g}) = {gz:g} < 1")
        if deriv < -1e-9 * max(1.0, abs(gz)):
            raise ScheduleError(f"gamma is decreasing near z={z:g}")
        if gz < z * deriv * g / (g - 1) * (1 - 1e-9):
            raise ScheduleError(
                f"growth condition gamma(z) >= z gamma'(z) g/(g-1) fails at z={z:g}")


def _omega(gamma: Callable[[float], float], g: float, x: float) -> float:
    return gamma((x * (g - 1) / g) ** (g / (g - 1)))


def _big_s(gamma: Callable[[float], float], g: float, x: float) -> float:
    return (x / _omega(gamma, g, x) * (g - 1) / g) ** (1.0 / (g - 1))


def lemma4_sample_sequence(gamma: Callable[[float], float], g: float, d: int,
                           m: int, i: int, *, validate: bool = True) -> int:
    """``s_i = ceil(S((m+i+1)/(d+1)) / (d+1))`` for a user supplied gamma.

    ``S(x) = (x / omega(x) * (g-1)/g) ** (1/(g-1))`` and
    ``omega(x) = gamma((x (g-1)/g) ** (g/(g-1)))``.  With ``validate`` the
    growth conditions on gamma are sampled on a log grid covering the
    arguments used up to round ``i``.
    """
    if g <= 1:
        raise ScheduleError("g must be > 1")
    if d < 0 or m < 0 or i < 0:
        raise ScheduleError("d, m and i must be non-negative")
    x = (m + i + 1) / (d + 1)
    if validate:
        lo = ((m + 1) / (d + 1) * (g - 1) / g) ** (g / (g - 1))
        hi = (x * (g - 1) / g) ** (g / (g - 1))
        _check_gamma(gamma, g, np.geomspace(lo, max(hi, lo * (1 + 1e-9)), 64))
    return max(1, math.ceil(_big_s(gamma, g, x) / (d + 1)))


def lemma4_delay(gamma: Callable[[float], float], g: float, d: int, m: int
                 ) -> DelayFunction:
    """The delay function matching :func:`lemma4_sample_sequence`."""
    M0 = ((m + 1) * (g - 1) / g) ** (g / (g - 1))
    return DelayFunction(kind="sqrt-log", M0=M0, M1=float(d + 1), g=g, gamma=gamma)


@dataclass
class SampleSchedule:
    """Generator of the per-round sample sizes ``s_i``.

    kinds:
      * ``theorem5``: the strongly convex sequence with parameters ``d``, ``m``.
      * ``linear``: ``ceil(a * i**c + b)``, with ``s_0 = max(1, ceil(b))``.
      * ``power-law``: ``ceil(a * (i + m)**p)``, the planner's form
        ``s_{i,c} = ceil(N_c q (i+m)^p)``.
      * ``constant``: ``b`` every round.
      * ``table``: explicit sizes (``sizes``); rounds past the end repeat the
        last entry.
    """

    kind: str = "constant"
    d: int = 0
    m: float = 0.0
    p: float = 1.0
    a: float = 0.0
    b: float = 1.0
    c: float = 1.0
    sizes: tuple[int, ...] = ()
    _prefix: list[int] = field(default_factory=lambda: [0], init=False, repr=False)
    _cache: list[int] = field(default_factory=list, init=False, repr=False)

    def __post_init__(self) -> None:
        if self.kind not in ("theorem5", "linear", "power-law", "constant", "table"):
            raise ScheduleError(f"unknown sample schedule kind {self.kind!r}")
        if self.kind == "table":
            if not self.sizes or min(self.sizes) < 1:
                raise ScheduleError("table schedule needs positive sizes")
            self.sizes = tuple(int(x) for x in self.sizes)
        if self.kind == "constant" and (self.b < 1 or self.b != int(self.b)):
            raise ScheduleError("constant schedule needs an integer size >= 1")
        if self.kind == "power-law" and self.a <= 0:
            raise ScheduleError("power-law schedule needs a > 0")

    @classmethod
    def constant(cls, s: int) -> "SampleSchedule":
        return cls(kind="constant", b=s)

    @classmethod
    def from_sizes(cls, sizes: Sequence[int]) -> "SampleSchedule":
        return cls(kind="table", sizes=tuple(sizes))

    def _compute(self, i: int) -> int:
        k = self.kind
        if k == "theorem5":
            return theorem5_sample_sequence(self.d, self.m, i)
        if k == "constant":
            return int(self.b)
        if k == "table":
            return self.sizes[min(i, len(self.sizes) - 1)]
        if k == "linear":
            if i == 0:
                return max(1, math.ceil(self.b))
            return max(1, _ceil(self.a * i ** self.c + self.b))
        return max(1, _ceil(self.a * (i + self.m) ** self.p))

    def size(self, i: int) -> int:
        if i < 0:
            raise ScheduleError("round index must be >= 0")
        while len(self._cache) <= i:
            s = self._compute(len(self._cache))
            self._cache.append(s)
            self._prefix.append(self._prefix[-1] + s)
        return self._cache[i]

    __getitem__ = size

    def prefix(self, i: int) -> int:
        """``s_0 + ... + s_{i-1}`` as an exact integer (``prefix(0) == 0``)."""
        if i > 0:
            self.size(i - 1)
        return self._prefix[i]

    def sizes_upto(self, n: int) -> list[int]:
        if n > 0:
            self.size(n - 1)
        return list(self._cache[:n])

    def rounds_for_budget(self, K: int) -> list[int]:
        """Sizes of the rounds spending exactly ``K`` steps (last one trimmed)."""
        if K < 1:
            raise ScheduleError("budget must be >= 1")
        out: list[int] = []
        total = 0
        i = 0
        while total < K:
            s = min(self.size(i), K - total)
            out.append(s)
            total += s
            i += 1
        return out


def _ceil(x: float) -> int:
    # float noise like 16.000000000000004 must not bump a size by one
    r = round(x)
    if abs(x - r) <= 1e-9 * max(1.0, abs(x)):
        return int(r)
    return math.ceil(x)


# --------------------------------------------------------------------------
# step sizes


@dataclass(frozen=True)
class StepSchedule:
    """Round step sizes ``eta_bar_i`` and per-iteration ``eta_t``.

    kinds:
      * ``constant``: ``eta0`` everywhere.
      * ``iteration-diminishing``: ``eta_t = eta0 / (1 + beta * t**power)``
        (``power`` 1 or 0.5); the round step is ``eta_t`` at the first
        iteration of the round.
      * ``round-diminishing``: ``a0 / (prefix_i + E_bar_{i-1}) ** q`` with
        ``E_t = E0`` constant unless ``E`` is given.
    """

    kind: str = "constant"
    eta0: float = 0.1
    beta: float = 0.0
    power: float = 1.0
    a0: float = 1.0
    q: float = 1.0
    E0: float = 1.0
    mu: float = 0.0
    E: Callable[[float], float] | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("constant", "iteration-diminishing", "round-diminishing"):
            raise ScheduleError(f"unknown step schedule kind {self.kind!r}")
        if self.kind != "round-diminishing" and self.eta0 <= 0:
            raise ScheduleError("eta0 must be positive")

    def eta_t(self, t: int) -> float:
        if self.kind == "constant":
            return self.eta0
        if self.kind == "iteration-diminishing":
            return self.eta0 / (1.0 + self.beta * t ** self.power)
        e = self.E(t) if self.E is not None else self.E0
        return self.a0 / (t + e) ** self.q

    def round_step(self, sched: SampleSchedule, i: int) -> float:
        if self.kind == "round-diminishing":
            e_fn = self.E if self.E is not None else (lambda _t: self.E0)
            return lemma5_round_steps(sched, self.a0, self.q, e_fn, i)
        return self.eta_t(sched.prefix(i))


def lemma5_round_steps(sample_schedule: SampleSchedule, a0: float, q: float,
                       E_sequence: Callable[[float], float], i: int,
                       *, validate: bool = True) -> float:
    """``eta_bar_i = a0 / (prefix_i + E_bar_{i-1}) ** q``.

    ``E_bar_i = E(s_0 + ... + s_i)`` and ``E_bar_{-1} = E(0)``.  The
    preconditions ``E_bar_i <= 2 E_bar_{i-1}`` (for all rounds up to ``i``)
    and ``s_0 - 1 <= E_0`` are checked when ``validate`` is set.
    """
    if i < 0:
        raise ScheduleError("round index must be >= 0")
    E0 = E_sequence(0)
    if validate:
        s0 = sample_schedule.size(0)
        if s0 - 1 > E0:
            raise ScheduleError(f"precondition s_0 - 1 <= E_0 fails: s_0={s0}, E_0={E0}")
        prev = E0
        for j in range(i + 1):
            cur = E_sequence(sample_schedule.prefix(j + 1))
            if cur > 2 * prev * (1 + 1e-12):
                raise ScheduleError(
                    f"precondition E_bar_i <= 2 E_bar_(i-1) fails at i={j}: {cur} > 2*{prev}")
            prev = cur
    e_prev = E0 if i == 0 else E_sequence(sample_schedule.prefix(i))
    return a0 / (sample_schedule.prefix(i) + e_prev) ** q


def theorem5_round_step(mu: float, d: int, m: float, i: int,
                        two_l_alpha_over_mu: float = 0.0) -> float:
    """Closed form round step of the strongly convex pairing."""
    sched, df = theorem5_pairing(d, m, two_l_alpha_over_mu)
    pre = sched.prefix(i)
    z = (m + 1) ** 2 / 4.0 + pre
    return 12.0 / mu / (pre + 2 * df.M1 + math.sqrt(z / math.log(z)))


# --------------------------------------------------------------------------
# compatibility check


@dataclass(frozen=True)
class Eq4Report:
    ok: bool
    d: int
    i_max: int
    first_violation: int | None = None
    lhs: float | None = None
    rhs: int | None = None

    def __str__(self) -> str:
        if self.ok:
            return (f"OK: tau(prefix) >= window sum for all i in "
                    f"[{self.d + 1}, {self.i_max}] (d={self.d})")
        return (f"VIOLATED at i={self.first_violation}: tau={self.lhs:.15g} < "
                f"window sum={self.rhs} (d={self.d})")


def check_eq4(sample_schedule: SampleSchedule, df: DelayFunction, d: int,
              i_max: int) -> Eq4Report:
    """Check ``tau(s_0+...+s_i) >= s_{i-d}+...+s_i`` for ``i`` in ``[d+1, i_max]``."""
    if d < 0:
        raise ScheduleError("d must be >= 0")
    if i_max < d + 1:
        raise ScheduleError(f"i_max must be >= d + 1 = {d + 1}")
    for i in range(d + 1, i_max + 1):
        total = sample_schedule.prefix(i + 1)
        window = total - sample_schedule.prefix(i - d)
        tau = eval_delay(df, total)
        if tau < window:
            return Eq4Report(False, d, i_max, i, tau, window)
    return Eq4Report(True, d, i_max)


def constant_step_sample_cap(eta: float, mu: float, d: int) -> int:
    """Largest constant sample size with ``(d+1) s <= 1 / (eta mu)``."""
    if eta <= 0 or mu <= 0:
        raise ScheduleError("eta and mu must be positive")
    if d < 0:
        raise ScheduleError("d must be >= 0")
    x = 1.0 / (eta * mu * (d + 1))
    return math.floor(x * (1 + 1e-12))
