"""Moments accountant for subsampled Gaussian rounds, and the parameter planner.

Every round ``i`` samples ``s_i`` of a client's ``N_c`` examples, sums clipped
gradients and adds ``N(0, C^2 sigma^2 I)`` noise.  The log moment of one round
is bounded by :func:`lemma3_moment_bound`; summing over rounds and minimising
over the moment order gives :func:`numeric_delta`.  :func:`theorem3_sigma`
turns the same bound into a closed-form noise requirement.

The planner (:func:`plan_parameters`) picks an increasing per-client schedule
``s_{i,c} = ceil(N_c q (i+m)^p)`` for a budget of ``K`` gradient computations,
trading rounds for larger local batches while keeping the privacy budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "PrivacyError",
    "PlanInfeasible",
    "ScheduleMoments",
    "DPParams",
    "RegimeBounds",
    "PrivacyPlan",
    "SIGMA_MIN",
    "schedule_moments",
    "lemma3_r",
    "lemma3_moment_bound",
    "numeric_delta",
    "c_function",
    "theorem3_sigma",
    "solve_r0",
    "b_closed_form",
    "regime_coefficients",
    "regime_bounds",
    "plan_parameters",
]

E = math.e
SQRT3_HALF = (math.sqrt(3.0) - 1.0) / 2.0
# smallest noise multiplier for which the r0 iteration keeps u0, u1 < 1
SIGMA_MIN = 1.137
LAMBDA_CAP = 10_000


class PrivacyError(ValueError):
    """Domain or precondition failure in the accountant."""


class PlanInfeasible(PrivacyError):
    """The requested plan cannot meet its privacy target."""


# --------------------------------------------------------------------------
# schedule moments


@dataclass(frozen=True)
class ScheduleMoments:
    """Averaged powers of the per-round sampling ratios.

    ``S_j = (1/T) sum_i s_i^j / (N (N - s_i)^(j-1))`` for ``j = 1, 2, 3``;
    ``rho = S1 S3 / S2^2`` and ``rho_hat = S1^2 / S2``.
    """

    T: int
    S1: float
    S2: float
    S3: float
    rho: float
    rho_hat: float

    def __post_init__(self) -> None:
        if self.T < 1:
            raise PrivacyError("moments need at least one round")
        if min(self.S1, self.S2, self.S3, self.rho, self.rho_hat) <= 0:
            raise PrivacyError("moments must be positive")


def schedule_moments(sizes: Sequence[float], N_c: int) -> ScheduleMoments:
    """Exact moments of a concrete schedule of per-client sample sizes."""
    s = np.asarray(sizes, dtype=float)
    if s.ndim != 1 or s.size == 0:
        raise PrivacyError("schedule must be a non-empty 1-d sequence")
    if np.any(s <= 0) or np.any(s >= N_c):
        bad = int(np.argmax((s <= 0) | (s >= N_c)))
        raise PrivacyError(f"need 0 < s < N_c; round {bad} has s={s[bad]:g}, N_c={N_c}")
    N = float(N_c)
    rest = N - s
    S1 = float(np.mean(s / N))
    S2 = float(np.mean(s**2 / (N * rest)))
    S3 = float(np.mean(s**3 / (N * rest**2)))
    return ScheduleMoments(T=int(s.size), S1=S1, S2=S2, S3=S3,
                           rho=S1 * S3 / S2**2, rho_hat=S1**2 / S2)


# --------------------------------------------------------------------------
# per-round moment bound


def lemma3_r(r0: float, sigma: float) -> tuple[float, float, float]:
    """Constants ``(u0, u1, r)`` of the higher-order moment term.

    ``u0 = 2 sqrt(r0 sigma) / (sigma - r0)``, ``u1 = u0 e / sigma`` and
    ``r = 8 r0 (1/(1-u0) + e^3 / ((1-u1) sigma^3)) exp(3/sigma^2)``.
    """
    if not r0 > 0:
        raise PrivacyError(f"need r0 > 0, got {r0}")
    if not sigma > r0:
        raise PrivacyError(f"need sigma > r0, got sigma={sigma}, r0={r0}")
    root = math.sqrt(r0 * sigma)
    u0 = 2.0 * root / (sigma - r0)
    u1 = 2.0 * E * root / ((sigma - r0) * sigma)
    if not u0 < 1:
        raise PrivacyError(f"need u0 < 1, got u0={u0:.6g} (r0={r0}, sigma={sigma})")
    if not u1 < 1:
        raise PrivacyError(f"need u1 < 1, got u1={u1:.6g} (r0={r0}, sigma={sigma})")
    r = r0 * 8.0 * (1.0 / (1.0 - u0) + E**3 / ((1.0 - u1) * sigma**3)) * math.exp(3.0 / sigma**2)
    return u0, u1, r


def _lambda_max(s: np.ndarray, N_c: float, sigma: float) -> int:
    with np.errstate(divide="ignore"):
        lim = np.floor(sigma**2 * np.log(N_c / (s * sigma)))
    return int(min(float(lim.min()), LAMBDA_CAP))


def lemma3_moment_bound(s: float, N_c: int, sigma: float, lam: int, r: float,
                        r0: float) -> float:
    """Log-moment bound of one subsampled Gaussian round at order ``lam``."""
    if lam < 1 or lam != int(lam):
        raise PrivacyError(f"moment order must be a positive integer, got {lam}")
    if not 0 < s < N_c:
        raise PrivacyError(f"need 0 < s < N_c, got s={s}, N_c={N_c}")
    if s / N_c > r0 / sigma * (1 + 1e-12):
        raise PrivacyError(f"sampling rate {s / N_c:.6g} exceeds r0/sigma = {r0 / sigma:.6g}")
    lmax = sigma**2 * math.log(N_c / (s * sigma))
    if lam > lmax:
        raise PrivacyError(f"moment order {lam} exceeds sigma^2 ln(N/(s sigma)) = {lmax:.6g}")
    N = float(N_c)
    return (s * s * lam * (lam + 1) / (N * (N - s) * sigma**2)
            + (r / r0) * s**3 * lam * lam * (lam + 1) / (N * (N - s) ** 2 * sigma**3))


def numeric_delta(sizes: Sequence[float], N_c: int, sigma: float, epsilon: float,
                  r: float, r0: float) -> tuple[float, int]:
    """Smallest ``delta`` certified by composing the per-round bounds.

    Returns ``(delta, lam)`` with ``delta = min_lam exp(sum_i bound_i(lam) - lam eps)``
    over the integers ``1 <= lam <= min_i floor(sigma^2 ln(N/(s_i sigma)))``
    (capped at 10^4).
    """
    s = np.asarray(sizes, dtype=float)
    if s.size == 0:
        raise PrivacyError("empty schedule")
    if np.any(s <= 0) or np.any(s >= N_c):
        raise PrivacyError("need 0 < s < N_c in every round")
    if np.any(s / N_c > r0 / sigma * (1 + 1e-12)):
        raise PrivacyError("a round's sampling rate exceeds r0/sigma")
    lmax = _lambda_max(s, float(N_c), sigma)
    if lmax < 1:
        raise PrivacyError("no admissible moment order (sigma^2 ln(N/(s sigma)) < 1)")
    N = float(N_c)
    quad = float(np.sum(s**2 / (N * (N - s)))) / sigma**2
    cubic = float(np.sum(s**3 / (N * (N - s) ** 2))) / sigma**3 * (r / r0)
    lam = np.arange(1, lmax + 1, dtype=float)
    log_delta = quad * lam * (lam + 1) + cubic * lam * lam * (lam + 1) - lam * epsilon
    j = int(np.argmin(log_delta))
    return math.exp(float(log_delta[j])), j + 1


# --------------------------------------------------------------------------
# closed-form noise requirement


def c_function(x: float, r: float, rho: float, rho_hat: float) -> float:
    """``c(x) = min{(sqrt(2 r rho x + 1) - 1)/(r rho x), 2/(rho_hat x)}``.

    The first branch is evaluated as ``2/(sqrt(2 r rho x + 1) + 1)`` which is
    algebraically equal and does not cancel for small ``x``.
    """
    if x <= 0:
        raise PrivacyError("c(x) needs x > 0")
    first = 2.0 / (math.sqrt(2.0 * r * rho * x + 1.0) + 1.0)
    return min(first, 2.0 / (rho_hat * x))


def theorem3_sigma(moments: ScheduleMoments, epsilon: float, delta: float,
                   r: float) -> float:
    """Noise multiplier sufficient for ``(epsilon, delta)``-DP over the schedule."""
    if not epsilon > 0:
        raise PrivacyError(f"epsilon must be positive, got {epsilon}")
    if not 0 < delta < 1:
        raise PrivacyError(f"delta must lie in (0, 1), got {delta}")
    T = moments.T
    c1 = epsilon / (T * moments.S1**2)
    c0 = c_function(c1, r, moments.rho, moments.rho_hat)
    return 2.0 / math.sqrt(c0) * math.sqrt(moments.S2 * T * math.log(1.0 / delta)) / epsilon


# --------------------------------------------------------------------------
# r0 fixed point and regime coefficients


def solve_r0(sigma: float, p: float, *, tol: float = 1e-12, max_iter: int = 10_000) -> float:
    """Fixed point ``r0(sigma)`` balancing the two moment terms.

    Iterates from ``r0 = 0``; every iterate stays below ``(sqrt(3)-1)/16``.
    """
    if sigma < SIGMA_MIN:
        raise PrivacyError(f"sigma must be >= {SIGMA_MIN}, got {sigma}")
    if not 0 <= p <= 1:
        raise PrivacyError(f"p must lie in [0, 1], got {p}")
    lead = SQRT3_HALF * (3 * p + 1) / ((p + 1) * (2 * p + 1))
    tail = E**3 / sigma**3
    growth = 8.0 * math.exp(3.0 / sigma**2)
    r0 = 0.0
    for _ in range(max_iter):
        root = math.sqrt(r0 * sigma)
        gap = sigma - r0
        den = growth * (gap / (gap - 2.0 * root)
                        + gap * sigma / (gap * sigma - 2.0 * E * root) * tail)
        nxt = lead * (1.0 - r0 / sigma) ** 2 / den
        if abs(nxt - r0) < tol:
            return nxt
        r0 = nxt
    raise PrivacyError(f"r0 iteration did not converge for sigma={sigma}, p={p}")


def b_closed_form(p: float) -> float:
    """``B(p) = ((sqrt(3)-1)/2 (2p+1))^((1+p)/(1+2p)) / (1+p)`` at ``r0 = r0(sigma)``."""
    return (SQRT3_HALF * (2 * p + 1)) ** ((1 + p) / (1 + 2 * p)) / (1 + p)


def regime_coefficients(p: float, r: float, gamma: float, alpha: float
                        ) -> tuple[float, float]:
    """General ``(A, B)`` for an arbitrary ``r0`` with ``alpha = r0/sigma``."""
    e1 = (1 + p) / (1 + 2 * p)
    g1 = 1.0 + gamma
    A = ((p + 1) ** (-p / (1 + 2 * p))
         * (r * (2 * p + 1) ** 2 / (3 * p + 1) * g1 ** (3 * (1 + 2 * p)) / (1 - alpha) ** 2) ** e1)
    x = 2 * r * (p + 1) * (2 * p + 1) * g1 ** (2 * p) / ((3 * p + 1) * (1 - alpha) ** 2) + 1.0
    B = A * g1 ** (-(1 + p) * (3 + 4 * p) / (1 + 2 * p)) * (2.0 / (x * x - 1.0)) ** e1
    return A, B


@dataclass(frozen=True)
class RegimeBounds:
    """Thresholds on the gradient budget ``K`` for a base sampling rate ``q``."""

    A: float
    B: float
    D: float
    K_minus: float
    K_plus: float
    K_star: float
    r0: float
    closed_form: bool


def regime_bounds(p: float, r0: float | None, sigma: float, epsilon: float, q: float,
                  N_c: float, gamma: float = 0.0) -> RegimeBounds:
    """``K^- = B eps^a q^-b N_c``, ``K^+`` with ``A`` in place of ``B``, ``K* = D q^(-1/p) N_c``.

    ``a = (1+p)/(1+2p)``, ``b = 1/(1+2p)``.  With ``r0=None`` the fixed point
    ``r0(sigma)`` is used together with the closed-form ``B(p)``; an explicit
    ``r0`` switches to the general expressions.  ``K*`` is infinite at ``p = 0``.
    """
    if not 0 <= p <= 1:
        raise PrivacyError(f"p must lie in [0, 1], got {p}")
    if not 0 < q < 1:
        raise PrivacyError(f"q must lie in (0, 1), got {q}")
    if gamma < 0:
        raise PrivacyError("gamma must be non-negative")
    closed = r0 is None
    if closed:
        r0 = solve_r0(sigma, p)
        B = b_closed_form(p)
        A = B * (1 + gamma) ** ((3 + 4 * p) * (1 + p) / (1 + 2 * p))
    else:
        if r0 > 1 / E * (1 + 1e-12):
            raise PrivacyError(f"r0 must be <= 1/e, got {r0}")
        _, _, r = lemma3_r(r0, sigma)
        A, B = regime_coefficients(p, r, gamma, r0 / sigma)
    a = (1 + p) / (1 + 2 * p)
    scale = epsilon**a * q ** (-1.0 / (1 + 2 * p)) * N_c
    if p == 0:
        D = math.inf
        K_star = math.inf
    else:
        D = (r0 / sigma) ** ((1 + p) / p) / (p + 1) * (1 + gamma) ** (1 + p)
        K_star = D * q ** (-1.0 / p) * N_c
    return RegimeBounds(A=A, B=B, D=D, K_minus=B * scale, K_plus=A * scale,
                        K_star=K_star, r0=r0, closed_form=closed)


# --------------------------------------------------------------------------
# planner


@dataclass(frozen=True)
class DPParams:
    """Noise and sampling constants of a plan, validated on construction."""

    sigma: float
    C: float
    epsilon: float
    delta: float
    r0: float
    r: float
    u0: float
    u1: float
    p: float
    q: float
    m: float
    gamma: float
    alpha: float

    def __post_init__(self) -> None:
        if self.r0 > 1 / E * (1 + 1e-12):
            raise PrivacyError("r0 must be <= 1/e")
        if not (self.u0 < 1 and self.u1 < 1):
            raise PrivacyError("u0 and u1 must be < 1")
        if self.alpha > self.r0 / self.sigma * (1 + 1e-12):
            raise PrivacyError("alpha must be <= r0/sigma")


@dataclass
class PrivacyPlan:
    """Result of :func:`plan_parameters`.

    ``T`` is the round count of the planning formula; ``schedule`` spends
    exactly ``K`` steps (its last round trimmed), so ``len(schedule)`` may be
    below ``T``.  ``budget`` is the achievable ``sqrt(2 ln(1/delta)/eps)``.
    """

    s0c: int
    N_c: int
    p: float
    epsilon: float
    sigma: float
    K: int
    case: int
    r0: float
    r: float
    u0: float
    u1: float
    q: float
    m: float
    T: int
    gamma: float
    budget: float
    delta: float
    K_minus: float
    K_plus: float
    K_star: float
    k_factor: float
    iterations: int
    c1_hat: float
    jump_factor: float
    schedule: list[int] = field(default_factory=list)
    T_const: int = 0
    aggregated_noise: float = 0.0
    baseline_noise: float = 0.0
    max_sampling_rate: float = 0.0
    cap_ok: bool = True
    case_ok: bool = True

    @property
    def alpha(self) -> float:
        return self.r0 / self.sigma

    @property
    def reduction(self) -> float:
        """Rounds relative to the constant-size baseline."""
        return self.T / self.T_const

    def size(self, i: int) -> int:
        return int(_sizes(self.N_c, self.q, self.m, self.p, np.array([i]))[0])

    def records(self) -> list[tuple[str, object]]:
        keys = ["s0c", "N_c", "p", "epsilon", "sigma", "K", "case", "k_factor", "r0", "r",
                "u0", "u1", "q", "m", "T", "gamma", "budget", "delta", "K_minus", "K_plus",
                "K_star", "iterations", "c1_hat", "jump_factor", "T_const", "reduction",
                "aggregated_noise", "baseline_noise", "max_sampling_rate", "alpha",
                "cap_ok", "case_ok"]
        return [(k, getattr(self, k)) for k in keys]


def _sizes(N_c: int, q: float, m: float, p: float, idx: np.ndarray) -> np.ndarray:
    """``ceil(N_c q (i + m)^p)``, treating values within 1e-9 of an integer as exact."""
    raw = N_c * q * (idx + m) ** p
    near = np.round(raw)
    exact = np.abs(raw - near) <= 1e-9 * np.maximum(1.0, np.abs(raw))
    return np.where(exact, near, np.ceil(raw)).astype(np.int64)


def _parse_r0(r0: float | str | None) -> float | None:
    if r0 is None or isinstance(r0, float | int):
        return None if r0 is None else float(r0)
    text = r0.strip().lower()
    if text in ("fixed-point", "fixed", "auto"):
        return None
    if text == "1/e":
        return 1 / E
    return float(text)


def plan_parameters(s0c: int, N_c: int, p: float, epsilon: float, sigma: float, K: int,
                    case: int = 1, r0: float | str | None = None, *, k_factor: float = 1.5,
                    delta_target: float | None = None, tol: float = 1e-6,
                    max_iter: int = 50) -> PrivacyPlan:
    """Choose ``q, m, T`` for a budget of ``K`` gradient computations per client.

    ``r0=None`` (or ``"fixed-point"``) uses ``r0(sigma)`` with the closed-form
    coefficients; a number (or ``"1/e"``) uses the general expressions.

    Each iteration takes the largest ``q`` allowed by ``K <= K^-`` (case 1)
    or ``K = k K^+`` (case 2) together with ``K <= K*`` evaluated at
    ``gamma = 0``; then ``m = (s0c/(N_c q))^(1/p)``,
    ``T = ceil(((p+1) K / (N_c q))^(1/(1+p)))`` and ``gamma = m/T``, until
    ``gamma`` moves by less than ``tol``.
    """
    if case not in (1, 2):
        raise PrivacyError("case must be 1 or 2")
    if not 0 < p <= 1:
        raise PrivacyError(f"planner needs p in (0, 1], got {p}")
    if s0c < 1 or N_c <= s0c or K < s0c:
        raise PrivacyError("need 1 <= s0c < N_c and K >= s0c")
    if epsilon <= 0 or sigma <= 0:
        raise PrivacyError("epsilon and sigma must be positive")
    if case == 2 and k_factor < 1:
        raise PrivacyError("k_factor must be >= 1")
    r0_val = _parse_r0(r0)
    closed = r0_val is None
    if closed:
        r0_val = solve_r0(sigma, p)
    u0, u1, r = lemma3_r(r0_val, sigma)
    alpha = r0_val / sigma
    e_q = 1 + 2 * p
    a = (1 + p) / e_q
    D0 = alpha ** ((1 + p) / p) / (p + 1)
    q_star = (D0 * N_c / K) ** p

    gamma = 0.0
    it = 0
    converged = False
    while it < max_iter:
        it += 1
        if closed:
            B = b_closed_form(p)
            A = B * (1 + gamma) ** ((3 + 4 * p) * (1 + p) / e_q)
        else:
            A, B = regime_coefficients(p, r, gamma, alpha)
        coef = B if case == 1 else k_factor * A
        q = min((coef * epsilon**a * N_c / K) ** e_q, q_star)
        m = (s0c / (N_c * q)) ** (1 / p)
        T = math.ceil(((p + 1) * K / (N_c * q)) ** (1 / (1 + p)) - 1e-9)
        new_gamma = m / T
        if abs(new_gamma - gamma) < tol:
            gamma = new_gamma
            converged = True
            break
        gamma = new_gamma
    if not converged:
        raise PlanInfeasible(f"gamma iteration did not settle within {max_iter} iterations")

    bounds = regime_bounds(p, None if closed else r0_val, sigma, epsilon, q, N_c, gamma)
    g1 = 1 + gamma
    if case == 1:
        jump = 1.0
        budget = sigma * math.sqrt(1 - alpha) / g1 ** (2 + 3 * p)
    else:
        kpow = k_factor ** ((1 + 2 * p) / (2 + 2 * p))
        if closed:
            jump = 2.0 * math.sqrt(SQRT3_HALF)
            budget = sigma * math.sqrt(1 - alpha) / (kpow * jump * g1 ** (2 + 3 * p))
        else:
            jump = 2.0 / (1 - alpha) ** 1.5 * math.sqrt(r * (p + 1) * (2 * p + 1) / (3 * p + 1))
            budget = sigma / (kpow * jump * g1 ** (2 * (1 + 2 * p)))
    delta = math.exp(-epsilon * budget**2 / 2)
    if delta_target is not None and delta > delta_target:
        need = sigma * math.sqrt(2 * math.log(1 / delta_target) / epsilon) / budget
        raise PlanInfeasible(
            f"achievable delta {delta:.3g} exceeds target {delta_target:.3g}; "
            f"sigma of about {need:.4g} would be needed")

    plan = PrivacyPlan(
        s0c=s0c, N_c=N_c, p=p, epsilon=epsilon, sigma=sigma, K=K, case=case, r0=r0_val,
        r=r, u0=u0, u1=u1, q=q, m=m, T=T, gamma=gamma, budget=budget, delta=delta,
        K_minus=bounds.K_minus, K_plus=bounds.K_plus, K_star=bounds.K_star,
        k_factor=k_factor if case == 2 else 1.0, iterations=it,
        c1_hat=epsilon * s0c / (q * q * K), jump_factor=jump)
    # sizes never drop below size(0) >= 1, so K rounds always suffice
    n_max = math.ceil(K / max(1, int(_sizes(N_c, q, m, p, np.array([0]))[0]))) + 1
    sizes = _sizes(N_c, q, m, p, np.arange(n_max))
    spent = np.cumsum(sizes)
    last = int(np.searchsorted(spent, K))
    sched = sizes[: last + 1].tolist()
    sched[-1] -= int(spent[last]) - K
    plan.schedule = sched
    plan.T_const = math.ceil(K / s0c)
    plan.aggregated_noise = math.sqrt(T) * sigma
    plan.baseline_noise = math.sqrt(plan.T_const) * budget
    plan.max_sampling_rate = int(_sizes(N_c, q, m, p, np.arange(T)).max()) / N_c
    plan.cap_ok = plan.max_sampling_rate <= alpha * (1 + 1e-12)
    # q was fixed one gamma-iterate earlier, so allow the iteration tolerance
    slack = 10 * tol
    if case == 1:
        plan.case_ok = K <= bounds.K_minus * (1 + slack) and K <= bounds.K_star * (1 + slack)
    else:
        plan.case_ok = K >= bounds.K_plus * (1 - slack)
    return plan
