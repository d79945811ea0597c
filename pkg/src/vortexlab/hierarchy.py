"""ODE hierarchy tools: growth functions, iterated integrals, Beta tails and envelopes.

The hierarchy in the equality form is

    x_k' = -c1 y_k + c2 y_{k+1} 1{k<N} + h x_k + k h (x_{k+1} - x_k) 1{k<N} + (k/N)^2 h

and its coefficients after Gronwall iteration are the iterated integrals A_k^l,
B_k^l with closed forms

    B_k^l = C(l-1, k-1) (1 - e^{-phi})^{l-k} e^{-k phi}
    A_k^l = P(Y > e^{-phi}),  Y ~ Beta(k, l-k+1).
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import betainc, gammaln, roots_legendre

from .kernel import InvalidParameter


class DepthLimitExceeded(ValueError):
    pass


class HierarchyInstability(RuntimeError):
    """Step refinement does not converge."""


@dataclass(frozen=True)
class GrowthFunction:
    """``h`` and its antiderivative ``phi`` (phi(0) = 0).

    ``log``: h = C (1 + log(1+t)) / (1+t), phi = C (log(1+t) + log(1+t)^2 / 2).
    ``constant``:  h = gamma, phi = gamma t.
    """

    kind: str = "log"
    C: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("log", "constant"):
            raise InvalidParameter(f"unknown growth family {self.kind!r}")
        if self.kind == "log" and not self.C > 0:
            raise InvalidParameter(f"C must be > 0, got {self.C}")
        if self.kind == "constant" and not self.gamma >= 0:
            raise InvalidParameter(f"gamma must be >= 0, got {self.gamma}")

    def h(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "constant":
            return np.full_like(t, self.gamma)[()]
        lg = np.log1p(t)
        return (self.C * (1 + lg) / (1 + t))[()]

    f = h  # rate appearing in the iterated integrals

    def phi(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "constant":
            return (self.gamma * t)[()]
        lg = np.log1p(t)
        return (self.C * (lg + 0.5 * lg * lg))[()]

    def h_max(self, t_final: float) -> float:
        # both families have non-increasing h
        return float(self.h(0.0))


def phi(growth: GrowthFunction, t):
    if np.any(np.asarray(t) < 0):
        raise InvalidParameter("phi needs t >= 0")
    return growth.phi(t)


@dataclass(frozen=True)
class IteratedIntegralQuery:
    k: int
    l: int
    t: float
    growth: GrowthFunction = GrowthFunction()

    def __post_init__(self):
        if self.k < 1 or self.l < self.k:
            raise InvalidParameter(f"need 1 <= k <= l, got k={self.k}, l={self.l}")
        if not self.t >= 0:
            raise InvalidParameter(f"need t >= 0, got {self.t}")


def log_binom(n, r):
    return gammaln(n + 1) - gammaln(r + 1) - gammaln(n - r + 1)


def b_closed(q: IteratedIntegralQuery) -> float:
    p = float(q.growth.phi(q.t))
    k, l = q.k, q.l
    if l == k:
        return math.exp(-k * p)
    if p == 0.0:
        return 0.0
    logb = log_binom(l - 1, k - 1) + (l - k) * math.log(-math.expm1(-p)) - k * p
    return math.exp(logb)


def a_closed(q: IteratedIntegralQuery) -> float:
    p = float(q.growth.phi(q.t))
    k, l = q.k, q.l
    # P(Beta(k, l-k+1) > e^{-p}) = P(Beta(l-k+1, k) < 1 - e^{-p})
    return float(betainc(l - k + 1, k, -math.expm1(-p)))


def _chain(growth, js, base, t, n):
    """Evaluate F_{js[0]}(t) where F_j(t) = j int_0^t e^{-j(phi(t)-phi(s))} f(s) F_{j+1}(s) ds."""
    x, w = roots_legendre(n)
    x = (x + 1) / 2
    w = w / 2

    def F(level, tt):
        if level == len(js):
            return base(tt)
        j = js[level]
        s = tt[..., None] * x
        inner = F(level + 1, s)
        kern = np.exp(-j * (growth.phi(tt)[..., None] - growth.phi(s))) * growth.f(s)
        return j * tt * np.sum(w * kern * inner, axis=-1)

    return F(0, np.asarray(t, dtype=float))


def iterated_quadrature(q: IteratedIntegralQuery, kind: str, rtol: float = 1e-10,
                        max_depth: int = 5) -> float:
    """Literal nested quadrature of the iterated integral (no closed form used).

    Gauss-Legendre order per level is doubled until two successive values agree
    to ``rtol``; the integrands are smooth so this converges geometrically.
    """
    k, l = q.k, q.l
    g = q.growth
    if kind == "B":
        if l == k:
            return math.exp(-k * float(g.phi(q.t)))
        js = list(range(k, l))
        lk = l

        def base(s):
            return np.exp(-lk * g.phi(s))
    elif kind == "A":
        js = list(range(k, l + 1))

        def base(s):
            return np.ones_like(s)
    else:
        raise InvalidParameter(f"kind must be 'A' or 'B', got {kind!r}")
    if len(js) > max_depth:
        raise DepthLimitExceeded(f"{len(js)} nested integrals exceed the limit {max_depth}")
    if q.t == 0.0:
        return 0.0 if kind == "A" else float(k == l)
    prev = None
    n = 8
    budget = 2.0e7  # cap on n^depth points
    while True:
        val = float(_chain(g, js, base, q.t, n))
        if prev is not None and abs(val - prev) <= rtol * max(abs(val), 1e-300):
            return val
        if (2 * n) ** len(js) > budget:
            return val
        prev = val
        n *= 2


def recurrence_check(k: int, l: int, t: float, growth: GrowthFunction, h: float = 1e-5) -> dict:
    """Residuals of the B-hierarchy ODE, the A-B identity and the telescoping sum."""
    if not k < l:
        raise InvalidParameter("recurrence_check needs k < l")

    def B(kk, tt):
        return b_closed(IteratedIntegralQuery(kk, l, tt, growth))

    def A(ll, tt=t):
        return a_closed(IteratedIntegralQuery(k, ll, tt, growth))

    lo = max(t - h, 0.0)
    dB = (B(k, t + h) - B(k, lo)) / (t + h - lo)
    f = float(growth.f(t))
    ode = dB - (-k * f * B(k, t) + k * f * B(k + 1, t))
    ab = A(l) - A(l - 1) + B(k, t)
    tele = A(l) - math.fsum([A(k)] + [-b_closed(IteratedIntegralQuery(k, j, t, growth))
                                      for j in range(k + 1, l + 1)])
    return {"b_ode": ode, "ab_identity": ab, "telescoping": tele}


def beta_tail_bound(k: int, l: int, threshold: float):
    """``(bound, exact)`` for P(Y > threshold), Y ~ Beta(k, l-k+1)."""
    if not 0.0 <= threshold <= 1.0:
        raise InvalidParameter(f"threshold must lie in [0, 1], got {threshold}")
    if k < 1 or l < k:
        raise InvalidParameter(f"need 1 <= k <= l, got k={k}, l={l}")
    gap = max(threshold - k / (l + 1), 0.0)
    bound = math.exp(-2 * (l + 2) * gap * gap)
    exact = float(betainc(l - k + 1, k, 1.0 - threshold))
    return bound, exact


def i0_index(c1: float, c2: float) -> int:
    """Smallest ``i >= 1`` with ``(i/(i+1))^5 >= c2/c1``."""
    if not c1 > c2 >= 0:
        raise InvalidParameter(f"need c1 > c2 >= 0, got c1={c1}, c2={c2}")
    r = c2 / c1
    i = 1
    while i**5 < r * (i + 1) ** 5:
        i += 1
    return i


@dataclass(frozen=True, eq=False)
class HierarchyProblem:
    N: int
    c1: float
    c2: float
    growth: GrowthFunction
    x0: np.ndarray
    y: Callable[[float], np.ndarray] | None = None  # t -> (y_1..y_{N+1})

    def __post_init__(self):
        if self.N < 1:
            raise InvalidParameter(f"N must be >= 1, got {self.N}")
        if not self.c1 > self.c2 >= 0:
            raise InvalidParameter(f"need c1 > c2 >= 0, got c1={self.c1}, c2={self.c2}")
        x0 = np.asarray(self.x0, dtype=float)
        if x0.shape != (self.N,):
            raise InvalidParameter(f"x0 must have length N={self.N}")
        if np.any(x0 < 0):
            raise InvalidParameter("x0 must be nonnegative")
        object.__setattr__(self, "x0", x0)

    @classmethod
    def standard(cls, N=64, c1=1.0, c2=0.3, growth=None, scale=1.0):
        k = np.arange(1, N + 1)
        return cls(N, c1, c2, growth or GrowthFunction("log", 1.0), scale * k**2 / N**2)


@dataclass(frozen=True, eq=False)
class HierarchySolution:
    times: np.ndarray
    x: np.ndarray  # (len(times), N)
    dt: float
    refinement: float  # sup-norm change (relative) under the last dt halving

    def to_csv(self) -> str:
        fh = io.StringIO()
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "k", "x_k"])
        for ti, row in zip(self.times, self.x):
            for k, v in enumerate(row, start=1):
                w.writerow([repr(float(ti)), k, repr(float(v))])
        return fh.getvalue()


def _rhs(prob: HierarchyProblem, k, N2):
    g = prob.growth

    def F(t, x):
        h = float(g.h(t))
        up = np.append(x[1:], 0.0)
        dx = h * x + k * h * (up - x) * (k < prob.N) + (k * k / N2) * h
        if prob.y is not None:
            y = np.asarray(prob.y(t), dtype=float)
            dx = dx - prob.c1 * y[: prob.N] + prob.c2 * y[1: prob.N + 1] * (k < prob.N)
        return dx

    return F


def _rk4(prob, t_final, dt, n_out):
    k = np.arange(1, prob.N + 1, dtype=float)
    F = _rhs(prob, k, float(prob.N) ** 2)
    steps = int(math.ceil(t_final / dt - 1e-9))
    h = t_final / steps
    every = max(steps // n_out, 1)
    while steps % every:
        every -= 1
    x = prob.x0.copy()
    times = [0.0]
    out = [x.copy()]
    for s in range(steps):
        t = s * h
        k1 = F(t, x)
        k2 = F(t + h / 2, x + h / 2 * k1)
        k3 = F(t + h / 2, x + h / 2 * k2)
        k4 = F(t + h, x + h * k3)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise HierarchyInstability(f"non-finite state at t={t + h:g} with dt={h:g}")
        if (s + 1) % every == 0:
            times.append((s + 1) * h)
            out.append(x.copy())
    return np.array(times), np.array(out), h


def solve_hierarchy(prob: HierarchyProblem, t_final: float, dt: float | None = None,
                    tol: float = 1e-6, n_out: int = 200, max_halvings: int = 10) -> HierarchySolution:
    """RK4 for the equality system; dt is halved until the sup-norm change is below ``tol``.

    The change is measured relative to the sup norm of the trajectory on the
    common output grid.  Refinement that stops contracting is refused.
    """
    if not t_final > 0:
        raise InvalidParameter(f"t_final must be > 0, got {t_final}")
    # eigenvalues of the linear part are -(k-1) h; RK4 is stable up to |z| ~ 2.78
    stable = 2.5 / max((prob.N - 1) * prob.growth.h_max(t_final), 1e-300)
    dt = min(dt or stable, stable, t_final)
    # keep output times aligned across halvings
    steps = max(int(math.ceil(t_final / dt)), n_out)
    steps = int(math.ceil(steps / n_out)) * n_out
    dt = t_final / steps
    times, x, h = _rk4(prob, t_final, dt, n_out)
    prev_change = math.inf
    for _ in range(max_halvings):
        t2, x2, h2 = _rk4(prob, t_final, h / 2, n_out)
        scale = max(np.max(np.abs(x2)), 1e-300)
        change = float(np.max(np.abs(x2 - x)) / scale)
        if change <= tol:
            return HierarchySolution(t2, x2, h2, change)
        if change > prev_change:
            raise HierarchyInstability(
                f"step refinement not contracting (change {change:.3g} after {prev_change:.3g})")
        prev_change = change
        times, x, h = t2, x2, h2
    raise HierarchyInstability(f"no convergence to {tol:g} after {max_halvings} halvings")


def envelope_ratio(sol: HierarchySolution, growth: GrowthFunction) -> np.ndarray:
    """``x_k(t) N^2 / (k^2 e^{5 phi(t)})`` on the output grid."""
    N = sol.x.shape[1]
    k = np.arange(1, N + 1)
    return sol.x * N**2 / (k**2 * np.exp(5 * growth.phi(sol.times))[:, None])


@dataclass(frozen=True)
class EnvelopeCertificate:
    M: float
    M_refined: float
    relative_change: float
    dt: float

    @property
    def stable(self) -> bool:
        return math.isfinite(self.M) and self.relative_change <= 0.10


def certify_envelope(prob: HierarchyProblem, t_final: float, dt: float | None = None,
                     tol: float = 1e-6) -> EnvelopeCertificate:
    """Sup of the envelope ratio, recomputed with half the converged step."""
    sol = solve_hierarchy(prob, t_final, dt, tol)
    M = float(np.max(envelope_ratio(sol, prob.growth)))
    times, x, h = _rk4(prob, t_final, sol.dt / 2, len(sol.times) - 1)
    M2 = float(np.max(envelope_ratio(HierarchySolution(times, x, h, 0.0), prob.growth)))
    return EnvelopeCertificate(M2, M, abs(M2 - M) / max(M, 1e-300), h)


def transform_zw(x, i0: int, phi_t: float):
    """``z_k = sum_{i>=k} x_i / (i-k+i0)^5`` and ``w_k = e^{-phi} z_k``, k = 1..len(x)."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    z = np.empty(n)
    for k in range(n):
        z[k] = math.fsum(x[k:] / (np.arange(n - k) + i0) ** 5.0)
    w = math.exp(-phi_t) * z
    if np.any(x > i0**5 * z * (1 + 1e-12) + 1e-300):
        raise AssertionError("recovery bound x_k <= i0^5 z_k violated")
    return z, w


def lattice_csv(ks, ls, ts, growth: GrowthFunction) -> str:
    """CSV rows ``k,l,t,A,B,bound,exact`` (tail bound at threshold e^{-phi(t)})."""
    fh = io.StringIO()
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["k", "l", "t", "A", "B", "bound", "exact"])
    for k in ks:
        for l in ls:
            if l < k:
                continue
            for t in ts:
                q = IteratedIntegralQuery(k, l, t, growth)
                bound, exact = beta_tail_bound(k, l, math.exp(-float(growth.phi(t))))
                w.writerow([k, l, repr(float(t)), repr(a_closed(q)), repr(b_closed(q)),
                            repr(bound), repr(exact)])
    return fh.getvalue()
