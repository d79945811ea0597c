"""Envelope, decay and logarithmic-growth checks on solver snapshots.

Every check takes a list of fields (anything with ``grid``, ``t`` and
``values``, normally ``VorticityField`` snapshots of a density) and returns an
``EnvelopeReport``.  Quotients and logarithms are only taken where the field
exceeds ``floor * peak``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .kernel import InvalidParameter
from .spectral import VorticityField, _ops, velocity_from_vorticity, velocity_gradient

FLOOR = 1e-12
SLOPE_TOL = 0.15


class EnvelopeViolation(RuntimeError):
    pass


class AuxPreconditionError(ValueError):
    def __init__(self, msg, x):
        super().__init__(msg)
        self.x = x


@dataclass
class EnvelopeReport:
    kind: str
    C: float
    worst_ratio: float
    region: str
    times: list
    holds: bool
    details: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, sort_keys=True, default=_jsonable)


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(type(v))


def _region(f, floor=FLOOR):
    return f.values > floor * np.max(f.values)


def _r2(grid):
    X1, X2 = grid.mesh()
    return X1**2 + X2**2


def _smallest_constant(log_violation, lo=1e-6, hi=1e6, iters=200):
    """Smallest C in [lo, hi] with ``log_violation(C) <= 0``, assuming monotone decrease.

    Bisection on log C; returns ``inf`` when even ``hi`` fails.
    """
    if log_violation(hi) > 0.0:
        return math.inf
    if log_violation(lo) <= 0.0:
        return lo
    a, b = math.log(lo), math.log(hi)
    for _ in range(iters):
        m = 0.5 * (a + b)
        if log_violation(math.exp(m)) > 0.0:
            a = m
        else:
            b = m
        if b - a < 1e-12:
            break
    return math.exp(b)


def gauss_upper_check(fields, C0: float | None = None, floor: float = FLOOR) -> EnvelopeReport:
    """Smallest C with ``g <= C/(1+t) exp(-|x|^2/(8t + C))`` at all samples."""
    data = [(f.t, _r2(f.grid)[_region(f, floor)], f.values[_region(f, floor)]) for f in fields]

    def log_worst(C):
        return max(float(np.max(np.log(g) + math.log1p(t) - math.log(C) + r2 / (8 * t + C)))
                   for t, r2, g in data)

    C = _smallest_constant(log_worst)
    ok = math.isfinite(C)
    return EnvelopeReport("gauss_upper", C, math.exp(log_worst(C)) if ok else math.inf,
                          f"g > {floor:g} * peak", [f.t for f in fields], ok,
                          {"C0": C0, "ratio_at_2C": math.exp(log_worst(2 * C)) if ok else None})


def gauss_lower_check(fields, floor: float = FLOOR) -> EnvelopeReport:
    """Smallest C >= 1 with ``g >= exp(-C|x|^2/(1+t)) / (C (1+t)^C)`` on the region."""
    data = [(f.t, _r2(f.grid)[_region(f, floor)], f.values[_region(f, floor)]) for f in fields]

    def log_worst(C):
        return max(float(np.max(-C * r2 / (1 + t) - math.log(C) - C * math.log1p(t) - np.log(g)))
                   for t, r2, g in data)

    C = _smallest_constant(log_worst, lo=1.0)
    ok = math.isfinite(C)
    return EnvelopeReport("gauss_lower", C, math.exp(log_worst(C)) if ok else math.inf,
                          f"g > {floor:g} * peak", [f.t for f in fields], ok,
                          {"ratio_at_2C": math.exp(log_worst(2 * C)) if ok else None})


def _fit_slope(x, y):
    return float(np.polyfit(np.asarray(x, float), np.asarray(y, float), 1)[0])


def _check_range(t):
    """The positive sample times must span a decade."""
    t = np.asarray(t, float)
    x = t[t > 0]
    if x.size < 2 or x.max() < 10 * x.min():
        raise InvalidParameter(f"time samples must span a decade, got t in [{min(t):g}, {max(t):g}]")


def lp_norm(f, p: float) -> float:
    a = np.abs(f.values)
    if math.isinf(p):
        return float(a.max())
    return float((np.sum(a**p) * f.grid.cell_area) ** (1.0 / p))


def lp_decay_check(fields, p_list=(2, math.inf), tol: float = SLOPE_TOL) -> EnvelopeReport:
    """Log-log slope of ``||g||_p`` against ``1+t``; expected ``-(1 - 1/p)``."""
    t = np.array([f.t for f in fields])
    _check_range(t)
    slopes, consts, dev = {}, {}, []
    for p in p_list:
        norms = np.array([lp_norm(f, p) for f in fields])
        e = 1.0 - 1.0 / p
        s = _fit_slope(np.log1p(t), np.log(norms))
        slopes[str(p)] = s
        consts[str(p)] = float(np.max(norms * (1 + t) ** e))
        dev.append(abs(s + e) / tol)
    worst = max(dev)
    return EnvelopeReport("lp_decay", max(consts.values()), worst, "whole grid", t.tolist(),
                          worst <= 1.0, {"slopes": slopes, "C_p": consts})


def kato_decay_check(fields, k_orders=(0, 1), tol: float = SLOPE_TOL) -> EnvelopeReport:
    """Sup-norm decay of ``grad^k (K * w)`` against ``t v 1`` for t >= 1; expected ``-(1+k)/2``."""
    use = [f for f in fields if f.t >= 1.0]
    t = np.array([f.t for f in use])
    if len(use) < 2:
        raise InvalidParameter("kato_decay_check needs at least two samples with t >= 1")
    _check_range(t)
    slopes, consts, dev = {}, {}, []
    for k in k_orders:
        if k == 0:
            sup = [np.max(np.hypot(*np.moveaxis(velocity_from_vorticity(_as_field(f)), -1, 0)))
                   for f in use]
        elif k == 1:
            sup = [np.max(np.linalg.norm(velocity_gradient(_as_field(f)), ord=2, axis=(-2, -1)))
                   for f in use]
        else:
            raise InvalidParameter("k_orders must be drawn from {0, 1}")
        e = (1 + k) / 2
        s = _fit_slope(np.log(np.maximum(t, 1.0)), np.log(sup))
        slopes[str(k)] = s
        consts[str(k)] = float(np.max(np.asarray(sup) * np.maximum(t, 1.0) ** e))
        dev.append(abs(s + e) / tol)
    worst = max(dev)
    return EnvelopeReport("kato_decay", max(consts.values()), worst, "t >= 1", t.tolist(),
                          worst <= 1.0, {"slopes": slopes, "C_k": consts})


def _as_field(f):
    return f if isinstance(f, VorticityField) else VorticityField(f.grid, f.t, f.values)


def grad_log(f, floor=FLOOR):
    """Spectral ``grad log g`` and ``hess log g`` on the admissible region (NaN elsewhere)."""
    grid = f.grid
    ops = _ops(grid)
    n = grid.n
    gh = np.fft.rfft2(f.values)
    ik = (ops.ik1, ops.ik2)
    d = [np.fft.irfft2(ik[a] * gh, s=(n, n)) for a in range(2)]
    dd = [[np.fft.irfft2(ik[a] * ik[b] * gh, s=(n, n)) for b in range(2)] for a in range(2)]
    mask = _region(f, floor)
    g = np.where(mask, f.values, np.nan)
    grad = np.stack([d[0] / g, d[1] / g], axis=-1)
    hess = np.empty((n, n, 2, 2))
    for a in range(2):
        for b in range(2):
            hess[..., a, b] = dd[a][b] / g - grad[..., a] * grad[..., b]
    return grad, hess


def log_bound(t, r2):
    return (1 + math.log1p(t)) / (1 + t) + r2 / (1 + t) ** 2


def log_growth_check(fields, t_list=None, floor: float = FLOOR, tol: float = SLOPE_TOL) -> EnvelopeReport:
    """Per-time constants for ``|grad log g|^2`` and ``|hess log g|`` against the log bound.

    Verdict: all constants finite and without an increasing trend (log-log
    slope against ``1+t`` at most ``tol``).
    """
    if t_list is not None:
        wanted = set(float(s) for s in t_list)
        fields = [f for f in fields if any(abs(f.t - s) < 1e-9 for s in wanted)]
    if not fields:
        raise InvalidParameter("no snapshots at the requested times")
    cg, ch, times = [], [], []
    for f in fields:
        mask = _region(f, floor)
        if not mask.any():
            raise InvalidParameter(f"admissible region empty at t={f.t}")
        grad, hess = grad_log(f, floor)
        b = log_bound(f.t, _r2(f.grid))[mask]
        g2 = np.sum(grad[mask] ** 2, axis=-1)
        hn = np.linalg.norm(hess[mask], ord=2, axis=(-2, -1))
        cg.append(float(np.max(g2 / b)))
        ch.append(float(np.max(hn / b)))
        times.append(f.t)
    t = np.array(times)
    trend = {"grad": 0.0, "hess": 0.0}
    if len(t) > 1:
        trend = {"grad": _fit_slope(np.log1p(t), np.log(cg)), "hess": _fit_slope(np.log1p(t), np.log(ch))}
    finite = all(math.isfinite(c) for c in cg + ch)
    ok = finite and max(trend.values()) <= tol
    return EnvelopeReport("log_growth", max(cg + ch), max(trend.values()) / tol, f"g > {floor:g} * peak",
                          times, ok, {"C_grad": cg, "C_hess": ch, "trend": trend})


def aux_function(f, sigma, C, C1, floor=FLOOR, long_time=False):
    """First auxiliary function on the admissible region (NaN elsewhere).

    short time: |grad g|^2/g + (C/sigma) g log g - C1 g
    long time:  phi(t)|grad g|^2/g + g log g - C1 g,  phi(t) = sigma t / (C+1)
    """
    grad, _ = grad_log(f, floor)
    g = np.where(_region(f, floor), f.values, np.nan)
    q = g * np.sum(grad**2, axis=-1)
    if long_time:
        return sigma * f.t / (C + 1) * q + g * np.log(g) - C1 * g
    return q + C / sigma * g * np.log(g) - C1 * g


def aux_sign_check(fields, sigma: float, constants, floor: float = FLOOR, tol: float = 1e-8,
                   long_time: bool = False) -> EnvelopeReport:
    """Max of the auxiliary function over the snapshots; should be <= tol * scale.

    ``constants = (C, C1)``.  The initial snapshot must satisfy
    ``|grad log g0|^2 + (C/sigma) log g0 <= C1`` (refused otherwise).
    """
    C, C1 = constants
    if not sigma > 0:
        raise InvalidParameter("sigma must be > 0")
    f0 = min(fields, key=lambda f: f.t)
    if not long_time:
        grad, _ = grad_log(f0, floor)
        mask = _region(f0, floor)
        lhs = np.sum(grad**2, axis=-1) + C / sigma * np.log(np.where(mask, f0.values, np.nan))
        bad = np.where(mask & (lhs > C1))
        if bad[0].size:
            X1, X2 = f0.grid.mesh()
            i, j = bad[0][0], bad[1][0]
            raise AuxPreconditionError(
                f"initial condition violates the auxiliary precondition at x=({X1[i, j]:g}, {X2[i, j]:g})",
                (float(X1[i, j]), float(X2[i, j])))
    fmax, scale = -math.inf, 0.0
    for f in fields:
        F = aux_function(f, sigma, C, C1, floor, long_time)
        fmax = max(fmax, float(np.nanmax(F)))
        g = f.values[_region(f, floor)]
        scale = max(scale, float(np.nanmax(np.abs(F))), float(C1 * g.max()))
    ok = fmax <= tol * scale
    return EnvelopeReport("aux_sign", C1, fmax / scale, f"g > {floor:g} * peak",
                          [f.t for f in fields], ok,
                          {"max_F": fmax, "scale": scale, "C": C, "long_time": long_time})


def heat_aux_constants(sigma: float, s0: float, slack: float = 1.0):
    """(C, C1) making the precondition hold for a Gaussian of variance 2 sigma s0."""
    C = 1.0 / s0
    C1 = -C / sigma * math.log(4 * math.pi * sigma * s0) + slack
    return C, C1
