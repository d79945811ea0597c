"""Distances between particle ensembles and limit densities, and related inequality checks.

Densities live on uniform grids (``GriddedDensity``); integrals are plain
Riemann sums with the cell volume.  Total variation uses the ``(1/2) L1``
convention so the CKP inequality reads ``TV <= sqrt(H/2)``.
"""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import logsumexp

from .kernel import V_SUP, CirculationLaw, InvalidParameter
from .spectral import GridMismatch, GridSpec, VorticityField, velocity_from_vorticity

C_JW = 1600.0**2 + 36 * math.e**4
FISHER_FLOOR = 1e-12


class SupportViolation(RuntimeWarning):
    pass


class CancellationError(ValueError):
    def __init__(self, residual, tol):
        super().__init__(f"cancellation residual {residual:.3g} exceeds {tol:g}")
        self.residual = residual


class InsufficientReplicas(ValueError):
    pass


# ---------------------------------------------------------------- densities

@dataclass(frozen=True, eq=False)
class GriddedDensity:
    """Probability density sampled on a uniform grid.

    ``spacing`` holds the cell width per axis (use 1.0 for a counting
    measure on a finite table) and ``origin`` the coordinate of index 0.
    """

    values: np.ndarray
    spacing: tuple
    origin: tuple | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if len(self.spacing) != v.ndim:
            raise InvalidParameter("spacing must give one width per axis")
        if not np.all(np.isfinite(v)):
            raise InvalidParameter("density values must be finite")
        if v.min() < -1e-12 * max(v.max(), 0.0):
            raise InvalidParameter("density values must be nonnegative")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        org = (0.0,) * v.ndim if self.origin is None else tuple(float(o) for o in self.origin)
        object.__setattr__(self, "origin", org)
        mass = self.mass()
        if abs(mass - 1.0) > 1e-8:
            raise InvalidParameter(f"density integrates to {mass:.12g}, not 1")

    @property
    def cell(self) -> float:
        return float(np.prod(self.spacing))

    def mass(self) -> float:
        return float(self.values.sum() * self.cell)

    def axes(self):
        return [o + s * np.arange(n) for o, s, n in zip(self.origin, self.spacing, self.values.shape)]

    def same_grid(self, other: "GriddedDensity") -> bool:
        return (self.values.shape == other.values.shape
                and np.allclose(self.spacing, other.spacing, rtol=1e-12, atol=0)
                and np.allclose(self.origin, other.origin, rtol=1e-12, atol=1e-12))

    @classmethod
    def from_values(cls, values, spacing, origin=None, normalize=True):
        v = np.clip(np.asarray(values, dtype=float), 0.0, None)
        if normalize:
            total = v.sum() * float(np.prod(spacing))
            if not total > 0:
                raise InvalidParameter("cannot normalize a density with zero mass")
            v = v / total
        return cls(v, tuple(spacing), origin)

    @classmethod
    def on_grid(cls, grid: GridSpec, values, normalize=True):
        return cls.from_values(values, (grid.dx, grid.dx), (-grid.half_width,) * 2, normalize)

    def marginal(self, keep) -> "GriddedDensity":
        keep = tuple(keep)
        drop = tuple(a for a in range(self.values.ndim) if a not in keep)
        v = self.values.sum(axis=drop) * float(np.prod([self.spacing[a] for a in drop]))
        return GriddedDensity.from_values(v, [self.spacing[a] for a in keep],
                                          [self.origin[a] for a in keep])


def _check_same(p, q):
    if not p.same_grid(q):
        raise GridMismatch("densities live on different grids")


def _grid_axes(grid):
    if isinstance(grid, GridSpec):
        return [grid.axis, grid.axis]
    return [np.asarray(a, dtype=float) for a in grid]


def cic_histogram(samples, axes, weights=None):
    """Cloud-in-cell deposit of weighted samples onto grid nodes (sums of weights)."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    n, d = samples.shape
    if d != len(axes):
        raise InvalidParameter(f"samples have {d} coordinates, grid has {len(axes)} axes")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    shape = tuple(len(a) for a in axes)
    base, frac = [], []
    for j, a in enumerate(axes):
        u = (samples[:, j] - a[0]) / (a[1] - a[0])
        i0 = np.floor(u)
        base.append(i0.astype(np.int64))
        frac.append(u - i0)
    out = np.zeros(int(np.prod(shape)))
    for corner in range(1 << d):
        idx = np.zeros(n, dtype=np.int64)
        wt = w.copy()
        ok = np.ones(n, dtype=bool)
        for j in range(d):
            up = (corner >> j) & 1
            ij = base[j] + up
            wt = wt * (frac[j] if up else 1.0 - frac[j])
            ok &= (ij >= 0) & (ij < shape[j])
            idx = idx * shape[j] + np.where(ok, ij, 0)
        out += np.bincount(idx[ok], weights=wt[ok], minlength=out.size)
    return out.reshape(shape)


def silverman_bandwidth(samples) -> float:
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    s = float(np.mean(np.std(x, axis=0, ddof=1)))
    return s * (4.0 / ((d + 2) * n)) ** (1.0 / (d + 4))


def _smooth(values, spacing, bandwidth):
    sig = [bandwidth / s for s in spacing]
    return gaussian_filter(values, sig, mode="constant", truncate=8.0)


def kde_density(samples, bandwidth: float, grid) -> GriddedDensity:
    """Gaussian KDE on a grid (cloud-in-cell binning then Gaussian smoothing).

    ``grid`` is a ``GridSpec`` (2-D) or a sequence of uniform 1-D axes.
    ``bandwidth = 0`` selects Silverman's rule.
    """
    x = np.asarray(samples, dtype=float)
    if x.size == 0:
        raise InvalidParameter("empty sample set")
    if x.shape[0] < 2:
        raise InvalidParameter("KDE needs at least two samples")
    if bandwidth < 0:
        raise InvalidParameter("bandwidth must be >= 0")
    if bandwidth == 0:
        bandwidth = silverman_bandwidth(x)
    axes = _grid_axes(grid)
    spacing = [a[1] - a[0] for a in axes]
    hist = cic_histogram(x, axes)
    return GriddedDensity.from_values(_smooth(hist, spacing, bandwidth), spacing, [a[0] for a in axes])


def smooth_field(values, grid: GridSpec, bandwidth: float) -> np.ndarray:
    return _smooth(np.asarray(values, dtype=float), (grid.dx, grid.dx), bandwidth)


def smoothed_vorticity(positions, circulations, grid: GridSpec, bandwidth: float) -> VorticityField:
    """``(1/N) sum_i M_i G_h(x - X_i)`` on the grid, with the same smoothing as ``smooth_field``."""
    m = np.asarray(circulations, dtype=float)
    hist = cic_histogram(positions, _grid_axes(grid), m / (m.size * grid.cell_area))
    return VorticityField(grid, 0.0, smooth_field(hist, grid, bandwidth))


# ---------------------------------------------------------------- distances

def total_variation(p: GriddedDensity, q: GriddedDensity) -> float:
    """``(1/2) int |p - q|``."""
    _check_same(p, q)
    return float(0.5 * np.abs(p.values - q.values).sum() * p.cell)


def relative_entropy(p: GriddedDensity, q: GriddedDensity, k: int = 1) -> float:
    """``(1/k) int p log(p/q)``; ``inf`` (with a warning) when p charges {q = 0}."""
    _check_same(p, q)
    if k < 1:
        raise InvalidParameter("k must be >= 1")
    pv, qv = p.values, q.values
    pos = pv > 0
    outside = pos & (qv <= 0)
    if outside.any():
        lost = float(pv[outside].sum() * p.cell)
        warnings.warn(f"p puts mass {lost:.3g} where q vanishes", SupportViolation, stacklevel=2)
        return math.inf
    h = np.sum(pv[pos] * (np.log(pv[pos]) - np.log(qv[pos]))) * p.cell
    return float(h / k)


def _log_gradient(logf, spacing):
    if logf.ndim == 1:
        return [np.gradient(logf, spacing[0])]
    return list(np.gradient(logf, *spacing))


def fisher_information(p: GriddedDensity, q: GriddedDensity, floor: float = FISHER_FLOOR,
                       return_region: bool = False):
    """``int p |grad log(p/q)|^2`` over ``{p, q > floor * max p}`` (central differences).

    With ``return_region`` also returns the p-mass of the region used.
    """
    _check_same(p, q)
    eps = floor * p.values.max()
    region = (p.values > eps) & (q.values > eps)
    with np.errstate(divide="ignore", invalid="ignore"):
        lr = np.where(region, np.log(p.values) - np.log(q.values), np.nan)
    grads = _log_gradient(lr, p.spacing)
    sq = sum(g * g for g in grads)
    ok = region & np.isfinite(sq)
    val = float(np.sum(p.values[ok] * sq[ok]) * p.cell)
    if return_region:
        return val, float(p.values[ok].sum() * p.cell)
    return val


# ----------------------------------------------------------- inequalities

@dataclass
class WeightedCKPResult:
    lhs: float
    rhs: float
    margin: float
    fisher_term: float
    entropy_term: float
    divergent: bool

    def __iter__(self):
        return iter((self.lhs, self.rhs, self.margin))


def _as_gridspec(d: GriddedDensity) -> GridSpec:
    n = d.values.shape[0]
    if d.values.ndim != 2 or d.values.shape[1] != n or abs(d.spacing[0] - d.spacing[1]) > 1e-12:
        raise InvalidParameter("weighted CKP needs a square 2-D grid")
    L = n * d.spacing[0] / 2
    if abs(d.origin[0] + L) > 1e-9 * L or abs(d.origin[1] + L) > 1e-9 * L:
        raise InvalidParameter("weighted CKP needs a grid centred at the origin")
    return GridSpec(L, n)


def weighted_ckp_check(m1: GriddedDensity, m2: GriddedDensity, lam: float,
                       probes=None, band: float = 0.1, decay_tol: float = 1e-8) -> WeightedCKPResult:
    """Both sides of the weighted CKP inequality for ``K = div V`` with ``||V||_inf = 1/4``.

    lhs = max over probe points x of ``|(K * (m1 - m2))(x)|``; the default
    probe set is every grid node.  rhs = ``||V|| sqrt(I) + lam^-1 sqrt(1 + log
    int exp(lam^2 ||V||^2 |grad log m2|^2) dm2) sqrt(2H)``.  The exponential
    integral is declared divergent (rhs = inf) when its integrand has not
    decayed to ``decay_tol`` of its peak in the outer band of the box.
    """
    _check_same(m1, m2)
    if not lam > 0:
        raise InvalidParameter("lambda must be > 0")
    if np.any(m2.values <= 0):
        raise InvalidParameter("m2 must be positive on the grid")
    grid = _as_gridspec(m1)
    u = velocity_from_vorticity(VorticityField(grid, 0.0, m1.values - m2.values))
    speed = np.hypot(u[..., 0], u[..., 1])
    if probes is None:
        lhs = float(speed.max())
    else:
        idx = np.asarray(probes, dtype=int)
        lhs = float(speed[idx[:, 0], idx[:, 1]].max())
    info = fisher_information(m1, m2)
    H = relative_entropy(m1, m2, 1)
    grads = _log_gradient(np.log(m2.values), m2.spacing)
    expo = lam**2 * V_SUP**2 * sum(g * g for g in grads) + np.log(m2.values)
    X1, X2 = grid.mesh()
    outer = np.maximum(np.abs(X1), np.abs(X2)) > (1 - band) * grid.half_width
    divergent = bool(expo[outer].max() > expo.max() + math.log(decay_tol))
    fisher_term = V_SUP * math.sqrt(max(info, 0.0))
    if divergent:
        entropy_term = math.inf
    else:
        log_int = float(logsumexp(expo) + math.log(m2.cell))
        entropy_term = math.sqrt(1 + log_int) / lam * math.sqrt(2 * max(H, 0.0))
    rhs = fisher_term + entropy_term
    return WeightedCKPResult(lhs, rhs, rhs - lhs, fisher_term, entropy_term, divergent)


def _tensor_power(rho: GriddedDensity, n: int) -> np.ndarray:
    out = rho.values
    for _ in range(n - 1):
        out = np.multiply.outer(out, rho.values)
    return out


def gibbs_bound_check(Phi, rhoN: GriddedDensity, rho_bar: GriddedDensity, eta: float):
    """``(lhs, rhs)`` of the Gibbs inequality for an N-particle density on a product grid.

    lhs = ``int Phi rhoN``; rhs = ``H_N(rhoN | rho_bar^N)/eta + log(int exp(N eta Phi)
    rho_bar^N)/(eta N)`` with ``H_N`` the entropy divided by N.  Returns
    ``(lhs, inf)`` when the exponential integral overflows.
    """
    if not eta > 0:
        raise InvalidParameter("eta must be > 0")
    d = rho_bar.values.ndim
    if rhoN.values.ndim % d:
        raise InvalidParameter("rhoN dimension must be a multiple of rho_bar's")
    N = rhoN.values.ndim // d
    Phi = np.asarray(Phi, dtype=float)
    if Phi.shape != rhoN.values.shape:
        raise GridMismatch("Phi must be tabulated on rhoN's grid")
    ref = _tensor_power(rho_bar, N)
    ref_d = GriddedDensity(ref, tuple(rho_bar.spacing) * N, tuple(rho_bar.origin) * N)
    _check_same(rhoN, ref_d)
    lhs = float(np.sum(Phi * rhoN.values) * rhoN.cell)
    H = relative_entropy(rhoN, ref_d, N)
    pos = ref > 0
    log_int = float(logsumexp(N * eta * Phi[pos], b=ref[pos])) + math.log(rhoN.cell)
    if not math.isfinite(log_int):
        return lhs, math.inf
    return lhs, H / eta + log_int / (eta * N)


def chain_rule_check(joint1: GriddedDensity, joint2: GriddedDensity):
    """``(lhs, mid, rhs)`` for two joints on a product of two axes.

    lhs = ``int H(K1_x | K2_x) m1(dx)`` (conditionals of the second axis given
    the first), mid = ``H(joint1 | joint2)``, rhs = ``H(m1 | m2) + lhs``.
    The identity mid == rhs and the bound lhs <= mid are the checks.
    """
    _check_same(joint1, joint2)
    if joint1.values.ndim != 2:
        raise InvalidParameter("chain_rule_check expects 2-axis joints")
    if np.any(joint2.values <= 0):
        raise InvalidParameter("joint2 must be strictly positive")
    p, q = joint1.values, joint2.values
    dx, dy = joint1.spacing
    m1 = p.sum(axis=1) * dy
    m2 = q.sum(axis=1) * dy
    with np.errstate(divide="ignore", invalid="ignore"):
        k1 = np.where(m1[:, None] > 0, p / m1[:, None], 0.0)
        k2 = q / m2[:, None]
        cond = np.where(k1 > 0, k1 * (np.log(k1) - np.log(k2)), 0.0).sum(axis=1) * dy
        lhs = float(np.sum(m1 * cond) * dx)
        mid = float(np.sum(np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)) * dx * dy)
        marg = float(np.sum(np.where(m1 > 0, m1 * (np.log(m1) - np.log(m2)), 0.0)) * dx)
    return lhs, mid, marg + lhs


# ---------------------------------------------------------- concentration

@dataclass
class ConcentrationProbe:
    """Test function ``phi(z, w)`` for the exponential-moment probes.

    Either give ``phi`` (vectorised, broadcasting) or the separable factors
    ``a``, ``b`` with ``phi = a(z) b(w)``; the separable form enables an O(N)
    evaluation of the sums.
    """

    phi: Callable | None = None
    a: Callable | None = None
    b: Callable | None = None
    cancellation: str = "one_sided"
    gamma_estimate: float = math.nan
    c_jw: float = C_JW

    def __post_init__(self):
        if self.cancellation not in ("one_sided", "two_sided"):
            raise InvalidParameter(f"cancellation must be one_sided or two_sided, got {self.cancellation!r}")
        if self.phi is None and (self.a is None or self.b is None):
            raise InvalidParameter("give phi or both separable factors a and b")

    @property
    def separable(self) -> bool:
        return self.a is not None and self.b is not None

    def __call__(self, z, w):
        if self.separable:
            return self.a(z) * self.b(w)
        return self.phi(z, w)

    @classmethod
    def separable_product(cls, a, b, cancellation="one_sided"):
        return cls(a=a, b=b, cancellation=cancellation)


def cancellation_residual(probe: ConcentrationProbe, sampler, rng, n: int = 100_000,
                          n_points: int = 256) -> float:
    """Largest Monte-Carlo ``|int phi(z, w) g(dw)|`` over sampled z (and over w when two-sided)."""
    z = sampler(rng, n_points)
    w = sampler(rng, n)
    if probe.separable:
        res = float(np.max(np.abs(probe.a(z))) * abs(np.mean(probe.b(w))))
        if probe.cancellation == "two_sided":
            res = max(res, float(np.max(np.abs(probe.b(z))) * abs(np.mean(probe.a(w)))))
        return res
    res = max(abs(float(np.mean(probe.phi(zi, w)))) for zi in z)
    if probe.cancellation == "two_sided":
        res = max(res, max(abs(float(np.mean(probe.phi(w, zi)))) for zi in z))
    return res


def gamma_estimate(probe: ConcentrationProbe, sampler, rng, n: int = 100_000, p_max: int = 20) -> float:
    """``C_JW (sup_p ||sup_w |phi(., w)| ||_{L^p} / p)^2`` with integer ``p <= p_max``."""
    z = sampler(rng, n)
    w = sampler(rng, min(n, 4096))
    if probe.separable:
        s = np.abs(probe.a(z)) * np.max(np.abs(probe.b(w)))
    else:
        rows = max(1, 4_000_000 // w.shape[0])
        s = np.concatenate([np.max(np.abs(probe.phi(z[i:i + rows, None], w[None, :])), axis=1)
                            for i in range(0, z.shape[0], rows)])
    best = max(float(np.mean(s**p) ** (1.0 / p)) / p for p in range(1, p_max + 1))
    return probe.c_jw * best**2


@dataclass
class ProbeResult:
    form: str
    N_list: list
    estimates: list  # log E exp(...)
    stderr: list
    cancellation_residual: float
    gamma: float
    n_mc: int

    def no_positive_trend(self, n_se: float = 3.0) -> bool:
        e, s = self.estimates, self.stderr
        return all(e[j] - e[i] <= n_se * math.hypot(s[i], s[j])
                   for i in range(len(e)) for j in range(i + 1, len(e)))

    def linear_fit(self):
        """Least-squares ``estimate ~ slope * N + intercept`` with R^2."""
        N = np.asarray(self.N_list, float)
        e = np.asarray(self.estimates, float)
        slope, icpt = np.polyfit(N, e, 1)
        resid = e - (slope * N + icpt)
        ss = float(np.sum((e - e.mean()) ** 2))
        r2 = 1.0 - float(np.sum(resid**2)) / ss if ss > 0 else 1.0
        return float(slope), float(icpt), r2


def _exponents(probe, sampler, rng, N, count, form):
    z = sampler(rng, count * N).reshape(count, N, *np.shape(sampler(rng, 1))[1:])
    if probe.separable:
        a = probe.a(z)
        b = probe.b(z)
        if form == "lln":
            return a[:, 0] ** 2 * b.sum(axis=1) ** 2 / N
        return a.sum(axis=1) * b.sum(axis=1) / N
    out = np.empty(count)
    for r in range(count):
        zr = z[r]
        if form == "lln":
            out[r] = np.sum(probe.phi(zr[0], zr)) ** 2 / N
        else:
            out[r] = np.sum(probe.phi(zr[:, None], zr[None, :])) / N
    return out


def exp_moment_probe(probe: ConcentrationProbe, sampler, N_list, n_mc: int = 100_000,
                     seed: int = 0, form: str = "lln", enforce_cancellation: bool = True,
                     tol: float = 1e-2, chunk_elems: int = 4_000_000) -> ProbeResult:
    """Monte-Carlo ``log E exp(X_N)`` with standard errors, per N.

    ``form="lln"``: X_N = (1/N) (sum_j phi(z_1, z_j))^2;
    ``form="ld"``:  X_N = (1/N) sum_{i,j} phi(z_i, z_j).
    ``sampler(rng, n)`` draws n i.i.d. points from g.  The cancellation
    precondition is measured first and the probe refuses when it fails,
    unless ``enforce_cancellation`` is off (positive controls).
    """
    if form not in ("lln", "ld"):
        raise InvalidParameter(f"form must be 'lln' or 'ld', got {form!r}")
    root = np.random.SeedSequence(seed)
    check_seq, gamma_seq, *n_seqs = root.spawn(2 + len(N_list))
    res = cancellation_residual(probe, sampler, np.random.default_rng(check_seq))
    if enforce_cancellation and res > tol:
        raise CancellationError(res, tol)
    gam = gamma_estimate(probe, sampler, np.random.default_rng(gamma_seq))
    est, se = [], []
    for N, sq in zip(N_list, n_seqs):
        rng = np.random.default_rng(sq)
        count = max(1, chunk_elems // N)
        xs = []
        left = n_mc
        while left > 0:
            c = min(count, left)
            xs.append(_exponents(probe, sampler, rng, N, c, form))
            left -= c
        x = np.concatenate(xs)
        lm = float(logsumexp(x) - math.log(x.size))
        y = np.exp(x - x.max())
        rel = float(np.std(y, ddof=1) / (math.sqrt(x.size) * np.mean(y)))
        est.append(lm)
        se.append(rel)
    return ProbeResult(form, list(N_list), est, se, res, gam, n_mc)


# ---------------------------------------------------------- convergence

@dataclass
class EntropyReport:
    H_k: float
    I_k: float
    TV: float
    N: int
    k: int
    t: float
    n_replicas: int
    stderr: dict = field(default_factory=dict)

    def ckp_consistent(self, budget: float = 0.0) -> bool:
        if not math.isfinite(self.H_k):
            return True
        return self.TV <= math.sqrt(self.k * self.H_k / 2) + budget

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


CSV_HEADER = ["N", "k", "t", "H", "I", "TV", "stderr"]


def reports_csv(reports) -> str:
    fh = io.StringIO()
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in reports:
        w.writerow([r.N, r.k, repr(float(r.t)), repr(float(r.H_k)), repr(float(r.I_k)),
                    repr(float(r.TV)), repr(float(r.stderr.get("TV", math.nan)))])
    return fh.getvalue()


@dataclass(frozen=True)
class GaussianInitial:
    """Conditional initial law ``x | m ~ N((offset m / A, 0), variance I)``."""

    variance: float = 0.25
    offset: float = 1.0

    def center(self, m, law: CirculationLaw):
        return (self.offset * m / law.A, 0.0)

    def sampler(self, law: CirculationLaw):
        from .particles import gaussian_sampler
        return gaussian_sampler(law, self.variance, lambda m: self.center(m, law))

    def density(self, law: CirculationLaw):
        v = self.variance

        def f(m, X1, X2):
            c1, c2 = self.center(m, law)
            return np.exp(-((X1 - c1) ** 2 + (X2 - c2) ** 2) / (2 * v)) / (2 * math.pi * v)

        return f


@dataclass
class ConvergenceResult:
    reports: list
    l1_errors: dict  # N -> per-replica L1 errors of the smoothed vorticity
    slope: float
    ci: tuple
    strictly_decreasing: bool
    bandwidth: float

    def mean_errors(self):
        return {N: float(np.mean(e)) for N, e in self.l1_errors.items()}

    def errors_csv(self) -> str:
        fh = io.StringIO()
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["N", "replica", "l1_error"])
        for N, errs in self.l1_errors.items():
            for r, e in enumerate(errs):
                w.writerow([N, r, repr(float(e))])
        return fh.getvalue()


def _fit_loglog(N_list, means):
    return float(np.polyfit(np.log(N_list), np.log(means), 1)[0])


def bootstrap_slope(errors: dict, n_boot: int = 2000, seed: int = 0, level: float = 0.95):
    """Percentile CI of the log-log slope, resampling replicas independently per N."""
    rng = np.random.default_rng(seed)
    Ns = sorted(errors)
    arrs = [np.asarray(errors[N]) for N in Ns]
    slopes = np.empty(n_boot)
    for b in range(n_boot):
        means = [a[rng.integers(0, a.size, a.size)].mean() for a in arrs]
        slopes[b] = _fit_loglog(Ns, means)
    lo, hi = np.quantile(slopes, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)


def _marginal_reports(ens_list, law, g_nodes, grid, bandwidth, k, t, N, coarse_n):
    """Per-replica (H, I, TV) for the k-marginal of (m, x) restricted to a discrete law."""
    atoms, probs = law.atoms()
    # spectral rounding leaves tiny negative values in the tails
    g_nodes = [np.clip(g, 0.0, None) for g in g_nodes]
    Hs, Is, TVs = [], [], []
    if k == 1:
        axes = [grid.axis, grid.axis]
        sp = (grid.dx, grid.dx)
        refs = [probs[a] * np.clip(smooth_field(g_nodes[a], grid, bandwidth), 0.0, None)
                for a in range(len(atoms))]
    else:
        step = max(grid.n // coarse_n, 1)
        ax = grid.axis[::step]
        axes = [ax] * 4
        sp = (grid.dx * step,) * 4
        sm = [np.clip(smooth_field(g_nodes[a], grid, bandwidth)[::step, ::step], 0.0, None)
              for a in range(len(atoms))]
        sm = [s / (s.sum() * sp[0] * sp[1]) for s in sm]
        refs = [probs[a] * probs[b] * np.multiply.outer(sm[a], sm[b])
                for a in range(len(atoms)) for b in range(len(atoms))]
    ref = np.stack(refs)
    cell = float(np.prod(sp))
    ref_d = GriddedDensity(ref / (ref.sum() * cell), (1.0,) + sp, (0.0,) + tuple(a[0] for a in axes))
    for ens in ens_list:
        m = ens.circulations
        x = ens.positions
        lab = np.searchsorted(atoms, m)
        if k == 1:
            parts = [cic_histogram(x[lab == a], axes) for a in range(len(atoms))]
        else:
            n2 = (len(m) // 2) * 2
            xi = x[:n2].reshape(-1, 2, 2)
            li = lab[:n2].reshape(-1, 2)
            parts = []
            for a in range(len(atoms)):
                for b in range(len(atoms)):
                    sel = (li[:, 0] == a) & (li[:, 1] == b)
                    parts.append(cic_histogram(xi[sel].reshape(-1, 4), axes))
        emp = np.stack([_smooth(p, sp, bandwidth) for p in parts])
        emp_d = GriddedDensity.from_values(emp, (1.0,) + sp, ref_d.origin)
        Hs.append(relative_entropy(emp_d, ref_d, k))
        TVs.append(total_variation(emp_d, ref_d))
        # Fisher information of the position variables within each atom block
        Is.append(sum(fisher_information(
            GriddedDensity.from_values(emp_d.values[j], sp, ref_d.origin[1:]),
            GriddedDensity.from_values(ref_d.values[j], sp, ref_d.origin[1:]))
            * emp_d.values[j].sum() * cell for j in range(emp.shape[0])) / k)
    return Hs, Is, TVs


def convergence_study(law: CirculationLaw, g0: GaussianInitial, sigma: float, t_eval: float,
                      N_list, k: int = 1, n_replicas: int = 32, *, grid: GridSpec | None = None,
                      dt: float = 0.025, pde_dt: float | None = None, bandwidth: float = 0.25,
                      seed: int = 0, force_method: str = "direct", theta: float = 0.5,
                      interact: bool = True, n_boot: int = 2000, n_nodes: int = 8,
                      target_rel_se: float | None = None, coarse_n: int = 16,
                      workers: int = 1, progress=None) -> ConvergenceResult:
    """Particle ensembles against the mean-field solution at ``t_eval``.

    For each N the circulation-weighted empirical vorticity and the PDE
    vorticity are smoothed by the same Gaussian of width ``bandwidth`` and
    compared in L1; the slope of the replica-mean error against N is fitted on
    log-log axes with a bootstrap CI over replicas.  H, I and TV of the
    k-marginal are reported for discrete circulation laws (NaN otherwise).
    """
    from .particles import SimConfig, run_ensemble
    from .kernel import KernelSpec
    from .spectral import conditional_set, reconstruct_vorticity, solve_coupled

    if k not in (1, 2):
        raise InvalidParameter("k must be 1 or 2")
    if n_replicas < 2:
        raise InsufficientReplicas("at least two replicas are needed for a standard error")
    grid = grid or GridSpec(8.0, 128)
    cset = conditional_set(law, grid, g0.density(law), sigma, n_nodes)
    w0 = reconstruct_vorticity(cset)
    if interact:
        cset_t, w_t = solve_coupled(cset, w0, pde_dt or dt, t_eval, snapshot_times=[t_eval])[-1]
    else:
        # passive transport with zero velocity is the heat flow
        from .spectral import _ops
        ops = _ops(grid)
        E = np.exp(-sigma * ops.ksq * t_eval)
        dens = np.array([np.fft.irfft2(np.fft.rfft2(f) * E, s=(grid.n, grid.n)) for f in cset.densities])
        cset_t = type(cset)(grid, t_eval, cset.m_nodes, cset.weights, dens, sigma)
        w_t = reconstruct_vorticity(cset_t)
    w_ref = smooth_field(w_t.values, grid, bandwidth)

    sampler = g0.sampler(law)
    reports, errors = [], {}
    for N in N_list:
        nseed = int(np.random.SeedSequence([int(seed), int(N)]).generate_state(1)[0])
        cfg = SimConfig(dt=dt, t_final=t_eval, kernel=KernelSpec(0.0), force_method=force_method,
                        theta=theta, n_replicas=n_replicas, seed=nseed, interact=interact)
        trajs = run_ensemble(sampler, N, sigma, cfg, snapshot_times=[t_eval], workers=workers)
        finals = [tr.final for tr in trajs]
        errs = np.array([np.abs(smoothed_vorticity(e.positions, e.circulations, grid, bandwidth).values
                                - w_ref).sum() * grid.cell_area for e in finals])
        if target_rel_se is not None:
            rel = errs.std(ddof=1) / (math.sqrt(errs.size) * errs.mean())
            if rel > target_rel_se:
                raise InsufficientReplicas(
                    f"N={N}: relative SE {rel:.3g} with {n_replicas} replicas exceeds {target_rel_se:g}")
        errors[N] = errs
        if law.is_discrete:
            g_nodes = cset_t.densities
            Hs, Is, TVs = _marginal_reports(finals, law, g_nodes, grid, bandwidth, k, t_eval, N, coarse_n)
            se = {name: float(np.std(v, ddof=1) / math.sqrt(len(v)))
                  for name, v in (("H", Hs), ("I", Is), ("TV", TVs), ("L1", errs))}
            reports.append(EntropyReport(float(np.mean(Hs)), float(np.mean(Is)), float(np.mean(TVs)),
                                         N, k, t_eval, n_replicas, se))
        else:
            se = {"L1": float(errs.std(ddof=1) / math.sqrt(errs.size))}
            reports.append(EntropyReport(math.nan, math.nan, math.nan, N, k, t_eval, n_replicas, se))
        if progress is not None:
            progress(N, errs)
    Ns = sorted(errors)
    means = [errors[N].mean() for N in Ns]
    slope = _fit_loglog(Ns, means)
    ci = bootstrap_slope(errors, n_boot, seed)
    dec = all(means[i + 1] < means[i] for i in range(len(means) - 1))
    return ConvergenceResult(reports, errors, slope, ci, dec, bandwidth)
