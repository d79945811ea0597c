"""Pseudo-spectral solver for the vorticity equation and the conditional densities.

The plane is truncated to the periodic box ``[-L, L)^2``.  Velocities come
from the Fourier-space Biot-Savart law, advection products are formed in
physical space with the 2/3 rule, and diffusion is integrated exactly by an
integrating factor inside classical RK4.

    d_t w + (K * w) . grad w = sigma lap w
    d_t f^m + (K * w) . grad f^m = sigma lap f^m,   w = sum_q weight_q m_q f^{m_q}
"""
from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from scipy.special import j0, roots_legendre

from .kernel import CirculationLaw, InvalidParameter


class CFLViolation(ValueError):
    def __init__(self, dt, suggested):
        super().__init__(f"dt={dt:g} violates the advective CFL bound; use dt <= {suggested:g}")
        self.dt = dt
        self.suggested_dt = suggested


class GridMismatch(ValueError):
    pass


class DomainTruncationError(RuntimeError):
    """Too much mass reached the edge of the periodic box."""


@dataclass(frozen=True)
class GridSpec:
    half_width: float
    n: int
    dealias: bool = True
    biot_savart: str = "free"

    def __post_init__(self):
        if self.biot_savart not in ("free", "periodic"):
            raise InvalidParameter(f"biot_savart must be 'free' or 'periodic', got {self.biot_savart!r}")
        if self.n < 32 or self.n & (self.n - 1):
            raise InvalidParameter(f"grid size must be a power of two >= 32, got {self.n}")
        if not self.half_width > 0:
            raise InvalidParameter(f"half_width must be > 0, got {self.half_width}")

    @property
    def dx(self) -> float:
        return 2.0 * self.half_width / self.n

    @property
    def cell_area(self) -> float:
        return self.dx * self.dx

    @property
    def axis(self) -> np.ndarray:
        return -self.half_width + self.dx * np.arange(self.n)

    def mesh(self):
        x = self.axis
        return np.meshgrid(x, x, indexing="ij")

    def integrate(self, values) -> float:
        return float(np.sum(values) * self.cell_area)


@dataclass(frozen=True)
class _Ops:
    k1: np.ndarray
    k2: np.ndarray
    ksq: np.ndarray
    inv_ksq: np.ndarray
    ik1: np.ndarray   # first-derivative multipliers, Nyquist removed
    ik2: np.ndarray
    mask: np.ndarray  # 2/3-rule (all True when dealiasing is off)
    grid: GridSpec


@lru_cache(maxsize=16)
def _ops(grid: GridSpec) -> _Ops:
    n = grid.n
    k1 = 2 * np.pi * np.fft.fftfreq(n, grid.dx)[:, None]
    k2 = 2 * np.pi * np.fft.rfftfreq(n, grid.dx)[None, :]
    ksq = k1**2 + k2**2
    inv = np.zeros_like(ksq)
    inv[ksq > 0] = 1.0 / ksq[ksq > 0]
    i1 = np.fft.fftfreq(n, 1.0 / n)[:, None]
    i2 = np.fft.rfftfreq(n, 1.0 / n)[None, :]
    nyq1 = np.abs(i1) == n // 2
    nyq2 = np.abs(i2) == n // 2
    ik1 = np.where(nyq1, 0.0, 1j * k1) * np.ones_like(k2)
    ik2 = np.where(nyq2, 0.0, 1j * k2) * np.ones_like(k1)
    if grid.dealias:
        cut = n / 3.0
        mask = (np.abs(i1) < cut) & (np.abs(i2) < cut)
    else:
        mask = ~(nyq1 | nyq2)
    return _Ops(k1, k2, ksq, inv, ik1, ik2, mask, grid)


@lru_cache(maxsize=16)
def _free_kernel(grid: GridSpec, deriv: tuple = ()):
    """Multipliers for the whole-plane Biot-Savart convolution on the doubled grid.

    The Green function ``log(r/R)/(2 pi)`` is cut off at ``R = 3.5 L``, beyond
    every separation inside the box, so its transform is the smooth
    ``-(1 - J0(kR))/k^2``.  It is sampled on a 4x grid, brought back to real
    space, restricted to the separations that occur and transformed again for
    use with 2x zero padding.  ``deriv`` lists extra x-derivatives (0 or 1).
    """
    n, dx = grid.n, grid.dx
    m = 4 * n
    R = 3.5 * grid.half_width
    f = np.fft.fftfreq(m, dx)
    k = 2 * np.pi * np.sqrt(f[:, None] ** 2 + f[None, :] ** 2)
    g_hat = np.full_like(k, -R * R / 4)
    nz = k > 0
    g_hat[nz] = -(1 - j0(k[nz] * R)) / k[nz] ** 2
    f[m // 2] = 0.0  # odd multipliers vanish at Nyquist
    ik = (2j * np.pi * f[:, None], 2j * np.pi * f[None, :])
    base = (-ik[1] * g_hat, ik[0] * g_hat)
    keep = np.r_[0:n, m - n:m]
    out = []
    for b in base:
        for d in deriv:
            b = b * ik[d]
        kr = np.fft.ifft2(b).real[np.ix_(keep, keep)]
        out.append(np.fft.rfft2(kr))
    return out


def _free_apply(values, grid, deriv=()):
    n = grid.n
    pad = np.zeros((2 * n, 2 * n))
    pad[:n, :n] = values
    ph = np.fft.rfft2(pad)
    return [np.fft.irfft2(ph * mult, s=(2 * n, 2 * n))[:n, :n]
            for mult in _free_kernel(grid, tuple(deriv))]


def _fft(a):
    return np.fft.rfft2(a)


def _ifft(a, n):
    return np.fft.irfft2(a, s=(n, n))


@dataclass(frozen=True, eq=False)
class VorticityField:
    """A scalar field on the grid at time ``t`` (vorticity or a density)."""

    grid: GridSpec
    t: float
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n, self.grid.n):
            raise GridMismatch(f"values shape {v.shape} does not match grid n={self.grid.n}")
        object.__setattr__(self, "values", v)

    def integral(self) -> float:
        return self.grid.integrate(self.values)

    def to_csv(self) -> str:
        fh = io.StringIO()
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x1", "x2", "value"])
        x = self.grid.axis
        for i in range(self.grid.n):
            for j in range(self.grid.n):
                w.writerow([repr(float(x[i])), repr(float(x[j])), repr(float(self.values[i, j]))])
        return fh.getvalue()

    def to_bytes(self) -> bytes:
        head = struct.pack("<4sIQdd", GRID_MAGIC, GRID_VERSION, self.grid.n,
                           float(self.grid.half_width), float(self.t))
        return head + np.ascontiguousarray(self.values, dtype="<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, dealias: bool = True) -> "VorticityField":
        size = struct.calcsize("<4sIQdd")
        if len(data) < size:
            raise ValueError("grid dump shorter than its header")
        magic, version, n, L, t = struct.unpack_from("<4sIQdd", data, 0)
        if magic != GRID_MAGIC:
            raise ValueError("bad magic bytes in grid dump")
        if version != GRID_VERSION:
            raise ValueError(f"grid dump version {version}, expected {GRID_VERSION}")
        if len(data) != size + 8 * n * n:
            raise ValueError("grid dump payload has the wrong length")
        vals = np.frombuffer(data, dtype="<f8", offset=size).reshape(n, n).astype(float)
        return cls(GridSpec(L, int(n), dealias), t, vals)


GRID_MAGIC = b"VXGD"
GRID_VERSION = 1


@dataclass(frozen=True, eq=False)
class ConditionalDensitySet:
    """Conditional position densities ``f^{m_q}`` at circulation nodes ``m_q``.

    ``weights[q]`` is the probability mass carried by node ``q`` (atom
    probability, or Gauss-Legendre weight times the law density), and every
    ``densities[q]`` integrates to one, so ``w = sum_q weights_q m_q f_q``.
    """

    grid: GridSpec
    t: float
    m_nodes: np.ndarray
    weights: np.ndarray
    densities: np.ndarray
    sigma: float

    def __post_init__(self):
        d = np.asarray(self.densities, dtype=float)
        q = len(self.m_nodes)
        if d.shape != (q, self.grid.n, self.grid.n) or len(self.weights) != q:
            raise GridMismatch("densities must have shape (Q, n, n) with Q weights")
        object.__setattr__(self, "densities", d)
        object.__setattr__(self, "m_nodes", np.asarray(self.m_nodes, dtype=float))
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))

    def masses(self) -> np.ndarray:
        return self.densities.sum(axis=(1, 2)) * self.grid.cell_area

    def total_mass(self) -> float:
        return float(np.dot(self.weights, self.masses()))


def circulation_quadrature(law: CirculationLaw, n_nodes: int = 8):
    """Nodes and probability weights representing the circulation law."""
    if law.is_discrete:
        return law.atoms()
    x, w = roots_legendre(n_nodes)
    return law.A * x, w / 2.0  # U(-A, A): density 1/(2A) times the GL weight A*w


def conditional_set(law: CirculationLaw, grid: GridSpec, density, sigma: float,
                    n_nodes: int = 8, t: float = 0.0) -> ConditionalDensitySet:
    """Tabulate ``density(m, X1, X2)`` (conditional law of x given m) on the grid."""
    nodes, weights = circulation_quadrature(law, n_nodes)
    X1, X2 = grid.mesh()
    dens = np.array([density(m, X1, X2) for m in nodes])
    return ConditionalDensitySet(grid, t, nodes, weights, dens, sigma)


def reconstruct_vorticity(cset: ConditionalDensitySet) -> VorticityField:
    w = np.tensordot(cset.weights * cset.m_nodes, cset.densities, axes=1)
    return VorticityField(cset.grid, cset.t, w)


DEFAULT_GRID = GridSpec(8.0, 256)


def lamb_oseen(gamma: float, t0: float, sigma: float, t: float,
               grid: GridSpec = DEFAULT_GRID) -> VorticityField:
    """Exact radial Gaussian vortex ``gamma/(4 pi sigma s) exp(-|x|^2/(4 sigma s))``, s = t + t0."""
    s = t + t0
    if not s > 0:
        raise InvalidParameter(f"need t + t0 > 0, got {s}")
    X1, X2 = grid.mesh()
    a = 4.0 * sigma * s
    return VorticityField(grid, t, gamma / (math.pi * a) * np.exp(-(X1**2 + X2**2) / a))


def _velocity_hat(w_hat, ops: _Ops):
    # psi_hat = -w_hat/|k|^2 ; u = (-d2 psi, d1 psi)
    psi = -w_hat * ops.inv_ksq
    return -ops.ik2 * psi, ops.ik1 * psi


def velocity_from_vorticity(field: VorticityField) -> np.ndarray:
    """``u = K * w`` on the grid, shape ``(n, n, 2)``.

    ``grid.biot_savart == "periodic"`` uses the torus multiplier
    ``u_hat = i k_perp w_hat / |k|^2``; ``"free"`` convolves with the
    whole-plane kernel, which removes the periodic images.
    """
    u1, u2 = _velocity(_fft(field.values), _ops(field.grid), field.grid.n)
    return np.stack([u1, u2], axis=-1)


def velocity_gradient(field: VorticityField) -> np.ndarray:
    """Spectral ``du_a/dx_b`` as an ``(n, n, 2, 2)`` array."""
    grid = field.grid
    n = grid.n
    out = np.empty((n, n, 2, 2))
    if grid.biot_savart == "free":
        for b in range(2):
            g1, g2 = _free_apply(field.values, grid, (b,))
            out[..., 0, b] = g1
            out[..., 1, b] = g2
        return out
    ops = _ops(grid)
    u1h, u2h = _velocity_hat(_fft(field.values), ops)
    for a, uh in enumerate((u1h, u2h)):
        out[..., a, 0] = _ifft(ops.ik1 * uh, n)
        out[..., a, 1] = _ifft(ops.ik2 * uh, n)
    return out


def max_stable_dt(field: VorticityField, cfl: float = 1.0) -> float:
    u = velocity_from_vorticity(field)
    speed = np.max(np.abs(u[..., 0]) + np.abs(u[..., 1]))
    return math.inf if speed == 0 else cfl * field.grid.dx / speed


def _advection(u1, u2, f_hat, ops, n):
    """Dealiased transform of ``-(u . grad f)`` with the mean mode removed."""
    fh = f_hat * ops.mask
    d1 = _ifft(ops.ik1 * fh, n)
    d2 = _ifft(ops.ik2 * fh, n)
    out = -_fft(u1 * d1 + u2 * d2) * ops.mask
    out[0, 0] = 0.0  # integral of u.grad f vanishes for divergence-free u
    return out


def _velocity(w_hat, ops, n):
    if ops.grid.biot_savart == "free":
        return tuple(_free_apply(_ifft(w_hat, n), ops.grid))
    u1h, u2h = _velocity_hat(w_hat, ops)
    return _ifft(u1h, n), _ifft(u2h, n)


def _stage_velocity(w_hat, ops, n):
    return _velocity(w_hat * ops.mask, ops, n)


def _rk4_coupled(w_hat, f_hats, sigma, dt, ops, n):
    """One IF-RK4 step for the vorticity and any passive densities it carries."""
    E = np.exp(-sigma * ops.ksq * dt / 2)
    E2 = E * E
    states = [w_hat] + list(f_hats)

    def rhs(stage):
        u1, u2 = _stage_velocity(stage[0], ops, n)
        return [_advection(u1, u2, s, ops, n) for s in stage]

    k1 = rhs(states)
    k2 = rhs([E * (s + 0.5 * dt * k) for s, k in zip(states, k1)])
    k3 = rhs([E * s + 0.5 * dt * k for s, k in zip(states, k2)])
    k4 = rhs([E2 * s + dt * E * k for s, k in zip(states, k3)])
    new = [E2 * s + dt / 6 * (E2 * a + 2 * E * (b + c) + d)
           for s, a, b, c, d in zip(states, k1, k2, k3, k4)]
    return new[0], new[1:]


def _check_cfl(field, dt, cfl):
    limit = max_stable_dt(field, cfl)
    if dt > limit:
        raise CFLViolation(dt, 0.9 * limit)


def step_vorticity(field: VorticityField, dt: float, sigma: float, cfl: float = 1.0) -> VorticityField:
    """Advance the vorticity equation by one IF-RK4 step."""
    if not dt > 0:
        raise InvalidParameter(f"dt must be > 0, got {dt}")
    _check_cfl(field, dt, cfl)
    ops = _ops(field.grid)
    n = field.grid.n
    w_hat, _ = _rk4_coupled(_fft(field.values), [], sigma, dt, ops, n)
    return VorticityField(field.grid, field.t + dt, _ifft(w_hat, n))


def _check_pair(cset: ConditionalDensitySet, field: VorticityField):
    if cset.grid != field.grid:
        raise GridMismatch("conditional densities and vorticity live on different grids")
    if abs(cset.t - field.t) > 1e-12 * max(1.0, abs(field.t)):
        raise GridMismatch(f"time mismatch: densities at t={cset.t}, vorticity at t={field.t}")


def step_coupled(cset: ConditionalDensitySet, field: VorticityField, dt: float, cfl: float = 1.0):
    """Advance densities and vorticity together; both see the same stage velocities."""
    _check_pair(cset, field)
    _check_cfl(field, dt, cfl)
    ops = _ops(field.grid)
    n = field.grid.n
    w_hat, f_hats = _rk4_coupled(_fft(field.values), [_fft(f) for f in cset.densities],
                                 cset.sigma, dt, ops, n)
    new_field = VorticityField(field.grid, field.t + dt, _ifft(w_hat, n))
    dens = np.array([_ifft(fh, n) for fh in f_hats])
    return replace(cset, t=cset.t + dt, densities=dens), new_field


def step_conditional(cset: ConditionalDensitySet, field: VorticityField, dt: float,
                     cfl: float = 1.0) -> ConditionalDensitySet:
    """Advance every conditional density with the velocity generated by ``field``."""
    return step_coupled(cset, field, dt, cfl)[0]


def outer_mass_fraction(field: VorticityField, band: float = 0.1) -> float:
    X1, X2 = field.grid.mesh()
    edge = np.maximum(np.abs(X1), np.abs(X2)) > (1 - band) * field.grid.half_width
    a = np.abs(field.values)
    total = a.sum()
    return 0.0 if total == 0 else float(a[edge].sum() / total)


def solve_vorticity(field: VorticityField, sigma: float, dt: float, t_final: float,
                    snapshot_times=None, monitor: float | None = 1e-6, cfl: float = 1.0):
    """March ``step_vorticity`` to ``t_final``; returns the snapshots (list of fields).

    With ``monitor`` set, abort when the fraction of ``|w|`` in the outer 10%
    of the box exceeds it.
    """
    return _march(lambda f, h: step_vorticity(f, h, sigma, cfl), field, dt, t_final,
                  snapshot_times, monitor, key=lambda f: f)


def solve_coupled(cset: ConditionalDensitySet, field: VorticityField, dt: float, t_final: float,
                  snapshot_times=None, monitor: float | None = 1e-6, cfl: float = 1.0):
    """March the densities and vorticity together; snapshots are ``(cset, field)`` pairs."""

    def step(state, h):
        return step_coupled(state[0], state[1], h, cfl)

    return _march(step, (cset, field), dt, t_final, snapshot_times, monitor, key=lambda s: s[1])


def _retime(state, t):
    if isinstance(state, tuple):
        return tuple(replace(x, t=t) for x in state)
    return replace(state, t=t)


def _march(step, state, dt, t_final, snapshot_times, monitor, key):
    """Step to every snapshot time exactly; each segment uses equal substeps <= dt."""
    t0 = key(state).t
    if snapshot_times is None:
        snapshot_times = [t0, t_final]
    stops = sorted({float(s) for s in snapshot_times if t0 < s <= t_final} | {float(t_final)})
    wanted = {float(s) for s in snapshot_times}
    out = [state] if t0 in wanted else []
    for stop in stops:
        a = key(state).t
        n = max(int(math.ceil((stop - a) / dt - 1e-9)), 1)
        h = (stop - a) / n
        for _ in range(n):
            state = step(state, h)
            if monitor is not None:
                frac = outer_mass_fraction(key(state))
                if frac > monitor:
                    raise DomainTruncationError(
                        f"outer-band mass fraction {frac:.3g} exceeds {monitor:g} at t={key(state).t:g}")
        state = _retime(state, stop)
        if stop in wanted:
            out.append(state)
    return out
