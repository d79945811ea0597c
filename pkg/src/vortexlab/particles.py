"""Stochastic point-vortex system integrated with Euler-Maruyama.

    dX_i = (1/N) sum_{j != i} M_j K(X_i - X_j) dt + sqrt(2 sigma) dB_i

Circulations ``M_i`` are frozen at construction.  The Brownian increments of
step ``s`` are drawn from a stream seeded by ``(seed lineage, s)`` and are
indexed by particle, so the force method never changes the noise and a run
restored from a checkpoint continues exactly as the uninterrupted run.
"""
from __future__ import annotations

import csv
import io
import math
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import _backend
from .kernel import CirculationLaw, InvalidParameter, KernelSpec, sample_circulations
from .tree import tree_drift


class IntegratorBlowup(FloatingPointError):
    """A step produced a non-finite position."""

    def __init__(self, index, step, t):
        super().__init__(f"non-finite position for particle {index} at step {step} (t={t:g})")
        self.index = index
        self.step = step
        self.t = t


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


@dataclass(frozen=True)
class SeedLineage:
    """Root entropy plus the spawn path that identifies one realization."""

    entropy: int
    spawn_key: tuple = ()

    def sequence(self, *suffix) -> np.random.SeedSequence:
        return np.random.SeedSequence(self.entropy, spawn_key=tuple(self.spawn_key) + tuple(suffix))

    def noise(self, step: int, n: int) -> np.ndarray:
        rng = np.random.Generator(np.random.PCG64(self.sequence(1, int(step))))
        return rng.standard_normal((n, 2))

    def init_rng(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.sequence(0)))


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    positions: np.ndarray
    circulations: np.ndarray
    sigma: float
    t: float = 0.0
    step_index: int = 0
    lineage: SeedLineage = field(default_factory=lambda: SeedLineage(0))

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float, order="C")
        circ = np.array(self.circulations, dtype=float)
        if pos.ndim != 2 or pos.shape[1] != 2 or pos.shape[0] < 1:
            raise InvalidParameter(f"positions must have shape (N, 2) with N >= 1, got {pos.shape}")
        if circ.shape != (pos.shape[0],):
            raise InvalidParameter("need one circulation per particle")
        if not self.sigma >= 0:
            raise InvalidParameter(f"sigma must be >= 0, got {self.sigma}")
        pos.setflags(write=False)
        circ.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "circulations", circ)

    @property
    def n_particles(self) -> int:
        return self.positions.shape[0]

    def with_positions(self, positions, t, step_index):
        return replace(self, positions=positions, t=t, step_index=step_index)

    def same_as(self, other) -> bool:
        """Exact equality of every field, including the RNG lineage."""
        return (
            np.array_equal(self.positions, other.positions)
            and np.array_equal(self.circulations, other.circulations)
            and self.sigma == other.sigma
            and self.t == other.t
            and self.step_index == other.step_index
            and self.lineage == other.lineage
        )


@dataclass(frozen=True)
class SimConfig:
    dt: float
    t_final: float
    kernel: KernelSpec = KernelSpec()
    force_method: str = "direct"
    theta: float = 0.5
    tree_order: int = 8
    n_replicas: int = 1
    seed: int = 0
    interact: bool = True
    nthreads: int = 1
    backend: str | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise InvalidParameter(f"dt must be > 0, got {self.dt}")
        if self.force_method not in ("direct", "tree"):
            raise InvalidParameter(f"unknown force method {self.force_method!r}")
        if self.force_method == "tree" and not 0 < self.theta <= 1:
            raise InvalidParameter(f"theta must lie in (0, 1], got {self.theta}")
        if self.n_replicas < 1:
            raise InvalidParameter("n_replicas must be >= 1")


@dataclass(frozen=True)
class ConservedDiagnostics:
    linear_impulse: np.ndarray
    angular_impulse: float
    hamiltonian: float


@dataclass
class Trajectory:
    times: np.ndarray
    steps: np.ndarray
    positions: np.ndarray  # (snapshots, N, 2)
    circulations: np.ndarray
    sigma: float
    final: ParticleEnsemble

    def snapshot(self, s: int) -> np.ndarray:
        return self.positions[s]

    def to_csv(self, fh=None) -> str | None:
        """Write rows ``step,t,i,m,x1,x2``; returns the text when ``fh`` is None."""
        own = fh is None
        if own:
            fh = io.StringIO()
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "t", "i", "m", "x1", "x2"])
        for s, (step, t) in enumerate(zip(self.steps, self.times)):
            for i, (m, x) in enumerate(zip(self.circulations, self.positions[s])):
                w.writerow([int(step), repr(float(t)), i, repr(float(m)), repr(float(x[0])), repr(float(x[1]))])
        return fh.getvalue() if own else None


def drift_velocities(ens: ParticleEnsemble, cfg: SimConfig) -> np.ndarray:
    """``b_i = (1/N) sum_j M_j K(X_i - X_j)``, self term zero."""
    n = ens.n_particles
    if not cfg.interact or n == 1:
        return np.zeros((n, 2))
    if cfg.force_method == "tree":
        return tree_drift(ens.positions, ens.circulations, theta=cfg.theta,
                          delta=cfg.kernel.delta, order=cfg.tree_order,
                          nthreads=cfg.nthreads, backend=cfg.backend)
    out = np.zeros((n, 2))
    _backend.get(cfg.backend).direct_drift(ens.positions, ens.circulations,
                                           float(cfg.kernel.delta), out, cfg.nthreads)
    return out


def em_step(ens: ParticleEnsemble, cfg: SimConfig, dt: float | None = None,
            noise: np.ndarray | None = None) -> ParticleEnsemble:
    """One Euler-Maruyama step; ``noise`` overrides the lineage draw."""
    h = cfg.dt if dt is None else dt
    if not h > 0:
        raise InvalidParameter(f"dt must be > 0, got {h}")
    b = drift_velocities(ens, cfg)
    new = ens.positions + b * h
    if ens.sigma > 0:
        xi = ens.lineage.noise(ens.step_index, ens.n_particles) if noise is None else noise
        new = new + math.sqrt(2.0 * ens.sigma * h) * xi
    bad = ~np.isfinite(new).all(axis=1)
    if bad.any():
        raise IntegratorBlowup(int(np.flatnonzero(bad)[0]), ens.step_index, ens.t)
    return ens.with_positions(new, ens.t + h, ens.step_index + 1)


def simulate(ens0: ParticleEnsemble, cfg: SimConfig, snapshot_times=None) -> Trajectory:
    """Integrate to ``cfg.t_final``, recording the state at ``snapshot_times``.

    Each snapshot is taken at the first step time at or past the requested
    time.  The default records only the initial and final states.
    """
    if cfg.t_final < ens0.t:
        raise InvalidParameter(f"t_final={cfg.t_final} precedes the ensemble time {ens0.t}")
    if snapshot_times is None:
        snapshot_times = [ens0.t, cfg.t_final]
    pending = sorted(set(float(s) for s in snapshot_times))
    tol = 1e-9 * cfg.dt
    times, steps, snaps = [], [], []

    def record(e):
        while pending and e.t >= pending[0] - tol:
            pending.pop(0)
            if not times or steps[-1] != e.step_index:
                times.append(e.t)
                steps.append(e.step_index)
                snaps.append(e.positions)

    ens = ens0
    record(ens)
    while ens.t < cfg.t_final - tol:
        # a remainder within rounding of dt takes the full step, so resumed runs match
        left = cfg.t_final - ens.t
        h = cfg.dt if left > cfg.dt - tol else left
        ens = em_step(ens, cfg, dt=h)
        record(ens)
    return Trajectory(np.array(times), np.array(steps, dtype=np.int64), np.array(snaps),
                      ens0.circulations, ens0.sigma, ens)


def conserved_diagnostics(ens: ParticleEnsemble) -> ConservedDiagnostics:
    x = ens.positions
    m = ens.circulations
    n = ens.n_particles
    lin = (m[:, None] * x).sum(axis=0)
    ang = float(np.sum(m * np.sum(x * x, axis=1)))
    ham = 0.0
    if n > 1:
        iu, ju = np.triu_indices(n, k=1)
        r = np.hypot(*(x[iu] - x[ju]).T)
        w = m[iu] * m[ju]
        if np.any(r == 0):
            s = np.sign(np.sum(w[r == 0]))
            ham = math.inf * (s if s != 0 else 1.0)
        else:
            ham = float(-2.0 * np.sum(w * np.log(r)) / (4 * math.pi * n))
    return ConservedDiagnostics(lin, ang, ham)


# ---------------------------------------------------------------- ensembles

def gaussian_sampler(law: CirculationLaw, variance: float = 1.0, centers=None):
    """Joint (m, x) sampler: draw ``m`` from ``law``, then ``x ~ N(c(m), variance I)``.

    ``centers`` maps a circulation value to the mean position (callable); the
    default is the origin, which makes ``m`` and ``x`` independent.
    """

    def sample(rng, n):
        m = sample_circulations(law, n, rng)
        x = rng.normal(scale=math.sqrt(variance), size=(n, 2))
        if centers is not None:
            x = x + np.array([centers(mi) for mi in m], dtype=float).reshape(n, 2)
        return m, x

    return sample


def child_lineages(seed: int, n: int) -> list[SeedLineage]:
    return [SeedLineage(int(seed), (r,)) for r in range(n)]


def make_ensemble(sampler, n: int, sigma: float, lineage: SeedLineage) -> ParticleEnsemble:
    m, x = sampler(lineage.init_rng(), n)
    return ParticleEnsemble(x, m, sigma, lineage=lineage)


def run_ensemble(sampler, n_particles: int, sigma: float, cfg: SimConfig,
                 snapshot_times=None, workers: int = 1) -> list[Trajectory]:
    """Independent replicas with child seeds spawned from ``cfg.seed``.

    ``sampler(rng, n)`` returns ``(circulations, positions)`` jointly.
    """
    lineages = child_lineages(cfg.seed, cfg.n_replicas)

    def one(lin):
        return simulate(make_ensemble(sampler, n_particles, sigma, lin), cfg, snapshot_times)

    if workers <= 1:
        return [one(lin) for lin in lineages]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, lineages))


# -------------------------------------------------------------- checkpoints

MAGIC = b"VXCK"
VERSION = 1
_HEAD = struct.Struct("<4sIQddQI")


def checkpoint(ens: ParticleEnsemble) -> bytes:
    """Serialize to the versioned little-endian format (CRC32 trailer)."""
    ent = int(ens.lineage.entropy)
    ent_bytes = ent.to_bytes(max(1, (ent.bit_length() + 7) // 8), "little")
    key = tuple(int(k) for k in ens.lineage.spawn_key)
    body = bytearray(_HEAD.pack(MAGIC, VERSION, ens.n_particles, float(ens.t),
                                float(ens.sigma), int(ens.step_index), len(ent_bytes)))
    body += ent_bytes
    body += struct.pack("<I", len(key))
    body += struct.pack(f"<{len(key)}Q", *key)
    body += ens.circulations.astype("<f8").tobytes()
    body += ens.positions.astype("<f8").tobytes()
    body += struct.pack("<I", zlib.crc32(body))
    return bytes(body)


def restore(data: bytes) -> ParticleEnsemble:
    if len(data) < _HEAD.size + 8:
        raise CorruptCheckpoint("checkpoint shorter than its header")
    magic, version, n, t, sigma, step, nent = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise CorruptCheckpoint("bad magic bytes")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {VERSION}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CorruptCheckpoint("checksum mismatch (truncated or modified checkpoint)")
    off = _HEAD.size
    entropy = int.from_bytes(data[off:off + nent], "little")
    off += nent
    (nkey,) = struct.unpack_from("<I", data, off)
    off += 4
    key = struct.unpack_from(f"<{nkey}Q", data, off)
    off += 8 * nkey
    expected = off + 8 * n + 16 * n + 4
    if len(data) != expected:
        raise CorruptCheckpoint(f"payload length {len(data)} != expected {expected}")
    circ = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(float)
    off += 8 * n
    pos = np.frombuffer(data, dtype="<f8", count=2 * n, offset=off).astype(float).reshape(n, 2)
    return ParticleEnsemble(pos, circ, sigma, t=t, step_index=step,
                            lineage=SeedLineage(entropy, tuple(key)))
