import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import two_vortex_drift
from vortexlab import _backend
from vortexlab.kernel import CirculationLaw, InvalidParameter, KernelSpec
from vortexlab.particles import (CheckpointVersionError, CorruptCheckpoint, IntegratorBlowup, ParticleEnsemble,
                                 SeedLineage, SimConfig, checkpoint, child_lineages, conserved_diagnostics,
                                 drift_velocities, em_step, gaussian_sampler, restore, run_ensemble, simulate)
from vortexlab.tree import tree_drift

CFG = SimConfig(dt=1e-3, t_final=1.0)


def random_state(n, seed=0, sigma=0.0):
    rng = np.random.default_rng(seed)
    return ParticleEnsemble(rng.normal(size=(n, 2)), rng.uniform(-1, 1, n), sigma, lineage=SeedLineage(seed))


def test_single_particle_has_zero_drift():
    e = ParticleEnsemble([[0.3, 0.4]], [1.0], 0.0)
    assert np.all(drift_velocities(e, CFG) == 0)


@pytest.mark.parametrize("d,m", [(0.5, 1.0), (2.0, -0.3)])
def test_two_vortex_drift(d, m):
    e = ParticleEnsemble([[d, 0.0], [-d, 0.0]], [m, m], 0.0)
    np.testing.assert_allclose(drift_velocities(e, CFG), two_vortex_drift(d, m), rtol=1e-14, atol=1e-300)


def test_coincident_pair_contributes_zero():
    e = ParticleEnsemble([[1.0, 1.0], [1.0, 1.0], [0.0, 0.0]], [1.0, 1.0, 0.0], 0.0)
    b = drift_velocities(e, CFG)
    assert np.all(np.isfinite(b)) and np.all(b[:2] == 0)


def test_tree_matches_direct_on_gaussian_cloud():
    rng = np.random.default_rng(1)
    n = 4096
    x = rng.normal(size=(n, 2))
    m = rng.choice([-1.0, 1.0], n)
    e = ParticleEnsemble(x, m, 0.0)
    direct = drift_velocities(e, CFG)
    tree = drift_velocities(e, SimConfig(dt=1e-3, t_final=1.0, force_method="tree", theta=0.5))
    rms = math.sqrt(np.mean(direct**2))
    assert np.max(np.abs(tree - direct)) <= 1e-3 * rms


def test_tree_error_shrinks_with_theta():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2000, 2))
    m = rng.uniform(-1, 1, 2000)
    ref = drift_velocities(ParticleEnsemble(x, m, 0.0), CFG)
    errs = [np.max(np.abs(tree_drift(x, m, theta=th, order=4) - ref)) for th in (1.0, 0.7, 0.5, 0.3)]
    assert all(b <= a for a, b in zip(errs, errs[1:]))


def test_backends_agree():
    e = random_state(300, 4)
    out = {}
    for name in ("python", "cython"):
        try:
            out[name] = drift_velocities(e, SimConfig(dt=1e-3, t_final=1.0, backend=name))
        except ImportError:
            pytest.skip("compiled backend not built")
    np.testing.assert_array_equal(out["python"], out["cython"])
    tp = tree_drift(e.positions, e.circulations, backend="python")
    tc = tree_drift(e.positions, e.circulations, backend="cython")
    np.testing.assert_allclose(tp, tc, rtol=0, atol=1e-15)


def test_direct_bit_identical_across_threads():
    e = random_state(500, 5)
    a = drift_velocities(e, SimConfig(dt=1e-3, t_final=1.0, nthreads=1))
    b = drift_velocities(e, SimConfig(dt=1e-3, t_final=1.0, nthreads=4))
    np.testing.assert_array_equal(a, b)


def test_em_step_frozen_single_particle():
    e = ParticleEnsemble([[1.0, 2.0]], [0.5], 0.0)
    e1 = em_step(e, CFG)
    np.testing.assert_array_equal(e1.positions, e.positions)
    assert e1.step_index == 1 and e1.t == pytest.approx(1e-3)


def test_em_increment_variance():
    sigma, dt, n = 0.5, 0.01, 10**4
    e = ParticleEnsemble(np.zeros((n, 2)), np.zeros(n), sigma, lineage=SeedLineage(11))
    cfg = SimConfig(dt=dt, t_final=dt, interact=False)
    inc = em_step(e, cfg).positions
    assert np.var(inc, axis=0, ddof=1) == pytest.approx([2 * sigma * dt] * 2, rel=0.05)


def test_linear_impulse_conserved_one_step():
    e = random_state(8, 6)
    d0 = conserved_diagnostics(e).linear_impulse
    d1 = conserved_diagnostics(em_step(e, SimConfig(dt=1e-2, t_final=1.0))).linear_impulse
    assert np.max(np.abs(d1 - d0)) <= 1e-14


def test_circulations_never_change():
    e = random_state(16, 7, sigma=0.2)
    tr = simulate(e, SimConfig(dt=1e-2, t_final=0.1))
    assert tr.final.circulations.tobytes() == e.circulations.tobytes()


def test_blowup_reported():
    e = ParticleEnsemble([[1e308, 0.0], [-1e308, 0.0]], [1.0, 1.0], 1.0)
    with pytest.raises(IntegratorBlowup):
        em_step(e, SimConfig(dt=1e300, t_final=1e300))


def test_invalid_config():
    with pytest.raises(InvalidParameter):
        SimConfig(dt=0.0, t_final=1.0)
    with pytest.raises(InvalidParameter):
        SimConfig(dt=1e-3, t_final=1.0, force_method="tree", theta=1.5)


def test_simulate_zero_horizon():
    e = random_state(4, 8, sigma=0.3)
    tr = simulate(e, SimConfig(dt=1e-2, t_final=0.0))
    assert len(tr.times) == 1 and tr.final.same_as(e)


def test_simulate_bit_identical_reruns():
    e = random_state(32, 9, sigma=0.5)
    cfg = SimConfig(dt=1e-2, t_final=0.2)
    assert simulate(e, cfg).to_csv() == simulate(e, cfg).to_csv()


def test_trajectory_csv_columns():
    tr = simulate(random_state(3, 1, 0.1), SimConfig(dt=0.1, t_final=0.2))
    lines = tr.to_csv().splitlines()
    assert lines[0] == "step,t,i,m,x1,x2"
    assert len(lines) == 1 + 3 * len(tr.times)


def test_diagnostics_examples():
    d = conserved_diagnostics(ParticleEnsemble([[2.0, 0.0]], [1.0], 0.0))
    np.testing.assert_array_equal(d.linear_impulse, [2.0, 0.0])
    assert d.angular_impulse == 4.0 and d.hamiltonian == 0.0
    d = conserved_diagnostics(ParticleEnsemble([[0.7, 0.0], [-0.7, 0.0]], [1.0, -1.0], 0.0))
    np.testing.assert_array_equal(d.linear_impulse, [1.4, 0.0])
    d = conserved_diagnostics(ParticleEnsemble([[0.7, 0.0], [-0.7, 0.0]], [1.0, 1.0], 0.0))
    np.testing.assert_array_equal(d.linear_impulse, [0.0, 0.0])


def test_coincident_hamiltonian_is_signed_infinity():
    d = conserved_diagnostics(ParticleEnsemble([[0.0, 0.0], [0.0, 0.0]], [1.0, 1.0], 0.0))
    assert d.hamiltonian == math.inf


def test_diagnostics_permutation_invariant():
    e = random_state(16, 10)
    p = np.random.default_rng(0).permutation(16)
    a = conserved_diagnostics(e)
    b = conserved_diagnostics(ParticleEnsemble(e.positions[p], e.circulations[p], 0.0))
    np.testing.assert_allclose(b.linear_impulse, a.linear_impulse, rtol=0, atol=1e-15)
    assert b.angular_impulse == pytest.approx(a.angular_impulse, abs=1e-15 * 16)
    assert b.hamiltonian == pytest.approx(a.hamiltonian, abs=1e-15 * 16)


@given(st.integers(2, 12), st.integers(0, 2**32 - 1))
def test_permutation_equivariance(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 2))
    m = rng.uniform(-1, 1, n)
    xi = rng.standard_normal((n, 2))
    p = rng.permutation(n)
    cfg = SimConfig(dt=1e-2, t_final=1.0)
    a = em_step(ParticleEnsemble(x, m, 0.3), cfg, noise=xi).positions[p]
    b = em_step(ParticleEnsemble(x[p], m[p], 0.3), cfg, noise=xi[p]).positions
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)


def test_child_seeds_distinct():
    lins = child_lineages(123, 64)
    states = {tuple(l.sequence(0).generate_state(4)) for l in lins}
    assert len(states) == 64


def test_run_ensemble_single_replica_is_simulate():
    law = CirculationLaw.two_point()
    samp = gaussian_sampler(law, 1.0)
    cfg = SimConfig(dt=0.05, t_final=0.2, n_replicas=1, seed=3)
    tr = run_ensemble(samp, 16, 0.2, cfg)[0]
    from vortexlab.particles import make_ensemble
    ref = simulate(make_ensemble(samp, 16, 0.2, child_lineages(3, 1)[0]), cfg)
    assert tr.to_csv() == ref.to_csv()


def test_run_ensemble_workers_do_not_change_results():
    samp = gaussian_sampler(CirculationLaw.uniform(), 1.0)
    cfg = SimConfig(dt=0.05, t_final=0.2, n_replicas=4, seed=5)
    a = [t.to_csv() for t in run_ensemble(samp, 32, 0.3, cfg, workers=1)]
    b = [t.to_csv() for t in run_ensemble(samp, 32, 0.3, cfg, workers=3)]
    assert a == b


def test_diffusion_variance_of_free_particles():
    """10^4 independent single-particle replicas: Var X(1) = Var X(0) + 2 sigma T."""
    n, sigma, T = 10**4, 0.5, 1.0
    samp = gaussian_sampler(CirculationLaw.constant(1.0), 1.0)
    from vortexlab.particles import make_ensemble
    e = make_ensemble(samp, n, sigma, SeedLineage(21))
    tr = simulate(e, SimConfig(dt=0.05, t_final=T, interact=False))
    v = np.var(tr.final.positions, axis=0, ddof=1)
    se = (1.0 + 2 * sigma * T) * math.sqrt(2 / (n - 1))
    assert np.all(np.abs(v - (1.0 + 2 * sigma * T)) <= 3 * se)


def test_checkpoint_round_trip():
    e = em_step(random_state(50, 12, 0.4), CFG)
    r = restore(checkpoint(e))
    assert r.same_as(e)


def test_resume_equals_uninterrupted():
    e = random_state(40, 13, 0.4)
    full = simulate(e, SimConfig(dt=0.01, t_final=0.2)).final
    half = simulate(e, SimConfig(dt=0.01, t_final=0.1)).final
    rest = simulate(restore(checkpoint(half)), SimConfig(dt=0.01, t_final=0.2)).final
    np.testing.assert_array_equal(rest.positions, full.positions)
    assert rest.step_index == full.step_index


def test_truncated_checkpoint_rejected():
    blob = checkpoint(random_state(10, 14))
    for cut in (0, 10, len(blob) // 2, len(blob) - 1):
        with pytest.raises(CorruptCheckpoint):
            restore(blob[:cut])


def test_modified_checkpoint_rejected():
    blob = bytearray(checkpoint(random_state(10, 15)))
    blob[60] ^= 1
    with pytest.raises(CorruptCheckpoint):
        restore(bytes(blob))


def test_checkpoint_version_mismatch():
    import struct
    import zlib
    blob = bytearray(checkpoint(random_state(4, 16)))
    struct.pack_into("<I", blob, 4, 99)
    body = bytes(blob[:-4])
    blob[-4:] = struct.pack("<I", zlib.crc32(body))
    with pytest.raises(CheckpointVersionError):
        restore(bytes(blob))


def test_active_backend_reported():
    assert _backend.NAME in ("python", "cython")


def test_resume_with_inexact_split_time():
    # 0.25 is not reached exactly by summing 0.01 steps
    e = random_state(30, 15, 0.3)
    cfg = SimConfig(dt=0.01, t_final=0.5)
    full = simulate(e, cfg).final
    half = simulate(e, SimConfig(dt=0.01, t_final=0.25)).final
    assert half.step_index == 25
    rest = simulate(restore(checkpoint(half)), cfg).final
    assert rest.same_as(full)
