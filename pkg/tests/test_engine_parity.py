"""Compiled kernel vs reference numpy loop on identical inputs."""

import numpy as np
import pytest

import ekisub
from ekisub import ensemble, linops, subspaces
from ekisub._engine import reference

fastloop = pytest.importorskip(
    "ekisub._engine._fastloop", reason="compiled backend not built"
)


def loop_inputs(inst, max_iters, stop_tol=0.0, noise=None):
    obs = inst.obs
    stats = ensemble.empirical_stats(inst.ens0, obs)
    obasis = subspaces.build_observation_basis(stats, obs)
    sbasis = subspaces.build_state_basis(obasis, stats, obs)
    pobs = subspaces.observation_projectors(obasis, obs.sigma)
    pst = subspaces.state_projectors(sbasis, obs)
    vstar = linops.weighted_pseudoinverse_apply(obs, inst.y)
    return (
        inst.ens0.particles, obs.H, obs.sigma.entries, inst.y, vstar,
        pobs.P, pobs.Q, pobs.N, pst.P, pst.Q, pst.N,
        obasis.W[:, : obasis.r], max_iters, stop_tol, noise,
    )


def assert_same_outputs(ref, fast):
    V_r, norms_r, eig_r, rec_r = ref
    V_f, norms_f, eig_f, rec_f = fast
    assert rec_r == rec_f
    np.testing.assert_allclose(V_f, V_r, rtol=1e-12, atol=1e-13)
    for name in reference.QUANTITIES:
        np.testing.assert_allclose(norms_f[name], norms_r[name], rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(eig_f, eig_r, rtol=1e-12, atol=1e-15)


def test_backend_reports_compiled():
    assert ekisub.backend_name() == "compiled"


def test_deterministic_parity(canonical):
    args = loop_inputs(canonical, 150)
    assert_same_outputs(reference.run_loop(*args), fastloop.run_loop(*args))


def test_stochastic_parity(canonical):
    J = canonical.ens0.n_particles
    noise = ensemble.NoiseStream(3, canonical.obs.sigma, J).draw_block(80)
    args = loop_inputs(canonical, 80, noise=noise)
    assert_same_outputs(reference.run_loop(*args), fastloop.run_loop(*args))


def test_early_stop_parity(canonical):
    args = loop_inputs(canonical, 400, stop_tol=0.5)
    ref = reference.run_loop(*args)
    fast = fastloop.run_loop(*args)
    assert ref[3] < 401  # the tolerance actually triggers
    assert_same_outputs(ref, fast)


def test_input_ensemble_not_mutated(canonical):
    args = loop_inputs(canonical, 10)
    before = args[0].copy()
    fastloop.run_loop(*args)
    np.testing.assert_array_equal(args[0], before)


def test_collapsed_ensemble_parity(canonical):
    # zero covariance: no populated directions, update is a no-op
    obs = canonical.obs
    V0 = np.tile(np.linspace(0.0, 1.0, obs.d)[:, None], (1, 4))
    eye_n, eye_d = np.eye(obs.n), np.eye(obs.d)
    zero_n, zero_d = np.zeros((obs.n, obs.n)), np.zeros((obs.d, obs.d))
    vstar = linops.weighted_pseudoinverse_apply(obs, canonical.y)
    args = (
        V0, obs.H, obs.sigma.entries, canonical.y, vstar,
        zero_n, zero_n, eye_n, zero_d, zero_d, eye_d,
        np.empty((obs.n, 0)), 5, 0.0, None,
    )
    ref = reference.run_loop(*args)
    fast = fastloop.run_loop(*args)
    assert_same_outputs(ref, fast)
    np.testing.assert_allclose(fast[0], V0, atol=1e-14)


def test_env_override_selects_reference(monkeypatch):
    import importlib

    import ekisub._engine as engine

    monkeypatch.setenv("EKISUB_BACKEND", "python")
    importlib.reload(engine)
    try:
        assert engine.backend_name() == "python"
    finally:
        monkeypatch.delenv("EKISUB_BACKEND")
        importlib.reload(engine)
    assert engine.backend_name() == "compiled"
