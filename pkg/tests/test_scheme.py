import numpy as np
import pytest
import scipy.sparse as sp

from chnsfh.errors import NewtonFailure, OutOfBounds
from chnsfh.grid import BcMode, MacVelocity
from chnsfh.operators import flory_huggins_energy
from chnsfh.scheme import (
    CHNSIntegrator,
    SchemeParams,
    SimState,
    init_history,
    integrator,
    project_velocity,
    run,
    solve_momentum,
    state_monitors,
    step,
)
from chnsfh.verification import MmsFields, mms_exact, mms_params, mms_sources

BCS = [BcMode.PHYSICAL, BcMode.PERIODIC]


def noisy_phase(grid, mean=0.1, amp=0.05, seed=0):
    rng = np.random.default_rng(seed)
    d = rng.uniform(-amp, amp, grid.n**2)
    return grid.fill(grid.unpack(mean + d - d.mean()))


def random_flow(grid, seed):
    rng = np.random.default_rng(seed)
    return grid.unpack_velocity(rng.standard_normal(grid.velocity_size))


@pytest.mark.parametrize("bc", BCS)
def test_constant_state_is_an_equilibrium(bc):
    prm = SchemeParams(n=8, tau=0.01, bc=bc)
    g = prm.grid
    phi = g.sample(lambda X, Y: 0.3 + 0 * X)
    state = init_history(phi, g.zero_velocity(), prm)
    for _ in range(3):
        state, diag = step(state, prm)
    np.testing.assert_allclose(state.phi[g.block], 0.3, atol=1e-13)
    assert g.norm(state.u, np.inf) < 1e-13
    assert diag.outer_iters <= 2


@pytest.mark.parametrize("bc", BCS)
def test_steps_conserve_mass_and_stay_divergence_free(bc):
    prm = SchemeParams(n=16, tau=1e-3, eps=0.05, bc=bc)
    g = prm.grid
    state = init_history(noisy_phase(g), random_flow(g, 1) * 0.1, prm)
    m0 = g.mean(state.phi)
    rows = []
    run(state, prm, 10, callback=lambda s, d: rows.append(d))
    for d in rows:
        assert abs(d.mass - m0) <= 1e-13
        assert d.div_inf <= 1e-9
        assert -1 < d.phi_min and d.phi_max < 1


@pytest.mark.parametrize("bc", BCS)
def test_projection_removes_gradients_exactly(bc):
    prm = SchemeParams(n=16, tau=0.01, bc=bc)
    g = prm.grid
    rng = np.random.default_rng(4)
    q = g.fill(g.unpack(rng.standard_normal(g.n**2)))
    u_hat = g.fill_velocity(g.grad(q))
    u, p = project_velocity(u_hat, g.zeros("c"), prm)
    assert g.norm(u, np.inf) <= 1e-9
    # the pressure increment recovers q up to a constant: u = u_hat - (tau/2) grad dp
    dq = (p - 2.0 / prm.tau * q)[g.block]
    assert np.ptp(dq) <= 1e-8 * np.ptp(q[g.block]) * 2.0 / prm.tau


@pytest.mark.parametrize("bc", BCS)
def test_projection_is_a_contraction(bc):
    prm = SchemeParams(n=16, tau=0.01, bc=bc)
    g = prm.grid
    u_hat = random_flow(g, 5)
    u, _ = project_velocity(u_hat, g.zeros("c"), prm)
    assert g.norm(g.div(u), np.inf) <= 1e-9
    assert g.norm(u) <= g.norm(u_hat)
    u2, _ = project_velocity(u, g.zeros("c"), prm)
    assert g.norm(u2 - u, np.inf) <= 1e-9


@pytest.mark.parametrize("bc", BCS)
def test_momentum_reduces_to_stokes_for_uniform_phase(bc):
    prm = SchemeParams(n=8, tau=0.02, nu=0.7, bc=bc)
    g = prm.grid
    phi = g.sample(lambda X, Y: 0.2 + 0 * X)
    mu = g.sample(lambda X, Y: 1.5 + 0 * X)
    f = random_flow(g, 6)
    zero = g.zero_velocity()
    u = solve_momentum(zero, zero, g.zeros("c"), phi, mu, prm, src=f)
    L = sp.block_diag(g.vector_lap_matrices()).toarray()
    A = np.eye(len(L)) / prm.tau - 0.5 * prm.nu * L
    ref = np.linalg.solve(A, g.pack_velocity(f))
    np.testing.assert_allclose(g.pack_velocity(u), ref, atol=1e-9)


def test_history_uses_exact_back_level():
    prm = mms_params(4)
    g = prm.grid
    mms = MmsFields.from_params(prm)
    src = mms_sources(g, mms)
    phi0, u0, p0 = mms_exact(g, 0.0, mms)
    state = init_history(phi0, u0, prm, src)
    phi_m, u_m, _ = mms_exact(g, -prm.tau, mms)
    np.testing.assert_array_equal(state.phi_prev, g.fill(phi_m))
    np.testing.assert_array_equal(g.pack_velocity(state.u_prev), g.pack_velocity(u_m))
    np.testing.assert_array_equal(state.p, g.fill(p0))


def _backward_error(n, tau):
    prm = mms_params(5, n=n, tau=tau)
    g = prm.grid
    mms = MmsFields.from_params(prm)
    phi0, u0, _ = mms_exact(g, 0.0, mms)
    state = integrator(prm).init_history(phi0, u0, mms_sources(g, mms), use_exact=False)
    phi_e, _, _ = mms_exact(g, -tau, mms)
    return g.norm(state.phi_prev - phi_e, np.inf)


def test_backward_evaluation_is_consistent():
    # error = tau * O(h^2) + O(tau^2); on these grids the first term dominates
    e = {(n, t): _backward_error(n, t) for n in (64, 128) for t in (0.01, 0.005)}
    assert 1.8 < e[64, 0.01] / e[64, 0.005] < 2.2
    assert 3.5 < e[64, 0.005] / e[128, 0.005] < 4.5


def test_backward_evaluation_without_sources_keeps_mass_and_bounds():
    prm = SchemeParams(n=16, tau=0.5, eps=0.05)
    g = prm.grid
    phi0 = noisy_phase(g, mean=0.0, amp=0.05, seed=3)
    phi0[g.block] += 0.9 * np.sign(phi0[g.block])
    g.fill(phi0, inplace=True)
    state = init_history(phi0, g.zero_velocity(), prm)
    assert abs(g.mean(state.phi_prev) - g.mean(phi0)) < 1e-14
    assert np.max(np.abs(state.phi_prev)) < 1
    assert not np.any(state.p)


def test_initial_phase_must_be_inside_bounds():
    prm = SchemeParams(n=4, tau=0.1)
    g = prm.grid
    with pytest.raises(OutOfBounds):
        init_history(g.sample(lambda X, Y: 1.0 + 0 * X), g.zero_velocity(), prm)


def test_positivity_near_pure_phases():
    prm = SchemeParams(n=32, tau=1e-2, eps=0.05)
    g = prm.grid
    phi0 = g.sample(lambda X, Y: 0.999 * np.tanh((X - 0.5) / 0.01))
    state = init_history(phi0, g.zero_velocity(), prm)
    for _ in range(5):
        state, diag = step(state, prm)
        assert -1 < diag.phi_min and diag.phi_max < 1


def test_energy_decays_from_smooth_data():
    prm = SchemeParams(n=32, tau=1e-3, eps=0.05)
    g = prm.grid
    phi0 = g.sample(lambda X, Y: 0.2 * np.cos(2 * np.pi * X) * np.cos(np.pi * Y))
    state = init_history(phi0, g.zero_velocity(), prm)
    e0 = state_monitors(g, state, prm)["energy"]
    energies = []
    run(state, prm, 20, callback=lambda s, d: energies.append(d.energy))
    assert energies[-1] < e0
    assert flory_huggins_energy(g, phi0, prm.eps, prm.theta0) == pytest.approx(e0)


def test_newton_failure_is_raised():
    prm = SchemeParams(n=8, tau=1e-2, eps=0.05, newton_max=1)
    g = prm.grid
    state = init_history(noisy_phase(g, amp=0.05), g.zero_velocity(), prm)
    with pytest.raises(NewtonFailure) as exc:
        step(state, prm)
    assert len(exc.value.residuals) == 2


@pytest.mark.parametrize(
    "bad", [dict(tau=0.0), dict(tau=1.5), dict(eps=-1.0), dict(n=1), dict(safety_fraction=1.0)]
)
def test_parameter_validation(bad):
    base = dict(n=8, tau=0.01)
    base.update(bad)
    with pytest.raises(ValueError):
        SchemeParams(**base)


def test_integrator_is_shared_per_parameter_set():
    prm = SchemeParams(n=8, tau=0.01)
    assert integrator(prm) is integrator(SchemeParams(n=8, tau=0.01))
    assert isinstance(integrator(prm), CHNSIntegrator)


def test_state_monitors_fields():
    prm = SchemeParams(n=8, tau=0.01)
    g = prm.grid
    phi = noisy_phase(g)
    st = SimState(0, phi, phi, g.zero_velocity(), g.zero_velocity(), g.zeros("c"), mass0=0.0)
    mon = state_monitors(g, st, prm)
    assert set(mon) == {"mass", "mass_drift", "phi_min", "phi_max", "margin", "energy", "div_inf"}
    assert mon["mass_drift"] == pytest.approx(0.1)
    assert isinstance(st.u, MacVelocity)


@pytest.mark.parametrize("bc", BCS)
def test_momentum_solve_balances_kinetic_energy(bc):
    # with no pressure, no capillary force and no source, pairing the momentum
    # equation with 2 u_bar leaves only viscous dissipation (convection is skew)
    prm = SchemeParams(n=16, tau=0.01, nu=0.3, bc=bc)
    g = prm.grid
    u_n, u_nm1 = random_flow(g, 7), random_flow(g, 8)
    zero_c = g.zeros("c")
    u_hat = solve_momentum(u_n, u_nm1, zero_c, zero_c, zero_c, prm)
    u_bar = g.fill_velocity(0.5 * (u_hat + u_n))
    lhs = g.inner(u_hat, u_hat) - g.inner(u_n, u_n)
    dissipation = 2 * prm.nu * prm.tau * g.grad_norm_sq(u_bar)
    assert lhs + dissipation == pytest.approx(0.0, abs=1e-10 * g.inner(u_n, u_n))


def test_zero_data_gives_zero_history():
    prm = SchemeParams(n=8, tau=0.01)
    g = prm.grid
    state = init_history(g.zeros("c"), g.zero_velocity(), prm)
    assert not np.any(state.phi_prev) and not np.any(g.pack_velocity(state.u_prev))
