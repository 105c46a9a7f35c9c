import numpy as np
import pytest
from scipy.optimize import minimize

from porousflow.alg2 import (ALG2State, Alg2Params, SpaceTimeSystem, action_value,
                             continuity_residual, elliptic_step, multiplier_update,
                             project_parabola, prox_step, run_jko_step,
                             run_trajectory)
from porousflow.mesh import build_space_time_mesh, build_spatial_grid
from porousflow.physics import (BrooksCorey, LinearTwoPhase, PhaseSet,
                                total_energy_quadrature)


def bisect_root(fun, lo, hi, iters=200):
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if fun(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def projection_oracle(a0, b0, alpha):
    """Minimize the distance to (a0, b0) over the parabola boundary numerically."""
    from scipy.optimize import root

    def dist(b):
        a = -(b @ b) / alpha
        return (a - a0) ** 2 + ((b - b0) ** 2).sum()

    def grad(b):
        e = -(b @ b) / alpha - a0
        return -(4.0 * e / alpha) * b + 2.0 * (b - b0)

    best = None
    for scale in (0.25, 0.5, 0.75):
        res = minimize(dist, b0 * scale, method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-20, "maxiter": 20000,
                                "maxfev": 20000})
        if best is None or res.fun < best.fun:
            best = res
    sol = root(grad, best.x, tol=1e-14)     # polish first-order optimality
    b = sol.x if sol.success and dist(sol.x) <= best.fun + 1e-15 else best.x
    return -(b @ b) / alpha, b


# ------------------------------------------------------------- projection

def test_project_parabola_interior_passthrough():
    a, b = project_parabola(-1.0, np.zeros(2), 2.0)
    assert a == -1.0 and np.all(b == 0.0)


def test_project_parabola_apex():
    a, b = project_parabola(1.0, np.zeros(2), 2.0)
    assert a == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(b, 0.0)


def test_project_parabola_matches_cubic_oracle():
    # mu = kappa = 1: largest root of (1 - lam)(1 + lam)^2 + 0.5 = 0
    lam = bisect_root(lambda l: (1 - l) * (1 + l) ** 2 + 0.5, 1.0, 2.0)
    a, b = project_parabola(1.0, np.array([1.0, 0.0]), 2.0)
    assert a == pytest.approx(1.0 - lam, abs=1e-12)
    assert b[0] == pytest.approx(1.0 / (1.0 + lam), abs=1e-12)
    assert b[1] == 0.0
    assert lam == pytest.approx(1.112, abs=1e-3)


def test_project_parabola_feasibility_kkt_and_oracle():
    rng = np.random.default_rng(8)
    alpha = 2.0 * 1.5 / 0.7          # 2 mu / kappa
    n = 400
    a0 = rng.uniform(-1.0, 3.0, n)
    b0 = rng.uniform(-2.0, 2.0, (n, 2))
    a, b = project_parabola(a0, b0, alpha)
    feas = a + (b * b).sum(axis=1) / alpha
    assert np.max(feas) <= 1e-12
    outside = a0 + (b0 * b0).sum(axis=1) / alpha > 1e-6
    # KKT: (input - output) parallel to the boundary normal (1, 2 b'/alpha)
    u = np.column_stack([a0 - a, b0 - b])
    v = np.column_stack([np.ones(n), 2.0 * b / alpha])
    cross = np.stack([u[:, 1] * v[:, 2] - u[:, 2] * v[:, 1],
                      u[:, 2] * v[:, 0] - u[:, 0] * v[:, 2],
                      u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]], axis=1)
    norm = np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1)
    assert np.max(np.linalg.norm(cross[outside], axis=1) / norm[outside]) <= 1e-8
    for k in range(0, n, 29):
        if not outside[k]:
            continue
        a_ref, b_ref = projection_oracle(a0[k], b0[k], alpha)
        assert abs(a[k] - a_ref) <= 1e-8
        assert np.abs(b[k] - b_ref).max() <= 1e-8


def test_project_parabola_scalar_roundtrip_1d():
    a, b = project_parabola(0.5, np.array([0.3]), 4.0)
    assert a + b[0] ** 2 / 4.0 <= 1e-12


# ------------------------------------------------------------- elliptic step

def small_system(nx=4, ny=4, n_inner=1, r=1.0):
    grid = build_spatial_grid(nx, ny, ((0, 1), (0, 1)))
    mesh = build_space_time_mesh(grid, n_inner)
    return SpaceTimeSystem(mesh, Alg2Params(r=r))


def test_elliptic_step_zero_data_gives_zero():
    system = small_system()
    state = ALG2State.zeros(system.mesh, 2, r=1.0)
    s_prev = np.zeros((system.mesh.spatial.n_nodes, 2))
    phi = elliptic_step(state, s_prev, system)
    assert np.abs(phi).max() < 1e-12


def test_elliptic_step_permutation_equivariance():
    system = small_system()
    rng = np.random.default_rng(4)
    state = ALG2State.zeros(system.mesh, 2, r=1.0)
    state.a = rng.normal(size=state.a.shape)
    state.b = rng.normal(size=state.b.shape)
    state.c = rng.normal(size=state.c.shape)
    state.s = rng.normal(size=state.s.shape)
    state.m = rng.normal(size=state.m.shape)
    state.st1 = rng.normal(size=state.st1.shape)
    s_prev = rng.uniform(0, 1, (system.mesh.spatial.n_nodes, 2))
    phi = elliptic_step(state, s_prev, system).copy()

    swap = ALG2State.zeros(system.mesh, 2, r=1.0)
    for name in ("a", "b", "c", "s", "m", "st1"):
        setattr(swap, name, getattr(state, name)[::-1].copy())
    phi_swapped = elliptic_step(swap, s_prev[:, ::-1], system)
    assert np.allclose(phi_swapped, phi[::-1], atol=1e-12)


def mms_error(nx, n_inner):
    """Discretization error of the space-time solve on t^2 + x^2 (1d space)."""
    grid = build_spatial_grid(nx, None, (0.0, 1.0))
    mesh = build_space_time_mesh(grid, n_inner)
    system = SpaceTimeSystem(mesh)
    t = mesh.nodes[:, 0]
    x = mesh.nodes[:, 1]
    exact = t ** 2 + x ** 2
    # volume load f = -Laplace(phi*) = -4, lumped over elements
    rhs = np.zeros(mesh.n_nodes)
    np.add.at(rhs, mesh.elements,
              np.broadcast_to((-4.0) * mesh.element_measures[:, None] / (mesh.dim + 1),
                              mesh.elements.shape))
    # Robin data at t=1: d_t phi* + phi* = 3 + x^2, lumped spatial weights
    rhs[mesh.trace1_nodes] += mesh.trace_weights * (3.0 + grid.nodes[:, 0] ** 2)
    # Neumann data 2 on the side x=1 (zero on x=0 and at t=0), lumped in time
    side = np.isclose(x, 1.0)
    wt = np.full(n_inner + 1, 1.0 / n_inner)
    wt[0] = wt[-1] = 0.5 / n_inner
    rhs[side] += 2.0 * wt
    phi = system.solve(rhs)
    w_nodes = np.zeros(mesh.n_nodes)
    np.add.at(w_nodes, mesh.elements,
              np.broadcast_to(mesh.element_measures[:, None] / (mesh.dim + 1),
                              mesh.elements.shape))
    return float(np.sqrt(w_nodes @ (phi - exact) ** 2))


def test_elliptic_step_second_order_convergence():
    e1 = mms_error(8, 8)
    e2 = mms_error(16, 16)
    rate = np.log2(e1 / e2)
    assert rate >= 1.8


# ------------------------------------------------------------- prox step

def test_prox_step_zero_state_stays_zero():
    system = small_system()
    phases = PhaseSet([1.0, 1.0], [0.0, 0.0])
    model = LinearTwoPhase(1.0)
    state = ALG2State.zeros(system.mesh, 2, r=1.0)
    psi = phases.potentials(system.mesh.spatial.nodes)
    a, b, c = prox_step(state, system, 0.05, model, psi, phases)
    assert np.abs(a).max() == 0.0 and np.abs(b).max() == 0.0


def test_prox_step_terminal_on_simplex_gives_zero_c():
    system = small_system()
    phases = PhaseSet([1.0, 1.0], [0.0, 0.0])
    model = LinearTwoPhase(0.0)     # tau = 0 limit: pure simplex projection
    state = ALG2State.zeros(system.mesh, 2, r=1.0)
    state.st1[:] = 0.5
    psi = phases.potentials(system.mesh.spatial.nodes)
    prox_step(state, system, 0.0, model, psi, phases)
    assert np.abs(state.c).max() < 1e-14


def test_prox_step_general_r_matches_direct_minimization():
    # with r != 1 the terminal update must minimize (r/2)|c - cbar|^2 + E_tau^*(c);
    # at tau = 0 the conjugate is the simplex support function max_i c_i
    system = small_system(2, 2)
    phases = PhaseSet([1.0, 1.0], [0.0, 0.0])
    model = LinearTwoPhase(1.0)
    r = 2.5
    state = ALG2State.zeros(system.mesh, 2, r=r)
    rng = np.random.default_rng(12)
    state.st1 = rng.uniform(-1, 1, state.st1.shape)
    state.phi = rng.normal(size=state.phi.shape)
    psi = phases.potentials(system.mesh.spatial.nodes)
    prox_step(state, system, 0.0, model, psi, phases)
    cbar = (-state.phi[:, system.mesh.trace1_nodes] + state.st1 / r)
    for j in range(0, state.c.shape[1], 7):
        target = cbar[:, j]

        def objective(c):
            return 0.5 * r * ((c - target) ** 2).sum() + np.max(c)

        res = minimize(objective, np.zeros(2), method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-18, "maxiter": 10000})
        assert np.abs(state.c[:, j] - res.x).max() < 1e-6


# ------------------------------------------------------------- multiplier step

def test_multiplier_update_cases():
    system = small_system(2, 2)
    phases = PhaseSet([1.0, 1.0], [0.0, 0.0])
    state = ALG2State.zeros(system.mesh, 2, r=1.0)
    rng = np.random.default_rng(3)
    state.phi = rng.normal(size=state.phi.shape)
    dphi = system.gradient(state.phi)
    # fixed point: q = Lambda phi leaves sigma unchanged
    state.a = dphi[..., 0].copy()
    state.b = dphi[..., 1:].copy()
    state.c = -state.phi[:, system.mesh.trace1_nodes].copy()
    multiplier_update(state, system)
    assert np.abs(state.s).max() == 0.0
    assert np.abs(state.m).max() == 0.0
    assert np.abs(state.st1).max() == 0.0
    # sigma = r * residual from zero, and linear accumulation
    state.a -= 1.0
    multiplier_update(state, system)
    assert np.allclose(state.s, 1.0)
    multiplier_update(state, system)
    assert np.allclose(state.s, 2.0)


# ------------------------------------------------------------- action

def test_action_value_cases():
    phases = PhaseSet([3.0], [0.0], permeability=1.0)
    meas = np.array([1.0])
    assert action_value([[1.0]], [[[0.0]]], meas, phases).total == 0.0
    assert action_value([[0.0]], [[[0.0]]], meas, phases).total == 0.0
    act = action_value([[2.0]], [[[2.0]]], meas, phases)
    assert act.total == pytest.approx(3.0 * 4.0 / (2.0 * 2.0))
    act = action_value([[0.0]], [[[1.0]]], meas, phases)
    assert act.total == np.inf


# ------------------------------------------------------------- outer step

def test_jko_step_stationary_at_uniform_minimizer():
    system = small_system(6, 6)
    phases = PhaseSet([1.0, 1.0], [0.0, 0.0])      # no gravity
    model = LinearTwoPhase(1.0)
    n_sp = system.mesh.spatial.n_nodes
    s_prev = np.tile([0.5, 0.5], (n_sp, 1))
    s_next, info, _ = run_jko_step(s_prev, 0.05, system, model, phases,
                                   Alg2Params(tol=1e-8))
    assert info.converged
    assert np.abs(s_next - s_prev).max() < 1e-6
    assert info.action.total < 1e-10


def test_jko_step_invariants_and_continuity():
    system = small_system(8, 8)
    phases = PhaseSet([1.0, 1.0], [1.0, 0.87], gravity=(0.0, -1.0))
    model = LinearTwoPhase(0.5)
    grid = system.mesh.spatial
    s1 = np.exp(-4 * ((grid.nodes - 0.5) ** 2).sum(axis=1))
    s_prev = np.column_stack([1 - s1, s1])
    params = Alg2Params(tol=1e-6)
    s_next, info, state = run_jko_step(s_prev, 0.05, system, model, phases, params)
    assert info.converged
    assert info.iterations <= params.max_iter
    assert info.min_saturation >= -1e-8
    assert info.simplex_violation <= 1e-6
    assert info.mass_drift <= 1e-6
    # feasibility of the relaxed derivatives
    alpha = 2.0 * phases.viscosities[0] / phases.permeability
    feas = state.a[0] + (state.b[0] ** 2).sum(axis=1) / alpha
    assert feas.max() <= 1e-10
    assert state.s.min() >= -1e-10
    # energy does not increase
    w = grid.node_weights
    e0 = total_energy_quadrature(s_prev, grid.nodes, w, model, phases)
    assert info.energy <= e0 + 1e-8 * (1 + abs(e0))
    # weak continuity residual is controlled at convergence
    res = continuity_residual(state, s_prev, system)
    assert np.abs(res).max() <= 1e-5


def test_jko_step_solution_independent_of_r():
    system1 = small_system(4, 4, r=1.0)
    system2 = small_system(4, 4, r=2.0)
    phases = PhaseSet([1.0, 1.0], [1.0, 0.5], gravity=(0.0, -1.0))
    model = LinearTwoPhase(1.0)
    grid = system1.mesh.spatial
    s1 = np.clip(grid.nodes[:, 0], 0.05, 0.95)
    s_prev = np.column_stack([1 - s1, s1])
    out1, info1, _ = run_jko_step(s_prev, 0.1, system1, model, phases,
                                  Alg2Params(r=1.0, tol=1e-9))
    out2, info2, _ = run_jko_step(s_prev, 0.1, system2, model, phases,
                                  Alg2Params(r=2.0, tol=1e-9))
    assert info1.converged and info2.converged
    assert np.abs(out1 - out2).max() < 1e-5


def test_trajectory_zero_steps_echoes_input():
    system = small_system(3, 3)
    phases = PhaseSet([1.0, 1.0], [0.0, 0.0])
    model = LinearTwoPhase(1.0)
    n_sp = system.mesh.spatial.n_nodes
    s0 = np.tile([0.3, 0.7], (n_sp, 1))
    traj = run_trajectory(s0, 0.05, 0, system, model, phases)
    assert len(traj.states) == 1
    assert np.array_equal(traj.states[0], s0)


def test_trajectory_energy_monotone_and_mass_conserved():
    system = small_system(8, 8)
    phases = PhaseSet([1.0, 1.0], [1.0, 0.87], gravity=(0.0, -1.0))
    model = LinearTwoPhase(0.5)
    grid = system.mesh.spatial
    s1 = np.exp(-4 * ((grid.nodes - 0.5) ** 2).sum(axis=1))
    s0 = np.column_stack([1 - s1, s1])
    traj = run_trajectory(s0, 0.05, 5, system, model, phases, Alg2Params(tol=1e-6))
    e = np.array(traj.energies)
    assert np.all(np.diff(e) <= 1e-8 * (1 + abs(e[0])))
    m0 = s0.T @ grid.node_weights
    for s in traj.states:
        drift = np.abs(s.T @ grid.node_weights - m0) / np.abs(m0)
        assert drift.max() <= 1e-6


def test_jko_step_brooks_corey_smoke():
    system = small_system(6, 6)
    phases = PhaseSet([1.0, 1.0], [1.0, 0.87], gravity=(0.0, -1.0))
    model = BrooksCorey(1.0)
    grid = system.mesh.spatial
    s1 = np.where(grid.nodes[:, 0] < 0.5, 0.9, 0.0)
    s_prev = np.column_stack([1 - s1, s1])
    s_next, info, _ = run_jko_step(s_prev, 0.05, system, model, phases,
                                   Alg2Params(tol=1e-6))
    assert info.converged
    assert info.min_saturation >= -1e-8
    assert s_next[:, 1].max() < 1.0     # singular law pulls off the pure state
