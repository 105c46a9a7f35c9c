"""Saddle-point solver for the implicit Wasserstein time step.

Each outer step minimizes (1/2tau) W^2(s, s_prev) + E(s) through its dynamic
reformulation on the space-time cylinder (0,1) x Omega: an augmented
Lagrangian in (phi, q, sigma) is driven to a saddle point by alternating a
linear space-time elliptic solve in phi, pointwise parabola projections and
an energy prox in q, and a multiplier ascent in sigma = (s, m, s_tilde).

phi is piecewise linear on the simplicial space-time mesh. The relaxed
derivative q = (a, b, c) and the multiplier sigma live elementwise on the
extrusion cells (spatial cell x time slab): the derivative entering Steps 2-3
is the measure-weighted average of the P1 gradient over each extrusion cell,
and (c, s_tilde) sit on the t=1 spatial nodes with lumped quadrature. Keeping
one value per extrusion cell removes the intra-cell oscillation modes of the
simplicial splitting that the continuity pairing cannot control and that
otherwise stall the multiplier iteration; the terminal prox still decouples
node by node.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .physics import total_energy_quadrature

__all__ = [
    "ALG2State", "Alg2Params", "SpaceTimeSystem", "ActionValue", "JKOStepInfo",
    "Alg2ConvergenceError",
    "project_parabola", "elliptic_step", "prox_step", "multiplier_update",
    "run_jko_step", "run_trajectory", "action_value", "continuity_residual",
]

logger = logging.getLogger(__name__)

FEASIBILITY_TOL = 1e-12     # parabola constraint violation after projection


class Alg2ConvergenceError(RuntimeError):
    """Iteration cap reached with residuals above tolerance."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


@dataclass
class Alg2Params:
    r: float = 1.0
    tol: float = 1e-6
    max_iter: int = 5000
    mass_tol: float = 1e-6
    lin_tol: float = 1e-10          # only used by the iterative fallback solver
    linear_solver: str = "direct"   # "direct" (prefactorized) or "cg"
    on_nonconvergence: str = "raise"  # or "warn"


@dataclass
class ALG2State:
    """Saddle-point triple: potentials, relaxed derivatives, multipliers."""
    phi: np.ndarray    # (n_ph, n_nodes)
    a: np.ndarray      # (n_ph, n_bricks) relaxed time derivative
    b: np.ndarray      # (n_ph, n_bricks, sdim) relaxed spatial gradient
    c: np.ndarray      # (n_ph, n_sp) relaxed -phi(1,.)
    s: np.ndarray      # (n_ph, n_bricks) saturation multiplier
    m: np.ndarray      # (n_ph, n_bricks, sdim) momentum multiplier
    st1: np.ndarray    # (n_ph, n_sp) terminal saturation multiplier
    r: float

    @classmethod
    def zeros(cls, mesh, n_phases, r):
        sdim = mesh.dim - 1
        return cls(phi=np.zeros((n_phases, mesh.n_nodes)),
                   a=np.zeros((n_phases, mesh.n_bricks)),
                   b=np.zeros((n_phases, mesh.n_bricks, sdim)),
                   c=np.zeros((n_phases, len(mesh.trace1_nodes))),
                   s=np.zeros((n_phases, mesh.n_bricks)),
                   m=np.zeros((n_phases, mesh.n_bricks, sdim)),
                   st1=np.zeros((n_phases, len(mesh.trace1_nodes))),
                   r=float(r))


def averaged_gradient_operator(mesh):
    """Sparse map from nodal values to per-extrusion-cell mean gradients.

    Shape (n_bricks * dim, n_nodes); row block p holds the measure-weighted
    average over the simplices of extrusion cell p of the P1 gradient.
    """
    D = mesh.dim
    n_loc = D + 1
    rows, cols, vals = [], [], []
    scale = mesh.element_measures / mesh.brick_measures[mesh.element_brick]
    for d in range(D):
        rows.append(np.repeat(mesh.element_brick * D + d, n_loc))
        cols.append(mesh.elements.ravel())
        vals.append((mesh.gradients[:, :, d] * scale[:, None]).ravel())
    return sp.coo_matrix((np.concatenate(vals),
                          (np.concatenate(rows), np.concatenate(cols))),
                         shape=(mesh.n_bricks * D, mesh.n_nodes)).tocsr()


class SpaceTimeSystem:
    """Prefactorized operator of the phi-subproblem.

    The matrix pairs averaged gradients against themselves plus the lumped
    t=1 trace mass; it does not depend on the phase, the iterate, or the
    outer step, so one sparse factorization serves the whole run.
    """

    def __init__(self, mesh, params: Alg2Params = None):
        self.mesh = mesh
        self.params = params or Alg2Params()
        self.grad_op = averaged_gradient_operator(mesh)
        self.weights = np.repeat(mesh.brick_measures, mesh.dim)
        stiffness = (self.grad_op.T @ sp.diags(self.weights) @ self.grad_op)
        robin = sp.coo_matrix(
            (mesh.trace_weights, (mesh.trace1_nodes, mesh.trace1_nodes)),
            shape=(mesh.n_nodes, mesh.n_nodes))
        self.matrix = (stiffness + robin).tocsc()
        self._lu = None
        self._diag = None
        if self.params.linear_solver == "direct":
            self._lu = spla.splu(self.matrix)
        else:
            self._diag = self.matrix.diagonal()

    def solve(self, rhs):
        """Solve the phi system for one or several stacked right-hand sides."""
        rhs = np.asarray(rhs, float)
        if self._lu is not None:
            return self._lu.solve(rhs.T).T if rhs.ndim == 2 else self._lu.solve(rhs)
        rows = rhs if rhs.ndim == 2 else rhs[None, :]
        out = np.empty_like(rows)
        for k, rr in enumerate(rows):
            x, info = spla.cg(self.matrix, rr, rtol=self.params.lin_tol,
                              M=sp.diags(1.0 / self._diag), maxiter=20000)
            if info != 0:
                raise Alg2ConvergenceError(f"inner CG failed with info={info}")
            out[k] = x
        return out if rhs.ndim == 2 else out[0]

    def gradient(self, phi):
        """Averaged (d_t, grad_x) of stacked nodal fields, (..., n_bricks, dim)."""
        phi = np.asarray(phi, float)
        flat = (self.grad_op @ phi.reshape(-1, phi.shape[-1]).T).T
        return flat.reshape(phi.shape[:-1] + (self.mesh.n_bricks, self.mesh.dim))

    def gradient_transpose(self, flux):
        """Adjoint against brick fields: nodal vector of <flux, avg grad .>_W."""
        flux = np.asarray(flux, float)
        flat = (flux.reshape(-1, self.mesh.n_bricks * self.mesh.dim)
                * self.weights) @ self.grad_op
        return np.asarray(flat).reshape(flux.shape[:-2] + (self.mesh.n_nodes,))


def _largest_cubic_root(c2, c1, c0):
    """Largest real root of x^3 + c2 x^2 + c1 x + c0 = 0, vectorized."""
    p = c1 - c2 * c2 / 3.0
    q = 2.0 * c2 ** 3 / 27.0 - c2 * c1 / 3.0 + c0
    root = np.empty_like(p)
    three = -4.0 * p ** 3 - 27.0 * q * q >= 0.0
    if np.any(three):
        pm = np.minimum(p[three], -1e-300)
        mfac = 2.0 * np.sqrt(-pm / 3.0)
        arg = np.clip(3.0 * q[three] / (pm * mfac), -1.0, 1.0)
        root[three] = mfac * np.cos(np.arccos(arg) / 3.0)
    one = ~three
    if np.any(one):
        disc = np.sqrt(q[one] ** 2 / 4.0 + p[one] ** 3 / 27.0)
        root[one] = np.cbrt(-q[one] / 2.0 + disc) + np.cbrt(-q[one] / 2.0 - disc)
    return root - c2 / 3.0


def project_parabola(a, b, alpha):
    """Euclidean projection onto {(a, b) : a + |b|^2/alpha <= 0}.

    Interior points pass through; outside, the multiplier is the largest real
    root of (a - lam)(nu + lam)^2 + nu |b|^2 / 2 = 0 with nu = alpha/2, and
    the projection is (a - lam, nu b / (nu + lam)).
    """
    a_in = np.asarray(a, float)
    scalar = a_in.ndim == 0
    aa = np.atleast_1d(a_in).astype(float).copy()
    bb = np.asarray(b, float).reshape(len(aa), -1).copy()
    nu = alpha / 2.0
    bsq = (bb * bb).sum(axis=1)
    outside = aa + bsq / alpha > 0.0
    if np.any(outside):
        ao = aa[outside]
        b2 = bsq[outside]
        c2 = 2.0 * nu - ao
        c1 = nu * nu - 2.0 * ao * nu
        c0 = -ao * nu * nu - 0.5 * nu * b2
        lam = _largest_cubic_root(c2, c1, c0)
        for _ in range(2):   # Newton polish on the undepressed cubic
            f = (ao - lam) * (nu + lam) ** 2 + 0.5 * nu * b2
            fp = (nu + lam) * (2.0 * (ao - lam) - (nu + lam))
            lam = lam - np.where(np.abs(fp) > 1e-300, f / np.where(fp == 0.0, 1.0, fp), 0.0)
        aa[outside] = ao - lam
        bb[outside] *= (nu / (nu + lam))[:, None]
    if scalar:
        return float(aa[0]), bb[0]
    return aa, bb.reshape(np.shape(b))


def _f0_vector(mesh, s_prev):
    """Linear-functional coefficients of phi(0,.) against the t=0 datum."""
    n_ph = s_prev.shape[1]
    f0 = np.zeros((n_ph, mesh.n_nodes))
    f0[:, mesh.trace0_nodes] = (mesh.trace_weights[:, None] * s_prev).T
    return f0


def elliptic_step(state: ALG2State, s_prev, system: SpaceTimeSystem):
    """Update phi: per-phase linear space-time problems sharing one factorization."""
    mesh = system.mesh
    r = state.r
    flux = np.concatenate([(r * state.a - state.s)[..., None],
                           r * state.b - state.m], axis=-1)
    rhs = system.gradient_transpose(flux)
    rhs -= _f0_vector(mesh, np.asarray(s_prev, float))
    rhs[:, mesh.trace1_nodes] += mesh.trace_weights * (state.st1 - r * state.c)
    state.phi = system.solve(rhs / r)
    return state.phi


def prox_step(state: ALG2State, system: SpaceTimeSystem, tau, model, psi_nodes,
              phases, dphi=None):
    """Update q = (a, b, c): parabola projections and the terminal energy prox.

    With augmentation r the terminal subproblem is
    argmin_c (r/2)|c - cbar|^2 + E_tau^*(x, c), cbar = -phi(1,x) + st1/r, and
    Moreau's identity at scale r turns it into the primal energy prox with
    parameter r*tau evaluated at r*cbar:  c = cbar - prox_{E_{r tau}}(r cbar)/r.
    The updated multiplier st1 then lands exactly on the prox output, hence in
    the simplex.
    """
    mesh = system.mesh
    r = state.r
    if dphi is None:
        dphi = system.gradient(state.phi)
    alpha = 2.0 * phases.viscosities / phases.permeability
    for i in range(phases.n_phases):
        state.a[i], state.b[i] = project_parabola(
            dphi[i, :, 0] + state.s[i] / r, dphi[i, :, 1:] + state.m[i] / r, alpha[i])
    cbar = -state.phi[:, mesh.trace1_nodes] + state.st1 / r
    prox = model.energy_prox((r * cbar).T, psi_nodes, r * tau).T
    state.c = cbar - prox / r
    return state.a, state.b, state.c


def multiplier_update(state: ALG2State, system: SpaceTimeSystem, dphi=None):
    """Gradient ascent sigma += r (Lambda phi - q) in all three components."""
    mesh = system.mesh
    r = state.r
    if dphi is None:
        dphi = system.gradient(state.phi)
    state.s += r * (dphi[..., 0] - state.a)
    state.m += r * (dphi[..., 1:] - state.b)
    state.st1 += r * (-state.phi[:, mesh.trace1_nodes] - state.c)
    return state.s, state.m, state.st1


@dataclass
class ActionValue:
    """Kinetic action per phase, weighted by mu_i/kappa; W^2 is twice the total."""
    per_phase: np.ndarray

    @property
    def total(self):
        return float(self.per_phase.sum())


def action_value(s, m, brick_measures, phases):
    """Elementwise action A(s, m) = |m|^2/(2s) integrated with mu_i/kappa weights.

    s below 1e-14 counts as vacuum: zero action for |m| <= 1e-10, +inf otherwise.
    """
    s = np.atleast_2d(np.asarray(s, float))
    m = np.asarray(m, float)
    m = m.reshape(s.shape + (-1,))
    msq = (m * m).sum(axis=-1)
    vacuum = s <= 1e-14
    bad = vacuum & (np.sqrt(msq) > 1e-10)
    dens = np.where(vacuum, 0.0, msq / (2.0 * np.where(vacuum, 1.0, s)))
    weights = phases.viscosities / phases.permeability
    per_phase = weights * (dens @ brick_measures)
    per_phase[bad.any(axis=1)] = math.inf
    return ActionValue(per_phase=per_phase)


@dataclass
class JKOStepInfo:
    iterations: int
    converged: bool
    primal: float
    dual: float
    action: ActionValue
    energy: float
    masses: np.ndarray
    mass_drift: float
    min_saturation: float
    simplex_violation: float
    history: list = field(default_factory=list)


def _norms(mesh, res_a, res_b, res_c):
    el = mesh.brick_measures
    w = mesh.trace_weights
    val = np.einsum("pe,e->", res_a * res_a, el)
    val += np.einsum("ped,e->", res_b * res_b, el)
    val += np.einsum("pj,j->", res_c * res_c, w)
    return math.sqrt(val)


def run_jko_step(s_prev, tau, system: SpaceTimeSystem, model, phases,
                 params: Alg2Params = None, state: ALG2State = None,
                 psi_nodes=None):
    """One implicit Wasserstein step; returns (s_next, info, state).

    Convergence requires the primal and dual residuals to drop below
    tol * (1 + |sigma|) and the per-phase mass drift of the terminal
    saturation to be below mass_tol relative; the warm-started state can be
    passed to the next step.
    """
    params = params or system.params
    mesh = system.mesh
    grid = mesh.spatial
    s_prev = np.asarray(s_prev, float)
    n_ph = phases.n_phases
    if state is None:
        state = ALG2State.zeros(mesh, n_ph, params.r)
    if psi_nodes is None:
        psi_nodes = phases.potentials(grid.nodes)
    r = state.r
    mass_prev = s_prev.T @ grid.node_weights
    mass_floor = np.maximum(np.abs(mass_prev), 1e-12)

    history = []
    converged = False
    primal = dual = math.nan
    iters = 0
    for iters in range(1, params.max_iter + 1):
        elliptic_step(state, s_prev, system)
        dphi = system.gradient(state.phi)
        a_old, b_old, c_old = state.a.copy(), state.b.copy(), state.c.copy()
        prox_step(state, system, tau, model, psi_nodes, phases, dphi=dphi)
        res_a = dphi[..., 0] - state.a
        res_b = dphi[..., 1:] - state.b
        res_c = -state.phi[:, mesh.trace1_nodes] - state.c
        state.s += r * res_a
        state.m += r * res_b
        state.st1 += r * res_c
        primal = _norms(mesh, res_a, res_b, res_c)
        dual = r * _norms(mesh, state.a - a_old, state.b - b_old, state.c - c_old)
        signorm = _norms(mesh, state.s, state.m, state.st1)
        masses = state.st1 @ grid.node_weights
        drift = float(np.max(np.abs(masses - mass_prev) / mass_floor))
        history.append((primal, dual))
        tol = params.tol * (1.0 + signorm)
        if primal <= tol and dual <= tol and drift <= params.mass_tol:
            converged = True
            break
    if not converged:
        msg = (f"saddle-point iteration cap {params.max_iter} reached "
               f"(primal={primal:.3e}, dual={dual:.3e})")
        if params.on_nonconvergence == "raise":
            raise Alg2ConvergenceError(msg, history)
        logger.warning(msg)

    s_next = state.st1.T.copy()
    act = action_value(state.s, state.m, mesh.brick_measures, phases)
    energy = total_energy_quadrature(np.clip(s_next, 0.0, None), grid.nodes,
                                     grid.node_weights, model, phases)
    info = JKOStepInfo(
        iterations=iters, converged=converged, primal=primal, dual=dual,
        action=act, energy=energy, masses=s_next.T @ grid.node_weights,
        mass_drift=float(np.max(np.abs(s_next.T @ grid.node_weights - mass_prev)
                                / mass_floor)),
        min_saturation=float(s_next.min()),
        simplex_violation=float(np.abs(s_next.sum(axis=1) - 1.0).max()),
        history=history)
    return s_next, info, state


@dataclass
class Alg2Trajectory:
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)     # nodal (n_sp, N+1)
    infos: list = field(default_factory=list)
    energies: list = field(default_factory=list)
    state: ALG2State = None

    def actions(self):
        return [info.action.total for info in self.infos]

    def state_at(self, t, tol=1e-9):
        for tt, s in zip(self.times, self.states):
            if abs(tt - t) <= tol:
                return s
        raise KeyError(f"no recorded state at t={t}")


def run_trajectory(s0, tau, n_steps, system: SpaceTimeSystem, model, phases,
                   params: Alg2Params = None, keep_states=True):
    """Chain n_steps implicit Wasserstein steps with warm starting."""
    params = params or system.params
    grid = system.mesh.spatial
    s = np.asarray(s0, float)
    psi_nodes = phases.potentials(grid.nodes)
    traj = Alg2Trajectory()
    traj.times.append(0.0)
    traj.states.append(s.copy())
    traj.energies.append(total_energy_quadrature(s, grid.nodes, grid.node_weights,
                                                 model, phases))
    state = None
    for n in range(1, int(n_steps) + 1):
        s, info, state = run_jko_step(s, tau, system, model, phases, params,
                                      state=state, psi_nodes=psi_nodes)
        traj.times.append(n * tau)
        if keep_states:
            traj.states.append(s.copy())
        traj.infos.append(info)
        traj.energies.append(info.energy)
        logger.info("step %d: %d iterations, primal %.2e, dual %.2e, energy %.8g",
                    n, info.iterations, info.primal, info.dual, info.energy)
    traj.state = state
    return traj


def continuity_residual(state: ALG2State, s_prev, system: SpaceTimeSystem):
    """Weak residual of d_t s + div m = 0 with data s_prev at t=0, st1 at t=1.

    Tested against every nodal basis function; at a saddle point this is the
    stationarity of the Lagrangian in phi and it is controlled by the dual
    residual.
    """
    mesh = system.mesh
    flux = np.concatenate([state.s[..., None], state.m], axis=-1)
    res = system.gradient_transpose(flux)
    res += _f0_vector(mesh, np.asarray(s_prev, float))
    res[:, mesh.trace1_nodes] -= mesh.trace_weights * state.st1
    return res
