"""Phase parameters, capillary models, energies and their proximal operators.

Saturation states are arrays of shape (n_points, N+1) whose rows lie on the
unit simplex; the interior part s* = (s_1, ..., s_N) determines the capillary
pressures pi_i = dPi/ds_i of a strictly convex potential Pi.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "PhaseSet", "ExternalPotential", "CapillaryModel",
    "BrooksCorey", "LinearTwoPhase", "QuadraticThreePhase",
    "SingularSaturationError",
    "gravity_potential", "capillary_pressure", "capillary_potential",
    "total_energy", "total_entropy",
    "prox_energy_brooks_corey", "prox_energy_quadratic3",
    "prox_conjugate_via_moreau",
]

SIMPLEX_TOL = 1e-9          # energy sentinel threshold outside the simplex
BC_CLAMP = 1e-12            # 1 - s_1 floor when Newton iterates overshoot


class SingularSaturationError(ValueError):
    """Capillary pressure evaluated at or beyond its singular saturation."""


class PhaseSet:
    """Viscosities and densities of the N+1 phases plus medium constants."""

    def __init__(self, viscosities, densities, permeability=1.0,
                 gravity=(0.0, -1.0), porosity=1.0):
        self.viscosities = np.asarray(viscosities, float)
        self.densities = np.asarray(densities, float)
        self.permeability = float(permeability)
        self.gravity = np.atleast_1d(np.asarray(gravity, float))
        self.porosity = float(porosity)
        if self.viscosities.shape != self.densities.shape or self.viscosities.ndim != 1:
            raise ValueError("viscosities and densities must be 1d arrays of equal length")
        if np.any(self.viscosities <= 0):
            raise ValueError("viscosities must be positive")
        if np.any(self.densities < 0):
            raise ValueError("densities must be nonnegative")
        if self.permeability <= 0:
            raise ValueError("permeability must be positive")
        if self.porosity != 1.0:
            raise ValueError("porosity is fixed to 1 (rescale time otherwise)")

    @property
    def n_phases(self):
        return len(self.viscosities)

    @property
    def dim(self):
        return len(self.gravity)

    def potentials(self, points):
        """Gravitational potentials -rho_i g.x at points, shape (n_points, N+1)."""
        pts = np.asarray(points, float).reshape(-1, self.dim)
        return -np.outer(pts @ self.gravity, self.densities)


class ExternalPotential:
    """Per-phase affine potentials Psi_i(x) = -rho_i g.x (zero at the origin)."""

    def __init__(self, phases: PhaseSet):
        self.phases = phases

    def __call__(self, i, x):
        return gravity_potential(self.phases, i, x)

    def table(self, points):
        return self.phases.potentials(points)


def gravity_potential(phases, i, x):
    """Psi_i(x) = -rho_i g.x."""
    x = np.asarray(x, float)
    return -phases.densities[i] * float(x @ phases.gravity)


def _interior(s_star):
    s = np.asarray(s_star, float)
    squeeze = s.ndim == 1
    s = np.atleast_2d(s)
    return s, squeeze


class CapillaryModel:
    """Base class: capillary potential, pressures, and the energy prox.

    Subclasses provide vectorized potential/pressures over (n, N) interior
    saturations and the pointwise proximal map of tau * (Psi.c + Pi(c*))
    restricted to the simplex, which is the only place the energy enters the
    saddle-point solver.
    """

    kind = "base"
    n_interior = 1
    lipschitz = math.inf

    def potential(self, s_star):
        raise NotImplementedError

    def pressures(self, s_star):
        raise NotImplementedError

    def pressure_derivative(self, s_star):
        """Diagonal derivatives dpi_i/ds_i (all bundled laws are decoupled)."""
        raise NotImplementedError

    def pressure_system(self, s_star):
        """(pi, dpi/ds) with the model's own safety clamp, usable mid-Newton."""
        return self.pressures(s_star), self.pressure_derivative(s_star)

    def inverse_pressure(self, y, i=0):
        """Inverse of the increasing map s_i -> pi_i(s_i), unclamped."""
        raise NotImplementedError

    def energy_prox(self, cbar, psi, tau):
        """argmin_{c in simplex} |c - cbar|^2/2 + tau*(psi.c + Pi(c*)) rowwise."""
        raise NotImplementedError


class BrooksCorey(CapillaryModel):
    """Two-phase law pi_1(s_1) = alpha (1 - s_1)^{-1/2}.

    The potential is normalized so Pi(0) = 0; no finite curvature bound
    exists near s_1 = 1 (lipschitz is inf).
    """

    kind = "brooks_corey"
    n_interior = 1
    lipschitz = math.inf

    def __init__(self, alpha=1.0):
        self.alpha = float(alpha)

    def potential(self, s_star):
        s, sq = _interior(s_star)
        val = 2.0 * self.alpha * (1.0 - np.sqrt(1.0 - s[:, 0]))
        return val[0] if sq else val

    def pressures(self, s_star):
        s, sq = _interior(s_star)
        if np.any(s[:, 0] >= 1.0):
            raise SingularSaturationError("pi_1 is singular at s_1 = 1")
        val = self.alpha / np.sqrt(1.0 - s[:, 0])
        return val if sq else val[:, None]

    def pressure_derivative(self, s_star):
        s, sq = _interior(s_star)
        val = 0.5 * self.alpha * (1.0 - s[:, 0]) ** -1.5
        return val if sq else val[:, None]

    def pressure_system(self, s_star):
        s, _ = _interior(s_star)
        one_minus = np.maximum(1.0 - s[:, 0], BC_CLAMP)
        pi = self.alpha / np.sqrt(one_minus)
        dpi = np.where(1.0 - s[:, 0] > BC_CLAMP,
                       0.5 * self.alpha * one_minus ** -1.5, 0.0)
        return pi[:, None], dpi[:, None]

    def inverse_pressure(self, y, i=0):
        y = np.asarray(y, float)
        return 1.0 - (self.alpha / np.maximum(y, self.alpha)) ** 2

    def energy_prox(self, cbar, psi, tau):
        cbar = np.atleast_2d(np.asarray(cbar, float))
        psi = np.atleast_2d(np.asarray(psi, float))
        d = cbar[:, 0] - tau * psi[:, 0] - cbar[:, 1] + tau * psi[:, 1] - 1.0
        c1 = np.clip(_brooks_corey_root(d, tau * self.alpha), 0.0, 1.0)
        return np.column_stack([1.0 - c1, c1])


def _brooks_corey_root(d, ta):
    """Root of 2c + d + ta/sqrt(1-c) on (-inf, 1), vectorized safeguarded Newton."""
    d = np.asarray(d, float)
    if ta == 0.0:
        return -0.5 * d
    hi = np.full_like(d, 1.0 - 1e-14)
    lo = np.minimum(-(np.abs(d) + ta + 1.0) / 2.0, -1.0)   # G(lo) < 0 always
    x = np.clip(-0.5 * d, lo, hi)
    for _ in range(200):
        g = 2.0 * x + d + ta / np.sqrt(1.0 - x)
        gp = 2.0 + 0.5 * ta * (1.0 - x) ** -1.5
        neg = g < 0.0
        lo = np.where(neg, x, lo)
        hi = np.where(neg, hi, x)
        xn = x - g / gp
        inside = (xn > lo) & (xn < hi) & np.isfinite(xn)
        x = np.where(inside, xn, 0.5 * (lo + hi))
        if np.max(hi - lo) < 1e-15:
            break
    return 0.5 * (lo + hi)


class LinearTwoPhase(CapillaryModel):
    """Two-phase law pi_1(s_1) = alpha s_1, Pi = alpha s_1^2/2."""

    kind = "linear_two_phase"
    n_interior = 1

    def __init__(self, alpha=1.0):
        self.alpha = float(alpha)
        self.lipschitz = self.alpha

    def potential(self, s_star):
        s, sq = _interior(s_star)
        val = 0.5 * self.alpha * s[:, 0] ** 2
        return val[0] if sq else val

    def pressures(self, s_star):
        s, sq = _interior(s_star)
        val = self.alpha * s[:, 0]
        return val if sq else val[:, None]

    def pressure_derivative(self, s_star):
        s, sq = _interior(s_star)
        val = np.full(len(s), self.alpha)
        return val if sq else val[:, None]

    def inverse_pressure(self, y, i=0):
        return np.asarray(y, float) / self.alpha

    def energy_prox(self, cbar, psi, tau):
        cbar = np.atleast_2d(np.asarray(cbar, float))
        psi = np.atleast_2d(np.asarray(psi, float))
        gamma = cbar[:, 1] - tau * psi[:, 1] - cbar[:, 0] + tau * psi[:, 0] + 1.0
        c1 = np.clip(gamma / (2.0 + tau * self.alpha), 0.0, 1.0)
        return np.column_stack([1.0 - c1, c1])


class QuadraticThreePhase(CapillaryModel):
    """Three-phase law pi_i(s_i) = alpha_i s_i, Pi = sum alpha_i s_i^2/2."""

    kind = "quadratic_three_phase"
    n_interior = 2

    def __init__(self, alpha1=1.0, alpha2=1.0):
        self.alpha1 = float(alpha1)
        self.alpha2 = float(alpha2)
        self.lipschitz = max(self.alpha1, self.alpha2)

    @property
    def _alphas(self):
        return np.array([self.alpha1, self.alpha2])

    def potential(self, s_star):
        s, sq = _interior(s_star)
        val = 0.5 * (self._alphas * s * s).sum(axis=1)
        return val[0] if sq else val

    def pressures(self, s_star):
        s, sq = _interior(s_star)
        val = self._alphas * s
        return val[0] if sq else val

    def pressure_derivative(self, s_star):
        s, sq = _interior(s_star)
        val = np.tile(self._alphas, (len(s), 1))
        return val[0] if sq else val

    def inverse_pressure(self, y, i=0):
        return np.asarray(y, float) / self._alphas[i]

    def energy_prox(self, cbar, psi, tau):
        cbar = np.atleast_2d(np.asarray(cbar, float))
        psi = np.atleast_2d(np.asarray(psi, float))
        a1, a2 = tau * self.alpha1, tau * self.alpha2
        gamma1 = cbar[:, 1] - tau * psi[:, 1] - cbar[:, 0] + tau * psi[:, 0] + 1.0
        gamma2 = cbar[:, 2] - tau * psi[:, 2] - cbar[:, 0] + tau * psi[:, 0] + 1.0
        den = (2.0 + a1) * (2.0 + a2) - 1.0
        u1 = ((2.0 + a2) * gamma1 - gamma2) / den
        u2 = ((2.0 + a1) * gamma2 - gamma1) / den
        inside = (u1 >= 0.0) & (u2 >= 0.0) & (u1 + u2 <= 1.0)

        def objective(c1, c2):
            return (0.5 * (c1 - cbar[:, 1] + tau * psi[:, 1]) ** 2 + 0.5 * a1 * c1 * c1
                    + 0.5 * (c2 - cbar[:, 2] + tau * psi[:, 2]) ** 2 + 0.5 * a2 * c2 * c2
                    + 0.5 * (c1 + c2 + cbar[:, 0] - tau * psi[:, 0] - 1.0) ** 2)

        # boundary candidates: segments {c1=0}, {c2=0}, {c1+c2=1}
        cand1 = (np.zeros_like(u1), np.clip(gamma2 / (2.0 + a2), 0.0, 1.0))
        cand2 = (np.clip(gamma1 / (2.0 + a1), 0.0, 1.0), np.zeros_like(u1))
        t = np.clip((gamma1 - gamma2 + 1.0 + a2) / (2.0 + a1 + a2), 0.0, 1.0)
        cand3 = (t, 1.0 - t)
        objs = np.stack([objective(*cand1), objective(*cand2), objective(*cand3)])
        best = np.argmin(objs, axis=0)
        c1s = np.stack([cand1[0], cand2[0], cand3[0]])
        c2s = np.stack([cand1[1], cand2[1], cand3[1]])
        cols = np.arange(len(u1))
        c1 = np.where(inside, u1, c1s[best, cols])
        c2 = np.where(inside, u2, c2s[best, cols])
        return np.column_stack([1.0 - c1 - c2, c1, c2])


def capillary_pressure(model, s_star):
    """Vector of capillary pressures (pi_1, ..., pi_N) at s* in the simplex."""
    return model.pressures(s_star)


def capillary_potential(model, s_star):
    """Pi(s*); +inf outside the closed simplex of interior saturations."""
    s, sq = _interior(s_star)
    bad = (s < 0.0).any(axis=1) | (s.sum(axis=1) > 1.0)
    val = model.potential(np.clip(s, 0.0, 1.0))
    val = np.atleast_1d(val)
    val = np.where(bad, np.inf, val)
    return float(val[0]) if sq else val


def total_energy(state, mesh, model, phases):
    """Discrete energy sum_K (Pi(s*_K) + sum_i s_iK Psi_i(x_K)) m_K on an FV mesh."""
    return total_energy_quadrature(state, mesh.cell_centers, mesh.cell_measures,
                                   model, phases)


def total_energy_quadrature(state, points, weights, model, phases):
    """Energy of a saturation table against arbitrary quadrature points/weights."""
    s = np.asarray(state, float)
    if s.ndim != 2 or s.shape[0] != len(weights):
        raise ValueError(f"state shape {s.shape} does not match {len(weights)} points")
    if s.shape[0] == 0:
        return 0.0
    violation = max(0.0, -s.min()) + np.abs(s.sum(axis=1) - 1.0).max()
    if violation > SIMPLEX_TOL:
        return math.inf
    s_star = np.clip(s[:, 1:], 0.0, 1.0)
    psi = phases.potentials(points)
    density = model.potential(s_star) + (s * psi).sum(axis=1)
    return float(density @ weights)


def total_entropy(state, mesh, phases):
    """sum_i mu_i sum_K h(s_iK) m_K with h(s) = s log s - s + 1."""
    s = np.asarray(state, float)
    if s.shape[0] == 0:
        return 0.0
    if s.min() < -1e-12:
        raise ValueError(f"negative saturation {s.min():.3e} in entropy evaluation")
    s = np.maximum(s, 0.0)
    h = np.where(s > 0.0, s * np.log(np.maximum(s, 1e-300)) - s + 1.0, 1.0)
    return float(phases.viscosities @ (h.T @ mesh.cell_measures))


def prox_energy_brooks_corey(cbar, x, tau, alpha, phases):
    """Simplex-constrained energy prox for the singular two-phase law.

    Returns the pair (c0, c1) minimizing |c - cbar|^2/2 + tau*(Psi(x).c
    - 2 alpha sqrt(1 - c1)) over the simplex; c1 is the positive part of the
    unique root of the scalar optimality equation left of 1.
    """
    cbar = np.asarray(cbar, float)
    sq = cbar.ndim == 1
    psi = phases.potentials(np.atleast_2d(np.asarray(x, float)))
    out = BrooksCorey(alpha).energy_prox(np.atleast_2d(cbar), psi[:, :2], tau)
    return out[0] if sq else out


def prox_energy_quadratic3(cbar, x, tau, alpha1, alpha2, phases):
    """Simplex-constrained energy prox for the quadratic three-phase potential."""
    cbar = np.asarray(cbar, float)
    sq = cbar.ndim == 1
    psi = phases.potentials(np.atleast_2d(np.asarray(x, float)))
    out = QuadraticThreePhase(alpha1, alpha2).energy_prox(np.atleast_2d(cbar),
                                                          psi[:, :3], tau)
    return out[0] if sq else out


def prox_conjugate_via_moreau(prox_primal, cbar):
    """Moreau's identity: the conjugate prox is cbar minus the primal prox."""
    return np.asarray(cbar, float) - np.asarray(prox_primal, float)
