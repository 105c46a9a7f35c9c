"""Cross-scheme and against-theory verification utilities.

Audits (mass, positivity, simplex), energy/entropy series, the total square
distance check for the variational solver, the gravity-stratified two-phase
steady state with its relative-energy decay, and field comparison between the
two solvers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .physics import total_energy_quadrature

__all__ = [
    "DiagnosticsSeries", "SteadyState2Phase",
    "steady_state_two_phase", "steady_state_two_phase_quadrature",
    "relative_energy_series", "log_linear_fit",
    "total_square_distance_check", "compare_fields", "audit_state",
]

SERIES_COLUMNS = ("t", "energy", "entropy", "min_saturation",
                  "simplex_violation", "dissipation", "capillary_dirichlet",
                  "action", "alg2_iterations")


@dataclass
class DiagnosticsSeries:
    """Per-time rows of the monitored quantities; masses get one column per phase."""
    n_phases: int
    rows: list = field(default_factory=list)

    def add(self, t, masses, energy=math.nan, entropy=math.nan,
            min_saturation=math.nan, simplex_violation=math.nan,
            dissipation=math.nan, capillary_dirichlet=math.nan,
            action=math.nan, alg2_iterations=math.nan):
        if self.rows and t <= self.rows[-1]["t"]:
            raise ValueError("recorded times must be strictly increasing")
        row = {"t": t, "energy": energy, "entropy": entropy,
               "min_saturation": min_saturation,
               "simplex_violation": simplex_violation,
               "dissipation": dissipation,
               "capillary_dirichlet": capillary_dirichlet,
               "action": action, "alg2_iterations": alg2_iterations}
        for i, m in enumerate(np.atleast_1d(masses)):
            row[f"mass_{i}"] = float(m)
        self.rows.append(row)

    def column(self, name):
        return np.array([row[name] for row in self.rows])

    def header(self):
        return (["t", "energy"] + [f"mass_{i}" for i in range(self.n_phases)]
                + list(SERIES_COLUMNS[2:]))

    def write_csv(self, path):
        cols = self.header()
        with open(path, "w") as f:
            f.write(",".join(cols) + "\n")
            for row in self.rows:
                out = []
                for c in cols:
                    v = row.get(c, math.nan)
                    out.append("" if isinstance(v, float) and math.isnan(v)
                               else "%.17g" % v)
                f.write(",".join(out) + "\n")


@dataclass
class SteadyState2Phase:
    """Gravity-stratified equilibrium field of the displaced phase."""
    saturation: np.ndarray     # s_1 per cell (or node)
    multiplier: float          # constant identifying the flat capillary head


def steady_state_two_phase(mesh, model, phases, mass):
    """Equilibrium of a two-phase model on an FV mesh at the given s_1 volume."""
    return steady_state_two_phase_quadrature(mesh.cell_centers, mesh.cell_measures,
                                             model, phases, mass)


def steady_state_two_phase_quadrature(points, weights, model, phases, mass):
    """Equilibrium profile s_1 = clamp(pi_1^{-1}((rho_1-rho_0) g.x + gamma), 0, 1).

    gamma is located by monotone bisection on the (nondecreasing) mass map
    until the discrete mass matches to ~1e-13 of the domain measure.
    """
    weights = np.asarray(weights, float)
    total = weights.sum()
    if not 0.0 <= mass <= total * (1.0 + 1e-12):
        raise ValueError(f"target mass {mass} outside [0, {total}]")
    drive = ((phases.densities[1] - phases.densities[0])
             * (np.asarray(points, float) @ phases.gravity))

    def profile(gamma):
        return np.clip(model.inverse_pressure(drive + gamma), 0.0, 1.0)

    def mass_of(gamma):
        return profile(gamma) @ weights

    lo, hi = -1.0, 1.0
    while mass_of(lo) > mass and lo > -1e12:
        lo *= 2.0
    while mass_of(hi) < mass and hi < 1e12:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mass_of(mid) < mass:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-16 * max(1.0, abs(hi)):
            break
    gamma = 0.5 * (lo + hi)
    return SteadyState2Phase(saturation=profile(gamma), multiplier=gamma)


def relative_energy_series(states, times, steady: SteadyState2Phase,
                           points, weights, model, phases):
    """E(s(t)) - E(steady) recomputed from the states; nonnegative by optimality."""
    steady_full = np.column_stack([1.0 - steady.saturation, steady.saturation])
    e_inf = total_energy_quadrature(steady_full, points, weights, model, phases)
    rel = []
    for s in states:
        e = total_energy_quadrature(np.clip(np.asarray(s, float), 0.0, None),
                                    points, weights, model, phases)
        rel.append(e - e_inf)
    return np.asarray(times, float), np.array(rel)


def log_linear_fit(times, values, floor=0.0):
    """Least-squares slope and R^2 of log(values) over the tail half of the series."""
    t = np.asarray(times, float)
    v = np.asarray(values, float)
    tail = t >= t[0] + 0.5 * (t[-1] - t[0])
    keep = tail & (v > floor)
    t, v = t[keep], v[keep]
    if len(t) < 3:
        return math.nan, 0.0
    y = np.log(v)
    A = np.column_stack([t, np.ones_like(t)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    fit = A @ coef
    ss_res = float(((y - fit) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(coef[0]), r2


def total_square_distance_check(actions, energies, tau):
    """Check sum_n 2*action_n / tau <= 2 (E(s0) - min_n E(s_n)), with margin.

    Twice the converged kinetic action of an inner trajectory stands in for
    the squared Wasserstein increment (the inner minimizer is a geodesic).
    """
    actions = np.asarray(actions, float)
    energies = np.asarray(energies, float)
    lhs = 2.0 * actions.sum() / tau
    rhs = 2.0 * (energies[0] - energies.min())
    bound = rhs * (1.0 + 1e-6) + 1e-8
    return bool(lhs <= bound), bound - lhs


def compare_fields(a, b, mesh):
    """Per-phase L1 and Linf distances of two cell states plus the difference field."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.shape != b.shape or a.shape[0] != mesh.n_cells:
        raise ValueError(f"state shapes {a.shape} vs {b.shape} on {mesh.n_cells} cells")
    diff = a - b
    l1 = np.abs(diff).T @ mesh.cell_measures
    linf = np.abs(diff).max(axis=0) if len(diff) else np.zeros(a.shape[1])
    return {"l1": l1, "linf": linf, "difference": diff}


def audit_state(state, mesh):
    """Exact per-phase masses, minimum saturation and worst simplex violation."""
    s = np.asarray(state, float)
    weights = mesh.cell_measures if hasattr(mesh, "cell_measures") else mesh.node_weights
    return {
        "masses": s.T @ weights,
        "min_saturation": float(s.min()) if s.size else math.nan,
        "simplex_violation": float(np.abs(s.sum(axis=1) - 1.0).max()) if s.size else math.nan,
    }


def summarize_invariants(series: DiagnosticsSeries, label, energy_tol_scale=1e-8,
                         mass_rtol=1e-12, positivity_tol=1e-9, simplex_tol=1e-9,
                         tsd=None):
    """Plain-text pass/fail lines with margins for the recorded run."""
    lines = [f"[{label}]"]
    if not series.rows:
        return lines + ["  no recorded steps"]
    masses = np.column_stack([series.column(f"mass_{i}")
                              for i in range(series.n_phases)])
    drift = np.abs(masses - masses[0]) / np.maximum(np.abs(masses[0]), 1e-300)
    worst = float(drift.max())
    lines.append(f"  mass_conservation: {'PASS' if worst <= mass_rtol else 'FAIL'} "
                 f"(max relative drift {worst:.3e}, tol {mass_rtol:.1e})")
    energy = series.column("energy")
    tol = energy_tol_scale * (1.0 + abs(energy[0]))
    rises = np.diff(energy)
    worst_rise = float(rises.max()) if len(rises) else 0.0
    lines.append(f"  energy_monotone: {'PASS' if worst_rise <= tol else 'FAIL'} "
                 f"(max rise {worst_rise:.3e}, tol {tol:.3e})")
    min_s = float(np.nanmin(series.column("min_saturation")))
    lines.append(f"  positivity: {'PASS' if min_s >= -positivity_tol else 'FAIL'} "
                 f"(min saturation {min_s:.3e})")
    viol = float(np.nanmax(series.column("simplex_violation")))
    lines.append(f"  simplex: {'PASS' if viol <= simplex_tol else 'FAIL'} "
                 f"(max violation {viol:.3e})")
    if tsd is not None:
        ok, margin = tsd
        lines.append(f"  total_square_distance: {'PASS' if ok else 'FAIL'} "
                     f"(margin {margin:.3e})")
    return lines
