"""Backward calibrated curves and discounted occupation measures.

A backward discrete characteristic from x repeatedly takes the argmin branch
of the same Bellman update the solver iterates, so on a converged field each
step realizes the dynamic-programming equality up to the solver defect (when
foot points are grid nodes) plus the one-cell interpolation kink scale (when
they are not; the threshold self-calibrates from the field's second
differences since off-lattice steps cannot do better than that).

The discounted occupation measure weights step k by

    W_k = exp( lam * sum_{j<k} dL/du(xi_j, v_j, 0) * dt ),   W_0 = 1,

bins the step's departure point by interpolation weights and its velocity
exactly (velocities are lattice members), and normalizes to mass one.  The
departure-point binning makes the pushforward of one step's bin land on the
next step's bin, so the closedness defect telescopes to the O(lam) boundary
term the continuum identity predicts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import CalibrationError, ConfigurationError, TailMassError
from .grids import GridField, PeriodicGrid, interpolate, interpolation_stencil, wrap_points
from .matherlp import DiscreteMeasure
from .models import ControlModel, VelocitySet
from .solver import Bracket

__all__ = [
    "CurveTrace",
    "backward_calibrated_curve",
    "check_calibration",
    "CalibrationReport",
    "occupation_measure",
    "check_mass_identity",
    "closedness_defect",
    "speed_bound_check",
    "SpeedReport",
]


@dataclass
class CurveTrace:
    """Backward discrete characteristic with velocities and discount weights.

    points[k] is the curve at time -k*dt (points[0] = start); step k moves
    from points[k+1] to points[k] with velocity velocities[k].  weights[k] is
    the discount factor W_k (strictly decreasing, W_0 = 1), defects[k] the
    dynamic-programming defect of step k, actions[k] its accumulated
    Lagrangian increment, and dl0[k] = dL/du(points[k], velocities[k], 0).
    """

    lam: float
    dt: float
    horizon: float
    points: np.ndarray          # (S+1, d)
    velocities: np.ndarray      # (S, d)
    vel_indices: np.ndarray     # (S,)
    weights: np.ndarray         # (S+1,)
    defects: np.ndarray         # (S,)
    actions: np.ndarray         # (S,)
    dl0: np.ndarray             # (S,)
    on_lattice: bool
    defect_tol: float

    @property
    def steps(self) -> int:
        return len(self.vel_indices)


def _kink_scale(u: GridField) -> float:
    """Largest second difference of the field: the off-lattice one-step
    interpolation error floor (chord-vs-kink within one cell)."""
    g = u.grid
    if g.d == 1:
        v = u.values
        dd = np.abs(np.roll(v, -1) - 2 * v + np.roll(v, 1))
        return float(dd.max()) / 4.0
    a = u.as_array()
    ddi = np.abs(np.roll(a, -1, 0) - 2 * a + np.roll(a, 1, 0))
    ddj = np.abs(np.roll(a, -1, 1) - 2 * a + np.roll(a, 1, 1))
    return float(max(ddi.max(), ddj.max())) / 4.0


def backward_calibrated_curve(model: ControlModel, lam: float, u: GridField,
                              x, Tmax: float, dt: float, vset: VelocitySet,
                              solver_tol: float = 1e-8,
                              defect_tol: Optional[float] = None,
                              defect_fraction: float = 0.05) -> CurveTrace:
    """Follow the argmin branch of the Bellman update backward from x.

    Raises CalibrationError ("field not converged") when more than
    defect_fraction of the steps exceed the defect tolerance.  The tolerance
    defaults to 10*solver_tol*dt for on-lattice traces and adds the
    interpolation kink scale otherwise.
    """
    if model.c0 is None:
        raise ConfigurationError("model.c0 must be set")
    grid = u.grid
    lam = float(lam)
    steps = int(np.floor(Tmax / dt + 1e-12))
    vels = vset.velocities                      # (K, d)
    K = vset.count
    hops = vels * (dt / grid.h)
    lattice_steps = bool(np.max(np.abs(hops - np.rint(hops))) < 1e-9)
    y = wrap_points(np.asarray(x, dtype=float), grid.d)
    start_on_node = bool(
        np.max(np.abs(y * grid.n - np.rint(y * grid.n))) < 1e-9)
    on_lattice = lattice_steps and start_on_node
    if on_lattice:
        y = np.rint(y * grid.n) / grid.n        # snap away float fuzz

    if defect_tol is None:
        defect_tol = 10.0 * solver_tol * dt
        if not on_lattice:
            defect_tol += 10.0 * (_kink_scale(u) + dt * grid.h)

    pts = np.empty((steps + 1, grid.d))
    vel = np.empty((steps, grid.d))
    vidx = np.empty(steps, dtype=int)
    W = np.empty(steps + 1)
    defects = np.empty(steps)
    actions = np.empty(steps)
    dl0 = np.empty(steps)
    pts[0] = y
    W[0] = 1.0
    yk = np.empty((K, grid.d))
    for k in range(steps):
        yk[:] = y
        feet = wrap_points(y[None, :] - vels * dt, grid.d)
        idx, w = interpolation_stencil(grid, feet)
        fv = np.sum(u.values[idx] * w, axis=-1)                  # (K,)
        Lv = np.asarray(model.L(yk, vels, lam * fv), dtype=float)
        Vy = float(model.V(y[None, :], lam)[0]) if lam != 0.0 else 0.0
        cand = dt * (Lv - lam * Vy + model.c0) + fv
        j = int(np.argmin(cand))
        uy = interpolate(u, y)
        defects[k] = abs(uy - cand[j])
        actions[k] = dt * (float(Lv[j]) - lam * Vy + model.c0)
        dl0[k] = float(np.asarray(model.dLdu0(y[None, :], vels[j][None, :]))[0])
        vel[k] = vels[j]
        vidx[k] = j
        W[k + 1] = W[k] * np.exp(lam * dl0[k] * dt)
        y = feet[j]
        if on_lattice:
            # keep long traces exactly on nodes when h is not a binary fraction
            y = np.rint(y * grid.n) / grid.n
            y[y >= 1.0] = 0.0
        pts[k + 1] = y

    if steps > 0:
        frac = float(np.mean(defects > defect_tol))
        if frac > defect_fraction:
            raise CalibrationError(
                f"field not converged: {frac:.1%} of steps exceed the "
                f"calibration defect tolerance {defect_tol:.3e}"
            )
    return CurveTrace(lam=lam, dt=dt, horizon=steps * dt, points=pts,
                      velocities=vel, vel_indices=vidx, weights=W,
                      defects=defects, actions=actions, dl0=dl0,
                      on_lattice=on_lattice, defect_tol=defect_tol)


@dataclass
class CalibrationReport:
    max_defect_rate: float       # max_k defect_k / dt
    telescoped_error: float      # whole-trace calibration identity defect
    defect_tol: float


def check_calibration(trace: CurveTrace, u: GridField, model: ControlModel,
                      lam: float) -> CalibrationReport:
    """Per-step and telescoped calibration defects of a recorded trace."""
    if trace.steps == 0:
        return CalibrationReport(0.0, 0.0, trace.defect_tol)
    u_start = interpolate(u, trace.points[0])
    u_end = interpolate(u, trace.points[-1])
    tele = abs(u_start - u_end - float(trace.actions.sum()))
    return CalibrationReport(
        max_defect_rate=float(trace.defects.max() / trace.dt),
        telescoped_error=tele,
        defect_tol=trace.defect_tol,
    )


def occupation_measure(trace: CurveTrace, lam: float, grid: PeriodicGrid,
                       vset: VelocitySet, tail_tol: float = 1e-4) -> DiscreteMeasure:
    """Discount-weighted occupation measure of a backward trace.

    Step k deposits W_k*dt at (departure point, chosen velocity); positions
    bin by interpolation weights, velocities exactly.  Raises TailMassError
    when the discarded tail beyond the horizon would carry more than
    tail_tol of the total mass (estimated from the weight decay rate).
    """
    if trace.steps == 0:
        raise ConfigurationError("cannot bin an empty trace")
    dt = trace.dt
    Wd = trace.weights[:-1] * dt                 # (S,)
    total = float(Wd.sum())
    decay = max(-float(np.mean(trace.dl0[-max(10, trace.steps // 10):])), 1e-12)
    tail = float(trace.weights[-1]) / (lam * decay)
    if tail / (total + tail) > tail_tol:
        raise TailMassError(
            f"discarded tail mass fraction {tail / (total + tail):.2e} exceeds "
            f"{tail_tol:.0e}: extend Tmax"
        )
    idx, w = interpolation_stencil(grid, trace.points[1:])      # (S, 2^d)
    K = vset.count
    flat = np.zeros(grid.size * K)
    cols = idx * K + trace.vel_indices[:, None]
    np.add.at(flat, cols.ravel(), (w * Wd[:, None]).ravel())
    return DiscreteMeasure(grid, vset, flat / flat.sum())


def check_mass_identity(trace: CurveTrace, lam: float) -> float:
    """Relative defect of the occupation-measure identity

        int dL/du dmu  =  -1 / ( lam * int_0^inf W dt ),

    evaluated with the trace's own quadrature; exact up to the tail cutoff
    and one first-order quadrature term in dt.
    """
    if trace.steps == 0:
        raise ConfigurationError("empty trace")
    Wd = trace.weights[:-1] * trace.dt
    lhs = float((trace.dl0 * Wd).sum() / Wd.sum())
    rhs = -1.0 / (lam * float(Wd.sum()))
    return abs(lhs - rhs) / abs(rhs)


def closedness_defect(mu: DiscreteMeasure, closedness) -> float:
    """Max absolute row value of the closedness operator applied to mu."""
    return float(np.max(np.abs(closedness @ mu.flat())))


@dataclass
class SpeedReport:
    passed: bool
    max_speed: float
    lattice_vmax: float
    a_priori_bound: float
    saturated: bool
    note: str = ""


def speed_bound_check(trace: CurveTrace, model: ControlModel,
                      bracket: Bracket, grid: PeriodicGrid,
                      vset: VelocitySet) -> SpeedReport:
    """Empirical speeds against the a-priori calibrated-curve bound.

    The bound is B = C0 + lambda0*(kappa - 1) - c0 with C0 the sampled
    superlinearity constant max[(D0+1)|v| - L(x, v, lambda0*D0)], D0 = the
    bracket's sup-norm bound T.  Fails (with a diagnostic) when the argmin
    saturates the velocity lattice: a truncated lattice invalidates the
    argmin itself.
    """
    X = grid.node_coords()
    K = vset.count
    XK = np.broadcast_to(X[None, :, :], (K,) + X.shape)
    VK = np.broadcast_to(vset.velocities[:, None, :], (K,) + X.shape)
    D0 = bracket.T
    speeds = np.sqrt(np.sum(VK**2, axis=-1))
    C0 = float(np.max((D0 + 1.0) * speeds - model.L(XK, VK, bracket.lambda0 * D0)))
    bound = C0 + bracket.lambda0 * (bracket.kappa - 1.0) - (model.c0 or 0.0)
    if trace.steps == 0:
        return SpeedReport(True, 0.0, vset.vmax, bound, False)
    max_speed = float(np.max(np.sqrt(np.sum(trace.velocities**2, axis=1))))
    saturated = bool(max_speed >= vset.vmax - 1e-12) and max_speed > 0
    ok = (max_speed <= vset.vmax + 1e-12) and (max_speed <= bound + 1e-12) and not saturated
    note = "velocity lattice truncates the argmin" if saturated else ""
    return SpeedReport(passed=ok, max_speed=max_speed, lattice_vmax=vset.vmax,
                       a_priori_bound=bound, saturated=saturated, note=note)
