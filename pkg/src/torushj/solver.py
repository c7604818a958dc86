"""Monotone semi-Lagrangian fixed-point solver for the discounted equation.

The discrete update at node x is

    T[u](x) = min_v  dt * ( L(x, v, lam*u~) - lam*V(x, lam) + c0 ) + u~,
    u~ = periodic multilinear interpolation of u at the foot point x - v*dt,

iterated to a fixed point.  The u-argument of L is the foot value u~, which
makes w |-> w + dt*L(x, v, lam*w) strictly increasing whenever
dt*lam*max(sigma) < 1, so T is exactly monotone and commutes with constants
up to the discount factor.  Solutions are clamped to the sub/supersolution
bracket and iterated from its midpoint.

By default dt = h / (velocity lattice step), which makes every foot point a
grid node: characteristics then live on the lattice exactly, the scheme has
no interpolation bias, and the dynamic-programming branch along backward
curves is exact.  Any other dt (including much smaller ones) is supported
through interpolation.

Convergence at small lam is dominated by the constant mode, whose effective
contraction factor is 1 - lam*dt*sigma.  Each sweep therefore applies the
standard midpoint extrapolation u <- T[u] + g/(1-g) * mid(T[u]-u) (g the
constant-mode factor), which eliminates that mode without disturbing the
fixed point; the remaining error decays at the mixing rate of the
characteristic transport.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError, SolveError
from .grids import GridField, PeriodicGrid, interpolation_stencil
from .models import ControlModel, VelocitySet

__all__ = [
    "SolveReport",
    "Bracket",
    "TransitionStencil",
    "transition_stencil",
    "default_dt",
    "bellman_apply",
    "compute_bracket",
    "solve_perturbed",
    "residual",
    "nonexistence_certificate",
    "lambda_sweep",
]


@dataclass
class SolveReport:
    lam: float
    iterations: int
    final_residual: float
    bracket_violations: int
    converged: bool
    lambda_above_lambda0: bool = False
    stalled: bool = False
    residual_history: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.converged and self.final_residual > self._tol_used:
            raise SolveError("converged report with residual above tolerance")

    _tol_used: float = field(default=np.inf, repr=False)


@dataclass
class Bracket:
    """Sub/supersolution envelope of the discounted equation.

    lower/upper are the shifted critical solution u^ -+ (max/min adjustments
    plus kappa/delta); T bounds their sup norms.  lambda0 is the conservative
    discount threshold below which the bracket is guaranteed to enclose the
    solution.
    """

    lower: GridField
    upper: GridField
    lambda0: float
    K0: float
    delta: float
    kappa: float
    T: float
    C2: float = 0.0

    def midpoint(self) -> GridField:
        return GridField(self.lower.grid, 0.5 * (self.lower.values + self.upper.values))


@dataclass
class TransitionStencil:
    """Precomputed foot-point data for one (grid, velocity set, dt) triple."""

    grid: PeriodicGrid
    vset: VelocitySet
    dt: float
    integer_hops: bool
    take: Optional[np.ndarray] = None   # (K, N) node indices, integer-hop path
    idx: Optional[np.ndarray] = None    # (K, N, S) stencil indices
    w: Optional[np.ndarray] = None      # (K, N, S) convex weights

    def foot_values(self, values: np.ndarray) -> np.ndarray:
        """Field values at all foot points, shape (K, N)."""
        if self.integer_hops:
            return values[self.take]
        return np.sum(values[self.idx] * self.w, axis=-1)


def default_dt(grid: PeriodicGrid, vset: VelocitySet) -> float:
    """Time step aligning every velocity hop with the node lattice."""
    return grid.h / vset.spacing


def transition_stencil(grid: PeriodicGrid, vset: VelocitySet, dt: float) -> TransitionStencil:
    if vset.d != grid.d:
        raise ConfigurationError("velocity set and grid dimensions differ")
    hops = vset.velocities * (dt / grid.h)          # (K, d), in cells
    rounded = np.rint(hops)
    if np.max(np.abs(hops - rounded)) < 1e-9:
        nodes_multi = np.stack(
            np.meshgrid(*[np.arange(grid.n)] * grid.d, indexing="ij"), axis=-1
        ).reshape(-1, grid.d)                        # (N, d)
        foot_multi = nodes_multi[None, :, :] - rounded.astype(np.int64)[:, None, :]
        take = grid.flat_index(foot_multi)
        return TransitionStencil(grid, vset, dt, True, take=take)
    foot = grid.node_coords()[None, :, :] - vset.velocities[:, None, :] * dt
    idx, w = interpolation_stencil(grid, foot)
    return TransitionStencil(grid, vset, dt, False, idx=idx, w=w)


class _Kernel:
    """Per-solve precomputation: base costs plus the u-coupling hook."""

    def __init__(self, model: ControlModel, lam: float, grid: PeriodicGrid,
                 vset: VelocitySet, dt: float, c0: Optional[float] = None):
        if c0 is None:
            c0 = model.c0
        if c0 is None:
            raise ConfigurationError(
                "model.c0 is unset; fill it via barrier.critical_value first"
            )
        self.model = model
        self.lam = float(lam)
        self.dt = float(dt)
        self.stencil = transition_stencil(grid, vset, dt)
        X = grid.node_coords()
        self.X = X
        K = vset.count
        XK = np.broadcast_to(X[None, :, :], (K, X.shape[0], X.shape[1]))
        VK = np.broadcast_to(vset.velocities[:, None, :], (K, X.shape[0], X.shape[1]))
        L0 = np.asarray(model.L(XK, VK, 0.0), dtype=float)
        Vlam = np.asarray(model.V(X, lam), dtype=float) if lam != 0.0 else 0.0
        self.base = dt * (L0 - lam * Vlam + c0)      # (K, N)
        self._generic_XK = XK if model.L_u_part is None else None
        self._generic_VK = VK if model.L_u_part is None else None
        self._L0 = L0 if model.L_u_part is None else None

    def apply(self, values: np.ndarray) -> np.ndarray:
        fv = self.stencil.foot_values(values)        # (K, N)
        if self.lam == 0.0:
            cand = self.base + fv
        elif self.model.L_u_part is not None:
            cand = self.base + self.dt * self.model.L_u_part(self.X, self.lam * fv) + fv
        else:
            Lfull = self.model.L(self._generic_XK, self._generic_VK, self.lam * fv)
            cand = self.base + self.dt * (Lfull - self._L0) + fv
        return cand.min(axis=0)

    def apply_with_argmin(self, values: np.ndarray):
        fv = self.stencil.foot_values(values)
        if self.lam == 0.0:
            cand = self.base + fv
        elif self.model.L_u_part is not None:
            cand = self.base + self.dt * self.model.L_u_part(self.X, self.lam * fv) + fv
        else:
            Lfull = self.model.L(self._generic_XK, self._generic_VK, self.lam * fv)
            cand = self.base + self.dt * (Lfull - self._L0) + fv
        amin = cand.argmin(axis=0)
        return cand.min(axis=0), amin


def bellman_apply(model: ControlModel, lam: float, u: GridField,
                  vset: VelocitySet, dt: float, c0: Optional[float] = None) -> GridField:
    """One application of the discounted Bellman update (lam = 0 gives the
    critical operator)."""
    k = _Kernel(model, lam, u.grid, vset, dt, c0=c0)
    return GridField(u.grid, k.apply(u.values))


def residual(model: ControlModel, lam: float, u: GridField,
             vset: VelocitySet, dt: float, c0: Optional[float] = None) -> float:
    """Sup-norm fixed-point defect per unit time, ||u - T[u]||_inf / dt."""
    k = _Kernel(model, lam, u.grid, vset, dt, c0=c0)
    return float(np.max(np.abs(u.values - k.apply(u.values))) / dt)


def one_sided_subsolution_defect(model: ControlModel, w: GridField,
                                 vset: VelocitySet, dt: float,
                                 c0: Optional[float] = None) -> float:
    """max(w - T0[w])/dt; nonpositive (up to tolerance) iff w is a discrete
    subsolution of the critical equation."""
    k = _Kernel(model, 0.0, w.grid, vset, dt, c0=c0)
    return float(np.max(w.values - k.apply(w.values)) / dt)


def compute_bracket(model: ControlModel, critical_solution: GridField,
                    lambda_probes=(0.1, 0.01, 0.001)) -> Bracket:
    """Sub/supersolution bracket around a solution of the critical equation.

    delta is the sampled minimum of dH/du(x, p, 0) over momenta up to the
    critical Lipschitz bound K0; kappa-1 bounds |V| over the probe discounts;
    T = K0*diam + kappa/delta bounds both bracket fields.  lambda0 is the
    conservative default min(0.1, delta / (2*T*C2)) with C2 the sampled
    second-order u-remainder of L (C2 = 0 for u-linear models, capping
    lambda0 at 0.1).
    """
    if model.c0 is None:
        raise ConfigurationError("model.c0 must be set before computing brackets")
    grid = critical_solution.grid
    X = grid.node_coords()
    d = grid.d

    # K0 = sup{|p| : H(x,p,0) <= c0} sampled on a momentum lattice.
    if d == 1:
        paxis = np.linspace(-model.p_box, model.p_box, 513)
        P = paxis[:, None]
    else:
        paxis = np.linspace(-model.p_box, model.p_box, 65)
        aa, bb = np.meshgrid(paxis, paxis, indexing="ij")
        P = np.column_stack([aa.ravel(), bb.ravel()])
    Hv = model.H(X[None, :, :], P[:, None, :], 0.0)   # (P, N)
    sub = np.any(Hv <= model.c0 + 1e-9, axis=1)
    pnorm = np.sqrt(np.sum(P**2, axis=1))
    K0 = float(pnorm[sub].max()) if np.any(sub) else 0.0
    K0 += paxis[1] - paxis[0]                         # one lattice step of slack

    # delta = min dH/du(x,p,0) over the sampled compact set S0.
    keep = pnorm <= K0 + 1e-12
    Psub = P[keep] if np.any(keep) else P[:1]
    dH = np.asarray(model.dHdu0(X[None, :, :], Psub[:, None, :]), dtype=float)
    delta = float(dH.min())
    if delta <= 0.0:
        raise ConfigurationError(
            "sampled dH/du(x,p,0) is not positive; the monotonicity/derivative "
            "hypotheses fail for this model"
        )

    kappa = 1.0
    for lam in lambda_probes:
        kappa = max(kappa, 1.0 + float(np.max(np.abs(model.V(X, lam)))))

    diam = 0.5 * math.sqrt(d)
    T = K0 * diam + kappa / delta

    uhat = critical_solution.values
    lower = GridField(grid, uhat - uhat.max() - kappa / delta)
    upper = GridField(grid, uhat - uhat.min() + kappa / delta)

    # Sampled second-order u-remainder of L on a coarse (x, v, u) lattice.
    vprobe = np.linspace(-3.0, 3.0, 13)
    if d == 1:
        Vp = vprobe[:, None]
    else:
        aa, bb = np.meshgrid(vprobe, vprobe, indexing="ij")
        Vp = np.column_stack([aa.ravel(), bb.ravel()])
    base_L = model.L(X[None, :, :], Vp[:, None, :], 0.0)
    slope = model.dLdu0(X[None, :, :], Vp[:, None, :])
    C2 = 0.0
    for uu in (-1.0, -0.3, -0.03, 0.03, 0.3, 1.0):
        rem = np.abs(model.L(X[None, :, :], Vp[:, None, :], uu) - base_L - uu * slope)
        C2 = max(C2, float(rem.max()) / uu**2)
    lambda0 = 0.1 if C2 < 1e-12 else min(0.1, delta / (2.0 * T * C2))

    return Bracket(lower=lower, upper=upper, lambda0=lambda0,
                   K0=K0, delta=delta, kappa=kappa, T=T, C2=C2)


def solve_perturbed(model: ControlModel, lam: float, grid: PeriodicGrid,
                    vset: VelocitySet, dt: Optional[float] = None,
                    tol: float = 1e-8, max_iter: int = 200000,
                    bracket: Optional[Bracket] = None,
                    init: Optional[GridField] = None,
                    accelerate: bool = True,
                    record_history: bool = False,
                    stall_window: int = 3000):
    """Fixed point of the discounted Bellman update; returns (field, report).

    Converged means the sup-norm defect per unit time fell below tol.  When
    lam exceeds the bracket's lambda0 the solve proceeds anyway (the
    nonexistence probe relies on this) with a warning flag on the report.
    Non-convergence (max_iter or a detected stall) still returns the field.
    """
    if lam <= 0:
        raise ConfigurationError("discount lam must be positive")
    if dt is None:
        dt = default_dt(grid, vset)
    kernel = _Kernel(model, lam, grid, vset, dt)
    X = kernel.X

    above = bool(bracket is not None and lam > bracket.lambda0)
    if bracket is not None:
        lo, hi = bracket.lower.values, bracket.upper.values
    else:
        lo = hi = None

    if init is not None:
        u = init.values.copy()
    elif bracket is not None:
        u = 0.5 * (lo + hi)
    else:
        u = np.zeros(grid.size)

    sigma_nodes = -np.asarray(model.dLdu0(X, np.zeros_like(X)), dtype=float)
    if lam * dt * float(sigma_nodes.max()) >= 1.0:
        raise ConfigurationError(
            "dt*lam*max(sigma) >= 1 breaks monotonicity of the update; shrink dt"
        )
    gfac = 1.0 - lam * dt * float(sigma_nodes.min())
    if not 0.0 < gfac < 1.0:
        accelerate = False

    history = [] if record_history else None
    checkpoint = np.inf
    res = np.inf
    stalled = False
    clamp_active = 0
    it = 0
    for it in range(1, max_iter + 1):
        Tu = kernel.apply(u)
        dvec = Tu - u
        res = float(np.max(np.abs(dvec)) / dt)
        if history is not None:
            history.append(res)
        if res <= tol:
            break
        if it % stall_window == 0:
            if res > 0.995 * checkpoint:
                stalled = True
                break
            checkpoint = res
        if accelerate:
            shift = (gfac / (1.0 - gfac)) * 0.5 * (dvec.min() + dvec.max())
            if lo is not None:
                # Cap the constant nudge by the bracket headroom: an uncapped
                # shift can pin the iterate to a bracket face, where clamping
                # erases the contraction and the sweep cycles.
                up = float(np.min(hi - Tu))
                dn = float(np.max(lo - Tu))
                shift = min(max(shift, dn), up) if dn <= up else 0.0
            u = Tu + shift
        else:
            u = Tu
        if lo is not None:
            clamp_active = int(np.sum((u < lo) | (u > hi)))
            np.clip(u, lo, hi, out=u)

    converged = res <= tol
    violations = 0
    if lo is not None:
        if converged:
            # The clamp must be inactive at convergence: the raw update of the
            # returned field has to sit inside the bracket on its own.
            Tu_final = kernel.apply(u)
            violations = int(np.sum((Tu_final < lo - 1e-9) | (Tu_final > hi + 1e-9)))
        else:
            violations = clamp_active
    report = SolveReport(
        lam=lam, iterations=it, final_residual=res,
        bracket_violations=violations, converged=converged,
        lambda_above_lambda0=above, stalled=stalled,
        residual_history=np.asarray(history) if history is not None else None,
        _tol_used=tol,
    )
    return GridField(grid, u), report


def nonexistence_certificate(model: ControlModel, lam: float, grid: PeriodicGrid,
                             margin: float = 1e-9) -> bool:
    """Certify that the discounted equation has no (sub)solution at this lam.

    True iff  min_x [ inf_u H(x, 0, u) + lam*V(x, lam) ] > c0 + margin, which
    contradicts the subsolution inequality at an interior maximum.  False is
    not a proof of existence.
    """
    if model.c0 is None:
        raise ConfigurationError("model.c0 must be set")
    X = grid.node_coords()
    if model.H_inf_u is not None:
        infH = np.asarray(model.H_inf_u(X), dtype=float)
    else:
        P0 = np.zeros_like(X)
        infH = np.full(X.shape[0], np.inf)
        for uu in np.concatenate([[-1e8, -1e4, 1e4, 1e8], np.linspace(-50, 50, 201)]):
            infH = np.minimum(infH, np.asarray(model.H(X, P0, uu), dtype=float))
    crit = float(np.min(infH + lam * np.asarray(model.V(X, lam), dtype=float)))
    return crit > model.c0 + margin


@dataclass
class SweepEntry:
    lam: float
    field: Optional[GridField]
    report: Optional[SolveReport]
    error: Optional[str] = None


def lambda_sweep(model: ControlModel, lambdas, grid: PeriodicGrid,
                 vset: VelocitySet, **solver_kwargs) -> list[SweepEntry]:
    """Solve a strictly descending discount schedule with warm starts.

    Per-entry failures are recorded, not raised, and do not abort the sweep.
    """
    lams = [float(x) for x in lambdas]
    if any(b >= a for a, b in zip(lams, lams[1:])):
        raise ConfigurationError("lambda schedule must be strictly descending")
    out: list[SweepEntry] = []
    warm = solver_kwargs.pop("init", None)
    for lam in lams:
        try:
            fld, rep = solve_perturbed(model, lam, grid, vset, init=warm, **solver_kwargs)
            out.append(SweepEntry(lam, fld, rep))
            warm = fld
        except Exception as exc:  # noqa: BLE001 - sweep must survive per-entry faults
            out.append(SweepEntry(lam, None, None, error=str(exc)))
    return out
