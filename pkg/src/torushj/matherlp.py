"""Mather measures as linear programs over a discrete closed-measure polytope.

A measure is a nonnegative weight per (node, velocity) pair.  Closedness is
imposed through the same semi-Lagrangian transition kernel the solver uses:
the pushforward of (x, v) is the multilinear binning of x + v*dt, and a
closed measure is one whose per-node inflow equals its outflow.  Minimizing
the u = 0 action over that polytope yields the discrete critical value and
its minimizing measures; adding the optimal-action face as a constraint
exposes the Mather subpolytope for downstream linear and linear-fractional
objectives (the selection operator and the limit-solution formula run one
such fractional program per target node via the Charnes-Cooper transform).

Linear programs are solved with HiGHS dual simplex (deterministic pivoting,
vertex solutions).  Multiplicity of optimizers is decided by a second LP
that maximizes the mass movable off the support of the returned vertex while
staying on the optimal face; reduced-cost inspection alone cannot tell a
degenerate vertex from a genuine alternative optimum since our optima are
typically sparse and thus heavily degenerate.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .errors import ConfigurationError, DomainError, MatherLPError
from .grids import PeriodicGrid, interpolation_stencil
from .models import ControlModel, VelocitySet
from .solver import default_dt

__all__ = [
    "DiscreteMeasure",
    "MatherPolytope",
    "closedness_operator",
    "build_polytope",
    "solve_mather_lp",
    "minimize_linear_over_mather",
    "fractional_minimize",
    "projected_measure",
    "graph_check",
    "GraphReport",
]


@dataclass
class DiscreteMeasure:
    """Nonnegative weights on (node, velocity) pairs, flat order x*K + k."""

    grid: PeriodicGrid
    vset: VelocitySet
    weights: np.ndarray          # (N, K)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        N, K = self.grid.size, self.vset.count
        if w.shape == (N * K,):
            w = w.reshape(N, K)
        if w.shape != (N, K):
            raise DomainError(f"weights must have shape ({N}, {K})")
        if w.min() < -1e-9:
            raise DomainError(f"negative weight {w.min():g} in measure")
        self.weights = np.clip(w, 0.0, None)

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    def flat(self) -> np.ndarray:
        return self.weights.ravel()

    def projected(self) -> np.ndarray:
        return self.weights.sum(axis=1)

    def mean_velocity(self) -> np.ndarray:
        w = self.flat()
        V = np.tile(self.vset.velocities, (self.grid.size, 1))
        return (w[:, None] * V).sum(axis=0) / max(w.sum(), 1e-300)


def closedness_operator(grid: PeriodicGrid, vset: VelocitySet, dt: float) -> sparse.csr_matrix:
    """Sparse (N x N*K) operator whose rows vanish exactly on closed measures.

    Row y evaluates sum_{(x,v)} w(x,v) * [binning weight of x + v*dt at y]
    minus sum_v w(y, v).  Rows and columns each sum to zero.
    """
    N, K = grid.size, vset.count
    nodes = grid.node_coords()
    hops = vset.velocities * (dt / grid.h)
    rounded = np.rint(hops)
    rows, cols, vals = [], [], []
    if np.max(np.abs(hops - rounded)) < 1e-9:
        multi = np.stack(
            np.meshgrid(*[np.arange(grid.n)] * grid.d, indexing="ij"), axis=-1
        ).reshape(-1, grid.d)
        for k in range(K):
            dest = grid.flat_index(multi + rounded[k].astype(np.int64))
            col = np.arange(N) * K + k
            rows.append(dest)
            cols.append(col)
            vals.append(np.ones(N))
            rows.append(np.arange(N))
            cols.append(col)
            vals.append(-np.ones(N))
    else:
        fwd = nodes[None, :, :] + vset.velocities[:, None, :] * dt
        idx, w = interpolation_stencil(grid, fwd)           # (K, N, S)
        S = idx.shape[2]
        for k in range(K):
            col = np.arange(N) * K + k
            for s in range(S):
                rows.append(idx[k, :, s])
                cols.append(col)
                vals.append(w[k, :, s])
            rows.append(np.arange(N))
            cols.append(col)
            vals.append(-np.ones(N))
    C = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(N, N * K),
    ).tocsr()
    C.sum_duplicates()
    return C


@dataclass
class MatherPolytope:
    """Closedness operator, action row, and minimality data for the LPs."""

    grid: PeriodicGrid
    vset: VelocitySet
    dt: float
    C: sparse.csr_matrix
    action: np.ndarray           # L0 per (node, velocity), flat
    c: Optional[float] = None    # critical value; -c is the LP optimum
    tol_min: float = 1e-9

    @property
    def num_vars(self) -> int:
        return self.grid.size * self.vset.count


def build_polytope(model: ControlModel, grid: PeriodicGrid, vset: VelocitySet,
                   dt: Optional[float] = None, with_critical: bool = True,
                   tol_min: float = 1e-9) -> MatherPolytope:
    """Assemble the polytope; by default also solve for its critical value,
    so the minimality face is exactly the LP-optimal face (zero-gap)."""
    if dt is None:
        dt = default_dt(grid, vset)
    X = grid.node_coords()
    K = vset.count
    XK = np.broadcast_to(X[None, :, :], (K,) + X.shape)
    VK = np.broadcast_to(vset.velocities[:, None, :], (K,) + X.shape)
    L0 = np.asarray(model.L(XK, VK, 0.0), dtype=float)      # (K, N)
    action = L0.T.ravel()                                   # flat (x, k)
    poly = MatherPolytope(grid=grid, vset=vset, dt=dt,
                          C=closedness_operator(grid, vset, dt),
                          action=action, tol_min=tol_min)
    if with_critical:
        _, opt, _ = solve_mather_lp(model, poly)
        poly.c = -opt
    return poly


@dataclass
class LPInfo:
    status: int
    message: str
    multiplicity: Optional[bool] = None
    movable_mass: float = 0.0


def _run_lp(cvec, A_eq, b_eq, A_ub=None, b_ub=None):
    res = linprog(c=cvec, A_eq=A_eq, b_eq=b_eq, A_ub=A_ub, b_ub=b_ub,
                  bounds=(0, None), method="highs-ds")
    if res.status == 2:
        raise MatherLPError(
            "LP infeasible: closedness operator rank defect or minimality slack "
            "too tight (increase tol_min)"
        )
    if res.status != 0:
        raise MatherLPError(f"LP failed with status {res.status}: {res.message}")
    return res


def solve_mather_lp(model: ControlModel, polytope: MatherPolytope):
    """Minimize the u = 0 action over closed probability measures.

    Returns (measure, optimal value, info); the critical value is minus the
    optimum.  Unboundedness cannot occur (mass constraint) and is surfaced as
    an internal error.
    """
    N, K = polytope.grid.size, polytope.vset.count
    A_eq = sparse.vstack([polytope.C, sparse.csr_matrix(np.ones((1, N * K)))])
    b_eq = np.zeros(N + 1)
    b_eq[-1] = 1.0
    res = _run_lp(polytope.action, A_eq, b_eq)
    mu = DiscreteMeasure(polytope.grid, polytope.vset, res.x)
    return mu, float(res.fun), LPInfo(status=res.status, message=res.message)


def _mather_constraints(polytope: MatherPolytope):
    if polytope.c is None:
        raise ConfigurationError("polytope.c unset; build with with_critical=True "
                                 "or fill it from critical_value")
    N, K = polytope.grid.size, polytope.vset.count
    A_eq = sparse.vstack([polytope.C, sparse.csr_matrix(np.ones((1, N * K)))])
    b_eq = np.zeros(N + 1)
    b_eq[-1] = 1.0
    A_ub = sparse.csr_matrix(polytope.action[None, :])
    b_ub = np.array([-polytope.c + polytope.tol_min])
    return A_eq, b_eq, A_ub, b_ub


def _movable_mass_off_support(polytope: MatherPolytope, cost: np.ndarray,
                              primal: np.ndarray, opt: float,
                              face_tol: float) -> float:
    """Max mass placeable outside the returned support while staying optimal."""
    A_eq, b_eq, A_ub, b_ub = _mather_constraints(polytope)
    off = (primal <= 1e-9).astype(float)
    A_ub2 = sparse.vstack([A_ub, sparse.csr_matrix(cost[None, :])])
    b_ub2 = np.concatenate([b_ub, [opt + face_tol]])
    res = _run_lp(-off, A_eq, b_eq, A_ub2, b_ub2)
    return float(-res.fun)


def minimize_linear_over_mather(polytope: MatherPolytope, cost: np.ndarray,
                                check_multiplicity: bool = False):
    """Minimize a linear functional over the Mather subpolytope.

    Returns (measure, value, info).  With check_multiplicity the info flag
    reports whether the argmin face has dimension >= 1 (mass > 1% movable off
    the returned vertex's support at optimal cost).
    """
    cost = np.asarray(cost, dtype=float).ravel()
    if cost.size != polytope.num_vars:
        raise DomainError("cost vector length mismatch")
    A_eq, b_eq, A_ub, b_ub = _mather_constraints(polytope)
    res = _run_lp(cost, A_eq, b_eq, A_ub, b_ub)
    mu = DiscreteMeasure(polytope.grid, polytope.vset, res.x)
    info = LPInfo(status=res.status, message=res.message)
    if check_multiplicity:
        scale = max(1.0, float(np.max(np.abs(cost))))
        movable = _movable_mass_off_support(polytope, cost, res.x, float(res.fun),
                                            face_tol=1e-9 * scale)
        info.movable_mass = movable
        info.multiplicity = movable > 0.01
    return mu, float(res.fun), info


def fractional_minimize(polytope: MatherPolytope, numerator: np.ndarray,
                        denominator: np.ndarray, sign: str,
                        check_multiplicity: bool = False):
    """Minimize (sum w*a)/(sum w*b) over the Mather subpolytope.

    The denominator must be strictly one-signed on the variables (sign is
    "positive" or "negative").  Charnes-Cooper substitution nu = w/|sum w*b|
    homogenizes the feasible set: closedness rows stay zero, the minimality
    constraint becomes  nu.(L0 + c - tol_min) <= 0, and nu.|b| = 1 replaces
    the mass constraint; the probability measure is recovered as nu/sum(nu).
    """
    a = np.asarray(numerator, dtype=float).ravel()
    b = np.asarray(denominator, dtype=float).ravel()
    if a.size != polytope.num_vars or b.size != polytope.num_vars:
        raise DomainError("numerator/denominator length mismatch")
    if sign == "positive":
        if b.min() <= 0:
            raise DomainError("denominator not strictly positive as declared")
        obj, beq_row = a, b
    elif sign == "negative":
        if b.max() >= 0:
            raise DomainError("denominator not strictly negative as declared")
        obj, beq_row = -a, -b
    else:
        raise ConfigurationError("sign must be 'positive' or 'negative'")
    if polytope.c is None:
        raise ConfigurationError("polytope.c unset")
    N, K = polytope.grid.size, polytope.vset.count
    A_eq = sparse.vstack([polytope.C, sparse.csr_matrix(beq_row[None, :])])
    b_eq = np.zeros(N + 1)
    b_eq[-1] = 1.0
    homog = polytope.action + (polytope.c - polytope.tol_min)
    A_ub = sparse.csr_matrix(homog[None, :])
    b_ub = np.array([0.0])
    res = _run_lp(obj, A_eq, b_eq, A_ub, b_ub)
    nu = res.x
    total = nu.sum()
    if total <= 0:
        raise MatherLPError("degenerate Charnes-Cooper solution with zero mass")
    mu = DiscreteMeasure(polytope.grid, polytope.vset, nu / total)
    value = float(res.fun)
    info = LPInfo(status=res.status, message=res.message)
    if check_multiplicity:
        scale = max(1.0, float(np.max(np.abs(obj))))
        off = (nu <= 1e-9 * max(total, 1.0)).astype(float)
        A_ub2 = sparse.vstack([A_ub, sparse.csr_matrix(obj[None, :])])
        b_ub2 = np.concatenate([b_ub, [res.fun + 1e-9 * scale]])
        res2 = _run_lp(-off, A_eq, b_eq, A_ub2, b_ub2)
        info.movable_mass = float(-res2.fun / max(res2.x.sum(), 1e-300))
        info.multiplicity = info.movable_mass > 0.01
    return mu, value, info


def projected_measure(mu: DiscreteMeasure) -> np.ndarray:
    """Pushforward to the base torus: node weight = sum over velocities."""
    return mu.projected()


@dataclass
class GraphReport:
    node_mass: np.ndarray
    spread: np.ndarray           # (N, d) velocity spread per carrying node
    threshold: float
    passed: bool
    checked_nodes: np.ndarray = dc_field(default_factory=lambda: np.array([], dtype=int))


def graph_check(mu: DiscreteMeasure, tol: float = 1e-6) -> GraphReport:
    """Velocity-spread diagnostic for the graph property of minimizing measures.

    For each node carrying at least tol mass, the spread (max minus min per
    axis) of velocities holding at least tol of that node's mass must stay
    within two velocity-lattice steps.
    """
    W = mu.weights
    nm = W.sum(axis=1)
    carrying = np.nonzero(nm >= tol)[0]
    d = mu.vset.d
    spread = np.zeros((mu.grid.size, d))
    thresh = 2.0 * mu.vset.spacing
    ok = True
    for i in carrying:
        sel = W[i] >= tol * nm[i]
        vs = mu.vset.velocities[sel]
        sp = vs.max(axis=0) - vs.min(axis=0)
        spread[i] = sp
        if np.any(sp > thresh + 1e-12):
            ok = False
    return GraphReport(node_mass=nm, spread=spread, threshold=thresh,
                       passed=ok, checked_nodes=carrying)
